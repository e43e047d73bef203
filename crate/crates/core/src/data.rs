//! Deterministic "shape-world" corpus: small images of colored shapes whose
//! class names ("red square") carry lexical structure the hashed text
//! embedder can exploit. Also reads and writes the dataset binary format for
//! externally supplied corpora.

use crate::error::{Result, SaftError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Read;
use std::path::Path;

const DATASET_MAGIC: &[u8; 8] = b"SAFTDS01";

/// splitmix64 step; used everywhere a sub-seed is derived from (seed, index).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Green => [0.10, 0.80, 0.15],
            Color::Blue => [0.15, 0.20, 0.90],
            Color::Yellow => [0.90, 0.85, 0.10],
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        };
        f.write_str(s)
    }
}

/// One class of the corpus: a colored shape named "{color} {shape}".
pub type ClassDef = (Color, Shape);

pub fn class_name(def: &ClassDef) -> String {
    format!("{} {}", def.0, def.1)
}

/// Specification of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Classes seen during training (and their 80/20 test split).
    pub classes: Vec<ClassDef>,
    /// Classes reserved entirely for evaluation; never trained on.
    #[serde(default)]
    pub holdout_classes: Vec<ClassDef>,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Center offset range in pixels.
    pub pos_jitter: f64,
    /// Relative size range.
    pub scale_jitter: f64,
    /// Additive uniform noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                (Color::Red, Shape::Square),
                (Color::Green, Shape::Circle),
                (Color::Blue, Shape::Triangle),
                (Color::Yellow, Shape::Cross),
                (Color::Blue, Shape::Square),
                (Color::Yellow, Shape::Circle),
                (Color::Red, Shape::Triangle),
                (Color::Green, Shape::Cross),
            ],
            holdout_classes: Vec::new(),
            image_size: 16,
            samples_per_class: 100,
            pos_jitter: 2.0,
            scale_jitter: 0.2,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() + self.holdout_classes.len() < 2 {
            return Err(SaftError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.image_size < 4 {
            return Err(SaftError::InvalidConfig("image_size must be >= 4".into()));
        }
        if self.samples_per_class == 0 {
            return Err(SaftError::InvalidConfig("samples_per_class must be >= 1".into()));
        }
        for c in &self.classes {
            if self.holdout_classes.contains(c) {
                return Err(SaftError::InvalidConfig(format!(
                    "class {:?} is both trained and held out",
                    class_name(c)
                )));
            }
        }
        if !(self.pos_jitter >= 0.0 && self.scale_jitter >= 0.0 && self.noise >= 0.0) {
            return Err(SaftError::InvalidConfig("jitter ranges must be >= 0".into()));
        }
        Ok(())
    }
}

/// A labeled image with pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub label: usize,
    pub class_name: String,
}

/// In-memory dataset: global label space over `class_names`;
/// `holdout_labels` index classes that appear only in `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub holdout_labels: Vec<usize>,
    pub image_shape: [usize; 3],
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// A classification task carved out of a dataset: samples re-labeled against
/// a task-local class list.
#[derive(Debug, Clone)]
pub struct Task {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    fn task_over(&self, labels: &[usize]) -> Task {
        let class_names: Vec<String> = labels.iter().map(|l| self.class_names[*l].clone()).collect();
        let samples = self
            .test
            .iter()
            .filter(|s| labels.contains(&s.label))
            .map(|s| {
                let local = labels.iter().position(|l| *l == s.label).unwrap();
                ImageSample {
                    pixels: s.pixels.clone(),
                    label: local,
                    class_name: s.class_name.clone(),
                }
            })
            .collect();
        Task { class_names, samples }
    }

    /// Test split restricted to the trained classes.
    pub fn source_task(&self) -> Task {
        let labels: Vec<usize> = (0..self.class_names.len())
            .filter(|l| !self.holdout_labels.contains(l))
            .collect();
        self.task_over(&labels)
    }

    /// Evaluation task over the never-trained classes.
    pub fn holdout_task(&self) -> Task {
        self.task_over(&self.holdout_labels)
    }
}

fn render_sample(spec: &DatasetSpec, def: &ClassDef, rng: &mut ChaCha8Rng) -> Tensor {
    let s = spec.image_size;
    let background = 0.05;
    let mut pixels = vec![background; s * s * 3];

    let center = s as f64 / 2.0;
    let cx = center + rng.gen_range(-spec.pos_jitter..=spec.pos_jitter);
    let cy = center + rng.gen_range(-spec.pos_jitter..=spec.pos_jitter);
    let half = s as f64 * 0.30 * (1.0 + rng.gen_range(-spec.scale_jitter..=spec.scale_jitter));
    let rgb = def.0.rgb();

    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match def.1 {
                Shape::Square => dx.abs() <= half && dy.abs() <= half,
                Shape::Circle => dx * dx + dy * dy <= half * half,
                Shape::Triangle => {
                    let t = (dy + half) / (2.0 * half);
                    (0.0..=1.0).contains(&t) && dx.abs() <= half * t
                }
                Shape::Cross => {
                    let arm = half / 3.0;
                    (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
                }
            };
            if inside {
                for c in 0..3 {
                    pixels[(y * s + x) * 3 + c] = rgb[c];
                }
            }
        }
    }

    for v in &mut pixels {
        if spec.noise > 0.0 {
            *v += rng.gen_range(-spec.noise..=spec.noise);
        }
        // Quantize through f32 so the on-disk format round-trips losslessly.
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }

    Tensor::new(vec![s, s, 3], pixels).expect("rendered pixels are finite")
}

/// Generate the corpus: seeded and bit-reproducible. Trained classes get a
/// stratified 80/20 train/test split; holdout classes go entirely to test.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let all_classes: Vec<ClassDef> = spec
        .classes
        .iter()
        .chain(spec.holdout_classes.iter())
        .cloned()
        .collect();
    let class_names: Vec<String> = all_classes.iter().map(class_name).collect();
    let holdout_labels: Vec<usize> =
        (spec.classes.len()..all_classes.len()).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, def) in all_classes.iter().enumerate() {
        let holdout = holdout_labels.contains(&label);
        let n_train = if holdout {
            0
        } else {
            (spec.samples_per_class * 4) / 5
        };
        for idx in 0..spec.samples_per_class {
            let sample_seed = mix_seed(spec.seed, (label as u64) << 32 | idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let sample = ImageSample {
                pixels: render_sample(spec, def, &mut rng),
                label,
                class_name: class_names[label].clone(),
            };
            if idx < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }

    Ok(Dataset {
        class_names,
        holdout_labels,
        image_shape: [spec.image_size, spec.image_size, 3],
        train,
        test,
    })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| SaftError::Format("truncated dataset file".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Write the dataset binary: magic "SAFTDS01"; counts (class, holdout, H, W,
/// C, train, test as u32 LE); length-prefixed UTF-8 class names; holdout
/// label ids; then per-sample label u32 + H·W·C f32 LE pixels.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    push_u32(&mut buf, ds.class_names.len() as u32);
    push_u32(&mut buf, ds.holdout_labels.len() as u32);
    push_u32(&mut buf, ds.image_shape[0] as u32);
    push_u32(&mut buf, ds.image_shape[1] as u32);
    push_u32(&mut buf, ds.image_shape[2] as u32);
    push_u32(&mut buf, ds.train.len() as u32);
    push_u32(&mut buf, ds.test.len() as u32);
    for name in &ds.class_names {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
    }
    for l in &ds.holdout_labels {
        push_u32(&mut buf, *l as u32);
    }
    for sample in ds.train.iter().chain(ds.test.iter()) {
        push_u32(&mut buf, sample.label as u32);
        for v in sample.pixels.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load and validate a dataset binary. Out-of-range pixels are an error
/// naming the offending sample and component, never silently clamped.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut cur = &bytes[..];
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| SaftError::Format("truncated dataset file".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(SaftError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(DATASET_MAGIC)
        )));
    }
    let class_count = read_u32(&mut cur)? as usize;
    let holdout_count = read_u32(&mut cur)? as usize;
    let h = read_u32(&mut cur)? as usize;
    let w = read_u32(&mut cur)? as usize;
    let c = read_u32(&mut cur)? as usize;
    let train_count = read_u32(&mut cur)? as usize;
    let test_count = read_u32(&mut cur)? as usize;
    if class_count < 2 || h == 0 || w == 0 || c == 0 {
        return Err(SaftError::Format("implausible dataset header".into()));
    }
    if holdout_count > class_count {
        return Err(SaftError::Format("holdout count exceeds class count".into()));
    }

    let mut class_names = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let len = read_u32(&mut cur)? as usize;
        if len > 4096 {
            return Err(SaftError::Format("implausible class-name length".into()));
        }
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name)
            .map_err(|_| SaftError::Format("truncated class-name table".into()))?;
        class_names.push(
            String::from_utf8(name)
                .map_err(|_| SaftError::Format("class name is not UTF-8".into()))?,
        );
    }
    let mut holdout_labels = Vec::with_capacity(holdout_count);
    for _ in 0..holdout_count {
        let l = read_u32(&mut cur)? as usize;
        if l >= class_count {
            return Err(SaftError::Format(format!("holdout label {l} out of range")));
        }
        holdout_labels.push(l);
    }

    let pixel_count = h * w * c;
    let mut read_samples = |n: usize, split: &str| -> Result<Vec<ImageSample>> {
        let mut out = Vec::with_capacity(n);
        for s_idx in 0..n {
            let label = read_u32(&mut cur)? as usize;
            if label >= class_count {
                return Err(SaftError::Format(format!(
                    "{split} sample {s_idx}: label {label} out of range"
                )));
            }
            let mut raw = vec![0u8; pixel_count * 4];
            cur.read_exact(&mut raw)
                .map_err(|_| SaftError::Format("truncated sample pixels".into()))?;
            let mut pixels = Vec::with_capacity(pixel_count);
            for (p_idx, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
                if !(0.0..=1.0).contains(&v) {
                    return Err(SaftError::Format(format!(
                        "{split} sample {s_idx}: pixel {p_idx} = {v} outside [0,1]"
                    )));
                }
                pixels.push(v);
            }
            out.push(ImageSample {
                pixels: Tensor::new(vec![h, w, c], pixels)
                    .map_err(|e| SaftError::Format(e.to_string()))?,
                label,
                class_name: class_names[label].clone(),
            });
        }
        Ok(out)
    };
    let train = read_samples(train_count, "train")?;
    let test = read_samples(test_count, "test")?;
    if !cur.is_empty() {
        return Err(SaftError::Format(format!(
            "{} trailing bytes after last sample",
            cur.len()
        )));
    }

    Ok(Dataset {
        class_names,
        holdout_labels,
        image_shape: [h, w, c],
        train,
        test,
    })
}
