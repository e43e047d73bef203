//! Adversarial fine-tuning of the image encoder: per-batch inner
//! maximization (PGD over description ensembles) followed by one SGD step on
//! the outer alignment loss. The template baseline is the same loop with a
//! single templated text per class, which makes the two modes reduce to each
//! other exactly when their target sets coincide.

use crate::attack::{pgd_attack, saft_loss, saft_loss_grad, AttackConfig, AttackTargets, LossKind, Perturbation};
use crate::bank::DescriptionBank;
use crate::data::{mix_seed, Dataset, ImageSample};
use crate::encoder::{encode_image, encode_image_vjp, ImageEncoderParams, ParamGrads};
use crate::error::{Result, SaftError};
use crate::tensor::Tensor;
use crate::text::TextEmbedder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Batch chunking for parallel gradient accumulation. Fixed so that results
/// are bitwise independent of the worker count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Saft,
    TemplateBaseline,
}

/// Training configuration; attack defaults are the cheap PGD-2 setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    128
}

fn default_lr() -> f64 {
    1e-4
}

fn default_momentum() -> f64 {
    0.9
}

fn default_template() -> String {
    "A photo of a {label}".to_string()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: default_batch_size(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            attack: AttackConfig::default(),
            mode: TrainMode::Saft,
            template: default_template(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(SaftError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(SaftError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SaftError::InvalidConfig("lr must be > 0".into()));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(SaftError::InvalidConfig(
                "momentum and weight_decay must be >= 0".into(),
            ));
        }
        if self.attack.loss_kind == LossKind::ClassificationXent {
            return Err(SaftError::InvalidConfig(
                "training attacks use dissimilarity losses, not classification".into(),
            ));
        }
        self.attack.validate()
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: ParamGrads,
}

impl SgdState {
    pub fn new(params: &ImageEncoderParams) -> Self {
        Self {
            velocity: ParamGrads::zeros_like(params),
        }
    }
}

/// v ← momentum·v + g + weight_decay·w; w ← w − lr·v.
pub fn sgd_step(
    params: &mut ImageEncoderParams,
    grads: &ParamGrads,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || state.velocity.layers.len() != params.layers.len()
    {
        return Err(SaftError::ShapeMismatch(
            "optimizer state does not mirror parameters".into(),
        ));
    }
    for ((layer, grad), vel) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        if layer.weight.len() != grad.weight.len() || layer.bias.len() != grad.bias.len() {
            return Err(SaftError::ShapeMismatch(
                "gradient shapes do not mirror parameters".into(),
            ));
        }
        for i in 0..layer.weight.len() {
            let w = layer.weight.data()[i];
            let g = grad.weight.data()[i] + weight_decay * w;
            let v = momentum * vel.weight.data()[i] + g;
            vel.weight.data_mut()[i] = v;
            layer.weight.data_mut()[i] = w - lr * v;
        }
        for i in 0..layer.bias.len() {
            let w = layer.bias.data()[i];
            let g = grad.bias.data()[i] + weight_decay * w;
            let v = momentum * vel.bias.data()[i] + g;
            vel.bias.data_mut()[i] = v;
            layer.bias.data_mut()[i] = w - lr * v;
        }
    }
    Ok(())
}

/// Per-class attack/alignment targets, indexed by global label.
#[derive(Debug, Clone)]
pub struct ClassTargets {
    pub sets: Vec<Vec<Tensor>>,
}

impl ClassTargets {
    /// SAFT mode: each class's refined description embeddings. Baseline mode:
    /// a single templated text embedding per class.
    pub fn build(
        mode: TrainMode,
        class_names: &[String],
        bank: Option<&DescriptionBank>,
        embedder: &TextEmbedder,
        template: &str,
        trainable_labels: &[usize],
    ) -> Result<Self> {
        let sets = class_names
            .iter()
            .enumerate()
            .map(|(label, name)| {
                if !trainable_labels.contains(&label) {
                    return Ok(Vec::new());
                }
                match mode {
                    TrainMode::Saft => {
                        let bank = bank.ok_or_else(|| {
                            SaftError::InvalidConfig(
                                "saft mode requires a description bank".into(),
                            )
                        })?;
                        Ok(bank
                            .entry(name)?
                            .refined_embeddings()
                            .into_iter()
                            .cloned()
                            .collect())
                    }
                    TrainMode::TemplateBaseline => {
                        Ok(vec![embedder.embed_text(&template.replace("{label}", name))?])
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sets })
    }

    pub fn for_label(&self, label: usize) -> Result<&[Tensor]> {
        let set = self
            .sets
            .get(label)
            .ok_or_else(|| SaftError::InvalidConfig(format!("label {label} out of range")))?;
        if set.is_empty() {
            return Err(SaftError::MissingClass(format!(
                "label {label} has no training targets"
            )));
        }
        Ok(set)
    }
}

/// Outcome of one batch step, before/after the parameter update.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub adv_loss: f64,
    pub clean_loss: f64,
    pub attack_success: f64,
    pub perturbations: Vec<Perturbation>,
}

struct SampleResult {
    grads: ParamGrads,
    adv_loss: f64,
    clean_loss: f64,
    success: bool,
    perturbation: Perturbation,
}

fn sample_pass(
    params: &ImageEncoderParams,
    sample: &ImageSample,
    targets: &[Tensor],
    attack: &AttackConfig,
    salt: u64,
) -> Result<SampleResult> {
    let refs: Vec<&Tensor> = targets.iter().collect();
    let cfg = AttackConfig {
        loss_kind: LossKind::EnsembleDissimilarity,
        ..attack.with_derived_seed(salt)
    };
    let perturbation = pgd_attack(
        params,
        &sample.pixels,
        &AttackTargets::Ensemble(targets.to_vec()),
        &cfg,
    )?;
    let adv = perturbation.apply(&sample.pixels)?;
    let adv_emb = encode_image(params, &adv.flattened())?;
    let adv_loss = saft_loss(&adv_emb, &refs)?;
    let grad_emb = saft_loss_grad(&adv_emb, &refs)?;
    let (_, grads) = encode_image_vjp(params, &adv.flattened(), &grad_emb)?;

    let clean_emb = encode_image(params, &sample.pixels.flattened())?;
    let clean_loss = saft_loss(&clean_emb, &refs)?;

    Ok(SampleResult {
        grads,
        adv_loss,
        clean_loss,
        success: perturbation.final_loss() > perturbation.initial_loss(),
        perturbation,
    })
}

/// Mean outer-loss gradient over a batch at the attacked inputs, plus the
/// recorded perturbations. The inner attack reads θ but never writes
/// optimizer state; the outer gradient treats each δ* as a constant.
pub fn batch_grads(
    params: &ImageEncoderParams,
    batch: &[&ImageSample],
    targets: &ClassTargets,
    attack: &AttackConfig,
    salt_base: u64,
) -> Result<(ParamGrads, BatchStats)> {
    if batch.is_empty() {
        return Err(SaftError::InvalidConfig("empty batch".into()));
    }
    let indexed: Vec<(usize, &ImageSample)> = batch.iter().copied().enumerate().collect();
    let chunk_results: Vec<Result<(ParamGrads, f64, f64, usize, Vec<Perturbation>)>> = indexed
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = ParamGrads::zeros_like(params);
            let mut adv = 0.0;
            let mut clean = 0.0;
            let mut successes = 0usize;
            let mut perts = Vec::with_capacity(chunk.len());
            for (idx, sample) in chunk {
                let set = targets.for_label(sample.label)?;
                let r = sample_pass(params, sample, set, attack, mix_seed(salt_base, *idx as u64))?;
                grads.add_scaled(&r.grads, 1.0)?;
                adv += r.adv_loss;
                clean += r.clean_loss;
                successes += usize::from(r.success);
                perts.push(r.perturbation);
            }
            Ok((grads, adv, clean, successes, perts))
        })
        .collect();

    let mut grads = ParamGrads::zeros_like(params);
    let mut adv = 0.0;
    let mut clean = 0.0;
    let mut successes = 0usize;
    let mut perturbations = Vec::with_capacity(batch.len());
    for chunk in chunk_results {
        let (g, a, c, s, p) = chunk?;
        grads.add_scaled(&g, 1.0)?;
        adv += a;
        clean += c;
        successes += s;
        perturbations.extend(p);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let stats = BatchStats {
        adv_loss: adv / n,
        clean_loss: clean / n,
        attack_success: successes as f64 / n,
        perturbations,
    };
    if !stats.adv_loss.is_finite() {
        return Err(SaftError::NonFinite(format!(
            "batch adversarial loss {}",
            stats.adv_loss
        )));
    }
    Ok((grads, stats))
}

/// One bi-level step: inner PGD per sample, then one SGD step on the
/// batch-mean outer loss.
pub fn saft_batch_step(
    params: &mut ImageEncoderParams,
    batch: &[&ImageSample],
    targets: &ClassTargets,
    state: &mut SgdState,
    cfg: &TrainConfig,
    salt_base: u64,
) -> Result<BatchStats> {
    let (grads, stats) = batch_grads(params, batch, targets, &cfg.attack, salt_base)?;
    sgd_step(params, &grads, state, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    Ok(stats)
}

/// Per-epoch training statistics, one entry per completed epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub adv_loss: f64,
    pub clean_loss: f64,
    pub attack_success: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// CSV with header: epoch, adv_loss, clean_loss, attack_success, seconds.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,adv_loss,clean_loss,attack_success,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.adv_loss, e.clean_loss, e.attack_success, e.seconds
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Run `cfg.epochs` of adversarial fine-tuning over seeded shuffles of the
/// training split. Aborts (atomically, no checkpoint) on any non-finite loss
/// or parameter. `checkpoint` is (directory, file stem) for per-epoch saves.
pub fn run_training(
    dataset: &Dataset,
    mut params: ImageEncoderParams,
    targets: &ClassTargets,
    cfg: &TrainConfig,
    checkpoint: Option<(&Path, &str)>,
) -> Result<(ImageEncoderParams, TrainLog)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(SaftError::InvalidConfig("training split is empty".into()));
    }
    // Fail fast if any trained class lacks targets.
    for s in &dataset.train {
        targets.for_label(s.label)?;
    }

    let mut state = SgdState::new(&params);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut adv = 0.0;
        let mut clean = 0.0;
        let mut success = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImageSample> = chunk.iter().map(|i| &dataset.train[*i]).collect();
            let salt_base = mix_seed(cfg.seed, ((epoch as u64) << 32) | batch_idx as u64);
            let stats = saft_batch_step(&mut params, &batch, targets, &mut state, cfg, salt_base)
                .map_err(|e| match e {
                    SaftError::NonFinite(msg) => SaftError::NonFinite(format!(
                        "training aborted at epoch {epoch} batch {batch_idx}: {msg}"
                    )),
                    other => other,
                })?;
            let n = batch.len() as f64;
            adv += stats.adv_loss * n;
            clean += stats.clean_loss * n;
            success += stats.attack_success * n;
            seen += batch.len();
        }
        params.assert_finite().map_err(|e| {
            SaftError::NonFinite(format!("training aborted after epoch {epoch}: {e}"))
        })?;

        log.epochs.push(EpochStats {
            epoch,
            adv_loss: adv / seen as f64,
            clean_loss: clean / seen as f64,
            attack_success: success / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some((dir, stem)) = checkpoint {
            crate::encoder::save_params(&params, &dir.join(format!("{stem}-epoch{epoch}.bin")))?;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{DescriptionBank, GenerationConfig};
    use crate::data::{generate, Color, DatasetSpec, Shape};
    use crate::encoder::Layer;
    use crate::tensor::{finite_diff_grad, max_rel_error};

    fn tiny_dataset() -> Dataset {
        generate(&DatasetSpec {
            classes: vec![(Color::Red, Shape::Square), (Color::Blue, Shape::Circle)],
            holdout_classes: vec![],
            image_size: 6,
            samples_per_class: 10,
            pos_jitter: 1.0,
            scale_jitter: 0.1,
            noise: 0.02,
            seed: 5,
        })
        .unwrap()
    }

    fn embedder() -> TextEmbedder {
        TextEmbedder::new(8, 3).unwrap()
    }

    fn tiny_bank(ds: &Dataset) -> DescriptionBank {
        DescriptionBank::build(
            &embedder(),
            &GenerationConfig {
                m: 4,
                seed: 2,
                ..Default::default()
            },
            &ds.class_names,
            3,
            None,
        )
        .unwrap()
    }

    fn tiny_encoder(ds: &Dataset, seed: u64) -> ImageEncoderParams {
        ImageEncoderParams::init(ds.input_dim(), &[6], 8, seed).unwrap()
    }

    fn saft_targets(ds: &Dataset, bank: &DescriptionBank) -> ClassTargets {
        let labels: Vec<usize> = (0..ds.class_names.len()).collect();
        ClassTargets::build(
            TrainMode::Saft,
            &ds.class_names,
            Some(bank),
            &embedder(),
            "A photo of a {label}",
            &labels,
        )
        .unwrap()
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut params = ImageEncoderParams::from_layers(
            vec![Layer {
                weight: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
                bias: Tensor::vector(vec![0.5]).unwrap(),
            }],
            crate::encoder::Activation::Linear,
        )
        .unwrap();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.layers[0].weight.data_mut()[0] = 0.5;
        grads.layers[0].weight.data_mut()[1] = -1.0;
        grads.layers[0].bias.data_mut()[0] = 2.0;
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(params.layers[0].weight.data(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(params.layers[0].bias.data(), &[0.5 - 0.2]);
    }

    #[test]
    fn zero_grads_zero_buffers_leave_params_unchanged() {
        let mut params = ImageEncoderParams::init(4, &[3], 2, 1).unwrap();
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn momentum_recurrence_over_two_steps() {
        let mut params = ImageEncoderParams::from_layers(
            vec![Layer {
                weight: Tensor::new(vec![1, 1], vec![10.0]).unwrap(),
                bias: Tensor::vector(vec![0.0]).unwrap(),
            }],
            crate::encoder::Activation::Linear,
        )
        .unwrap();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.layers[0].weight.data_mut()[0] = 3.0;
        let mut state = SgdState::new(&params);
        let lr = 0.1;
        sgd_step(&mut params, &grads, &mut state, lr, 0.9, 0.0).unwrap();
        sgd_step(&mut params, &grads, &mut state, lr, 0.9, 0.0).unwrap();
        // Total update: -lr * (g + (0.9 g + g)) = -lr * 2.9 g.
        let expect = 10.0 - lr * (3.0 + 1.9 * 3.0);
        assert!((params.layers[0].weight.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_step_attack_reduces_to_clean_fine_tuning() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let params = tiny_encoder(&ds, 3);
        let batch: Vec<&ImageSample> = ds.train.iter().take(4).collect();
        let attack = AttackConfig {
            steps: 0,
            ..AttackConfig::default()
        };
        let (_, stats) = batch_grads(&params, &batch, &targets, &attack, 7).unwrap();
        assert_eq!(stats.adv_loss, stats.clean_loss);
        assert!(stats
            .perturbations
            .iter()
            .all(|p| p.delta.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn batch_theta_gradient_matches_finite_differences() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let params = tiny_encoder(&ds, 11);
        let batch: Vec<&ImageSample> = ds.train.iter().take(1).collect();
        let attack = AttackConfig::default();
        let (grads, stats) = batch_grads(&params, &batch, &targets, &attack, 3).unwrap();

        // Freeze the recorded perturbations and finite-difference over θ.
        let adv_inputs: Vec<Tensor> = batch
            .iter()
            .zip(&stats.perturbations)
            .map(|(s, p)| p.apply(&s.pixels).unwrap())
            .collect();
        let flat_params: Vec<f64> = params
            .layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect();
        let unflatten = |flat: &Tensor| -> ImageEncoderParams {
            let mut p = params.clone();
            let mut off = 0;
            for l in &mut p.layers {
                let wn = l.weight.len();
                let shape = l.weight.shape().to_vec();
                l.weight = Tensor::new(shape, flat.data()[off..off + wn].to_vec()).unwrap();
                off += wn;
                let bn = l.bias.len();
                l.bias = Tensor::vector(flat.data()[off..off + bn].to_vec()).unwrap();
                off += bn;
            }
            p
        };
        let loss_at = |flat: &Tensor| -> crate::error::Result<f64> {
            let p = unflatten(flat);
            let mut total = 0.0;
            for (sample, adv) in batch.iter().zip(&adv_inputs) {
                let set = targets.for_label(sample.label)?;
                let refs: Vec<&Tensor> = set.iter().collect();
                let emb = encode_image(&p, &adv.flattened())?;
                total += saft_loss(&emb, &refs)?;
            }
            Ok(total / batch.len() as f64)
        };
        let flat = Tensor::vector(flat_params).unwrap();
        let fd = finite_diff_grad(loss_at, &flat, 1e-5).unwrap();
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect();
        let analytic = Tensor::vector(analytic).unwrap();
        assert!(max_rel_error(&analytic, &fd) < 1e-4);
    }

    #[test]
    fn one_step_decreases_adversarial_loss_at_frozen_delta() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-4,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut decreased = 0;
        let runs = 20;
        for seed in 0..runs {
            let mut params = tiny_encoder(&ds, 100 + seed);
            let batch: Vec<&ImageSample> = ds.train.iter().take(8).collect();
            let mut state = SgdState::new(&params);
            let (grads, stats) =
                batch_grads(&params, &batch, &targets, &cfg.attack, seed).unwrap();
            let before = stats.adv_loss;
            sgd_step(&mut params, &grads, &mut state, cfg.lr, 0.0, 0.0).unwrap();
            let mut after = 0.0;
            for (sample, p) in batch.iter().zip(&stats.perturbations) {
                let set = targets.for_label(sample.label).unwrap();
                let refs: Vec<&Tensor> = set.iter().collect();
                let adv = p.apply(&sample.pixels).unwrap();
                let emb = encode_image(&params, &adv.flattened()).unwrap();
                after += saft_loss(&emb, &refs).unwrap();
            }
            after /= batch.len() as f64;
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 18, "descent on {decreased}/{runs} batches");
    }

    #[test]
    fn single_epoch_single_batch_equals_one_batch_step() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: ds.train.len(),
            lr: 0.01,
            seed: 4,
            ..TrainConfig::default()
        };
        let init = tiny_encoder(&ds, 6);
        let (trained, _) = run_training(&ds, init.clone(), &targets, &cfg, None).unwrap();

        let mut manual = init;
        let mut state = SgdState::new(&manual);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
        order.shuffle(&mut rng);
        let batch: Vec<&ImageSample> = order.iter().map(|i| &ds.train[*i]).collect();
        let salt = mix_seed(cfg.seed, 0);
        saft_batch_step(&mut manual, &batch, &targets, &mut state, &cfg, salt).unwrap();
        assert_eq!(trained, manual);
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 6,
            lr: 0.01,
            seed: 13,
            ..TrainConfig::default()
        };
        let init = tiny_encoder(&ds, 6);
        let (a, _) = run_training(&ds, init.clone(), &targets, &cfg, None).unwrap();
        let (b, _) = run_training(&ds, init, &targets, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inner_attack_depends_on_theta_but_recorded_delta_is_frozen() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.5, // large enough that θ visibly moves
            ..TrainConfig::default()
        };
        let mut params = tiny_encoder(&ds, 21);
        let batch: Vec<&ImageSample> = ds.train.iter().take(3).collect();
        let salt = 99;
        let (grads, stats) = batch_grads(&params, &batch, &targets, &cfg.attack, salt).unwrap();
        let recorded: Vec<Vec<f64>> = stats
            .perturbations
            .iter()
            .map(|p| p.delta.data().to_vec())
            .collect();
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &mut state, cfg.lr, 0.9, 0.0).unwrap();
        // Same seeds, updated θ: the attack output changes.
        let (_, after) = batch_grads(&params, &batch, &targets, &cfg.attack, salt).unwrap();
        let changed = stats
            .perturbations
            .iter()
            .zip(&after.perturbations)
            .any(|(a, b)| a.delta.data() != b.delta.data());
        assert!(changed, "attack ignored the parameter update");
        // The recorded perturbations themselves are untouched values.
        for (p, r) in stats.perturbations.iter().zip(&recorded) {
            assert_eq!(p.delta.data(), r.as_slice());
        }
    }

    #[test]
    fn description_embeddings_are_frozen_through_training() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let before = bank.clone();
        let targets = saft_targets(&ds, &bank);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 5,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let init = tiny_encoder(&ds, 2);
        run_training(&ds, init, &targets, &cfg, None).unwrap();
        assert_eq!(bank, before);
        // Re-embedding the class names still matches the frozen embeddings.
        let e = embedder();
        for entry in &bank.classes {
            for c in &entry.candidates {
                assert_eq!(e.embed_text(&c.text).unwrap().data(), c.embedding.data());
            }
        }
    }

    #[test]
    fn saft_with_template_singleton_matches_baseline_bitwise() {
        let ds = tiny_dataset();
        let e = embedder();
        let template = "A photo of a {label}";
        // Bank whose single refined description is exactly the templated text.
        let entries = ds
            .class_names
            .iter()
            .map(|name| {
                crate::bank::ClassEntry::build(
                    &e,
                    name,
                    vec![template.replace("{label}", name)],
                    1,
                )
                .unwrap()
            })
            .collect();
        let bank = DescriptionBank {
            embedder: e.clone(),
            classes: entries,
        };
        let labels: Vec<usize> = (0..ds.class_names.len()).collect();
        let saft = ClassTargets::build(
            TrainMode::Saft,
            &ds.class_names,
            Some(&bank),
            &e,
            template,
            &labels,
        )
        .unwrap();
        let baseline = ClassTargets::build(
            TrainMode::TemplateBaseline,
            &ds.class_names,
            None,
            &e,
            template,
            &labels,
        )
        .unwrap();

        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 7,
            lr: 0.02,
            seed: 31,
            ..TrainConfig::default()
        };
        let init = tiny_encoder(&ds, 8);
        let (a, _) = run_training(&ds, init.clone(), &saft, &cfg, None).unwrap();
        let (b, _) = run_training(&ds, init, &baseline, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_parameters_abort_training() {
        let ds = tiny_dataset();
        let bank = tiny_bank(&ds);
        let targets = saft_targets(&ds, &bank);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1.0,
            weight_decay: 1e300,
            ..TrainConfig::default()
        };
        let init = tiny_encoder(&ds, 2);
        let err = run_training(&ds, init, &targets, &cfg, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("aborted"), "unexpected message: {msg}");
    }

    #[test]
    fn missing_class_in_bank_is_an_error() {
        let ds = tiny_dataset();
        let e = embedder();
        let bank = DescriptionBank::build(
            &e,
            &GenerationConfig {
                m: 3,
                seed: 2,
                ..Default::default()
            },
            &ds.class_names[..1].to_vec(),
            2,
            None,
        )
        .unwrap();
        let labels: Vec<usize> = (0..ds.class_names.len()).collect();
        let err = ClassTargets::build(
            TrainMode::Saft,
            &ds.class_names,
            Some(&bank),
            &e,
            "A photo of a {label}",
            &labels,
        )
        .unwrap_err();
        assert!(matches!(err, SaftError::MissingClass(_)));
    }

    #[test]
    fn train_log_csv_has_expected_columns() {
        let log = TrainLog {
            epochs: vec![EpochStats {
                epoch: 0,
                adv_loss: -0.5,
                clean_loss: -0.75,
                attack_success: 0.9,
                seconds: 1.25,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,adv_loss,clean_loss,attack_success,seconds\n"));
        assert!(text.contains("0,-0.5,-0.75,0.9,1.250"));
    }
}
