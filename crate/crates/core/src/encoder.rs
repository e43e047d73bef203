//! Trainable image encoder: a small multilayer perceptron over flattened
//! pixels, with hand-derived vector-Jacobian products.
//!
//! The forward map is y = W_L a_{L-1} + b_L with a_l = act(W_l a_{l-1} + b_l)
//! on hidden layers; the final layer is always affine so embeddings are
//! unnormalized at the output. Similarity code normalizes internally.

use crate::error::{Result, SaftError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const PARAMS_MAGIC: &[u8; 8] = b"SAFTENC1";

/// Nonlinearity applied to hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed in terms of the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

/// One affine layer: y = W x + b with W stored row-major (rows × cols).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn rows(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// The trainable parameters of the image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Gradients mirroring the layer structure of [`ImageEncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ImageEncoderParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(SaftError::ShapeMismatch("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, scale)?;
            a.bias.add_scaled(&b.bias, scale)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.scale(factor);
            l.bias.scale(factor);
        }
    }
}

impl ImageEncoderParams {
    /// Seeded fan-in-scaled uniform initialization; biases start at zero.
    pub fn init(input_dim: usize, hidden: &[usize], embed_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(SaftError::InvalidConfig(
                "encoder dimensions must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (cols, rows) = (pair[0], pair[1]);
            let bound = (3.0 / cols as f64).sqrt();
            let weights: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weight: Tensor::new(vec![rows, cols], weights)?,
                bias: Tensor::zeros(vec![rows]),
            });
        }
        Ok(Self {
            layers,
            activation: Activation::Tanh,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(SaftError::InvalidConfig("encoder needs >= 1 layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].rows() != pair[1].cols() {
                return Err(SaftError::ShapeMismatch(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].rows(),
                    pair[1].cols()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.rows() {
                return Err(SaftError::ShapeMismatch(format!(
                    "bias length {} vs {} rows",
                    l.bias.len(),
                    l.rows()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().unwrap().rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            l.weight.assert_finite(&format!("layer {i} weight"))?;
            l.bias.assert_finite(&format!("layer {i} bias"))?;
        }
        Ok(())
    }
}

fn affine(layer: &Layer, input: &[f64]) -> Vec<f64> {
    let rows = layer.rows();
    let cols = layer.cols();
    let w = layer.weight.data();
    let b = layer.bias.data();
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(input) {
            acc += wv * xv;
        }
        out[r] = acc;
    }
    out
}

/// Forward pass: flattened pixels through all layers; raw (unnormalized)
/// embedding out.
pub fn encode_image(params: &ImageEncoderParams, pixels: &Tensor) -> Result<Tensor> {
    if pixels.len() != params.input_dim() {
        return Err(SaftError::ShapeMismatch(format!(
            "encoder expects input of {} values, image has {}",
            params.input_dim(),
            pixels.len()
        )));
    }
    let last = params.layers.len() - 1;
    let mut act = pixels.data().to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = affine(layer, &act);
        if i < last {
            for v in &mut z {
                *v = params.activation.apply(*v);
            }
        }
        act = z;
    }
    Tensor::vector(act)
}

/// Vector-Jacobian products of the forward map: gradients of
/// `upstream · encode_image(params, x)` with respect to the input pixels and
/// to every parameter tensor.
pub fn encode_image_vjp(
    params: &ImageEncoderParams,
    pixels: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, ParamGrads)> {
    if pixels.len() != params.input_dim() {
        return Err(SaftError::ShapeMismatch(format!(
            "encoder expects input of {} values, image has {}",
            params.input_dim(),
            pixels.len()
        )));
    }
    if upstream.len() != params.embed_dim() {
        return Err(SaftError::ShapeMismatch(format!(
            "upstream length {} vs embed_dim {}",
            upstream.len(),
            params.embed_dim()
        )));
    }

    let last = params.layers.len() - 1;
    // Forward, keeping every layer's post-activation output.
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len() + 1);
    activations.push(pixels.data().to_vec());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = affine(layer, activations[i].as_slice());
        if i < last {
            for v in &mut z {
                *v = params.activation.apply(*v);
            }
        }
        activations.push(z);
    }

    // Backward: g is d(upstream·output)/d(pre-activation of current layer).
    let mut grads = ParamGrads::zeros_like(params);
    let mut g = upstream.data().to_vec();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let input = activations[i].as_slice();
        let rows = layer.rows();
        let cols = layer.cols();
        {
            let grad_layer = &mut grads.layers[i];
            for r in 0..rows {
                grad_layer.bias.data_mut()[r] += g[r];
                let gw = grad_layer.weight.data_mut();
                let grow = &mut gw[r * cols..(r + 1) * cols];
                for (c, gv) in grow.iter_mut().enumerate() {
                    *gv += g[r] * input[c];
                }
            }
        }
        let w = layer.weight.data();
        let mut g_input = vec![0.0; cols];
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                g_input[c] += row[c] * g[r];
            }
        }
        if i > 0 {
            // Chain through the previous layer's activation.
            for (gv, a) in g_input.iter_mut().zip(activations[i].iter()) {
                *gv *= params.activation.derivative_from_output(*a);
            }
        }
        g = g_input;
    }

    Ok((Tensor::new(pixels.shape().to_vec(), g)?, grads))
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| SaftError::Format("truncated parameter file".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64_block<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| SaftError::Format("truncated parameter file".into()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write parameters in the little-endian binary format:
/// magic "SAFTENC1", layer count, then per layer rows, cols, row-major
/// weights and biases, all 64-bit.
pub fn save_params(params: &ImageEncoderParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    write_u64(&mut buf, params.layers.len() as u64)?;
    for layer in &params.layers {
        write_u64(&mut buf, layer.rows() as u64)?;
        write_u64(&mut buf, layer.cols() as u64)?;
        for v in layer.weight.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bias.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load parameters saved by [`save_params`]. The file format does not carry
/// the activation tag; hidden layers default to tanh.
pub fn load_params(path: &Path) -> Result<ImageEncoderParams> {
    load_params_with_activation(path, Activation::Tanh)
}

pub fn load_params_with_activation(
    path: &Path,
    activation: Activation,
) -> Result<ImageEncoderParams> {
    let bytes = std::fs::read(path)?;
    let mut cursor = &bytes[..];
    let mut magic = [0u8; 8];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| SaftError::Format("truncated parameter file".into()))?;
    if &magic != PARAMS_MAGIC {
        return Err(SaftError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(PARAMS_MAGIC)
        )));
    }
    let layer_count = read_u64(&mut cursor)? as usize;
    if layer_count == 0 || layer_count > 1024 {
        return Err(SaftError::Format(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = read_u64(&mut cursor)? as usize;
        let cols = read_u64(&mut cursor)? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 28) {
            return Err(SaftError::Format(format!("implausible layer shape {rows}x{cols}")));
        }
        let weights = read_f64_block(&mut cursor, rows * cols)?;
        let biases = read_f64_block(&mut cursor, rows)?;
        layers.push(Layer {
            weight: Tensor::new(vec![rows, cols], weights)
                .map_err(|e| SaftError::Format(e.to_string()))?,
            bias: Tensor::vector(biases).map_err(|e| SaftError::Format(e.to_string()))?,
        });
    }
    if !cursor.is_empty() {
        return Err(SaftError::Format(format!(
            "{} trailing bytes after last layer",
            cursor.len()
        )));
    }
    ImageEncoderParams::from_layers(layers, activation)
}
