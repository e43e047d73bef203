//! Dense row-major tensors over f64 plus the similarity primitives and the
//! central-difference gradient oracle used to validate every analytic
//! gradient in this crate.

use crate::error::{Result, SaftError};
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array, row-major, 64-bit.
///
/// Invariants: `data.len()` equals the product of `shape`, and all values are
/// finite after every public operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(SaftError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(SaftError::NonFinite(format!("tensor element {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same data viewed as a flat vector.
    pub fn flattened(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(SaftError::ShapeMismatch(format!(
                "dot of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(SaftError::ShapeMismatch(format!(
                "add_scaled of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(SaftError::NonFinite(format!("{context}: {bad}")));
        }
        Ok(())
    }
}

/// Cosine similarity (u·v)/(‖u‖‖v‖), clamped to [-1, 1] against rounding.
///
/// Zero-norm inputs are an error: a dead embedding upstream is a bug, not a
/// similarity of zero.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(SaftError::ShapeMismatch(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(SaftError::DegenerateInput(
            "cosine_similarity on zero-norm vector".into(),
        ));
    }
    Ok((u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_similarity(u, v)` with respect to `u`.
pub fn cosine_similarity_grad_u(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(SaftError::DegenerateInput(
            "cosine gradient on zero-norm vector".into(),
        ));
    }
    let cos = u.dot(v)? / (nu * nv);
    let mut grad = v.clone();
    grad.scale(1.0 / (nu * nv));
    grad.add_scaled(u, -cos / (nu * nu))?;
    Ok(grad)
}

/// Scale `v` to unit ℓ2 norm. Zero-norm input is an error.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = v.norm();
    if n == 0.0 {
        return Err(SaftError::DegenerateInput(
            "l2_normalize on zero-norm vector".into(),
        ));
    }
    let mut out = v.clone();
    for x in out.data_mut() {
        *x /= n;
    }
    Ok(out)
}

/// Central-difference gradient of a scalar-valued function at `x`.
///
/// Component i is (f(x + h·eᵢ) − f(x − h·eᵢ)) / (2h). Every probe must
/// evaluate to a finite value. This is the independent oracle all analytic
/// gradients are checked against.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(SaftError::InvalidConfig(format!(
            "finite_diff_grad step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(SaftError::NonFinite(format!(
                "finite_diff_grad probe at component {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Max-norm relative error between an analytic gradient and its
/// finite-difference estimate. Used by gradient-integrity tests.
pub fn max_rel_error(analytic: &Tensor, reference: &Tensor) -> f64 {
    let denom = reference
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0f64, |m, (a, r)| m.max((a - r).abs()))
        / denom
}
