//! Adversarial perturbation crafting: ℓ∞ PGD driven by one of three losses —
//! single-template cosine dissimilarity, ensemble (average) cosine
//! dissimilarity over class descriptions, or classification cross-entropy
//! over scaled per-class similarity scores.

use crate::data::mix_seed;
use crate::encoder::{encode_image, encode_image_vjp, ImageEncoderParams};
use crate::error::{Result, SaftError};
use crate::tensor::{cosine_similarity, cosine_similarity_grad_u, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Perturbation initialization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackInit {
    /// Start from δ = 0; the training default.
    #[default]
    Zero,
    /// Uniform in the ε-ball; the evaluation default.
    RandomUniform,
}

/// Which loss the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// −cos(image, single template embedding).
    TemplateDissimilarity,
    /// −mean cos(image, description embeddings).
    #[default]
    EnsembleDissimilarity,
    /// Cross-entropy of softmax over scaled class scores.
    ClassificationXent,
}

/// PGD configuration. ε and α are in pixel units; the norm is ℓ∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Perturbation budget; ε = 0 is the null attack.
    pub epsilon: f64,
    /// PGD iteration count; 0 returns the initial perturbation.
    pub steps: usize,
    /// Step size; defaults to 2ε/steps when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub init: AttackInit,
    #[serde(default)]
    pub loss_kind: LossKind,
    /// τ multiplying cosine scores inside the classification loss.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    /// Independent random starts; best final loss wins. Only meaningful with
    /// random init.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_logit_scale() -> f64 {
    100.0
}

fn default_restarts() -> usize {
    1
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 255.0,
            steps: 2,
            alpha: None,
            init: AttackInit::Zero,
            loss_kind: LossKind::EnsembleDissimilarity,
            logit_scale: default_logit_scale(),
            restarts: default_restarts(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// ε = 1/255, PGD-100, random init: the evaluation-attack preset.
    pub fn eval_default() -> Self {
        Self {
            steps: 100,
            init: AttackInit::RandomUniform,
            loss_kind: LossKind::ClassificationXent,
            ..Self::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        self.alpha
            .unwrap_or(2.0 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(SaftError::InvalidConfig(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(SaftError::InvalidConfig(format!(
                    "alpha must be finite and > 0, got {a}"
                )));
            }
        }
        if self.logit_scale <= 0.0 {
            return Err(SaftError::InvalidConfig("logit_scale must be > 0".into()));
        }
        if self.restarts == 0 {
            return Err(SaftError::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }

    /// Same attack with a per-sample seed; used by batch drivers so results
    /// never depend on scheduling.
    pub fn with_derived_seed(&self, salt: u64) -> Self {
        Self {
            seed: mix_seed(self.seed, salt),
            ..self.clone()
        }
    }
}

/// What the attack is aimed at; must be consistent with the loss kind.
#[derive(Debug, Clone)]
pub enum AttackTargets {
    /// Single template embedding.
    Template(Tensor),
    /// Refined description embeddings of the sample's class.
    Ensemble(Vec<Tensor>),
    /// Per-class embedding sets (one per class; a set's score is the mean
    /// cosine) and the true label.
    Classification {
        class_sets: Vec<Vec<Tensor>>,
        true_label: usize,
    },
}

/// A crafted perturbation plus the loss observed at every iterate
/// (`loss_trace[t]` is the loss at δ⁽ᵗ⁾, so `steps + 1` entries).
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Tensor,
    pub loss_trace: Vec<f64>,
}

impl Perturbation {
    pub fn initial_loss(&self) -> f64 {
        *self.loss_trace.first().expect("trace is never empty")
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }

    /// x + δ, valid in [0,1] by the projection contract.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut adv = x.clone();
        adv.add_scaled(&self.delta, 1.0)?;
        Ok(adv)
    }
}

/// −cos(img, template): maximizing this drives the pair apart.
pub fn template_loss(img_emb: &Tensor, template_emb: &Tensor) -> Result<f64> {
    Ok(-cosine_similarity(img_emb, template_emb)?)
}

pub fn template_loss_grad(img_emb: &Tensor, template_emb: &Tensor) -> Result<Tensor> {
    let mut g = cosine_similarity_grad_u(img_emb, template_emb)?;
    g.scale(-1.0);
    Ok(g)
}

/// −(1/M) Σ cos(img, descᵐ): the average cosine dissimilarity.
pub fn saft_loss(img_emb: &Tensor, desc_embs: &[&Tensor]) -> Result<f64> {
    if desc_embs.is_empty() {
        return Err(SaftError::InvalidConfig(
            "saft_loss needs at least one description embedding".into(),
        ));
    }
    let mut total = 0.0;
    for emb in desc_embs {
        total += cosine_similarity(img_emb, emb)?;
    }
    Ok(-total / desc_embs.len() as f64)
}

pub fn saft_loss_grad(img_emb: &Tensor, desc_embs: &[&Tensor]) -> Result<Tensor> {
    if desc_embs.is_empty() {
        return Err(SaftError::InvalidConfig(
            "saft_loss needs at least one description embedding".into(),
        ));
    }
    let mut grad = Tensor::zeros(vec![img_emb.len()]);
    for emb in desc_embs {
        let g = cosine_similarity_grad_u(img_emb, emb)?;
        grad.add_scaled(&g, 1.0)?;
    }
    grad.scale(-1.0 / desc_embs.len() as f64);
    Ok(grad)
}

fn class_scores(img_emb: &Tensor, class_sets: &[Vec<Tensor>]) -> Result<Vec<f64>> {
    class_sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Err(SaftError::InvalidConfig("empty class embedding set".into()));
            }
            let mut s = 0.0;
            for emb in set {
                s += cosine_similarity(img_emb, emb)?;
            }
            Ok(s / set.len() as f64)
        })
        .collect()
}

fn log_softmax_xent(logits: &[f64], true_label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[true_label]
}

/// Cross-entropy of softmax over τ-scaled class scores against the true
/// label. Each class score is the mean cosine over that class's embedding
/// set (a single template is a set of one).
pub fn classification_xent_loss_sets(
    img_emb: &Tensor,
    class_sets: &[Vec<Tensor>],
    true_label: usize,
    logit_scale: f64,
) -> Result<f64> {
    if class_sets.len() < 2 {
        return Err(SaftError::InvalidConfig("need at least 2 classes".into()));
    }
    if true_label >= class_sets.len() {
        return Err(SaftError::InvalidConfig(format!(
            "true_label {true_label} out of range for {} classes",
            class_sets.len()
        )));
    }
    let scores = class_scores(img_emb, class_sets)?;
    let logits: Vec<f64> = scores.iter().map(|s| logit_scale * s).collect();
    Ok(log_softmax_xent(&logits, true_label))
}

pub fn classification_xent_grad_sets(
    img_emb: &Tensor,
    class_sets: &[Vec<Tensor>],
    true_label: usize,
    logit_scale: f64,
) -> Result<Tensor> {
    let scores = class_scores(img_emb, class_sets)?;
    let logits: Vec<f64> = scores.iter().map(|s| logit_scale * s).collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|v| (v - max).exp() / denom).collect();

    let mut grad = Tensor::zeros(vec![img_emb.len()]);
    for (i, set) in class_sets.iter().enumerate() {
        let coeff = logit_scale * (probs[i] - if i == true_label { 1.0 } else { 0.0 })
            / set.len() as f64;
        for emb in set {
            let g = cosine_similarity_grad_u(img_emb, emb)?;
            grad.add_scaled(&g, coeff)?;
        }
    }
    Ok(grad)
}

/// Single-embedding-per-class convenience form.
pub fn classification_xent_loss(
    img_emb: &Tensor,
    class_embs: &[Tensor],
    true_label: usize,
    logit_scale: f64,
) -> Result<f64> {
    let sets: Vec<Vec<Tensor>> = class_embs.iter().map(|e| vec![e.clone()]).collect();
    classification_xent_loss_sets(img_emb, &sets, true_label, logit_scale)
}

/// Loss and its gradient with respect to the image embedding, dispatched on
/// the target kind.
fn loss_and_grad(
    img_emb: &Tensor,
    targets: &AttackTargets,
    logit_scale: f64,
) -> Result<(f64, Tensor)> {
    match targets {
        AttackTargets::Template(t) => {
            Ok((template_loss(img_emb, t)?, template_loss_grad(img_emb, t)?))
        }
        AttackTargets::Ensemble(embs) => {
            let refs: Vec<&Tensor> = embs.iter().collect();
            Ok((saft_loss(img_emb, &refs)?, saft_loss_grad(img_emb, &refs)?))
        }
        AttackTargets::Classification {
            class_sets,
            true_label,
        } => Ok((
            classification_xent_loss_sets(img_emb, class_sets, *true_label, logit_scale)?,
            classification_xent_grad_sets(img_emb, class_sets, *true_label, logit_scale)?,
        )),
    }
}

fn targets_match_loss(targets: &AttackTargets, kind: LossKind) -> bool {
    matches!(
        (targets, kind),
        (AttackTargets::Template(_), LossKind::TemplateDissimilarity)
            | (AttackTargets::Ensemble(_), LossKind::EnsembleDissimilarity)
            | (
                AttackTargets::Classification { .. },
                LossKind::ClassificationXent
            )
    )
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project δ onto the ℓ∞ ε-ball, then pull x + δ back into [0,1] per pixel.
/// Both constraints hold exactly on the returned tensor, including under
/// floating-point rounding of `x + δ`.
pub fn project_linf(delta: &Tensor, epsilon: f64, x_clean: &Tensor) -> Result<Tensor> {
    if delta.len() != x_clean.len() {
        return Err(SaftError::ShapeMismatch(format!(
            "delta length {} vs image length {}",
            delta.len(),
            x_clean.len()
        )));
    }
    let mut out = delta.clone();
    for (d, &x) in out.data_mut().iter_mut().zip(x_clean.data()) {
        let mut v = d.clamp(-epsilon, epsilon);
        // Pull x + v back into [0,1] only when it actually leaves the range,
        // so in-range deltas pass through bit-untouched. The nudge loops make
        // the range hold under the rounding of x + v; nudging toward zero
        // never grows |v| past epsilon.
        if x + v > 1.0 {
            v = (1.0 - x).min(epsilon);
            while x + v > 1.0 {
                v = next_toward_zero(v);
            }
        } else if x + v < 0.0 {
            v = (-x).max(-epsilon);
            while x + v < 0.0 {
                v = next_toward_zero(v);
            }
        }
        *d = v;
    }
    Ok(out)
}

fn next_toward_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else if v > 0.0 {
        f64::from_bits(v.to_bits() - 1)
    } else {
        -f64::from_bits((-v).to_bits() - 1)
    }
}

fn initial_delta(cfg: &AttackConfig, x: &Tensor, restart: usize) -> Result<Tensor> {
    match cfg.init {
        AttackInit::Zero => Ok(Tensor::zeros(x.shape().to_vec())),
        AttackInit::RandomUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, restart as u64));
            let data: Vec<f64> = (0..x.len())
                .map(|_| {
                    if cfg.epsilon > 0.0 {
                        rng.gen_range(-cfg.epsilon..=cfg.epsilon)
                    } else {
                        0.0
                    }
                })
                .collect();
            project_linf(&Tensor::new(x.shape().to_vec(), data)?, cfg.epsilon, x)
        }
    }
}

/// ℓ∞ PGD: δ ← Proj(δ + α·sign(∇_δ L)) for `cfg.steps` iterations from the
/// configured init. Returns the final δ and the per-iterate loss trace.
pub fn pgd_attack(
    encoder: &ImageEncoderParams,
    pixels: &Tensor,
    targets: &AttackTargets,
    cfg: &AttackConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    if !targets_match_loss(targets, cfg.loss_kind) {
        return Err(SaftError::InvalidConfig(format!(
            "attack targets do not match loss kind {:?}",
            cfg.loss_kind
        )));
    }
    let alpha = cfg.step_size();

    let mut best: Option<Perturbation> = None;
    for restart in 0..cfg.restarts {
        let mut delta = initial_delta(cfg, pixels, restart)?;
        let mut trace = Vec::with_capacity(cfg.steps + 1);
        for _ in 0..cfg.steps {
            let adv = {
                let mut a = pixels.clone();
                a.add_scaled(&delta, 1.0)?;
                a
            };
            let emb = encode_image(encoder, &adv.flattened())?;
            let (loss, grad_emb) = loss_and_grad(&emb, targets, cfg.logit_scale)?;
            trace.push(loss);
            let (grad_pixels, _) = encode_image_vjp(encoder, &adv.flattened(), &grad_emb)?;
            for (d, g) in delta.data_mut().iter_mut().zip(grad_pixels.data()) {
                *d += alpha * sign(*g);
            }
            delta = project_linf(&delta, cfg.epsilon, pixels)?;
        }
        let adv = {
            let mut a = pixels.clone();
            a.add_scaled(&delta, 1.0)?;
            a
        };
        let emb = encode_image(encoder, &adv.flattened())?;
        let (final_loss, _) = loss_and_grad(&emb, targets, cfg.logit_scale)?;
        trace.push(final_loss);

        let candidate = Perturbation {
            delta,
            loss_trace: trace,
        };
        best = match best {
            None => Some(candidate),
            Some(prev) if candidate.final_loss() > prev.final_loss() => Some(candidate),
            Some(prev) => Some(prev),
        };
    }
    Ok(best.expect("restarts >= 1"))
}
