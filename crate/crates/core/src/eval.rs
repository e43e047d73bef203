//! Zero-shot evaluation: prediction by cosine similarity against per-class
//! text resources, clean/robust accuracy, the clean-vs-adversarial diagonal
//! analysis across similarity metrics, and image-text retrieval recall.

use crate::attack::{pgd_attack, AttackConfig, AttackTargets, LossKind};
use crate::bank::DescriptionBank;
use crate::data::Task;
use crate::encoder::{encode_image, ImageEncoderParams};
use crate::error::{Result, SaftError};
use crate::tensor::{cosine_similarity, Tensor};
use crate::text::TextEmbedder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How per-class similarity scores are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    /// cos(image, single templated prompt).
    Template,
    /// Mean cosine over the class's refined descriptions.
    EnsembleMean,
}

impl std::fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimilarityMetric::Template => f.write_str("template"),
            SimilarityMetric::EnsembleMean => f.write_str("ensemble-mean"),
        }
    }
}

/// Frozen per-class text embeddings for one task.
#[derive(Debug, Clone)]
pub struct ClassResources {
    pub class_names: Vec<String>,
    pub template_embs: Vec<Tensor>,
    pub refined_sets: Option<Vec<Vec<Tensor>>>,
}

impl ClassResources {
    pub fn build(
        embedder: &TextEmbedder,
        class_names: &[String],
        template: &str,
        bank: Option<&DescriptionBank>,
    ) -> Result<Self> {
        let template_embs = class_names
            .iter()
            .map(|name| embedder.embed_text(&template.replace("{label}", name)))
            .collect::<Result<Vec<_>>>()?;
        let refined_sets = match bank {
            Some(bank) => Some(
                class_names
                    .iter()
                    .map(|name| {
                        Ok(bank
                            .entry(name)?
                            .refined_embeddings()
                            .into_iter()
                            .cloned()
                            .collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            class_names: class_names.to_vec(),
            template_embs,
            refined_sets,
        })
    }

    /// Per-class embedding sets under a metric: singleton templates, or the
    /// refined description sets.
    pub fn metric_sets(&self, metric: SimilarityMetric) -> Result<Vec<Vec<Tensor>>> {
        match metric {
            SimilarityMetric::Template => Ok(self
                .template_embs
                .iter()
                .map(|e| vec![e.clone()])
                .collect()),
            SimilarityMetric::EnsembleMean => self
                .refined_sets
                .clone()
                .ok_or_else(|| {
                    SaftError::InvalidConfig(
                        "ensemble-mean metric requires a description bank".into(),
                    )
                }),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Mean cosine between an image embedding and a class's embedding set.
pub fn metric_score(img_emb: &Tensor, set: &[Tensor]) -> Result<f64> {
    if set.is_empty() {
        return Err(SaftError::InvalidConfig("empty class embedding set".into()));
    }
    let mut total = 0.0;
    for e in set {
        total += cosine_similarity(img_emb, e)?;
    }
    Ok(total / set.len() as f64)
}

/// Argmax of the metric score over classes; ties resolve to the lowest class
/// index.
pub fn predict_zero_shot(
    img_emb: &Tensor,
    metric: SimilarityMetric,
    resources: &ClassResources,
) -> Result<usize> {
    if resources.n_classes() < 2 {
        return Err(SaftError::InvalidConfig("need at least 2 classes".into()));
    }
    let sets = resources.metric_sets(metric)?;
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, set) in sets.iter().enumerate() {
        let s = metric_score(img_emb, set)?;
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Ok(best)
}

/// Accuracy outcome of one evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub metric: String,
    pub n_samples: usize,
    pub clean_acc: f64,
    /// Absent when no attack was requested.
    pub robust_acc: Option<f64>,
}

/// Clean accuracy, and robust accuracy under the configured evaluation
/// attack. The default attack maximizes classification cross-entropy against
/// the evaluated metric's class scores; template- and ensemble-dissimilarity
/// attacks against the sample's true class are the exposed alternatives.
pub fn evaluate(
    task: &Task,
    encoder: &ImageEncoderParams,
    resources: &ClassResources,
    metric: SimilarityMetric,
    attack: Option<&AttackConfig>,
) -> Result<EvalOutcome> {
    if task.samples.is_empty() {
        return Err(SaftError::InvalidConfig("evaluation task has no samples".into()));
    }
    let sets = resources.metric_sets(metric)?;
    let ensemble_sets = match attack.map(|a| a.loss_kind) {
        Some(LossKind::EnsembleDissimilarity) => {
            Some(resources.metric_sets(SimilarityMetric::EnsembleMean)?)
        }
        _ => None,
    };
    let per_sample: Vec<Result<(bool, Option<bool>)>> = task
        .samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let clean_emb = encode_image(encoder, &sample.pixels.flattened())?;
            let clean_ok = predict_zero_shot(&clean_emb, metric, resources)? == sample.label;
            let robust_ok = match attack {
                None => None,
                Some(cfg) => {
                    let cfg = cfg.with_derived_seed(idx as u64);
                    let targets = match cfg.loss_kind {
                        LossKind::ClassificationXent => AttackTargets::Classification {
                            class_sets: sets.clone(),
                            true_label: sample.label,
                        },
                        LossKind::TemplateDissimilarity => AttackTargets::Template(
                            resources.template_embs[sample.label].clone(),
                        ),
                        LossKind::EnsembleDissimilarity => AttackTargets::Ensemble(
                            ensemble_sets.as_ref().expect("prefetched above")[sample.label]
                                .clone(),
                        ),
                    };
                    let p = pgd_attack(encoder, &sample.pixels, &targets, &cfg)?;
                    let adv = p.apply(&sample.pixels)?;
                    let adv_emb = encode_image(encoder, &adv.flattened())?;
                    Some(predict_zero_shot(&adv_emb, metric, resources)? == sample.label)
                }
            };
            Ok((clean_ok, robust_ok))
        })
        .collect();

    let mut clean = 0usize;
    let mut robust = 0usize;
    let mut has_robust = false;
    for r in per_sample {
        let (c, ro) = r?;
        clean += usize::from(c);
        if let Some(ok) = ro {
            has_robust = true;
            robust += usize::from(ok);
        }
    }
    let n = task.samples.len();
    Ok(EvalOutcome {
        metric: metric.to_string(),
        n_samples: n,
        clean_acc: clean as f64 / n as f64,
        robust_acc: has_robust.then(|| robust as f64 / n as f64),
    })
}

/// One (clean score, adversarial score) pair of the true class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiagonalPair {
    pub sample_id: usize,
    pub clean_sim: f64,
    pub adv_sim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagonalMetricReport {
    pub metric: String,
    /// Fraction of samples with adv strictly below clean.
    pub below_diagonal: f64,
    pub pairs: Vec<DiagonalPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagonalReport {
    pub n_samples: usize,
    pub attack_steps: usize,
    pub metrics: Vec<DiagonalMetricReport>,
}

/// Craft template-dissimilarity AEs once per sample, then record how each
/// similarity metric's true-class score moves. Strict inequality counts as
/// "below the diagonal"; equal scores count as not fooled.
pub fn diagonal_analysis(
    task: &Task,
    encoder: &ImageEncoderParams,
    resources: &ClassResources,
    attack: &AttackConfig,
    metrics: &[SimilarityMetric],
) -> Result<DiagonalReport> {
    if metrics.len() < 2 || !metrics.contains(&SimilarityMetric::Template) {
        return Err(SaftError::InvalidConfig(
            "diagonal analysis needs >= 2 metrics including template".into(),
        ));
    }
    if task.samples.is_empty() {
        return Err(SaftError::InvalidConfig("evaluation task has no samples".into()));
    }
    let metric_sets: Vec<Vec<Vec<Tensor>>> = metrics
        .iter()
        .map(|m| resources.metric_sets(*m))
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<Result<Vec<(f64, f64)>>> = task
        .samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let cfg = AttackConfig {
                loss_kind: LossKind::TemplateDissimilarity,
                ..attack.with_derived_seed(idx as u64)
            };
            let template_emb = resources.template_embs[sample.label].clone();
            let p = pgd_attack(
                encoder,
                &sample.pixels,
                &AttackTargets::Template(template_emb),
                &cfg,
            )?;
            let adv = p.apply(&sample.pixels)?;
            let clean_emb = encode_image(encoder, &sample.pixels.flattened())?;
            let adv_emb = encode_image(encoder, &adv.flattened())?;
            metric_sets
                .iter()
                .map(|sets| {
                    let set = &sets[sample.label];
                    Ok((metric_score(&clean_emb, set)?, metric_score(&adv_emb, set)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect();

    let mut reports: Vec<DiagonalMetricReport> = metrics
        .iter()
        .map(|m| DiagonalMetricReport {
            metric: m.to_string(),
            below_diagonal: 0.0,
            pairs: Vec::with_capacity(task.samples.len()),
        })
        .collect();
    for (sample_id, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (m_idx, (clean_sim, adv_sim)) in row.into_iter().enumerate() {
            reports[m_idx].pairs.push(DiagonalPair {
                sample_id,
                clean_sim,
                adv_sim,
            });
        }
    }
    let n = task.samples.len() as f64;
    for r in &mut reports {
        let below = r.pairs.iter().filter(|p| p.adv_sim < p.clean_sim).count();
        r.below_diagonal = below as f64 / n;
    }
    Ok(DiagonalReport {
        n_samples: task.samples.len(),
        attack_steps: attack.steps,
        metrics: reports,
    })
}

/// CSV rows: sample_id, metric, clean_sim, adv_sim.
pub fn write_diagonal_csv(report: &DiagonalReport, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,metric,clean_sim,adv_sim\n");
    for m in &report.metrics {
        for p in &m.pairs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.sample_id, m.metric, p.clean_sim, p.adv_sim
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rank of item `target` among `scores` under descending score with ties
/// broken by lower index. Rank 0 is best.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let mut rank = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > t || (*s == t && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Image and text retrieval recall@k over paired corpora: caption i's ground
/// truth is image i and vice versa.
pub fn retrieval_recall(
    images: &[Tensor],
    captions: &[String],
    encoder: &ImageEncoderParams,
    embedder: &TextEmbedder,
    k: usize,
) -> Result<(f64, f64)> {
    if images.len() != captions.len() || images.is_empty() {
        return Err(SaftError::InvalidConfig(
            "need equally many images and captions".into(),
        ));
    }
    if k < 1 || k > images.len() {
        return Err(SaftError::InvalidConfig(format!(
            "k = {k} out of range for corpus of {}",
            images.len()
        )));
    }
    let img_embs: Vec<Tensor> = images
        .iter()
        .map(|x| encode_image(encoder, &x.flattened()))
        .collect::<Result<Vec<_>>>()?;
    let txt_embs: Vec<Tensor> = captions
        .iter()
        .map(|t| embedder.embed_text(t))
        .collect::<Result<Vec<_>>>()?;

    let n = images.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = cosine_similarity(&img_embs[i], &txt_embs[j])?;
        }
    }

    // IRR: caption query ranks images; TRR: image query ranks captions.
    let mut irr_hits = 0;
    let mut trr_hits = 0;
    for q in 0..n {
        let image_scores: Vec<f64> = (0..n).map(|i| sim[i][q]).collect();
        if rank_of(&image_scores, q) < k {
            irr_hits += 1;
        }
        let caption_scores: Vec<f64> = (0..n).map(|j| sim[q][j]).collect();
        if rank_of(&caption_scores, q) < k {
            trr_hits += 1;
        }
    }
    Ok((irr_hits as f64 / n as f64, trr_hits as f64 / n as f64))
}

/// Aggregated report persisted by the evaluation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub outcomes: Vec<EvalOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub k: usize,
    pub irr: f64,
    pub trr: f64,
    pub n_pairs: usize,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
