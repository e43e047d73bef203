//! Per-class description bank: candidate description generation, relevance
//! scoring against the bare class label, and top-K semantic filtering.
//!
//! The contractual generator is a seeded stub that composes descriptions
//! from synonym/attribute tables keyed to the synthetic corpus vocabulary,
//! with a configurable fraction of injected off-topic hallucinations. An
//! OpenAI-compatible chat endpoint can be used instead; it is optional and
//! never required by tests.

use crate::data::mix_seed;
use crate::error::{Result, SaftError};
use crate::tensor::{cosine_similarity, Tensor};
use crate::text::{fnv1a64, TextEmbedder, DEFAULT_SEED_A};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How candidate descriptions are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorSource {
    /// Seeded synonym/attribute-table generator; never fails.
    Stub,
    /// OpenAI-compatible chat-completions endpoint.
    External {
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: usize,
    },
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_retries() -> usize {
    2
}

/// Configuration for candidate description generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Candidate count per class.
    pub m: usize,
    /// Temperature-like knob; for the stub it widens phrasing variety.
    #[serde(default = "default_diversity")]
    pub diversity: f64,
    #[serde(default = "default_prompt_template")]
    pub prompt_template: String,
    /// Fraction of candidates replaced by off-topic hallucinations.
    #[serde(default)]
    pub hallucination_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_source")]
    pub source: GeneratorSource,
}

fn default_diversity() -> f64 {
    1.0
}

fn default_prompt_template() -> String {
    "What does a {label} look like".to_string()
}

fn default_source() -> GeneratorSource {
    GeneratorSource::Stub
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            m: 8,
            diversity: default_diversity(),
            prompt_template: default_prompt_template(),
            hallucination_fraction: 0.0,
            seed: 0,
            source: default_source(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(SaftError::InvalidConfig("generation m must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hallucination_fraction) {
            return Err(SaftError::InvalidConfig(
                "hallucination_fraction must lie in [0,1]".into(),
            ));
        }
        if self.diversity < 0.0 {
            return Err(SaftError::InvalidConfig("diversity must be >= 0".into()));
        }
        Ok(())
    }
}

// Attribute vocabularies are disjoint across entries so that descriptions of
// different classes share n-grams only through genuinely shared tokens.
const SHAPE_ATTRIBUTES: &[(&str, &[&str])] = &[
    ("square", &["boxy", "quadrate"]),
    ("circle", &["round", "discoid"]),
    ("triangle", &["wedgy", "cornered"]),
    ("cross", &["crisscross", "barred"]),
    ("star", &["spiky", "starburst"]),
    ("ring", &["looped", "hooped"]),
    ("diamond", &["rhombic", "kitelike"]),
    ("arrow", &["darting", "fletched"]),
    ("hexagon", &["honeycombed", "sixfold"]),
    ("heart", &["lobed", "valentine"]),
];

const COLOR_ATTRIBUTES: &[(&str, &[&str])] = &[
    ("red", &["crimson", "scarlet"]),
    ("green", &["verdant", "emerald"]),
    ("blue", &["azure", "cobalt"]),
    ("yellow", &["golden", "saffron"]),
    ("purple", &["violet", "mauve"]),
    ("orange", &["tangerine", "rusty"]),
    ("white", &["pale", "ivory"]),
    ("black", &["inky", "sooty"]),
    ("pink", &["rosy", "blushing"]),
    ("brown", &["umber", "walnut"]),
];

const FILLERS: &[&str] = &[
    "on a plain background",
    "under even lighting",
    "centered in the frame",
    "drawn with soft edges",
    "against a muted backdrop",
    "rendered cleanly",
];

/// Off-topic hallucination table: no token overlaps any class vocabulary.
pub const OFF_TOPIC_TABLE: &[&str] = &[
    "a winged mythical creature from very old tales, humming beneath autumn fog",
    "an ancient restless spirit wandering between misty mountain peaks at dusk",
    "molten clockwork machinery murmuring gently beneath the midnight waves",
    "a whispering archive of forgotten dust kept by patient librarians",
    "the long daydream of an electric lighthouse at the end of winter",
    "a nomadic cloud herding silent thunder across an empty prairie sky",
    "an ivory automaton playing unheard music for an audience of moths",
    "the moon held gently inside a pickling jar on a kitchen shelf",
    "a velvet labyrinth that swallows echoes and returns them as riddles",
    "an elderly oak tree debating philosophy with the incoming tide",
    "a glass comet napping in a desk drawer full of unsent letters",
    "the polite ghost of a typewriter apologizing for every misprint",
];

fn attribute_for(table: &[(&str, &[&str])], token: &str, slot: usize) -> Option<String> {
    table
        .iter()
        .find(|(t, _)| *t == token)
        .map(|(_, attrs)| attrs[slot % attrs.len()].to_string())
}

fn stub_text(label: &str, pattern: usize, rng: &mut ChaCha8Rng, diversity: f64) -> String {
    let tokens: Vec<&str> = label.split_whitespace().collect();
    let color_tok = tokens
        .iter()
        .find(|t| COLOR_ATTRIBUTES.iter().any(|(c, _)| c == *t))
        .copied();
    let shape_tok = tokens
        .iter()
        .find(|t| SHAPE_ATTRIBUTES.iter().any(|(s, _)| s == *t))
        .copied();

    // Every class's candidate set shares the same pattern scaffold, and every
    // scaffold adds exactly eight characters around "{color} {shape}". Equal
    // text lengths mean equal gram counts, so the l2-normalized candidate
    // embeddings of one class carry equal weight and their mean direction
    // stays proportional to the raw gram sum — the mean composes across
    // color and shape exactly like a single templated text does.
    // Morphological variants ("greenish", "squarelike") add ensemble-specific
    // grams without leaving the class vocabulary.
    let mut text = match (color_tok, shape_tok) {
        (Some(color), Some(shape)) => match pattern % 6 {
            0 => format!("{color}ish {shape}s"),
            1 => format!("{color} {shape}like"),
            2 => format!("{color} {shape} art"),
            3 => format!("{color} {shape} pic"),
            4 => format!("{color}y {shape}ish"),
            _ => format!("{color} {shape} set"),
        },
        _ => match pattern % 4 {
            0 => format!("a photo of a {label}"),
            1 => format!("a clear picture of a {label}"),
            2 => format!("the {label} with its usual features"),
            _ => format!("a typical {label} in plain view"),
        },
    };

    // Diversity appends extra filler or attribute phrases; 0 disables it.
    // Extras unbalance the candidate lengths, trading mean-direction
    // compositionality for wording variety.
    let extras = if diversity <= 0.0 {
        0
    } else {
        rng.gen_range(0..=(diversity.ceil() as usize))
    };
    if extras > 0 {
        let mut pool: Vec<String> = FILLERS.iter().map(|s| s.to_string()).collect();
        if let (Some(color), Some(shape)) = (color_tok, shape_tok) {
            let ca = attribute_for(COLOR_ATTRIBUTES, color, pattern).unwrap();
            let sa = attribute_for(SHAPE_ATTRIBUTES, shape, pattern).unwrap();
            pool.push(format!("{ca} and {sa} in styling"));
        }
        let mut used: Vec<String> = Vec::new();
        for _ in 0..extras {
            let available: Vec<&String> = pool.iter().filter(|f| !used.contains(f)).collect();
            if available.is_empty() {
                break;
            }
            let pick = available[rng.gen_range(0..available.len())].clone();
            text.push_str(", ");
            text.push_str(&pick);
            used.push(pick);
        }
    }
    text
}

fn stub_generate(cfg: &GenerationConfig, class_name: &str) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        cfg.seed,
        fnv1a64(DEFAULT_SEED_A, class_name.as_bytes()),
    ));
    let n_off = (cfg.hallucination_fraction * cfg.m as f64).round() as usize;
    let n_off = n_off.min(cfg.m);
    // Hallucinations occupy the tail slots so every class's on-topic
    // candidates share the same pattern structure; which off-topic text is
    // injected still varies by seed and class.
    let first_off = cfg.m - n_off;

    let mut texts = Vec::with_capacity(cfg.m);
    let mut off_cursor = rng.gen_range(0..OFF_TOPIC_TABLE.len());
    for i in 0..cfg.m {
        if i >= first_off {
            texts.push(OFF_TOPIC_TABLE[off_cursor % OFF_TOPIC_TABLE.len()].to_string());
            off_cursor += 1;
        } else {
            let mut text = stub_text(class_name, i, &mut rng, cfg.diversity);
            // Keep candidates distinct.
            let mut bump = 1;
            while texts.contains(&text) {
                text = format!("{text}, angle {bump}");
                bump += 1;
            }
            texts.push(text);
        }
    }
    texts
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    n: usize,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

fn external_generate(
    cfg: &GenerationConfig,
    class_name: &str,
    endpoint: &str,
    model: &str,
    timeout_secs: u64,
    max_retries: usize,
) -> Result<Vec<String>> {
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| SaftError::Generation {
            message: e.to_string(),
            retries: 0,
        })?;
    let prompt = cfg.prompt_template.replace("{label}", class_name);
    let body = ChatRequest {
        model,
        messages: vec![ChatMessage {
            role: "user",
            content: prompt,
        }],
        n: cfg.m,
        temperature: cfg.diversity,
    };
    let api_key = std::env::var("SAFT_LLM_API_KEY").unwrap_or_default();

    let mut last_err = String::new();
    for _attempt in 0..=max_retries {
        let mut req = client.post(endpoint).json(&body);
        if !api_key.is_empty() {
            req = req.bearer_auth(&api_key);
        }
        match req.send().and_then(|r| r.error_for_status()) {
            Ok(resp) => {
                let parsed: ChatResponse = resp.json().map_err(|e| SaftError::Generation {
                    message: format!("bad response body: {e}"),
                    retries: 0,
                })?;
                let texts: Vec<String> = parsed
                    .choices
                    .into_iter()
                    .map(|c| c.message.content.trim().to_string())
                    .filter(|t| !t.is_empty())
                    .take(cfg.m)
                    .collect();
                if texts.len() < cfg.m {
                    return Err(SaftError::Generation {
                        message: format!("endpoint returned {} texts, need {}", texts.len(), cfg.m),
                        retries: 0,
                    });
                }
                return Ok(texts);
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(SaftError::Generation {
        message: last_err,
        retries: max_retries,
    })
}

/// Produce exactly M candidate descriptions for a class.
pub fn generate_descriptions(cfg: &GenerationConfig, class_name: &str) -> Result<Vec<String>> {
    cfg.validate()?;
    if class_name.trim().is_empty() {
        return Err(SaftError::InvalidConfig("class name must be non-empty".into()));
    }
    match &cfg.source {
        GeneratorSource::Stub => Ok(stub_generate(cfg, class_name)),
        GeneratorSource::External {
            endpoint,
            model,
            timeout_secs,
            max_retries,
        } => external_generate(cfg, class_name, endpoint, model, *timeout_secs, *max_retries),
    }
}

/// Relevance of each candidate to its class: cosine similarity between the
/// embedded label and the embedded candidate, order-preserving.
pub fn relevance_scores(
    embedder: &TextEmbedder,
    class_name: &str,
    candidates: &[String],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(SaftError::InvalidConfig("need at least one candidate".into()));
    }
    let label_emb = embedder.embed_text(class_name)?;
    candidates
        .iter()
        .map(|t| {
            let emb = embedder.embed_text(t)?;
            cosine_similarity(&label_emb, &emb)
        })
        .collect()
}

/// Indices of the top-K candidates by descending score, stable on ties
/// (original index breaks them). All candidates stay available for audit.
pub fn semantic_filter(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let m = scores.len();
    if k < 1 {
        return Err(SaftError::InvalidConfig("K must be >= 1".into()));
    }
    if k > m {
        return Err(SaftError::InvalidConfig(format!("K = {k} exceeds M = {m}")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    Ok(order[..k].to_vec())
}

/// One candidate description with its frozen embedding and relevance score.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub embedding: Tensor,
    pub score: f64,
}

/// All descriptions for one class plus the refined top-K selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub k: usize,
    pub candidates: Vec<Candidate>,
    /// Indices into `candidates`, descending score, stable ties.
    pub refined: Vec<usize>,
}

impl ClassEntry {
    pub fn build(
        embedder: &TextEmbedder,
        name: &str,
        texts: Vec<String>,
        k: usize,
    ) -> Result<Self> {
        let scores = relevance_scores(embedder, name, &texts)?;
        let refined = semantic_filter(&scores, k)?;
        let candidates = texts
            .into_iter()
            .zip(scores)
            .map(|(text, score)| {
                Ok(Candidate {
                    embedding: embedder.embed_text(&text)?,
                    text,
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = Self {
            name: name.to_string(),
            k,
            candidates,
            refined,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn refined_embeddings(&self) -> Vec<&Tensor> {
        self.refined
            .iter()
            .map(|i| &self.candidates[*i].embedding)
            .collect()
    }

    pub fn refined_texts(&self) -> Vec<&str> {
        self.refined
            .iter()
            .map(|i| self.candidates[*i].text.as_str())
            .collect()
    }

    /// Every candidate embedding, selection ignored (the no-filtering path).
    pub fn all_embeddings(&self) -> Vec<&Tensor> {
        self.candidates.iter().map(|c| &c.embedding).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.candidates.len();
        if self.k < 1 || self.k > m {
            return Err(SaftError::InvalidConfig(format!(
                "class {:?}: K = {} out of range for M = {m}",
                self.name, self.k
            )));
        }
        if self.refined.len() != self.k {
            return Err(SaftError::InvalidConfig(format!(
                "class {:?}: refined size {} != K = {}",
                self.name,
                self.refined.len(),
                self.k
            )));
        }
        // Refined scores are sorted descending and dominate every excluded score.
        for pair in self.refined.windows(2) {
            if self.candidates[pair[0]].score < self.candidates[pair[1]].score {
                return Err(SaftError::InvalidConfig(format!(
                    "class {:?}: refined scores not descending",
                    self.name
                )));
            }
        }
        let min_refined = self
            .refined
            .iter()
            .map(|i| self.candidates[*i].score)
            .fold(f64::INFINITY, f64::min);
        for (i, c) in self.candidates.iter().enumerate() {
            if !self.refined.contains(&i) && c.score > min_refined {
                return Err(SaftError::InvalidConfig(format!(
                    "class {:?}: excluded candidate {i} outranks a refined one",
                    self.name
                )));
            }
            if (c.embedding.norm() - 1.0).abs() > 1e-9 {
                return Err(SaftError::InvalidConfig(format!(
                    "class {:?}: candidate {i} embedding is not unit norm",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// The assembled bank: immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionBank {
    pub embedder: TextEmbedder,
    pub classes: Vec<ClassEntry>,
}

impl DescriptionBank {
    /// Build entries for every class name; per-class work runs in parallel.
    pub fn build(
        embedder: &TextEmbedder,
        gen_cfg: &GenerationConfig,
        class_names: &[String],
        k: usize,
        relevance_template: Option<&str>,
    ) -> Result<Self> {
        gen_cfg.validate()?;
        let classes = class_names
            .par_iter()
            .map(|name| {
                let texts = generate_descriptions(gen_cfg, name)?;
                let relevance_target = match relevance_template {
                    Some(t) => t.replace("{label}", name),
                    None => name.clone(),
                };
                let scores = relevance_scores(embedder, &relevance_target, &texts)?;
                let refined = semantic_filter(&scores, k)?;
                let candidates = texts
                    .into_iter()
                    .zip(scores)
                    .map(|(text, score)| {
                        Ok(Candidate {
                            embedding: embedder.embed_text(&text)?,
                            text,
                            score,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let entry = ClassEntry {
                    name: name.clone(),
                    k,
                    candidates,
                    refined,
                };
                entry.validate()?;
                Ok(entry)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedder: embedder.clone(),
            classes,
        })
    }

    pub fn entry(&self, class_name: &str) -> Result<&ClassEntry> {
        self.classes
            .iter()
            .find(|c| c.name == class_name)
            .ok_or_else(|| SaftError::MissingClass(class_name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for entry in &self.classes {
            entry.validate()?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    embed_dim: usize,
    ngram_size: usize,
    embedder_hash: String,
    classes: Vec<BankClass>,
}

#[derive(Serialize, Deserialize)]
struct BankClass {
    name: String,
    #[serde(rename = "K")]
    k: usize,
    candidates: Vec<BankCandidate>,
}

#[derive(Serialize, Deserialize)]
struct BankCandidate {
    text: String,
    score: f64,
    refined: bool,
}

/// Persist the bank as JSON. Embeddings are not stored; the embedder is
/// deterministic and its config hash guards against stale reconstruction.
pub fn save_bank(bank: &DescriptionBank, path: &Path) -> Result<()> {
    let file = BankFile {
        embed_dim: bank.embedder.embed_dim,
        ngram_size: bank.embedder.ngram_size,
        embedder_hash: bank.embedder.config_hash(),
        classes: bank
            .classes
            .iter()
            .map(|entry| BankClass {
                name: entry.name.clone(),
                k: entry.k,
                candidates: entry
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| BankCandidate {
                        text: c.text.clone(),
                        score: c.score,
                        refined: entry.refined.contains(&i),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load a bank saved by [`save_bank`], re-embedding every candidate with the
/// supplied embedder. The stored embedder hash must match exactly.
pub fn load_bank(path: &Path, embedder: &TextEmbedder) -> Result<DescriptionBank> {
    let json = std::fs::read_to_string(path)?;
    let file: BankFile = serde_json::from_str(&json)?;
    if file.embed_dim != embedder.embed_dim {
        return Err(SaftError::Format(format!(
            "bank embed_dim {} does not match embedder embed_dim {}",
            file.embed_dim, embedder.embed_dim
        )));
    }
    if file.embedder_hash != embedder.config_hash() {
        return Err(SaftError::Format(format!(
            "bank embedder hash {} does not match current embedder {} (stale embeddings)",
            file.embedder_hash,
            embedder.config_hash()
        )));
    }
    let classes = file
        .classes
        .into_iter()
        .map(|bc| {
            let scores: Vec<f64> = bc.candidates.iter().map(|c| c.score).collect();
            let mut refined: Vec<usize> = bc
                .candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.refined)
                .map(|(i, _)| i)
                .collect();
            refined.sort_by(|a, b| {
                scores[*b]
                    .partial_cmp(&scores[*a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(b))
            });
            let candidates = bc
                .candidates
                .into_iter()
                .map(|c| {
                    Ok(Candidate {
                        embedding: embedder.embed_text(&c.text)?,
                        text: c.text,
                        score: c.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let entry = ClassEntry {
                name: bc.name,
                k: refined.len(),
                candidates,
                refined,
            };
            entry.validate()?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DescriptionBank {
        embedder: embedder.clone(),
        classes,
    })
}
