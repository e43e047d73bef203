//! The six pipeline commands. Each reads only artifacts whose names match
//! hashes derived from the current configuration and writes its own
//! hash-stamped outputs plus a manifest entry.

use crate::artifacts::RunDir;
use crate::config::{RunConfig, TaskChoice};
use crate::error::{CliError, CliResult};
use rayon::prelude::*;
use saft_core::attack::{pgd_attack, AttackTargets, LossKind};
use saft_core::bank::{load_bank, save_bank, DescriptionBank};
use saft_core::data::{generate, load_dataset, save_dataset, Dataset, Task};
use saft_core::encoder::{load_params, save_params, ImageEncoderParams};
use saft_core::eval::{
    diagonal_analysis, evaluate, retrieval_recall, write_diagonal_csv, ClassResources,
    DiagonalReport, EvalReport, RetrievalOutcome, SimilarityMetric,
};
use saft_core::text::TextEmbedder;
use saft_core::train::{run_training, ClassTargets, TrainMode};
use serde::Serialize;

fn load_dataset_artifact(cfg: &RunConfig, run: &RunDir) -> CliResult<Dataset> {
    let path = run.resolve("dataset", &cfg.dataset_hash(), "bin", "gen-data")?;
    Ok(load_dataset(&path)?)
}

fn load_encoder_artifact(cfg: &RunConfig, run: &RunDir) -> CliResult<ImageEncoderParams> {
    let path = run.resolve("encoder", &cfg.encoder_hash(), "bin", "train")?;
    Ok(load_params(&path)?)
}

fn load_bank_artifact(
    cfg: &RunConfig,
    run: &RunDir,
    embedder: &TextEmbedder,
) -> CliResult<DescriptionBank> {
    let path = run.resolve("bank", &cfg.bank_hash(), "json", "gen-bank")?;
    Ok(load_bank(&path, embedder)?)
}

fn task_of(cfg: &RunConfig, dataset: &Dataset, choice: TaskChoice) -> CliResult<Task> {
    let task = match choice {
        TaskChoice::Source => dataset.source_task(),
        TaskChoice::Holdout => dataset.holdout_task(),
    };
    if task.class_names.len() < 2 {
        return Err(CliError::config(format!(
            "{:?} task needs at least 2 classes; configure dataset.holdout_classes \
             for holdout evaluation",
            choice
        )));
    }
    let _ = cfg;
    Ok(task)
}

pub fn cmd_gen_data(cfg: &RunConfig, run: &RunDir) -> CliResult<()> {
    let spec = cfg.dataset.to_spec(cfg.seed);
    let dataset = generate(&spec)?;
    let hash = cfg.dataset_hash();
    let path = run.path_for("dataset", &hash, "bin");
    save_dataset(&dataset, &path)?;
    run.record(&[("dataset", RunDir::file_name("dataset", &hash, "bin"))])?;
    println!(
        "gen-data: {} classes ({} held out), {} train / {} test -> {}",
        dataset.class_names.len(),
        dataset.holdout_labels.len(),
        dataset.train.len(),
        dataset.test.len(),
        path.display()
    );
    Ok(())
}

pub fn cmd_gen_bank(cfg: &RunConfig, run: &RunDir) -> CliResult<()> {
    let dataset = load_dataset_artifact(cfg, run)?;
    let embedder = cfg.embedder.build()?;
    let gen_cfg = cfg.generation.to_generation(cfg.seed);
    let bank = DescriptionBank::build(
        &embedder,
        &gen_cfg,
        &dataset.class_names,
        cfg.generation.k,
        cfg.generation.relevance_template.as_deref(),
    )?;
    let hash = cfg.bank_hash();
    let path = run.path_for("bank", &hash, "json");
    save_bank(&bank, &path)?;
    run.record(&[("bank", RunDir::file_name("bank", &hash, "json"))])?;
    println!(
        "gen-bank: {} classes x {} candidates, K = {} -> {}",
        bank.classes.len(),
        cfg.generation.m,
        cfg.generation.k,
        path.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, run: &RunDir) -> CliResult<()> {
    let dataset = load_dataset_artifact(cfg, run)?;
    let embedder = cfg.embedder.build()?;
    let bank = match cfg.train.mode {
        TrainMode::Saft => Some(load_bank_artifact(cfg, run, &embedder)?),
        TrainMode::TemplateBaseline => None,
    };
    let trainable: Vec<usize> = (0..dataset.class_names.len())
        .filter(|l| !dataset.holdout_labels.contains(l))
        .collect();
    let targets = ClassTargets::build(
        cfg.train.mode,
        &dataset.class_names,
        bank.as_ref(),
        &embedder,
        &cfg.template,
        &trainable,
    )?;
    let params = ImageEncoderParams::init(
        dataset.input_dim(),
        &cfg.encoder.hidden,
        cfg.encoder.embed_dim,
        cfg.encoder_init_seed(),
    )?;
    let train_cfg = cfg.train.to_config(cfg.seed, &cfg.template);
    let hash = cfg.encoder_hash();
    let stem = format!("encoder-{}", &hash[..8]);
    let (trained, log) = run_training(
        &dataset,
        params,
        &targets,
        &train_cfg,
        Some((&run.dir, &stem)),
    )?;
    let enc_path = run.path_for("encoder", &hash, "bin");
    save_params(&trained, &enc_path)?;
    let log_path = run.path_for("trainlog", &hash, "csv");
    log.write_csv(&log_path)?;
    run.record(&[
        ("encoder", RunDir::file_name("encoder", &hash, "bin")),
        ("train_log", RunDir::file_name("trainlog", &hash, "csv")),
    ])?;
    for e in &log.epochs {
        println!(
            "train[{:?}] epoch {}: adv_loss {:.6}, clean_loss {:.6}, attack_success {:.3}",
            cfg.train.mode, e.epoch, e.adv_loss, e.clean_loss, e.attack_success
        );
    }
    println!("train: wrote {}", enc_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AttackArtifact {
    config_hash: String,
    loss: String,
    epsilon: f64,
    steps: usize,
    n_samples: usize,
    success_rate: f64,
    mean_initial_loss: f64,
    mean_final_loss: f64,
    max_abs_delta: f64,
    budget_violations: usize,
}

pub fn cmd_attack(cfg: &RunConfig, run: &RunDir) -> CliResult<()> {
    let dataset = load_dataset_artifact(cfg, run)?;
    let encoder = load_encoder_artifact(cfg, run)?;
    let embedder = cfg.embedder.build()?;
    let attack = cfg.attack_cmd_config();
    let task = task_of(cfg, &dataset, cfg.attack.task)?;
    let resources = match attack.loss_kind {
        LossKind::EnsembleDissimilarity => {
            let bank = load_bank_artifact(cfg, run, &embedder)?;
            ClassResources::build(&embedder, &task.class_names, &cfg.template, Some(&bank))?
        }
        _ => ClassResources::build(&embedder, &task.class_names, &cfg.template, None)?,
    };
    let template_sets = resources.metric_sets(SimilarityMetric::Template)?;

    let results: Vec<CliResult<(f64, f64, f64, bool)>> = task
        .samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let per_sample = attack.with_derived_seed(idx as u64);
            let targets = match attack.loss_kind {
                LossKind::TemplateDissimilarity => {
                    AttackTargets::Template(resources.template_embs[sample.label].clone())
                }
                LossKind::EnsembleDissimilarity => AttackTargets::Ensemble(
                    resources
                        .metric_sets(SimilarityMetric::EnsembleMean)?[sample.label]
                        .clone(),
                ),
                LossKind::ClassificationXent => AttackTargets::Classification {
                    class_sets: template_sets.clone(),
                    true_label: sample.label,
                },
            };
            let p = pgd_attack(&encoder, &sample.pixels, &targets, &per_sample)?;
            let max_abs = p
                .delta
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let violated = p
                .delta
                .data()
                .iter()
                .zip(sample.pixels.data())
                .any(|(d, x)| d.abs() > attack.epsilon || !(0.0..=1.0).contains(&(x + d)));
            Ok((p.initial_loss(), p.final_loss(), max_abs, violated))
        })
        .collect();

    let mut initial = 0.0;
    let mut final_ = 0.0;
    let mut success = 0usize;
    let mut max_abs = 0.0f64;
    let mut violations = 0usize;
    for r in &results {
        let (i, f, m, v) = match r {
            Ok(t) => *t,
            Err(e) => return Err(CliError::config(e.to_string())),
        };
        initial += i;
        final_ += f;
        success += usize::from(f > i);
        max_abs = max_abs.max(m);
        violations += usize::from(v);
    }
    let n = task.samples.len();
    let hash = cfg.attack_hash();
    let artifact = AttackArtifact {
        config_hash: hash.clone(),
        loss: format!("{:?}", attack.loss_kind),
        epsilon: attack.epsilon,
        steps: attack.steps,
        n_samples: n,
        success_rate: success as f64 / n as f64,
        mean_initial_loss: initial / n as f64,
        mean_final_loss: final_ / n as f64,
        max_abs_delta: max_abs,
        budget_violations: violations,
    };
    let path = run.path_for("attack-report", &hash, "json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&artifact).map_err(|e| CliError::io(e.to_string()))?,
    )
    .map_err(|e| CliError::io(e.to_string()))?;
    run.record(&[(
        "attack_report",
        RunDir::file_name("attack-report", &hash, "json"),
    )])?;
    println!(
        "attack: {} samples, success {:.3}, loss {:.6} -> {:.6}, max|delta| {:.6}, violations {}",
        n,
        artifact.success_rate,
        artifact.mean_initial_loss,
        artifact.mean_final_loss,
        artifact.max_abs_delta,
        artifact.budget_violations
    );
    println!("attack: wrote {}", path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, run: &RunDir) -> CliResult<()> {
    let dataset = load_dataset_artifact(cfg, run)?;
    let encoder = load_encoder_artifact(cfg, run)?;
    let embedder = cfg.embedder.build()?;
    let task = task_of(cfg, &dataset, cfg.eval.task)?;
    let attack = cfg.eval_attack_config();
    let needs_bank = cfg.eval.metric == SimilarityMetric::EnsembleMean
        || attack.as_ref().map(|a| a.loss_kind) == Some(LossKind::EnsembleDissimilarity);
    let bank = if needs_bank {
        Some(load_bank_artifact(cfg, run, &embedder)?)
    } else {
        None
    };
    let resources =
        ClassResources::build(&embedder, &task.class_names, &cfg.template, bank.as_ref())?;
    let outcome = evaluate(&task, &encoder, &resources, cfg.eval.metric, attack.as_ref())?;

    let retrieval = match cfg.eval.retrieval_k {
        None => None,
        Some(k) => {
            let images: Vec<_> = task.samples.iter().map(|s| s.pixels.clone()).collect();
            let captions: Vec<String> = task
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    format!("{} number {i}", cfg.template.replace("{label}", &s.class_name))
                })
                .collect();
            let (irr, trr) = retrieval_recall(&images, &captions, &encoder, &embedder, k)?;
            Some(RetrievalOutcome {
                k,
                irr,
                trr,
                n_pairs: images.len(),
            })
        }
    };

    let hash = cfg.eval_hash();
    let report = EvalReport {
        config_hash: hash.clone(),
        outcomes: vec![outcome],
        retrieval,
    };
    let path = run.path_for("eval-report", &hash, "json");
    report.write_json(&path)?;
    run.record(&[(
        "eval_report",
        RunDir::file_name("eval-report", &hash, "json"),
    )])?;

    println!("eval ({:?} task, {} samples)", cfg.eval.task, report.outcomes[0].n_samples);
    println!("  metric        clean_acc  robust_acc");
    for o in &report.outcomes {
        println!(
            "  {:<13} {:<10.4} {}",
            o.metric,
            o.clean_acc,
            o.robust_acc
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "-".to_string())
        );
    }
    if let Some(r) = &report.retrieval {
        println!("  retrieval@{}: IRR {:.4}, TRR {:.4}", r.k, r.irr, r.trr);
    }
    println!("eval: wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct DiagonalArtifact {
    config_hash: String,
    report: DiagonalReport,
}

pub fn cmd_diagonal(cfg: &RunConfig, run: &RunDir) -> CliResult<()> {
    let dataset = load_dataset_artifact(cfg, run)?;
    let encoder = load_encoder_artifact(cfg, run)?;
    let embedder = cfg.embedder.build()?;
    let bank = load_bank_artifact(cfg, run, &embedder)?;
    let task = task_of(cfg, &dataset, cfg.diagonal.task)?;
    let resources =
        ClassResources::build(&embedder, &task.class_names, &cfg.template, Some(&bank))?;
    let attack = cfg.diagonal_attack_config();
    let report = diagonal_analysis(
        &task,
        &encoder,
        &resources,
        &attack,
        &[SimilarityMetric::Template, SimilarityMetric::EnsembleMean],
    )?;

    let hash = cfg.diagonal_hash();
    let json_path = run.path_for("diagonal-report", &hash, "json");
    let csv_path = run.path_for("diagonal-pairs", &hash, "csv");
    let artifact = DiagonalArtifact {
        config_hash: hash.clone(),
        report,
    };
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&artifact).map_err(|e| CliError::io(e.to_string()))?,
    )
    .map_err(|e| CliError::io(e.to_string()))?;
    write_diagonal_csv(&artifact.report, &csv_path)?;
    run.record(&[
        (
            "diagonal_report",
            RunDir::file_name("diagonal-report", &hash, "json"),
        ),
        (
            "diagonal_pairs",
            RunDir::file_name("diagonal-pairs", &hash, "csv"),
        ),
    ])?;

    println!(
        "diagonal ({:?} task, {} samples, PGD-{}):",
        cfg.diagonal.task, artifact.report.n_samples, artifact.report.attack_steps
    );
    println!("  metric         below_diagonal");
    for m in &artifact.report.metrics {
        println!("  {:<14} {:.4}", m.metric, m.below_diagonal);
    }
    println!("diagonal: wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}
