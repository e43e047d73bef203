use saft_core::attack::{AttackConfig, AttackInit, LossKind};
use saft_core::bank::{DescriptionBank, GenerationConfig};
use saft_core::data::{generate, Color, DatasetSpec, Shape};
use saft_core::encoder::ImageEncoderParams;
use saft_core::eval::{diagonal_analysis, evaluate, ClassResources, SimilarityMetric};
use saft_core::text::TextEmbedder;
use saft_core::train::{run_training, ClassTargets, TrainConfig, TrainMode};

fn spec(holdout4: bool, spc: usize, seed: u64) -> DatasetSpec {
    let all = [
        (Color::Red, Shape::Square),
        (Color::Green, Shape::Circle),
        (Color::Blue, Shape::Triangle),
        (Color::Yellow, Shape::Cross),
        (Color::Blue, Shape::Square),
        (Color::Yellow, Shape::Circle),
        (Color::Red, Shape::Triangle),
        (Color::Green, Shape::Cross),
        (Color::Green, Shape::Square),
        (Color::Red, Shape::Circle),
        (Color::Yellow, Shape::Triangle),
        (Color::Blue, Shape::Cross),
    ];
    let (train_n, hold_n) = if holdout4 { (8, 4) } else { (10, 2) };
    DatasetSpec {
        classes: all[..train_n].to_vec(),
        holdout_classes: all[train_n..train_n + hold_n].to_vec(),
        image_size: 16,
        samples_per_class: spc,
        pos_jitter: 2.0,
        scale_jitter: 0.2,
        noise: 0.05,
        seed,
    }
}

fn main() {
    let template = "a {label}";
    let embedder = TextEmbedder::new(64, 3).unwrap();
    let t0 = std::time::Instant::now();

    for holdout4 in [true, false] {
        for (spc, batch, lr) in [(200usize, 16usize, 0.05f64), (200, 16, 0.1)] {
            let mut agg: Vec<[f64; 6]> = Vec::new();
            for run_seed in 1u64..=3 {
                let ds = generate(&spec(holdout4, spc, 1000 + run_seed)).unwrap();
                let bank = DescriptionBank::build(
                    &embedder,
                    &GenerationConfig {
                        m: 8,
                        hallucination_fraction: 0.25,
                        diversity: 0.0,
                        seed: 500 + run_seed,
                        ..Default::default()
                    },
                    &ds.class_names,
                    5,
                    None,
                )
                .unwrap();
                let trainable: Vec<usize> = (0..ds.class_names.len())
                    .filter(|l| !ds.holdout_labels.contains(l))
                    .collect();
                let init =
                    ImageEncoderParams::init(ds.input_dim(), &[128, 64], 64, 42 + run_seed).unwrap();

                let cfg_base = TrainConfig {
                    epochs: 10,
                    batch_size: batch,
                    lr,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    attack: AttackConfig { seed: run_seed, ..AttackConfig::default() },
                    mode: TrainMode::TemplateBaseline,
                    template: template.into(),
                    seed: run_seed,
                };
                let base_targets = ClassTargets::build(
                    TrainMode::TemplateBaseline,
                    &ds.class_names,
                    None,
                    &embedder,
                    template,
                    &trainable,
                )
                .unwrap();
                let (base_enc, _) =
                    run_training(&ds, init.clone(), &base_targets, &cfg_base, None).unwrap();
                let saft_targets = ClassTargets::build(
                    TrainMode::Saft,
                    &ds.class_names,
                    Some(&bank),
                    &embedder,
                    template,
                    &trainable,
                )
                .unwrap();
                let cfg_saft = TrainConfig { mode: TrainMode::Saft, ..cfg_base.clone() };
                let (saft_enc, _) =
                    run_training(&ds, init.clone(), &saft_targets, &cfg_saft, None).unwrap();

                let hold = ds.holdout_task();
                let hold_res =
                    ClassResources::build(&embedder, &hold.class_names, template, Some(&bank))
                        .unwrap();
                let mk_attack = |eps: f64| AttackConfig {
                    epsilon: eps,
                    steps: 20,
                    init: AttackInit::RandomUniform,
                    loss_kind: LossKind::ClassificationXent,
                    seed: 777,
                    ..AttackConfig::default()
                };
                let e2 = mk_attack(2.0 / 255.0);
                let e4 = mk_attack(4.0 / 255.0);
                let bh2 = evaluate(&hold, &base_enc, &hold_res, SimilarityMetric::EnsembleMean, Some(&e2)).unwrap();
                let sh2 = evaluate(&hold, &saft_enc, &hold_res, SimilarityMetric::EnsembleMean, Some(&e2)).unwrap();
                let bh4 = evaluate(&hold, &base_enc, &hold_res, SimilarityMetric::EnsembleMean, Some(&e4)).unwrap();
                let sh4 = evaluate(&hold, &saft_enc, &hold_res, SimilarityMetric::EnsembleMean, Some(&e4)).unwrap();
                agg.push([
                    bh2.clean_acc,
                    sh2.clean_acc,
                    bh2.robust_acc.unwrap(),
                    sh2.robust_acc.unwrap(),
                    bh4.robust_acc.unwrap(),
                    sh4.robust_acc.unwrap(),
                ]);

                if run_seed == 1 {
                    let src = ds.source_task();
                    let src_res =
                        ClassResources::build(&embedder, &src.class_names, template, Some(&bank))
                            .unwrap();
                    let diag_attack = AttackConfig {
                        steps: 20,
                        loss_kind: LossKind::TemplateDissimilarity,
                        seed: 99,
                        ..AttackConfig::default()
                    };
                    let d = diagonal_analysis(
                        &src,
                        &base_enc,
                        &src_res,
                        &diag_attack,
                        &[SimilarityMetric::Template, SimilarityMetric::EnsembleMean],
                    )
                    .unwrap();
                    let clean_s = evaluate(&src, &base_enc, &src_res, SimilarityMetric::Template, None).unwrap();
                    println!(
                        "  [seed1] src_clean(base)={:.3} diag tmpl={:.3} ens={:.3}",
                        clean_s.clean_acc, d.metrics[0].below_diagonal, d.metrics[1].below_diagonal
                    );
                }
            }
            let n = agg.len() as f64;
            let m = |i: usize| agg.iter().map(|x| x[i]).sum::<f64>() / n;
            println!(
                "hold4={holdout4} spc={spc} batch={batch} lr={lr}: clean base={:.3} saft={:.3} | rob2 base={:.3} saft={:.3} | rob4 base={:.3} saft={:.3} | t={:.0}s",
                m(0), m(1), m(2), m(3), m(4), m(5),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
