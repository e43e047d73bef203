use saft_core::attack::{AttackConfig, AttackInit, LossKind};
use saft_core::bank::{DescriptionBank, GenerationConfig};
use saft_core::data::{generate, Color, DatasetSpec, Shape};
use saft_core::encoder::ImageEncoderParams;
use saft_core::eval::{evaluate, ClassResources, SimilarityMetric};
use saft_core::text::TextEmbedder;
use saft_core::train::{run_training, ClassTargets, TrainConfig, TrainMode};

fn spec(hold_n: usize, seed: u64) -> DatasetSpec {
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
    DatasetSpec {
        classes: all[..8].to_vec(),
        holdout_classes: all[8..8 + hold_n].to_vec(),
        image_size: 16,
        samples_per_class: 200,
        pos_jitter: 2.0,
        scale_jitter: 0.2,
        noise: 0.05,
        seed,
    }
}

fn main() {
    let template = "a {label}";
    let embedder = TextEmbedder::new(64, 3).unwrap();
    let hold_n: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let batch: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(16);

    // (protocol, metric, attack loss, eps)
    let protocols: Vec<(&str, SimilarityMetric, LossKind, f64)> = vec![
        ("A xent/ens e2", SimilarityMetric::EnsembleMean, LossKind::ClassificationXent, 2.0 / 255.0),
        ("B ens-dis/tmpl e2", SimilarityMetric::Template, LossKind::EnsembleDissimilarity, 2.0 / 255.0),
        ("B ens-dis/tmpl e4", SimilarityMetric::Template, LossKind::EnsembleDissimilarity, 4.0 / 255.0),
        ("C ens-dis/ens e2", SimilarityMetric::EnsembleMean, LossKind::EnsembleDissimilarity, 2.0 / 255.0),
    ];
    let mut sums = vec![[0.0f64; 4]; protocols.len()];

    for run_seed in 1u64..=3 {
        let ds = generate(&spec(hold_n, 1000 + run_seed)).unwrap();
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
        let init = ImageEncoderParams::init(ds.input_dim(), &[128, 64], 64, 42 + run_seed).unwrap();
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
            TrainMode::TemplateBaseline, &ds.class_names, None, &embedder, template, &trainable,
        ).unwrap();
        let (base_enc, _) = run_training(&ds, init.clone(), &base_targets, &cfg_base, None).unwrap();
        let saft_targets = ClassTargets::build(
            TrainMode::Saft, &ds.class_names, Some(&bank), &embedder, template, &trainable,
        ).unwrap();
        let cfg_saft = TrainConfig { mode: TrainMode::Saft, ..cfg_base.clone() };
        let (saft_enc, _) = run_training(&ds, init.clone(), &saft_targets, &cfg_saft, None).unwrap();

        let hold = ds.holdout_task();
        let res = ClassResources::build(&embedder, &hold.class_names, template, Some(&bank)).unwrap();
        for (pi, (_, metric, loss, eps)) in protocols.iter().enumerate() {
            let attack = AttackConfig {
                epsilon: *eps,
                steps: 20,
                init: AttackInit::RandomUniform,
                loss_kind: *loss,
                seed: 777,
                ..AttackConfig::default()
            };
            let b = evaluate(&hold, &base_enc, &res, *metric, Some(&attack)).unwrap();
            let s = evaluate(&hold, &saft_enc, &res, *metric, Some(&attack)).unwrap();
            sums[pi][0] += b.clean_acc;
            sums[pi][1] += s.clean_acc;
            sums[pi][2] += b.robust_acc.unwrap();
            sums[pi][3] += s.robust_acc.unwrap();
        }
        println!("  seed {run_seed} done");
    }
    println!("hold_n={hold_n} lr={lr} batch={batch} (3-run means)");
    for (pi, (name, ..)) in protocols.iter().enumerate() {
        let m = &sums[pi];
        println!(
            "  {name}: clean base={:.3} saft={:.3} (diff {:+.3}) | robust base={:.3} saft={:.3} (gap {:+.3})",
            m[0] / 3.0, m[1] / 3.0, (m[1] - m[0]) / 3.0,
            m[2] / 3.0, m[3] / 3.0, (m[3] - m[2]) / 3.0
        );
    }
}
