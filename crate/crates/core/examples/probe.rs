use saft_core::attack::{AttackConfig, AttackInit, LossKind};
use saft_core::bank::{DescriptionBank, GenerationConfig};
use saft_core::data::{generate, Color, DatasetSpec, Shape};
use saft_core::encoder::ImageEncoderParams;
use saft_core::eval::{evaluate, ClassResources, SimilarityMetric};
use saft_core::text::TextEmbedder;
use saft_core::train::{run_training, ClassTargets, TrainConfig, TrainMode};

fn main() {
    let template = "a {label}";
    let e = TextEmbedder::new(64, 3).unwrap();
    let all = [
        (Color::Red, Shape::Square), (Color::Green, Shape::Circle),
        (Color::Blue, Shape::Triangle), (Color::Yellow, Shape::Cross),
        (Color::Blue, Shape::Square), (Color::Yellow, Shape::Circle),
        (Color::Red, Shape::Triangle), (Color::Green, Shape::Cross),
        (Color::Green, Shape::Square), (Color::Red, Shape::Circle),
        (Color::Yellow, Shape::Triangle), (Color::Blue, Shape::Cross),
    ];
    let ft_lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let ds = generate(&DatasetSpec {
        classes: all[..8].to_vec(), holdout_classes: all[8..].to_vec(),
        image_size: 16, samples_per_class: 200,
        pos_jitter: 2.0, scale_jitter: 0.2, noise: 0.004, seed: 1001,
    }).unwrap();
    let bank = DescriptionBank::build(&e,
        &GenerationConfig { m: 7, hallucination_fraction: 0.2857, diversity: 0.0, seed: 501, ..Default::default() },
        &ds.class_names, 5, None).unwrap();
    let trainable: Vec<usize> = (0..ds.class_names.len()).filter(|l| !ds.holdout_labels.contains(l)).collect();
    let base_targets = ClassTargets::build(TrainMode::TemplateBaseline, &ds.class_names, None, &e, template, &trainable).unwrap();
    let saft_targets = ClassTargets::build(TrainMode::Saft, &ds.class_names, Some(&bank), &e, template, &trainable).unwrap();

    let init = ImageEncoderParams::init(ds.input_dim(), &[128, 64], 64, 43).unwrap();
    let pre_cfg = TrainConfig {
        epochs: 3, batch_size: 16, lr: 0.05, momentum: 0.9, weight_decay: 0.0,
        attack: AttackConfig { steps: 0, ..AttackConfig::default() },
        mode: TrainMode::TemplateBaseline, template: template.into(), seed: 91,
    };
    let (pretrained, _) = run_training(&ds, init, &base_targets, &pre_cfg, None).unwrap();
    let ft = |mode: TrainMode, targets: &ClassTargets| {
        let cfg = TrainConfig {
            epochs: 10, batch_size: 16, lr: ft_lr, momentum: 0.9, weight_decay: 0.0,
            attack: AttackConfig { seed: 1, ..AttackConfig::default() },
            mode, template: template.into(), seed: 1,
        };
        run_training(&ds, pretrained.clone(), targets, &cfg, None).unwrap().0
    };
    let base_enc = ft(TrainMode::TemplateBaseline, &base_targets);
    let saft_enc = ft(TrainMode::Saft, &saft_targets);

    for (task_name, task) in [("source", ds.source_task()), ("holdout", ds.holdout_task())] {
        let res = ClassResources::build(&e, &task.class_names, template, Some(&bank)).unwrap();
        print!("{task_name} (ens metric): ");
        let clean_b = evaluate(&task, &base_enc, &res, SimilarityMetric::EnsembleMean, None).unwrap().clean_acc;
        let clean_s = evaluate(&task, &saft_enc, &res, SimilarityMetric::EnsembleMean, None).unwrap().clean_acc;
        print!("clean b={clean_b:.3} s={clean_s:.3} |");
        for eps_n in [1.0f64, 2.0, 4.0] {
            let attack = AttackConfig {
                epsilon: eps_n / 255.0, steps: 20, init: AttackInit::RandomUniform,
                loss_kind: LossKind::ClassificationXent, seed: 777, ..AttackConfig::default()
            };
            let b = evaluate(&task, &base_enc, &res, SimilarityMetric::EnsembleMean, Some(&attack)).unwrap();
            let s = evaluate(&task, &saft_enc, &res, SimilarityMetric::EnsembleMean, Some(&attack)).unwrap();
            print!(" e{eps_n}: b={:.3} s={:.3} (gap {:+.3}) |", b.robust_acc.unwrap(), s.robust_acc.unwrap(), s.robust_acc.unwrap() - b.robust_acc.unwrap());
        }
        println!();
    }
}
