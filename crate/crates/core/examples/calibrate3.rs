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
    let ft_lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let m: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(7);
    let frac: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(2.0 / 7.0);

    let mut tally = vec![[0.0f64; 4]; 3]; // protocols x (bc, sc, br, sr)
    for seed in 1u64..=3 {
        let ds = generate(&DatasetSpec {
            classes: all[..8].to_vec(), holdout_classes: all[8..].to_vec(),
            image_size: 16, samples_per_class: 200,
            pos_jitter: 2.0, scale_jitter: 0.2, noise: 0.05, seed: 1000 + seed,
        }).unwrap();
        let bank = DescriptionBank::build(&e,
            &GenerationConfig { m, hallucination_fraction: frac, diversity: 0.0, seed: 500 + seed, ..Default::default() },
            &ds.class_names, 5, None).unwrap();
        if seed == 1 {
            let entry = bank.entry("green square").unwrap();
            println!("refined(green square): {:?}", entry.refined_texts());
        }
        let trainable: Vec<usize> = (0..ds.class_names.len()).filter(|l| !ds.holdout_labels.contains(l)).collect();
        let base_targets = ClassTargets::build(TrainMode::TemplateBaseline, &ds.class_names, None, &e, template, &trainable).unwrap();
        let saft_targets = ClassTargets::build(TrainMode::Saft, &ds.class_names, Some(&bank), &e, template, &trainable).unwrap();

        // Shared clean pretraining: template alignment, zero-step attack.
        let init = ImageEncoderParams::init(ds.input_dim(), &[128, 64], 64, 42 + seed).unwrap();
        let pre_cfg = TrainConfig {
            epochs: 3, batch_size: 16, lr: 0.05, momentum: 0.9, weight_decay: 0.0,
            attack: AttackConfig { steps: 0, ..AttackConfig::default() },
            mode: TrainMode::TemplateBaseline, template: template.into(), seed: 90 + seed,
        };
        let (pretrained, _) = run_training(&ds, init, &base_targets, &pre_cfg, None).unwrap();

        // Adversarial fine-tuning arms, matched budgets.
        let ft_cfg = TrainConfig {
            epochs: 10, batch_size: 16, lr: ft_lr, momentum: 0.9, weight_decay: 0.0,
            attack: AttackConfig { seed, ..AttackConfig::default() },
            mode: TrainMode::TemplateBaseline, template: template.into(), seed,
        };
        let (base_enc, _) = run_training(&ds, pretrained.clone(), &base_targets, &ft_cfg, None).unwrap();
        let saft_cfg = TrainConfig { mode: TrainMode::Saft, ..ft_cfg };
        let (saft_enc, _) = run_training(&ds, pretrained.clone(), &saft_targets, &saft_cfg, None).unwrap();

        let hold = ds.holdout_task();
        let res = ClassResources::build(&e, &hold.class_names, template, Some(&bank)).unwrap();
        let protocols = [
            (SimilarityMetric::EnsembleMean, LossKind::ClassificationXent, 2.0 / 255.0),
            (SimilarityMetric::Template, LossKind::EnsembleDissimilarity, 2.0 / 255.0),
            (SimilarityMetric::EnsembleMean, LossKind::EnsembleDissimilarity, 2.0 / 255.0),
        ];
        if seed == 1 {
            let pre_h = evaluate(&hold, &pretrained, &res, SimilarityMetric::EnsembleMean, None).unwrap();
            println!("seed1 pretrained hold_ens clean = {:.3}", pre_h.clean_acc);
        }
        for (pi, (metric, loss, eps)) in protocols.iter().enumerate() {
            let attack = AttackConfig {
                epsilon: *eps, steps: 20, init: AttackInit::RandomUniform,
                loss_kind: *loss, seed: 777, ..AttackConfig::default()
            };
            let b = evaluate(&hold, &base_enc, &res, *metric, Some(&attack)).unwrap();
            let s = evaluate(&hold, &saft_enc, &res, *metric, Some(&attack)).unwrap();
            tally[pi][0] += b.clean_acc / 3.0;
            tally[pi][1] += s.clean_acc / 3.0;
            tally[pi][2] += b.robust_acc.unwrap() / 3.0;
            tally[pi][3] += s.robust_acc.unwrap() / 3.0;
        }
    }
    println!("pretrain(clean,T=3,lr=.05) then FT(T=10,lr={ft_lr},batch=16) M={m} frac={frac:.3} (3-run means)");
    for (pi, name) in ["xent/ens e2", "ens-dis/tmpl e2", "ens-dis/ens e2"].iter().enumerate() {
        let t = &tally[pi];
        println!(
            "  {name}: clean base={:.3} saft={:.3} (diff {:+.3}) | robust base={:.3} saft={:.3} (gap {:+.3})",
            t[0], t[1], t[1] - t[0], t[2], t[3], t[3] - t[2]
        );
    }
}
