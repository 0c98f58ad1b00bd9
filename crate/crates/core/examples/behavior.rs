//! Trains the G-CNN and the plain baselines on rotated glyphs and prints
//! test accuracy per configuration.
//!
//! Usage: behavior <g-cnn iterations> <baseline iterations> <batch> <seed> [lr]

use std::time::Instant;

use se2cnn::data::synth_rotated_patterns;
use se2cnn::network::{Model, NetworkConfig};
use se2cnn::training::{evaluate_classification, train, Augmentation, TrainSettings};

fn main() -> se2cnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let gcnn_iterations: usize = arg(0, "150").parse().unwrap();
    let base_iterations: usize = arg(1, "600").parse().unwrap();
    let batch: usize = arg(2, "32").parse().unwrap();
    let seed: u64 = arg(3, "1").parse().unwrap();
    let lr: f64 = arg(4, "0.01").parse().unwrap();
    let data = synth_rotated_patterns(2500, 1000 + seed)?;
    let (train_set, test_set) = data.split(2000)?;
    for (n, aug) in [(8, Augmentation::None), (1, Augmentation::TransposeRot90), (1, Augmentation::None)] {
        let t = Instant::now();
        let iterations = if n == 1 { base_iterations } else { gcnn_iterations };
        if iterations == 0 {
            continue;
        }
        let mut model = Model::<f32>::new(NetworkConfig::new(n).with_pool_layers(&[1, 2, 3]))?;
        model.init_weights(seed);
        let settings = TrainSettings {
            learning_rate: lr,
            batch_size: batch,
            iterations,
            augmentation: aug,
            seed,
            log_every: 25,
            ..TrainSettings::default()
        };
        let report = train(&mut model, &train_set, &settings)?;
        let m = evaluate_classification(&model, &test_set, 100, false)?;
        let curve: Vec<String> = report.losses.iter().map(|r| format!("{:.3}", r.loss)).collect();
        println!("  curve {}", curve.join(" "));
        let x = test_set.patches.cast::<f32>();
        let logits = model.forward_mode(&x, se2cnn::ops::BatchNormMode::Train)?;
        let correct = logits.data().iter().zip(test_set.labels.data()).filter(|(&z, &y)| (z > 0.0) == (y == 1.0)).count();
        println!("  train-mode BN accuracy {:.3}", correct as f64 / 500.0);
        println!(
            "N={n} aug={aug}: loss {:.4} acc {:.3} auc {:.3} ({:?})",
            report.losses.last().map(|r| r.loss).unwrap_or(f64::NAN),
            m.accuracy,
            m.auc.unwrap_or(f64::NAN),
            t.elapsed()
        );
    }
    Ok(())
}
