//! Quick pipeline probe: trains the generic classifier in float, fixed-8,
//! and searched modes on the synthetic task and prints the outcome of each.
//!
//! cargo run --release --example probe [width_scale] [noise]

use fracbits::data::{Dataset, SynthDatasetSpec};
use fracbits::eval::GenericEvalConfig;
use fracbits::model::build_dcrnn_analogue;
use fracbits::search::{Pipeline, QuantMode, TaskSetup, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width_scale: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let noise: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.4);

    let ds_spec = SynthDatasetSpec {
        num_classes: 10,
        samples_per_class: 64,
        noise_level: noise,
        seed: 11,
        ..Default::default()
    };
    let dataset = Dataset::generate(&ds_spec).expect("dataset");
    let spec = build_dcrnn_analogue(width_scale, ds_spec.num_classes).expect("model");
    println!(
        "model: {} weights, width_scale {width_scale}, noise {noise}",
        spec.total_weights()
    );

    // Reference point: nearest clean-pattern classification on the val split.
    let patterns: Vec<Vec<f64>> = (0..ds_spec.num_classes)
        .map(|c| fracbits::data::class_pattern(c, ds_spec.time_steps, ds_spec.freq_bins))
        .collect();
    let correct = dataset
        .val_idx
        .iter()
        .filter(|&&i| {
            let x = dataset.sample(i);
            let best = (0..patterns.len())
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&patterns[a]).map(|(v, p)| (v - p) * (v - p)).sum();
                    let db: f64 = x.iter().zip(&patterns[b]).map(|(v, p)| (v - p) * (v - p)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == dataset.label(i)
        })
        .count();
    println!(
        "nearest-pattern val accuracy: {:.4}",
        correct as f64 / dataset.val_idx.len() as f64
    );

    let env = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let task = TaskSetup::Generic {
        eval: GenericEvalConfig::default(),
    };
    let base_cfg = TrainConfig {
        seed: 1,
        lr_weights: env("LR", 0.015),
        momentum: env("MOM", 0.9),
        batch_size: env("BATCH", 16.0) as usize,
        epochs_float: env("EF", 12.0) as usize,
        epochs_search: env("ES", 10.0) as usize,
        epochs_finetune: env("ET", 10.0) as usize,
        ..Default::default()
    };

    let eight_bit = Pipeline::new(spec.clone(), &dataset, task.clone(), base_cfg.clone())
        .eight_bit_bytes();
    println!("8-bit footprint: {eight_bit} B; target 50% = {} B", eight_bit / 2);

    let only_float = std::env::var("ONLY_FLOAT").is_ok();
    let modes: Vec<(&str, QuantMode)> = if only_float {
        vec![("float", QuantMode::Float)]
    } else {
        vec![
            ("float", QuantMode::Float),
            ("w8", QuantMode::Fixed { bits: 8 }),
            ("w4", QuantMode::Fixed { bits: 4 }),
            ("w3", QuantMode::Fixed { bits: 3 }),
            (
                "fracbits@50%",
                QuantMode::FracBits {
                    s_target_bytes: eight_bit / 2,
                },
            ),
        ]
    };
    for (label, mode) in modes {
        let cfg = TrainConfig {
            mode,
            ..base_cfg.clone()
        };
        let t0 = std::time::Instant::now();
        let out = Pipeline::new(spec.clone(), &dataset, task.clone(), cfg)
            .run()
            .expect("run");
        println!(
            "{label:>14}: acc {:.4} +- {:.4}, footprint {} B, {:.1}s, bits {:?}",
            out.result.accuracy,
            out.result.accuracy_std,
            out.result.footprint_bytes,
            t0.elapsed().as_secs_f64(),
            out.result.bitwidths,
        );
        for h in out.result.history.iter() {
            if h.epoch == out.result.history.iter().filter(|p| p.phase == h.phase).count() - 1
                || h.epoch % 3 == 0
            {
                println!(
                    "    {}[{}] loss {:.4} acc {:.4} fp {:.0} ({:.2}s)",
                    h.phase, h.epoch, h.train_loss, h.val_accuracy, h.footprint_bytes,
                    h.epoch_seconds
                );
            }
        }
    }
}
