use std::time::Instant;

use birdseye::predict::eval::{evaluate, DistanceBins, EvalConfig, IntentionSource};
use birdseye::predict::models::{intention_sample, IntentionModel};
use birdseye::predict::train::{train_model, TrainConfig};
use birdseye::scenegen;

#[test]
fn scratch_intent() {
    let t0 = Instant::now();
    let world = scenegen::gen_world(42, 360).unwrap();
    let [train, _, test] = scenegen::gen_pairs_dataset(&world, [0.42, 0.0, 0.58]).unwrap();
    println!("{} train / {} test", train.len(), test.len());
    let int_samples: Vec<_> = train.iter().map(intention_sample).collect();

    let diag_bins = DistanceBins::new(vec![
        -120.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0,
    ])
    .unwrap();

    for seed in 1..=3u64 {
        let mut intent = IntentionModel::new(24, seed).unwrap();
        let cfg1 = TrainConfig {
            lr: 1e-2,
            epochs: 200,
            batch_size: 16,
            seed,
        };
        let tr1 = train_model(&mut intent, &int_samples, &cfg1).unwrap();
        let cfg2 = TrainConfig {
            lr: 2e-3,
            epochs: 200,
            batch_size: 16,
            seed: seed + 100,
        };
        let tr2 = train_model(&mut intent, &int_samples, &cfg2).unwrap();
        println!(
            "seed {seed}: CE {:.4} -> {:.4} (stage1) -> {:.4}, at {:?}",
            tr1[0],
            tr1.last().unwrap(),
            tr2.last().unwrap(),
            t0.elapsed()
        );
        let rep = evaluate(
            &test,
            Some(&IntentionSource::Model(&intent)),
            None,
            &EvalConfig {
                bins: diag_bins.clone(),
                ..EvalConfig::default()
            },
        )
        .unwrap();
        println!(
            "  overall dir {:.4} yield {:.4}",
            rep.overall_direction_accuracy.unwrap(),
            rep.overall_yield_accuracy.unwrap()
        );
        for b in &rep.bins {
            println!(
                "  bin [{:>6.1},{:>5.1}): n {:>5}  dir {:.4}  yield {:.4}",
                b.lo_m,
                b.hi_m,
                b.n_direction,
                b.direction_accuracy.unwrap_or(f64::NAN),
                b.yield_accuracy.unwrap_or(f64::NAN)
            );
        }
    }
}
