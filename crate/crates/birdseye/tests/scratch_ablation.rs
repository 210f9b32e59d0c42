use std::collections::BTreeMap;
use std::time::Instant;

use birdseye::predict::eval::{evaluate, EvalConfig, IntentionSource, TrajectorySource};
use birdseye::predict::models::{trajectory_samples, TrajectoryMode, TrajectoryModel};
use birdseye::predict::reference::{approach_arm_of_position, ApproachReferences};
use birdseye::predict::train::{train_model, TrainConfig};
use birdseye::predict::PairEpisode;
use birdseye::scenegen;

fn refs_for<'a>(
    map: &'a mut BTreeMap<usize, ApproachReferences>,
    geom: &birdseye::predict::reference::IntersectionGeometry,
    ep: &PairEpisode,
) -> &'a ApproachReferences {
    let first = ep.pair_state(0);
    let arm = approach_arm_of_position([first.target.x, first.target.y]);
    map.entry(arm)
        .or_insert_with(|| ApproachReferences::new(geom, arm).unwrap())
}

#[test]
fn scratch() {
    let t0 = Instant::now();
    let world = scenegen::gen_world(42, 360).unwrap();
    let [train, _, test] = scenegen::gen_pairs_dataset(&world, [0.42, 0.0, 0.58]).unwrap();
    println!("{} train / {} test in {:?}", train.len(), test.len(), t0.elapsed());

    let window = 10;
    let horizon = 30;
    let stride = 5;
    let hidden = 32;
    let mut refs_by_arm: BTreeMap<usize, ApproachReferences> = BTreeMap::new();
    for mode in [
        TrajectoryMode::Plain,
        TrajectoryMode::WithIntention,
        TrajectoryMode::Conditioned,
    ] {
        let mut samples = Vec::new();
        for ep in &train {
            let refs = refs_for(&mut refs_by_arm, &world.geom, ep);
            samples
                .extend(trajectory_samples(mode, ep, window, horizon, stride, Some(refs)).unwrap());
        }
        let mut model = TrajectoryModel::new(mode, window, horizon, hidden, 7).unwrap();
        let t1 = Instant::now();
        let tr1 = train_model(
            &mut model,
            &samples,
            &TrainConfig {
                lr: 5e-3,
                epochs: 80,
                batch_size: 16,
                seed: 2,
            },
        )
        .unwrap();
        let tr2 = train_model(
            &mut model,
            &samples,
            &TrainConfig {
                lr: 1e-3,
                epochs: 80,
                batch_size: 16,
                seed: 102,
            },
        )
        .unwrap();
        let near = evaluate(
            &test,
            Some(&IntentionSource::Oracle),
            Some(&TrajectorySource::Model(&model)),
            &EvalConfig {
                stride: 5,
                route_range: Some((-10.0, 40.0)),
                ..EvalConfig::default()
            },
        )
        .unwrap();
        println!(
            "{:>14}: loss {:.5} -> {:.5} -> {:.5}, oracle near MSE {:.4} ({} w), train {:?}",
            mode.name(),
            tr1[0],
            tr1.last().unwrap(),
            tr2.last().unwrap(),
            near.overall_trajectory_mse_m2.unwrap(),
            near.n_windows,
            t1.elapsed()
        );
        for b in &near.bins {
            println!(
                "  bin [{:>5.1},{:>5.1}): nw {:>5}  mse {:.4}",
                b.lo_m,
                b.hi_m,
                b.n_windows,
                b.trajectory_mse_m2.unwrap_or(f64::NAN)
            );
        }
    }
    println!("total {:?}", t0.elapsed());
}
