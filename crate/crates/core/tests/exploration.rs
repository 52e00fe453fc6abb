use std::collections::HashSet;

use r2n::agent::{random_action, unsup_pretrain, Collector, ReplayBuffer, SacAgent, SacConfig};
use r2n::dst::DstConfig;
use r2n::envs::Pendulum;
use r2n::rng;

/// Distinct cells of a 20 x 20 grid over (angle, angular velocity) visited in `replay[from..]`.
fn coverage(replay: &ReplayBuffer, from: usize) -> usize {
    let mut cells = HashSet::new();
    for i in from..replay.len() {
        let o = replay.obs(i);
        let theta = o[1].atan2(o[0]);
        let a = ((theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 20.0).floor() as i64;
        let v = ((o[2] + Pendulum::MAX_SPEED) / (2.0 * Pendulum::MAX_SPEED) * 20.0).floor() as i64;
        cells.insert((a.min(19), v.min(19)));
    }
    cells.len()
}

#[test]
fn state_entropy_pretraining_covers_more_than_random_actions() {
    let (warmup, steps) = (1000usize, 8000u64);
    let cfg = SacConfig {
        hidden: vec![32, 32],
        batch_size: 64,
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        ..SacConfig::default()
    };
    let mut report = Vec::new();
    for seed in 0..5u64 {
        let mut runs = Vec::new();
        for pretrain in [true, false] {
            let mut collector = Collector::new(Pendulum::new(), seed);
            let mut replay = ReplayBuffer::new(10_000, 3, 1);
            let mut r = rng::stream(seed, "explore-actions", 0);
            for _ in 0..warmup {
                let (tr, ep) = collector.step(&random_action(1, 2.0, &mut r));
                replay.push(&tr, ep, 0.0);
            }
            if pretrain {
                let mut agent = SacAgent::new(3, 1, 2.0, &cfg, &DstConfig::default(), seed).unwrap();
                unsup_pretrain(&mut agent, &mut collector, &mut replay, steps, &mut r).unwrap();
            } else {
                for _ in 0..steps {
                    let (tr, ep) = collector.step(&random_action(1, 2.0, &mut r));
                    replay.push(&tr, ep, 0.0);
                }
            }
            runs.push(coverage(&replay, warmup + steps as usize / 2));
        }
        report.push(runs);
    }
    let mean = |i: usize| report.iter().map(|r| r[i] as f64).sum::<f64>() / report.len() as f64;
    assert!(mean(0) > mean(1), "coverage [pretrained, random] per seed: {report:?}");
}
