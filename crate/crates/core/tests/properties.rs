use ndarray::Array2;
use proptest::prelude::*;

use r2n::agent::ReplayBuffer;
use r2n::dst::{topology_update, DstConfig, DstRule, SparsityMask};
use r2n::envs::{noise_feature_count, Transition};
use r2n::harness::{auc, welch_t, Alternative};
use r2n::nn::{Activation, Layer};
use r2n::preference::{ce_loss, logistic};
use r2n::rng;

fn transition(step: usize, done: bool) -> Transition {
    Transition {
        state: vec![step as f64],
        action: vec![0.0],
        next_state: vec![step as f64 + 1.0],
        reward: step as f64,
        done,
        step,
    }
}

proptest! {
    #[test]
    fn dynamic_rules_conserve_active_count(
        seed in 0u64..10_000,
        rows in 2usize..12,
        cols in 2usize..12,
        sparsity in 0.5f64..0.9,
        drop in 0.05f64..0.5,
        set in any::<bool>(),
    ) {
        let mut r = rng::stream(seed, "prop-layer", 0);
        let mask = SparsityMask::random(rows, cols, sparsity, &mut r).unwrap();
        let active = mask.active_count();
        prop_assume!(active > 0 && (drop * active as f64).round() as usize <= rows * cols - active);
        let w = r2n::dst::uniform_matrix((rows, cols), 1.0, &mut r);
        let g = r2n::dst::uniform_matrix((rows, cols), 1.0, &mut r);
        let mut layer = Layer::new(w, ndarray::Array1::zeros(rows), Activation::Relu).unwrap();
        layer.set_mask(mask).unwrap();
        let cfg = DstConfig {
            rule: if set { DstRule::Set } else { DstRule::R2nRigl },
            sparsity,
            drop_fraction: drop,
            ..DstConfig::default()
        };
        for _ in 0..3 {
            let change = topology_update(&mut layer, &cfg, Some(&g), &mut r).unwrap();
            prop_assert_eq!(change.pruned.len(), change.grown.len());
            prop_assert!(change.grown.iter().all(|p| !change.pruned.contains(p)));
            let m = layer.mask.as_ref().unwrap();
            prop_assert_eq!(m.active_count(), active);
            for ((i, j), &k) in m.as_array().indexed_iter() {
                if !k {
                    prop_assert_eq!(layer.weights[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn segment_windows_stay_inside_episodes(lens in prop::collection::vec(1usize..30, 1..6), k in 1usize..12) {
        let total: usize = lens.iter().sum();
        let mut replay = ReplayBuffer::new(total, 1, 1);
        for (ep, &len) in lens.iter().enumerate() {
            for t in 0..len {
                replay.push(&transition(t, t + 1 == len), ep as u64, 0.0);
            }
        }
        let starts = replay.segment_starts(k);
        let expected: usize = lens.iter().map(|&l| (l + 1).saturating_sub(k)).sum();
        prop_assert_eq!(starts.len(), expected);
        for s in starts {
            prop_assert!(s + k <= replay.len());
            prop_assert!((s..s + k).all(|i| replay.episode(i) == replay.episode(s)));
        }
    }

    #[test]
    fn preference_probability_is_complementary(x in -700.0f64..700.0) {
        prop_assert!((logistic(x) + logistic(-x) - 1.0).abs() <= 1e-12);
        let (l1, g1) = ce_loss(x, 1.0);
        let (l0, g0) = ce_loss(x, 0.0);
        prop_assert!(l1.is_finite() && l0.is_finite() && l1 >= 0.0 && l0 >= 0.0);
        prop_assert!((g1 - g0 + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn welch_alternatives_are_complementary(
        a in prop::collection::vec(-10.0f64..10.0, 2..8),
        b in prop::collection::vec(-10.0f64..10.0, 2..8),
    ) {
        let spread = |v: &[f64]| v.iter().any(|x| (x - v[0]).abs() > 1e-6);
        prop_assume!(spread(&a) || spread(&b));
        let g = welch_t(&a, &b, Alternative::Greater).unwrap();
        let l = welch_t(&a, &b, Alternative::Less).unwrap();
        let swapped = welch_t(&b, &a, Alternative::Greater).unwrap();
        prop_assert!((g.p + l.p - 1.0).abs() < 1e-9);
        prop_assert!((g.t + swapped.t).abs() < 1e-9);
        prop_assert!((g.p - (1.0 - swapped.p)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&g.p));
    }

    #[test]
    fn auc_of_constant_curve_is_rectangle(c in -100.0f64..100.0, n in 2usize..10, dx in 1u64..5000) {
        let pts: Vec<(f64, f64)> = (0..n as u64).map(|i| ((i * dx) as f64, c)).collect();
        let area = auc(&pts).unwrap();
        prop_assert!((area - c * ((n as u64 - 1) * dx) as f64).abs() <= 1e-9 * (1.0 + area.abs()));
    }

    #[test]
    fn noise_count_reaches_requested_fraction(d in 1usize..40, tenths in 0u32..10) {
        let nf = tenths as f64 / 10.0;
        let n = noise_feature_count(d, nf).unwrap();
        let frac = n as f64 / (n + d) as f64;
        prop_assert!(frac + 1e-12 >= nf);
        if n > 0 {
            prop_assert!(((n - 1) as f64 / (n - 1 + d) as f64) < nf);
        }
    }
}

#[test]
fn dropconnect_eval_scaling_matches_expected_weights() {
    let w = Array2::from_elem((3, 4), 2.0);
    let scaled = r2n::dst::dropconnect_eval_weights(&w, 0.25);
    assert!(scaled.iter().all(|&x| (x - 1.5).abs() < 1e-15));
}
