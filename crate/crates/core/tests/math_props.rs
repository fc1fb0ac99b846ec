use grpo_lab::math::{
    binary_advantage_set, binary_advantages, contrastive_objective, covariance_estimate, optimal_baseline, pairwise_objective, pass_at_k,
    rcc_advantages, standardized_advantages,
};
use proptest::prelude::*;

// Direct clipped surrogate: mean over the group of min(rho A, clip(rho) A)
// with standardized advantages recomputed here from scratch.
fn reference_surrogate(rewards: &[u8], ratios: &[f64], eps: f64) -> f64 {
    let g = rewards.len() as f64;
    let mu = rewards.iter().map(|&r| r as f64).sum::<f64>() / g;
    let sd = (rewards.iter().map(|&r| (r as f64 - mu).powi(2)).sum::<f64>() / g).sqrt();
    rewards
        .iter()
        .zip(ratios)
        .map(|(&r, &rho)| {
            let a = (r as f64 - mu) / sd;
            (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a)
        })
        .sum::<f64>()
        / g
}

fn mixed_group() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..17)
        .prop_flat_map(|g| (prop::collection::vec(0u8..2, g), prop::collection::vec(0.3f64..2.0, g)))
        .prop_filter("both partitions", |(r, _)| r.contains(&0) && r.contains(&1))
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
}

#[test]
fn frozen_binary_advantage_values() {
    let (pos, neg) = binary_advantages(0.25).unwrap();
    assert!((pos - 3f64.sqrt()).abs() < 1e-12);
    assert!((neg + 1.0 / 3f64.sqrt()).abs() < 1e-12);
    assert!(binary_advantages(0.0).is_err());
    assert!(binary_advantages(1.0).is_err());
}

#[test]
fn frozen_pass_at_k_values() {
    // 1 - C(6,4)/C(10,4) = 1 - 15/210
    assert!((pass_at_k(10, 4, 4).unwrap() - 13.0 / 14.0).abs() < 1e-15);
    assert_eq!(pass_at_k(10, 0, 3).unwrap(), 0.0);
    assert_eq!(pass_at_k(10, 8, 3).unwrap(), 1.0);
    assert!(pass_at_k(5, 6, 1).is_err());
    assert!(pass_at_k(5, 1, 0).is_err());
    // Large n goes through the product fallback without losing precision.
    let big = pass_at_k(400, 3, 200).unwrap();
    let direct = 1.0 - (0..200).map(|i| (397 - i) as f64 / (400 - i) as f64).product::<f64>();
    assert!((big - direct).abs() < 1e-12);
}

#[test]
fn frozen_optimal_baseline() {
    // (1*1 + 0*4 + 1*9) / (1 + 4 + 9)
    let b = optimal_baseline(&[1.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((b - 10.0 / 14.0).abs() < 1e-15);
    assert!(optimal_baseline(&[1.0], &[0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn contrastive_and_pairwise_match_direct_surrogate((rewards, ratios) in mixed_group(), eps in 0.05f64..0.4) {
        let direct = reference_surrogate(&rewards, &ratios, eps);
        let c = contrastive_objective(&rewards, &ratios, eps).unwrap();
        let p = pairwise_objective(&rewards, &ratios, eps).unwrap();
        prop_assert!((direct - c).abs() < 1e-10, "direct {} contrastive {}", direct, c);
        prop_assert!((direct - p).abs() < 1e-10, "direct {} pairwise {}", direct, p);
    }

    #[test]
    fn binary_closed_form_matches_standardized(rewards in prop::collection::vec(0u8..2, 2..40)) {
        prop_assume!(rewards.contains(&0) && rewards.contains(&1));
        let r: Vec<f64> = rewards.iter().map(|&x| x as f64).collect();
        let std = standardized_advantages(&r).unwrap();
        let closed = binary_advantage_set(&rewards).unwrap();
        for (a, b) in std.values.iter().zip(&closed.values) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardized_advantages_sum_to_zero(r in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let a = standardized_advantages(&r).unwrap();
        prop_assert!(a.values.iter().sum::<f64>().abs() < 1e-9);
        if !a.degenerate {
            let m2 = a.values.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
            prop_assert!((m2 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_uniform_weights_give_group_mean(r in prop::collection::vec(0.0f64..1.0, 1..30), w in 0.1f64..10.0) {
        let b = optimal_baseline(&r, &vec![w; r.len()]).unwrap();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        prop_assert!((b - m).abs() < 1e-12);
    }

    #[test]
    fn rcc_reduces_to_centering_for_constant_delta(r in prop::collection::vec(0u8..2, 2..30), d in -5.0f64..5.0) {
        let r: Vec<f64> = r.iter().map(|&x| x as f64).collect();
        let a = rcc_advantages(&r, &vec![d; r.len()]).unwrap();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        prop_assert!(a.cov.unwrap().abs() < 1e-12);
        for (ai, ri) in a.values.iter().zip(&r) {
            prop_assert!((ai - (ri - m)).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_matches_two_pass_formula(pairs in prop::collection::vec((0.0f64..1.0, -3.0f64..3.0), 1..30)) {
        let (r, d): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = r.len() as f64;
        let e_rd = r.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / n;
        let e_r = r.iter().sum::<f64>() / n;
        let e_d = d.iter().sum::<f64>() / n;
        prop_assert!((covariance_estimate(&r, &d).unwrap() - (e_rd - e_r * e_d)).abs() < 1e-10);
    }

    #[test]
    fn pass_at_k_matches_binomials_and_is_monotone(n in 1u64..40, c_frac in 0.0f64..1.0) {
        let c = ((n as f64) * c_frac).floor() as u64;
        let mut prev = 0.0;
        for k in 1..=n {
            let v = pass_at_k(n, c, k).unwrap();
            let oracle = if n - c < k { 1.0 } else { 1.0 - choose(n - c, k) / choose(n, k) };
            prop_assert!((v - oracle).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v + 1e-12 >= prev);
            prev = v;
        }
    }
}
