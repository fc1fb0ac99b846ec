//! Advantage estimators, clip functions, the contrastive and pairwise forms of
//! the clipped objective, baselines and Pass@k.
//!
//! Everything here is a pure function on slices of `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageScheme {
    Standardized,
    BinaryClosedForm,
    Rcc,
}

/// Per-output advantages together with the group statistics that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub scheme: AdvantageScheme,
    pub mean: f64,
    /// Population standard deviation; `None` for schemes that do not divide by it.
    pub std: Option<f64>,
    pub p_hat: f64,
    pub cov: Option<f64>,
    /// Zero reward variance; all advantages were set to zero.
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn proportion(rewards: &[f64]) -> f64 {
    rewards.iter().filter(|&&r| r > 0.5).count() as f64 / rewards.len() as f64
}

/// `A_i = (r_i - mean) / std` with the population standard deviation.
/// Zero-variance groups get all-zero advantages and the degenerate flag.
pub fn standardized_advantages(rewards: &[f64]) -> Result<AdvantageSet> {
    if rewards.is_empty() {
        return input_err("standardized advantages need at least one reward");
    }
    let mu = mean(rewards);
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / rewards.len() as f64;
    let sigma = var.sqrt();
    let degenerate = sigma == 0.0;
    let values = if degenerate { vec![0.0; rewards.len()] } else { rewards.iter().map(|r| (r - mu) / sigma).collect() };
    Ok(AdvantageSet {
        values,
        scheme: AdvantageScheme::Standardized,
        mean: mu,
        std: Some(sigma),
        p_hat: proportion(rewards),
        cov: None,
        degenerate,
    })
}

/// Closed-form binary-reward advantages `(A+, A-)` for success rate `p_hat`.
pub fn binary_advantages(p_hat: f64) -> Result<(f64, f64)> {
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(LabError::Degenerate(format!("binary advantages are undefined at p_hat = {p_hat}; use the standard-GRPO fallback")));
    }
    Ok((((1.0 - p_hat) / p_hat).sqrt(), -(p_hat / (1.0 - p_hat)).sqrt()))
}

/// Closed-form advantages expanded over a reward vector.
pub fn binary_advantage_set(rewards: &[u8]) -> Result<AdvantageSet> {
    if rewards.is_empty() {
        return input_err("empty reward vector");
    }
    let p = rewards.iter().filter(|&&r| r == 1).count() as f64 / rewards.len() as f64;
    let (pos, neg) = binary_advantages(p)?;
    Ok(AdvantageSet {
        values: rewards.iter().map(|&r| if r == 1 { pos } else { neg }).collect(),
        scheme: AdvantageScheme::BinaryClosedForm,
        mean: p,
        std: Some((p * (1.0 - p)).sqrt()),
        p_hat: p,
        cov: None,
        degenerate: false,
    })
}

/// `min(rho, 1 + eps)`.
pub fn clip_up(rho: f64, eps: f64) -> f64 {
    rho.min(1.0 + eps)
}

/// `max(rho, 1 - eps)`.
pub fn clip_low(rho: f64, eps: f64) -> f64 {
    rho.max(1.0 - eps)
}

/// The pair of one-sided clip functions used by the contrastive forms.
#[derive(Clone, Copy)]
pub struct ClipFns {
    pub up: fn(f64, f64) -> f64,
    pub low: fn(f64, f64) -> f64,
}

impl Default for ClipFns {
    fn default() -> Self {
        Self { up: clip_up, low: clip_low }
    }
}

/// One clipped-surrogate term `min(rho A, clip(rho, lo, hi) A)` with the
/// branch that produced it. Ties select the unclipped branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedTerm {
    pub value: f64,
    pub unclipped: bool,
}

pub fn clipped_term(rho: f64, adv: f64, lo: f64, hi: f64) -> ClippedTerm {
    let raw = rho * adv;
    let clipped = rho.clamp(lo, hi) * adv;
    if raw <= clipped {
        ClippedTerm { value: raw, unclipped: true }
    } else {
        ClippedTerm { value: clipped, unclipped: false }
    }
}

fn check_aligned(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return input_err(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return input_err("empty input");
    }
    Ok(())
}

/// Sequence-granularity clipped surrogate `(1/G) sum_i min(rho_i A_i, clip(rho_i) A_i)`.
pub fn grpo_objective_sequence(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    check_aligned(ratios, advantages)?;
    let total: f64 = ratios.iter().zip(advantages).map(|(&r, &a)| clipped_term(r, a, 1.0 - eps, 1.0 + eps).value).sum();
    Ok(total / ratios.len() as f64)
}

/// Same objective through the one-sided clip functions: `A C_up(rho)` for
/// positive advantages and `A C_low(rho)` for negative ones.
pub fn grpo_objective_sequence_one_sided(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    check_aligned(ratios, advantages)?;
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            if a > 0.0 {
                a * clip_up(r, eps)
            } else if a < 0.0 {
                a * clip_low(r, eps)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / ratios.len() as f64)
}

struct Partitioned {
    sigma: f64,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

fn partition_ratios(rewards: &[u8], ratios: &[f64]) -> Result<Partitioned> {
    if rewards.len() != ratios.len() {
        return input_err("rewards and ratios differ in length");
    }
    let pos: Vec<f64> = rewards.iter().zip(ratios).filter(|(&r, _)| r == 1).map(|(_, &x)| x).collect();
    let neg: Vec<f64> = rewards.iter().zip(ratios).filter(|(&r, _)| r != 1).map(|(_, &x)| x).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(LabError::Degenerate("contrastive form needs both partitions; use the standard-GRPO fallback".into()));
    }
    let p = pos.len() as f64 / rewards.len() as f64;
    Ok(Partitioned { sigma: (p * (1.0 - p)).sqrt(), pos, neg })
}

/// `sigma_q * (mean_i C_up(rho_i+) - mean_j C_low(rho_j-))`.
pub fn contrastive_objective(rewards: &[u8], ratios: &[f64], eps: f64) -> Result<f64> {
    contrastive_objective_with(rewards, ratios, eps, ClipFns::default())
}

pub fn contrastive_objective_with(rewards: &[u8], ratios: &[f64], eps: f64, clips: ClipFns) -> Result<f64> {
    let p = partition_ratios(rewards, ratios)?;
    let up = p.pos.iter().map(|&r| (clips.up)(r, eps)).sum::<f64>() / p.pos.len() as f64;
    let low = p.neg.iter().map(|&r| (clips.low)(r, eps)).sum::<f64>() / p.neg.len() as f64;
    Ok(p.sigma * (up - low))
}

/// `sum_ij A_ij (C_up(rho_i+) - C_low(rho_j-))` with `A_ij = sigma_q / (G+ G-)`.
pub fn pairwise_objective(rewards: &[u8], ratios: &[f64], eps: f64) -> Result<f64> {
    pairwise_objective_with(rewards, ratios, eps, ClipFns::default())
}

pub fn pairwise_objective_with(rewards: &[u8], ratios: &[f64], eps: f64, clips: ClipFns) -> Result<f64> {
    let p = partition_ratios(rewards, ratios)?;
    let a_ij = p.sigma / (p.pos.len() * p.neg.len()) as f64;
    let mut total = 0.0;
    for &rp in &p.pos {
        for &rn in &p.neg {
            total += a_ij * ((clips.up)(rp, eps) - (clips.low)(rn, eps));
        }
    }
    Ok(total)
}

/// Variance-minimizing baseline under importance weights:
/// `sum r_j w_j^2 / sum w_j^2`.
pub fn optimal_baseline(rewards: &[f64], weights: &[f64]) -> Result<f64> {
    check_aligned(rewards, weights)?;
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return input_err("importance weights must be positive and finite");
    }
    let num: f64 = rewards.iter().zip(weights).map(|(r, w)| r * w * w).sum();
    let den: f64 = weights.iter().map(|w| w * w).sum();
    Ok(num / den)
}

/// Population covariance `(1/G) sum (r_i - R)(d_i - D)`.
pub fn covariance_estimate(rewards: &[f64], deltas: &[f64]) -> Result<f64> {
    check_aligned(rewards, deltas)?;
    let (mr, md) = (mean(rewards), mean(deltas));
    Ok(rewards.iter().zip(deltas).map(|(r, d)| (r - mr) * (d - md)).sum::<f64>() / rewards.len() as f64)
}

/// `A_i = r_i - R - 2 Cov(R, delta)`, with no division by the reward spread.
pub fn rcc_advantages(rewards: &[f64], deltas: &[f64]) -> Result<AdvantageSet> {
    let cov = covariance_estimate(rewards, deltas)?;
    let mu = mean(rewards);
    let baseline = mu + 2.0 * cov;
    Ok(AdvantageSet {
        values: rewards.iter().map(|r| r - baseline).collect(),
        scheme: AdvantageScheme::Rcc,
        mean: mu,
        std: None,
        p_hat: proportion(rewards),
        cov: Some(cov),
        degenerate: rewards.iter().all(|&r| r == rewards[0]),
    })
}

/// Exact weighted baseline next to its first-order covariance approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineApprox {
    pub exact: f64,
    pub approx: f64,
    pub abs_error: f64,
}

/// Compares `optimal_baseline(r, exp(scale * delta))` with
/// `mean(r) + 2 Cov(r, scale * delta)`.
pub fn first_order_baseline_error(rewards: &[f64], deltas: &[f64], scale: f64) -> Result<BaselineApprox> {
    check_aligned(rewards, deltas)?;
    if !(scale > 0.0) {
        return input_err("scale must be positive");
    }
    let scaled: Vec<f64> = deltas.iter().map(|d| scale * d).collect();
    let weights: Vec<f64> = scaled.iter().map(|d| d.exp()).collect();
    let exact = optimal_baseline(rewards, &weights)?;
    let shift = mean(&scaled);
    let centered: Vec<f64> = scaled.iter().map(|d| d - shift).collect();
    let approx = mean(rewards) + 2.0 * covariance_estimate(rewards, &centered)?;
    Ok(BaselineApprox { exact, approx, abs_error: (exact - approx).abs() })
}

fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        // c * (n - i) is divisible by (i + 1) at every step.
        c = c.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(c)
}

/// Unbiased Pass@k estimate `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return input_err(format!("pass@k requires 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})"));
    }
    if n - c < k {
        return Ok(1.0);
    }
    match (binomial_u128(n - c, k), binomial_u128(n, k)) {
        (Some(miss), Some(all)) => {
            // Exact integer complement keeps the estimate exact before the final division.
            Ok((all - miss) as f64 / all as f64)
        }
        _ => {
            let miss: f64 = (0..k).map(|i| (n - c - i) as f64 / (n - i) as f64).product();
            Ok(1.0 - miss)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn standardized_examples() {
        let a = standardized_advantages(&[1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert!(close(a.values[0], 1.732051, 1e-6) && close(a.values[2], -0.577350, 1e-6));
        assert!(close(a.values.iter().sum::<f64>(), 0.0, 1e-10));
        assert_eq!(standardized_advantages(&[1., 0.]).unwrap().values, vec![1.0, -1.0]);
        let d = standardized_advantages(&[1., 1., 1.]).unwrap();
        assert!(d.degenerate && d.values.iter().all(|&x| x == 0.0));
        assert!(standardized_advantages(&[]).is_err());
    }

    #[test]
    fn binary_examples() {
        assert_eq!(binary_advantages(0.5).unwrap(), (1.0, -1.0));
        let (p, n) = binary_advantages(0.25).unwrap();
        assert!(close(p, 3f64.sqrt(), 1e-15) && close(n, -1.0 / 3f64.sqrt(), 1e-15));
        assert!(matches!(binary_advantages(0.0), Err(LabError::Degenerate(_))));
        assert!(binary_advantages(1.0).is_err());
    }

    #[test]
    fn clip_examples() {
        assert!(close(clip_up(1.5, 0.2), 1.2, 1e-15));
        assert!(close(clip_low(0.7, 0.2), 0.8, 1e-15));
        assert_eq!(clip_up(0.9, 0.2), 0.9);
    }

    #[test]
    fn sequence_objective_examples() {
        let a = standardized_advantages(&[1., 0., 0., 1., 0.]).unwrap();
        let v = grpo_objective_sequence(&[1.0; 5], &a.values, 0.2).unwrap();
        assert!(v.abs() < 1e-15);
        assert!(close(grpo_objective_sequence(&[1.5], &[1.0], 0.2).unwrap(), 1.2, 1e-15));
        assert!(grpo_objective_sequence(&[1.0], &[1.0, 2.0], 0.2).is_err());
    }

    #[test]
    fn tie_selects_unclipped_branch() {
        let t = clipped_term(1.2, 1.0, 0.8, 1.2);
        assert!(t.unclipped);
        assert!(!clipped_term(1.3, 1.0, 0.8, 1.2).unclipped);
        assert!(!clipped_term(0.7, -1.0, 0.8, 1.2).unclipped);
        assert!(clipped_term(0.7, 1.0, 0.8, 1.2).unclipped);
    }

    #[test]
    fn contrastive_examples() {
        let v = contrastive_objective(&[1, 0], &[1.1, 0.9], 0.2).unwrap();
        assert!(close(v, 0.1, 1e-12));
        assert!(contrastive_objective(&[1, 0, 0], &[1.0, 1.0, 1.0], 0.2).unwrap().abs() < 1e-15);
        assert!(contrastive_objective(&[1, 1], &[1.0, 1.0], 0.2).is_err());
        // single pair: A_11 = sigma_q
        let v = pairwise_objective(&[1, 0], &[1.1, 0.9], 0.2).unwrap();
        assert!(close(v, 0.5 * 0.2, 1e-12));
    }

    #[test]
    fn mean_difference_identity() {
        let (a, b) = ([1.0, 2.0], [0.5]);
        let md = (a[0] + a[1]) / 2.0 - b[0];
        let pw: f64 = a.iter().flat_map(|x| b.iter().map(move |y| x - y)).sum::<f64>() / 2.0;
        assert_eq!(md, 1.0);
        assert_eq!(pw, 1.0);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(optimal_baseline(&[1., 0., 0., 1.], &[1.; 4]).unwrap(), 0.5);
        assert!(close(optimal_baseline(&[1., 0.], &[2., 1.]).unwrap(), 0.8, 1e-15));
        assert!(optimal_baseline(&[1.], &[0.]).is_err());
    }

    #[test]
    fn covariance_examples() {
        let r = [1., 0., 1., 0.];
        assert!(close(covariance_estimate(&r, &[0.2, -0.1, 0.1, 0.0]).unwrap(), 0.05, 1e-15));
        assert_eq!(covariance_estimate(&r, &[0.3; 4]).unwrap(), 0.0);
        assert!(close(covariance_estimate(&r, &r).unwrap(), 0.25, 1e-15));
        assert!(covariance_estimate(&r, &[0.0; 3]).is_err());
    }

    #[test]
    fn rcc_examples() {
        let r = [1., 0., 1., 0.];
        let a = rcc_advantages(&r, &[0.2, -0.1, 0.1, 0.0]).unwrap();
        for (x, y) in a.values.iter().zip([0.4, -0.6, 0.4, -0.6]) {
            assert!(close(*x, y, 1e-12));
        }
        assert_eq!(a.std, None);
        let z = rcc_advantages(&r, &[0.7; 4]).unwrap();
        assert_eq!(z.values, vec![0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn first_order_on_policy_case() {
        let e = first_order_baseline_error(&[1., 0., 1., 1.], &[0.0; 4], 1.0).unwrap();
        assert_eq!((e.exact, e.approx, e.abs_error), (0.75, 0.75, 0.0));
        let e = first_order_baseline_error(&[1., 0., 0., 1., 0.], &[0.3, -0.2, 0.1, -0.4, 0.2], 1e-3).unwrap();
        assert!(e.abs_error < 1e-5);
    }

    #[test]
    fn pass_at_k_examples() {
        assert!(close(pass_at_k(4, 2, 2).unwrap(), 1.0 - 1.0 / 6.0, 1e-15));
        assert_eq!(pass_at_k(5, 0, 3).unwrap(), 0.0);
        assert_eq!(pass_at_k(5, 5, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k(6, 1, 6).unwrap(), 1.0);
        assert_eq!(pass_at_k(6, 0, 6).unwrap(), 0.0);
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 1, 4).is_err());
        // overflow path
        let v = pass_at_k(400, 3, 150).unwrap();
        assert!(v > 0.0 && v <= 1.0);
    }
}
