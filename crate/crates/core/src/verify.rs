//! Oracle-backed self checks behind the `verify` command.
//!
//! Every check compares a production code path against an independent
//! computation (finite differences, grid search, brute-force enumeration,
//! Monte Carlo) and reports its tolerance.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::math::{
    binary_advantages, contrastive_objective_with, grpo_objective_sequence, pairwise_objective_with, pass_at_k, rcc_advantages,
    standardized_advantages, ClipFns,
};
use crate::objectives::{
    assemble_group_gradient, ratio_bundle, surrogate_objective, Granularity, ObjectiveInput, Snapshots, Variant, VariantConfig,
};
use crate::oracle::{
    estimator_variance, exact_baseline_terms, exact_expected_reward, exact_policy_gradient, exact_policy_gradient_with_baseline,
    finite_difference, BaselineRule, EnumerationSpec, VarianceSetup, VocabRestriction,
};
use crate::policy::{EvalContext, FeatureSpec, Gradient, PolicyParams, PolicySnapshot, SnapshotRole};
use crate::rollout::{build_bilateral_contexts, fallback_check, ContextConfig, ContextMode, Group};
use crate::seed::{self, SeedStream};
use crate::tokens::{EnvKind, Environment, Output, Query, Token, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, tolerance: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, tolerance: tolerance.into(), passed, detail: detail.into() }
    }

    fn from_result(name: &'static str, tolerance: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, tolerance, passed, detail),
            Err(e) => Self::new(name, tolerance, false, format!("error: {e}")),
        }
    }
}

/// Knobs for the suite. `clips` lets the mutation harness swap in broken
/// clip functions.
#[derive(Clone, Copy)]
pub struct VerifyOptions {
    pub clips: ClipFns,
    pub seed: u64,
    pub variance_trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { clips: ClipFns::default(), seed: 2024, variance_trials: 2_000 }
    }
}

/// Deliberately wrong upper clip used by the mutation harness.
pub fn mutated_clip_up(rho: f64, eps: f64) -> f64 {
    rho.min(1.0 + 2.0 * eps)
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        CheckResult::from_result("contrastive-equivalence", "1e-12", check_contrastive(opts)),
        CheckResult::from_result("binary-advantage-closed-form", "1e-10", check_binary_advantages()),
        CheckResult::from_result("optimal-baseline-grid", "1e-3 grid step", check_optimal_baseline(opts.seed)),
        CheckResult::from_result("first-order-baseline-scaling", "error ratio in [3, 5]", check_first_order(opts.seed)),
        CheckResult::from_result("policy-gradient-fd", "rel 1e-4", check_policy_fd(opts.seed)),
        CheckResult::from_result("exact-gradient-fd", "rel 1e-6", check_exact_gradient(opts.seed)),
        CheckResult::from_result("objective-gradient-fd", "rel 1e-4", check_objective_fd(opts.seed, 4)),
        CheckResult::from_result("bicc-decomposition", "1e-10", check_bicc(opts.seed)),
        CheckResult::from_result("pass-at-k-enumeration", "1e-12", check_pass_at_k()),
        CheckResult::from_result("variance-ordering", "2 standard errors", check_variance(opts)),
    ]
}

pub fn write_report<W: Write>(results: &[CheckResult], mut w: W) -> std::io::Result<()> {
    let passed = results.iter().filter(|r| r.passed).count();
    writeln!(w, "verification report: {passed}/{} checks passed", results.len())?;
    writeln!(w)?;
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        writeln!(w, "{status}  {:<30} tolerance {:<22} {}", r.name, r.tolerance, r.detail)?;
    }
    Ok(())
}

/// A mixed binary group of size `g` with ratios drawn from `[0.5, 2]`.
pub fn random_binary_group(rng: &mut SeedStream, g: usize) -> (Vec<u8>, Vec<f64>) {
    loop {
        let rewards: Vec<u8> = (0..g).map(|_| u8::from(rng.random_bool(0.5))).collect();
        if rewards.contains(&0) && rewards.contains(&1) {
            let ratios = (0..g).map(|_| rng.random_range(0.5..2.0)).collect();
            return (rewards, ratios);
        }
    }
}

/// Largest disagreement among the sequence, contrastive and pairwise forms.
pub fn contrastive_gaps(rewards: &[u8], ratios: &[f64], eps: f64, clips: ClipFns) -> Result<(f64, f64)> {
    let r: Vec<f64> = rewards.iter().map(|&b| f64::from(b)).collect();
    let adv = standardized_advantages(&r)?;
    let seq = grpo_objective_sequence(ratios, &adv.values, eps)?;
    let con = contrastive_objective_with(rewards, ratios, eps, clips)?;
    let pair = pairwise_objective_with(rewards, ratios, eps, clips)?;
    Ok(((seq - con).abs(), (con - pair).abs()))
}

fn check_contrastive(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = seed::substream(opts.seed, &[1]);
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for i in 0..1_000 {
        let g = [2, 4, 8][i % 3];
        let (rewards, ratios) = random_binary_group(&mut rng, g);
        let (x, y) = contrastive_gaps(&rewards, &ratios, 0.2, opts.clips)?;
        a = a.max(x);
        b = b.max(y);
    }
    Ok((a < 1e-12 && b < 1e-12, format!("1000 groups, max |seq-contrastive| {a:.2e}, max |contrastive-pairwise| {b:.2e}")))
}

fn check_binary_advantages() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for k in 1..8 {
        let rewards: Vec<f64> = (0..8).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
        let std = standardized_advantages(&rewards)?;
        let p = k as f64 / 8.0;
        let (ap, an) = binary_advantages(p)?;
        for (i, v) in std.values.iter().enumerate() {
            worst = worst.max((v - if i < k { ap } else { an }).abs());
        }
        let sigma = (p * (1.0 - p)).sqrt();
        worst = worst.max((p * ap - sigma).abs()).max(((1.0 - p) * an.abs() - sigma).abs());
    }
    Ok((worst < 1e-10, format!("G=8, p in 1/8..7/8, max deviation {worst:.2e}")))
}

/// Gaussian parameters around `base` with per-weight scale `sigma`.
pub fn jitter(base: &PolicyParams, sigma: f64, rng: &mut SeedStream) -> Result<PolicyParams> {
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::error::LabError::Input(e.to_string()))?;
    let w = base.weights().iter().map(|w| w + normal.sample(rng)).collect();
    PolicyParams::from_weights(*base.spec(), w)
}

fn mod_sum_spec(query: &[Token]) -> Result<EnumerationSpec> {
    let env = Environment::mod_sum();
    let q = Query::new(query.to_vec(), EnvKind::ModSum, &env.vocab)?;
    Ok(EnumerationSpec::new(env, q, env.max_output_len, VocabRestriction::Full))
}

/// Grid minimizer of `E_ref[(R - b)^2 w^2]` over `b in [0, 1]`.
pub fn grid_second_moment_argmin(params: &PolicyParams, reference: &PolicyParams, spec: &EnumerationSpec, step: f64) -> Result<f64> {
    let ctx = spec.context();
    let mut rows = Vec::new();
    for o in spec.outputs()? {
        let lr = reference.log_prob(&ctx, &o)?;
        let w = (params.log_prob(&ctx, &o)? - lr).exp();
        rows.push((lr.exp(), f64::from(spec.env.reward(&spec.query, &o)), w));
    }
    let n = (1.0 / step).round() as usize;
    let moment = |b: f64| rows.iter().map(|&(p, r, w)| p * (r - b).powi(2) * w * w).sum::<f64>();
    let best = (0..=n).map(|i| i as f64 * step).min_by(|x, y| moment(*x).total_cmp(&moment(*y))).unwrap_or(0.0);
    Ok(best)
}

fn check_optimal_baseline(seed_: u64) -> Result<(bool, String)> {
    let mut rng = seed::substream(seed_, &[3]);
    let mut worst = 0.0f64;
    let mut on_policy = 0.0f64;
    for i in 0..10 {
        let spec = mod_sum_spec(&[(i % 10) as Token, 4, 7])?;
        let reference = PolicyParams::gaussian(FeatureSpec::default(), 0.6, &mut rng)?;
        let params = jitter(&reference, 0.4, &mut rng)?;
        let terms = exact_baseline_terms(&params, &reference, &spec)?;
        let grid = grid_second_moment_argmin(&params, &reference, &spec, 1e-3)?;
        worst = worst.max((terms.optimal - grid).abs());
        let same = exact_baseline_terms(&reference, &reference, &spec)?;
        on_policy = on_policy.max((same.optimal - exact_expected_reward(&reference, &spec)?.value).abs());
    }
    Ok((worst <= 1e-3 && on_policy < 1e-12, format!("max |b* - grid| {worst:.2e}, on-policy |b* - E[R]| {on_policy:.2e}")))
}

/// `|b*_exact - (E[R] + 2 Cov)|` at perturbation scale `s` along `direction`.
pub fn first_order_error(reference: &PolicyParams, direction: &[f64], s: f64, spec: &EnumerationSpec) -> Result<f64> {
    let w = reference.weights().iter().zip(direction).map(|(a, d)| a + s * d).collect();
    let params = PolicyParams::from_weights(*reference.spec(), w)?;
    let t = exact_baseline_terms(&params, reference, spec)?;
    Ok((t.optimal - t.first_order()).abs())
}

/// Instance family for the first-order scaling study: a reference policy
/// with `correct_bias` on the right answer, moved along `drift` on that
/// answer's bias plus isotropic noise of scale `noise`.
///
/// The approximation error is `2 s^2 k3 + O(s^3)` with `k3` the joint third
/// central moment of `(R, u, u)`, `u` the directional score. Instances with
/// `|k3| < min_cumulant * E[|R - E R| (u - E u)^2]` sit where the quadratic
/// term cancels and are skipped before any error is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFamily {
    pub reference_sigma: f64,
    pub correct_bias: f64,
    pub drift: f64,
    pub noise: f64,
    pub min_cumulant: f64,
}

impl Default for ScalingFamily {
    fn default() -> Self {
        Self { reference_sigma: 0.3, correct_bias: 1.0, drift: 3.0, noise: 0.3, min_cumulant: 0.1 }
    }
}

/// `(k3, scale)` of the leading error term: `E[(R - E R)(u - E u)^2]` and
/// `E[|R - E R| (u - E u)^2]` under the reference.
pub fn leading_cumulant(reference: &PolicyParams, direction: &[f64], spec: &EnumerationSpec) -> Result<(f64, f64)> {
    let ctx = spec.context();
    let mut rows = Vec::new();
    for o in spec.outputs()? {
        let p = reference.log_prob(&ctx, &o)?.exp();
        let u: f64 = reference.log_prob_grad(&ctx, &o)?.values.iter().zip(direction).map(|(g, d)| g * d).sum();
        rows.push((p, f64::from(spec.env.reward(&spec.query, &o)), u));
    }
    let mass: f64 = rows.iter().map(|r| r.0).sum();
    let er = rows.iter().map(|r| r.0 * r.1).sum::<f64>() / mass;
    let eu = rows.iter().map(|r| r.0 * r.2).sum::<f64>() / mass;
    let k3 = rows.iter().map(|&(p, r, u)| p * (r - er) * (u - eu).powi(2)).sum::<f64>() / mass;
    let scale = rows.iter().map(|&(p, r, u)| p * (r - er).abs() * (u - eu).powi(2)).sum::<f64>() / mass;
    Ok((k3, scale))
}

/// Error ratios `e(s) / e(s/2)` over `n` screened instances at base scale
/// `s`, with the number of draws the screen skipped.
pub fn first_order_ratios(seed_: u64, n: usize, s: f64, family: ScalingFamily) -> Result<(Vec<f64>, usize)> {
    let mut rng = seed::substream(seed_, &[4]);
    let normal = Normal::new(0.0, 1.0).map_err(|e| crate::error::LabError::Input(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    let mut skipped = 0;
    let mut i = 0;
    while out.len() < n {
        i += 1;
        if i > 100 * n.max(1) {
            return crate::error::input_err("the cumulant screen rejected almost every instance");
        }
        let spec = mod_sum_spec(&[(i % 10) as Token, ((3 * i) % 10) as Token, 5])?;
        let mut reference = PolicyParams::gaussian(FeatureSpec::default(), family.reference_sigma, &mut rng)?;
        let target = spec.env.target(&spec.query).tokens[0] as usize;
        reference.set_weight(FeatureSpec::BIAS, target, family.correct_bias);
        let v = reference.spec().vocab_size();
        let mut direction: Vec<f64> = (0..reference.weights().len()).map(|_| family.noise * normal.sample(&mut rng)).collect();
        direction[FeatureSpec::BIAS * v + target] += family.drift;
        let (k3, scale) = leading_cumulant(&reference, &direction, &spec)?;
        if k3.abs() < family.min_cumulant * scale {
            skipped += 1;
            continue;
        }
        let e1 = first_order_error(&reference, &direction, s, &spec)?;
        let e2 = first_order_error(&reference, &direction, s / 2.0, &spec)?;
        out.push(e1 / e2);
    }
    Ok((out, skipped))
}

fn check_first_order(seed_: u64) -> Result<(bool, String)> {
    let (ratios, skipped) = first_order_ratios(seed_, 20, 0.02, ScalingFamily::default())?;
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    Ok((
        (3.0..=5.0).contains(&lo) && (3.0..=5.0).contains(&hi),
        format!("20 instances at scale 0.02 ({skipped} degenerate skipped), ratios in [{lo:.3}, {hi:.3}]"),
    ))
}

/// Coordinates compared by the gradient checks: the largest entries of
/// `grad` plus a seeded random sample.
pub fn probe_indices(grad: &Gradient, rng: &mut SeedStream, top: usize, random: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.values.len()).collect();
    order.sort_by(|&a, &b| grad.values[b].abs().total_cmp(&grad.values[a].abs()));
    let mut idx: Vec<usize> = order.into_iter().take(top).collect();
    for _ in 0..random {
        idx.push(rng.random_range(0..grad.values.len()));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Norm-wise relative error between analytic and numeric gradients on `idx`.
pub fn relative_error(grad: &Gradient, idx: &[usize], fd: &[f64]) -> f64 {
    let diff = idx.iter().zip(fd).map(|(&i, f)| (grad.values[i] - f).powi(2)).sum::<f64>().sqrt();
    let scale = idx.iter().map(|&i| grad.values[i].powi(2)).sum::<f64>().sqrt().max(fd.iter().map(|f| f * f).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// A random well-formed output of at most `max_len` tokens.
pub fn random_output(rng: &mut SeedStream, vocab: &Vocab, max_len: usize) -> Output {
    let body_len = rng.random_range(0..max_len);
    let mut tokens: Vec<Token> = (0..body_len)
        .map(|_| loop {
            let t = rng.random_range(0..vocab.size as Token);
            if t != vocab.eos {
                break t;
            }
        })
        .collect();
    tokens.push(vocab.eos);
    let truncated = body_len == max_len - 1 && rng.random_bool(0.5);
    Output::from_parts(tokens, truncated)
}

/// Worst relative error of `log_prob_grad` against central differences.
pub fn policy_fd_worst(seed_: u64, instances: usize) -> Result<f64> {
    let mut rng = seed::substream(seed_, &[5]);
    let vocab = Vocab::standard();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = PolicyParams::gaussian(FeatureSpec::default(), 0.5, &mut rng)?;
        let ctx_len = rng.random_range(1..20);
        let ctx = EvalContext::new((0..ctx_len).map(|_| rng.random_range(0..vocab.size as Token)).collect());
        let o = random_output(&mut rng, &vocab, 6);
        let g = p.log_prob_grad(&ctx, &o)?;
        let idx = probe_indices(&g, &mut rng, 12, 12);
        let fd = finite_difference(&p, &idx, 1e-5, |q| q.log_prob(&ctx, &o))?;
        worst = worst.max(relative_error(&g, &idx, &fd));
    }
    Ok(worst)
}

fn check_policy_fd(seed_: u64) -> Result<(bool, String)> {
    let worst = policy_fd_worst(seed_, 100)?;
    Ok((worst < 1e-4, format!("100 instances, worst relative error {worst:.2e}")))
}

fn check_exact_gradient(seed_: u64) -> Result<(bool, String)> {
    let mut rng = seed::substream(seed_, &[6]);
    let mut worst = 0.0f64;
    let mut shift = 0.0f64;
    for i in 0..8 {
        let spec = if i % 2 == 0 {
            mod_sum_spec(&[(i % 10) as Token, 2, 9])?
        } else {
            let env = Environment::copy_reverse();
            let q = Query::new(vec![(i % 10) as Token, 3], EnvKind::CopyReverse, &env.vocab)?;
            EnumerationSpec::new(env, q, 3, VocabRestriction::DigitsAndEos)
        };
        let p = PolicyParams::gaussian(FeatureSpec::default(), 0.5, &mut rng)?;
        let g = exact_policy_gradient(&p, &spec)?;
        let idx = probe_indices(&g, &mut rng, 12, 8);
        let fd = finite_difference(&p, &idx, 1e-5, |q| Ok(exact_expected_reward(q, &spec)?.value))?;
        worst = worst.max(relative_error(&g, &idx, &fd));
        if i % 2 == 0 {
            // Full support: the baseline term integrates to zero.
            let gb = exact_policy_gradient_with_baseline(&p, &spec, 0.7)?;
            shift = shift.max(g.values.iter().zip(&gb.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok((worst < 1e-6 && shift < 1e-12, format!("worst relative error {worst:.2e}, baseline shift {shift:.2e}")))
}

/// A randomized objective instance with advantages frozen at the current
/// parameters.
pub struct ObjectiveInstance {
    pub group: Group,
    pub contexts: Vec<EvalContext>,
    pub advantages: Vec<f64>,
    pub params: PolicyParams,
    pub old: PolicySnapshot,
    pub reference: PolicySnapshot,
    /// Geometric-mean ratios at `params`, frozen for the GSPO stop-gradient.
    pub frozen: Vec<f64>,
}

/// Smallest distance of any ratio the variant clips to the band edges.
pub fn clip_margin(inst: &ObjectiveInstance, cfg: &VariantConfig) -> Result<f64> {
    let (lo, hi) = cfg.clip_band();
    let q = EvalContext::from_query(&inst.group.query);
    let den = if cfg.variant == Variant::DrGrpo { &inst.reference } else { &inst.old };
    let mut ratios = Vec::new();
    for (o, ctx) in inst.group.outputs.iter().zip(&inst.contexts) {
        let num = inst.params.trajectory(ctx, o)?.token_log_probs();
        let d = den.trajectory(&q, o)?.token_log_probs();
        let logs: Vec<f64> = num.iter().zip(&d).map(|(a, b)| a - b).collect();
        match (cfg.variant, cfg.effective_granularity()) {
            (Variant::Gspo, _) => ratios.push((logs.iter().sum::<f64>() / logs.len() as f64).exp()),
            (_, Granularity::Token) => ratios.extend(logs.iter().map(|l| l.exp())),
            (_, Granularity::Sequence) => ratios.push(logs.iter().sum::<f64>().exp()),
        }
    }
    Ok(ratios.iter().map(|r| (r - lo).abs().min((r - hi).abs())).fold(f64::INFINITY, f64::min))
}

/// Builds a random copy-reverse instance; `None` when a ratio sits within
/// `margin` of a clip edge.
pub fn objective_instance(rng: &mut SeedStream, cfg: &VariantConfig, margin: f64) -> Result<Option<ObjectiveInstance>> {
    let env = Environment::copy_reverse();
    let query = env.sample_query(rng);
    let base = PolicyParams::gaussian(FeatureSpec::default(), 0.4, rng)?;
    let old = jitter(&base, 0.05, rng)?.snapshot(SnapshotRole::Old);
    let reference = jitter(&base, 0.1, rng)?.snapshot(SnapshotRole::Ref);
    let g = rng.random_range(4..=8);
    let ctx = EvalContext::from_query(&query);
    let outputs = (0..g).map(|_| old.sample(&ctx, env.max_output_len, rng)).collect::<Result<Vec<_>>>()?;
    let mut rewards: Vec<u8> = (0..g).map(|_| u8::from(rng.random_bool(0.5))).collect();
    rewards[0] = 1;
    rewards[1] = 0;
    let group = Group::new(query, outputs, rewards)?;
    let contexts = if cfg.bicc_enabled {
        ObjectiveInput::bilateral(&group, &build_bilateral_contexts(&group, &ContextConfig::default(), &env.vocab)?, vec![]).contexts
    } else {
        ObjectiveInput::unconditioned(&group, vec![]).contexts
    };
    let snaps = Snapshots { old: &old, reference: &reference };
    let bundle = ratio_bundle(&group, &contexts, &base, snaps, cfg.delta_reduction)?;
    let r = group.rewards_f64();
    let advantages = if cfg.rcc_enabled { rcc_advantages(&r, &bundle.deltas)? } else { standardized_advantages(&r)? }.values;
    let q = EvalContext::from_query(&group.query);
    let frozen = group
        .outputs
        .iter()
        .zip(&contexts)
        .map(|(o, c)| {
            let num = base.trajectory(c, o)?;
            let den = old.log_prob(&q, o)?;
            Ok(((num.log_prob() - den) / num.len() as f64).exp())
        })
        .collect::<Result<Vec<_>>>()?;
    let inst = ObjectiveInstance { group, contexts, advantages, params: base, old, reference, frozen };
    Ok((clip_margin(&inst, cfg)? > margin).then_some(inst))
}

/// Relative error of the variant gradient against central differences of
/// its value, with advantages held fixed.
pub fn objective_fd_error(inst: &ObjectiveInstance, cfg: &VariantConfig, rng: &mut SeedStream) -> Result<f64> {
    let snaps = Snapshots { old: &inst.old, reference: &inst.reference };
    let input = ObjectiveInput { group: &inst.group, contexts: inst.contexts.clone(), advantages: inst.advantages.clone() };
    let frozen = (cfg.variant == Variant::Gspo).then_some(inst.frozen.as_slice());
    let s = surrogate_objective(&input, &inst.params, snaps, cfg, frozen)?;
    let idx = probe_indices(&s.grad, rng, 12, 8);
    let fd = finite_difference(&inst.params, &idx, 1e-5, |p| Ok(surrogate_objective(&input, p, snaps, cfg, frozen)?.value))?;
    Ok(relative_error(&s.grad, &idx, &fd))
}

/// Every variant with BiCC and RCC toggled.
pub fn variant_grid() -> Vec<VariantConfig> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        for bicc in [false, true] {
            for rcc in [false, true] {
                out.push(VariantConfig { bicc_enabled: bicc, rcc_enabled: rcc, beta: 0.1, ..VariantConfig::new(v) });
            }
        }
    }
    out
}

/// `(label, instances, worst error)` for each configuration in the grid.
pub fn objective_fd_sweep(seed_: u64, per_config: usize) -> Result<Vec<(String, usize, f64)>> {
    let mut rows = Vec::new();
    for (ci, cfg) in variant_grid().iter().enumerate() {
        let mut rng = seed::substream(seed_, &[7, ci as u64]);
        let (mut n, mut worst) = (0, 0.0f64);
        let mut attempts = 0;
        while n < per_config && attempts < per_config * 20 {
            attempts += 1;
            if let Some(inst) = objective_instance(&mut rng, cfg, 1e-3)? {
                worst = worst.max(objective_fd_error(&inst, cfg, &mut rng)?);
                n += 1;
            }
        }
        let label = format!("{:?} bicc={} rcc={}", cfg.variant, cfg.bicc_enabled, cfg.rcc_enabled);
        rows.push((label, n, worst));
    }
    Ok(rows)
}

fn check_objective_fd(seed_: u64, per_config: usize) -> Result<(bool, String)> {
    let rows = objective_fd_sweep(seed_, per_config)?;
    let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let short = rows.iter().any(|r| r.1 < per_config);
    let n: usize = rows.iter().map(|r| r.1).sum();
    Ok((worst < 1e-4 && !short, format!("{n} instances over {} configurations, worst relative error {worst:.2e}", rows.len())))
}

/// `(decomposition error, zero-budget identical, fallback ok)` over random groups.
pub fn bicc_properties(seed_: u64, groups: usize) -> Result<(f64, bool, bool)> {
    let mut rng = seed::substream(seed_, &[8]);
    let env = Environment::copy_reverse();
    let (mut worst, mut identical, mut fallback_ok) = (0.0f64, true, true);
    for _ in 0..groups {
        let cfg = VariantConfig { bicc_enabled: true, ..VariantConfig::default() };
        let Some(inst) = objective_instance(&mut rng, &cfg, 0.0)? else { continue };
        let snaps = Snapshots { old: &inst.old, reference: &inst.reference };
        let bundle = ratio_bundle(&inst.group, &inst.contexts, &inst.params, snaps, cfg.delta_reduction)?;
        worst = worst.max(bundle.decomposition_error());

        let zero = ContextConfig { ratio: 0.0, ..ContextConfig::default() };
        let plain_cfg = VariantConfig { bicc_enabled: false, ..cfg };
        let with = assemble_group_gradient(&inst.group, &cfg, &zero, &env.vocab, &inst.params, snaps)?;
        let without = assemble_group_gradient(&inst.group, &plain_cfg, &zero, &env.vocab, &inst.params, snaps)?;
        identical &= with.bicc_applied && with.value.to_bits() == without.value.to_bits() && with.grad == without.grad;
        identical &= with.ratios.weights.iter().all(|&w| w == 1.0);

        for bit in [0u8, 1] {
            let g = Group::new(inst.group.query.clone(), inst.group.outputs.clone(), vec![bit; inst.group.size()])?;
            let a = assemble_group_gradient(&g, &cfg, &ContextConfig::default(), &env.vocab, &inst.params, snaps)?;
            let b = assemble_group_gradient(&g, &plain_cfg, &ContextConfig::default(), &env.vocab, &inst.params, snaps)?;
            fallback_ok &= fallback_check(&g) == ContextMode::StandardGrpo && a.fallback && !a.bicc_applied;
            fallback_ok &= a.value.to_bits() == b.value.to_bits() && a.grad == b.grad;
        }
    }
    Ok((worst, identical, fallback_ok))
}

fn check_bicc(seed_: u64) -> Result<(bool, String)> {
    let (worst, identical, fallback) = bicc_properties(seed_, 50)?;
    Ok((
        worst < 1e-10 && identical && fallback,
        format!("max |rho_c - w rho| / rho_c {worst:.2e}, zero budget identical: {identical}, fallback: {fallback}"),
    ))
}

/// Pass@k by counting k-subsets of n samples whose first `c` are correct.
pub fn pass_at_k_by_subsets(n: u64, c: u64, k: u64) -> f64 {
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if u64::from(mask.count_ones()) == k {
            total += 1;
            if mask & ((1u32 << c) - 1) != 0 {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

fn check_pass_at_k() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for n in 1..=10 {
        for c in 0..=n {
            for k in 1..=n {
                worst = worst.max((pass_at_k(n, c, k)? - pass_at_k_by_subsets(n, c, k)).abs());
            }
        }
    }
    Ok((worst < 1e-12, format!("all n <= 10, max error {worst:.2e}")))
}

/// Single-query setup with a strong reward-confidence correlation. The
/// reference splits its mass between the correct digit (0.35) and one wrong
/// digit, leaving `rest` for the other thirteen outputs; the current
/// parameters raise the correct digit through a context-window weight.
///
/// Keeping `rest` small makes the score-function norms of the two dominant
/// outputs equal, which is the regime where `E[R w^2] / E[w^2]` is also the
/// trace-variance minimizer.
pub fn correlated_variance_setup(boost: f64, rest: f64, group_size: usize) -> Result<VarianceSetup> {
    if !(rest > 0.0 && rest < 0.65) {
        return crate::error::input_err("rest mass must lie in (0, 0.65)");
    }
    let spec = mod_sum_spec(&[3, 4, 5])?;
    let target = spec.env.target(&spec.query).tokens[0] as usize;
    let rival = (target + 5) % 10;
    let fs = FeatureSpec::default();
    let z = 13.0 / rest;
    let mut reference = PolicyParams::zeros(fs);
    reference.set_weight(FeatureSpec::BIAS, target, (0.35 * z).ln());
    reference.set_weight(FeatureSpec::BIAS, rival, ((0.65 - rest) * z).ln());
    let mut params = reference.clone();
    params.set_weight(fs.bag_base() + 3, target, boost);
    Ok(VarianceSetup { spec, params, reference: reference.snapshot(SnapshotRole::Ref), group_size })
}

fn check_variance(opts: &VerifyOptions) -> Result<(bool, String)> {
    let setup = correlated_variance_setup(0.5, 0.02, 8)?;
    let report = estimator_variance(&setup, &BaselineRule::ALL, opts.variance_trials, opts.seed)?;
    let get = |r| report.rule(r).map(|x| (x.trace, x.std_error)).unwrap_or((f64::NAN, f64::NAN));
    let (opt, opt_se) = get(BaselineRule::ExactOptimal);
    let (mean, mean_se) = get(BaselineRule::GroupMean);
    let ok = opt <= mean + 2.0 * (opt_se.powi(2) + mean_se.powi(2)).sqrt();
    Ok((ok, format!("{} trials, exact-optimal {opt:.4e}, group-mean {mean:.4e}", opts.variance_trials)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_enumeration_small_cases() {
        assert_eq!(pass_at_k_by_subsets(4, 2, 2), 5.0 / 6.0);
        assert_eq!(pass_at_k_by_subsets(3, 0, 2), 0.0);
    }

    #[test]
    fn mutation_breaks_equivalence() {
        let mut rng = seed::stream(1);
        let broken = ClipFns { up: mutated_clip_up, ..ClipFns::default() };
        let mut seen = false;
        for _ in 0..50 {
            let (r, q) = random_binary_group(&mut rng, 4);
            seen |= contrastive_gaps(&r, &q, 0.2, broken).unwrap().0 > 1e-6;
        }
        assert!(seen);
    }

    #[test]
    fn report_lists_every_check() {
        let rows = vec![CheckResult::new("a", "1", true, "x"), CheckResult::new("b", "2", false, "y")];
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("1/2 checks passed") && text.contains("FAIL  b"));
    }
}
