//! Brute-force ground truth on tiny instances.
//!
//! Expectations are sums over every output up to a short length, weighted by
//! exact policy probabilities. Mass that falls outside the enumerated set is
//! reported, never renormalized away. The Monte-Carlo side measures the
//! variance of single-group policy-gradient estimators under different
//! baselines using paired trials.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{input_err, LabError, Result};
use crate::math::covariance_estimate;
use crate::policy::{EvalContext, Gradient, PolicyParams, PolicySnapshot, Trajectory};
use crate::seed;
use crate::tokens::{Environment, Output, Query, Token, DIGITS};

/// Hard cap on the number of enumerated outputs.
pub const ENUMERATION_CAP: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabRestriction {
    /// Only digits may appear before EOS.
    DigitsAndEos,
    /// Any non-EOS token may appear before EOS.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationSpec {
    pub env: Environment,
    pub query: Query,
    /// Longest enumerated output, EOS included. At most 3.
    pub max_len: usize,
    pub restriction: VocabRestriction,
}

impl EnumerationSpec {
    pub fn new(env: Environment, query: Query, max_len: usize, restriction: VocabRestriction) -> Self {
        Self { env, query, max_len, restriction }
    }

    fn content_tokens(&self) -> Vec<Token> {
        let eos = self.env.vocab.eos;
        match self.restriction {
            VocabRestriction::DigitsAndEos => (0..DIGITS).collect(),
            VocabRestriction::Full => (0..self.env.vocab.size as Token).filter(|&t| t != eos).collect(),
        }
    }

    /// True when the environment forces EOS at the last enumerated position.
    fn forced_tail(&self) -> bool {
        self.max_len == self.env.max_output_len
    }

    /// Number of enumerated outputs.
    pub fn count(&self) -> u64 {
        let n = self.content_tokens().len() as u64;
        (0..self.max_len as u32).map(|m| n.saturating_pow(m)).fold(0u64, u64::saturating_add)
    }

    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.max_len) {
            return input_err(format!("enumeration length must be 2 or 3, got {}", self.max_len));
        }
        if self.max_len > self.env.max_output_len {
            return input_err("enumeration length exceeds the environment's output limit");
        }
        let count = self.count();
        if count > ENUMERATION_CAP {
            return Err(LabError::EnumerationCap { count, cap: ENUMERATION_CAP });
        }
        Ok(())
    }

    /// Every output of length at most `max_len`, shortest first.
    pub fn outputs(&self) -> Result<Vec<Output>> {
        self.validate()?;
        let eos = self.env.vocab.eos;
        let content = self.content_tokens();
        let mut out = Vec::new();
        let mut bodies: Vec<Vec<Token>> = vec![vec![]];
        for m in 0..self.max_len {
            let forced = self.forced_tail() && m == self.max_len - 1;
            for body in &bodies {
                let mut tokens = body.clone();
                tokens.push(eos);
                out.push(Output::from_parts(tokens, forced));
            }
            bodies = bodies.iter().flat_map(|b| content.iter().map(move |&t| [b.as_slice(), &[t]].concat())).collect();
        }
        Ok(out)
    }

    pub fn context(&self) -> EvalContext {
        EvalContext::from_query(&self.query)
    }
}

/// An exact expectation and the probability mass it was taken over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub value: f64,
    pub mass: f64,
}

/// `sum_o pi(o|q) R(o, q)` over the enumerated outputs.
pub fn exact_expected_reward(params: &PolicyParams, spec: &EnumerationSpec) -> Result<Expectation> {
    let ctx = spec.context();
    let (mut value, mut mass) = (0.0, 0.0);
    for o in spec.outputs()? {
        let p = params.log_prob(&ctx, &o)?.exp();
        mass += p;
        value += p * f64::from(spec.env.reward(&spec.query, &o));
    }
    Ok(Expectation { value, mass })
}

/// `sum_o pi(o|q) R(o, q) grad log pi(o|q)`.
pub fn exact_policy_gradient(params: &PolicyParams, spec: &EnumerationSpec) -> Result<Gradient> {
    exact_policy_gradient_with_baseline(params, spec, 0.0)
}

/// Same with `R - baseline` in place of `R`.
pub fn exact_policy_gradient_with_baseline(params: &PolicyParams, spec: &EnumerationSpec, baseline: f64) -> Result<Gradient> {
    let ctx = spec.context();
    let mut grad = Gradient::zeros(params.spec());
    for o in spec.outputs()? {
        let traj = params.trajectory(&ctx, &o)?;
        let p = traj.log_prob().exp();
        let r = f64::from(spec.env.reward(&spec.query, &o)) - baseline;
        traj.add_score(&mut grad, p * r);
    }
    Ok(grad)
}

/// Optimal baseline and its first-order approximation under reference sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactBaseline {
    /// `E_ref[R w^2] / E_ref[w^2]` with `w = pi_theta / pi_ref`.
    pub optimal: f64,
    /// `E_ref[R]`.
    pub mean_reward: f64,
    /// `Cov_ref(R, delta)` with `delta = log w`.
    pub cov: f64,
    /// Reference mass of the enumerated set; expectations are conditional on it.
    pub mass: f64,
}

impl ExactBaseline {
    pub fn first_order(&self) -> f64 {
        self.mean_reward + 2.0 * self.cov
    }
}

pub fn exact_baseline_terms(params: &PolicyParams, reference: &PolicyParams, spec: &EnumerationSpec) -> Result<ExactBaseline> {
    let ctx = spec.context();
    let mut rows = Vec::new();
    for o in spec.outputs()? {
        let lp = params.log_prob(&ctx, &o)?;
        let lr = reference.log_prob(&ctx, &o)?;
        rows.push((lr.exp(), f64::from(spec.env.reward(&spec.query, &o)), lp - lr));
    }
    let mass: f64 = rows.iter().map(|r| r.0).sum();
    let e = |f: &dyn Fn(f64, f64) -> f64| rows.iter().map(|&(p, r, d)| p * f(r, d)).sum::<f64>() / mass;
    let optimal = e(&|r, d| r * (2.0 * d).exp()) / e(&|_, d| (2.0 * d).exp());
    let mean_reward = e(&|r, _| r);
    let mean_delta = e(&|_, d| d);
    let cov = e(&|r, d| (r - mean_reward) * (d - mean_delta));
    Ok(ExactBaseline { optimal, mean_reward, cov, mass })
}

/// `E_ref[R w^2] / E_ref[w^2]` over the enumerated outputs.
pub fn exact_optimal_baseline(params: &PolicyParams, reference: &PolicyParams, spec: &EnumerationSpec) -> Result<f64> {
    Ok(exact_baseline_terms(params, reference, spec)?.optimal)
}

/// Central finite differences of `f` at the listed parameter indices.
pub fn finite_difference<F>(params: &PolicyParams, indices: &[usize], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&PolicyParams) -> Result<f64>,
{
    indices.iter().map(|&i| Ok((f(&params.perturbed(i, h))? - f(&params.perturbed(i, -h))?) / (2.0 * h))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineRule {
    None,
    GroupMean,
    Rcc,
    ExactOptimal,
}

impl BaselineRule {
    pub const ALL: [BaselineRule; 4] = [BaselineRule::None, BaselineRule::GroupMean, BaselineRule::Rcc, BaselineRule::ExactOptimal];

    pub fn name(self) -> &'static str {
        match self {
            BaselineRule::None => "none",
            BaselineRule::GroupMean => "group-mean",
            BaselineRule::Rcc => "rcc",
            BaselineRule::ExactOptimal => "exact-optimal",
        }
    }
}

/// A single-query estimator setup: outputs are drawn from `reference` and
/// reweighted by `w = pi_theta / pi_ref`.
#[derive(Debug, Clone)]
pub struct VarianceSetup {
    pub spec: EnumerationSpec,
    pub params: PolicyParams,
    pub reference: PolicySnapshot,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleVariance {
    pub rule: BaselineRule,
    /// Trace of the per-coordinate variance of the estimator.
    pub trace: f64,
    /// Monte-Carlo standard error of `trace`.
    pub std_error: f64,
    /// Highest-variance coordinates as `(feature, token, variance)`.
    pub top: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub trials: usize,
    pub rules: Vec<RuleVariance>,
    /// `per_trial[r][t]`: squared distance of trial `t`'s estimate from rule `r`'s mean.
    pub per_trial: Vec<Vec<f64>>,
}

impl VarianceReport {
    pub fn rule(&self, rule: BaselineRule) -> Option<&RuleVariance> {
        self.rules.iter().find(|r| r.rule == rule)
    }

    fn index(&self, rule: BaselineRule) -> Result<usize> {
        self.rules.iter().position(|r| r.rule == rule).ok_or_else(|| LabError::Input(format!("rule {} not measured", rule.name())))
    }

    /// Paired test of `trace(a) < trace(b)` on the shared trials.
    pub fn paired(&self, a: BaselineRule, b: BaselineRule) -> Result<PairedTest> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let n = self.trials as f64;
        let diffs: Vec<f64> = self.per_trial[ia].iter().zip(&self.per_trial[ib]).map(|(x, y)| x - y).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std_error = (var / n).sqrt();
        let z = if std_error > 0.0 { mean / std_error } else { 0.0 };
        let normal = Normal::standard();
        Ok(PairedTest { mean_diff: mean * n / (n - 1.0), std_error: std_error * n / (n - 1.0), z, p_value: normal.cdf(z) })
    }

    /// Markdown table of the measured rules.
    pub fn to_table(&self) -> String {
        let mut s = String::from("| baseline | trace variance | std. error |\n|---|---|---|\n");
        for r in &self.rules {
            s.push_str(&format!("| {} | {:.6e} | {:.3e} |\n", r.rule.name(), r.trace, r.std_error));
        }
        s
    }
}

/// One-sided paired comparison; a small `p_value` supports `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

struct Draw {
    reward: f64,
    weight: f64,
    delta: f64,
    score: Trajectory,
}

fn draw_group(setup: &VarianceSetup, seed_: u64, trial: usize) -> Result<Vec<Draw>> {
    let mut rng = seed::substream(seed_, &[trial as u64]);
    let ctx = setup.spec.context();
    (0..setup.group_size)
        .map(|_| {
            let o = setup.reference.sample(&ctx, setup.spec.env.max_output_len, &mut rng)?;
            let score = setup.params.trajectory(&ctx, &o)?;
            let delta = score.log_prob() - setup.reference.log_prob(&ctx, &o)?;
            Ok(Draw { reward: f64::from(setup.spec.env.reward(&setup.spec.query, &o)), weight: delta.exp(), delta, score })
        })
        .collect()
}

fn group_estimate(setup: &VarianceSetup, draws: &[Draw], rule: BaselineRule, exact: f64) -> Result<Gradient> {
    let rewards: Vec<f64> = draws.iter().map(|d| d.reward).collect();
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let baseline = match rule {
        BaselineRule::None => 0.0,
        BaselineRule::GroupMean => mean,
        BaselineRule::Rcc => {
            let deltas: Vec<f64> = draws.iter().map(|d| d.delta).collect();
            mean + 2.0 * covariance_estimate(&rewards, &deltas)?
        }
        BaselineRule::ExactOptimal => exact,
    };
    let mut g = Gradient::zeros(setup.params.spec());
    let n = draws.len() as f64;
    for d in draws {
        d.score.add_score(&mut g, (d.reward - baseline) * d.weight / n);
    }
    Ok(g)
}

const CHUNK: usize = 250;

/// Monte-Carlo variance of the single-group estimator
/// `(1/G) sum_i (R_i - b) w_i grad log pi_theta(o_i)` for each baseline rule.
/// All rules see the same draws in every trial.
pub fn estimator_variance(setup: &VarianceSetup, rules: &[BaselineRule], trials: usize, seed_: u64) -> Result<VarianceReport> {
    if trials < 1_000 {
        return input_err("variance estimates need at least 1000 trials");
    }
    if setup.group_size < 2 {
        return input_err("group size must be at least 2");
    }
    let exact = exact_optimal_baseline(&setup.params, &setup.reference, &setup.spec)?;
    let dim = setup.params.spec().num_params();
    let chunks: Vec<(usize, usize)> = (0..trials).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(trials))).collect();
    let estimates = |t: usize| -> Result<Vec<Gradient>> {
        let draws = draw_group(setup, seed_, t)?;
        rules.iter().map(|&r| group_estimate(setup, &draws, r, exact)).collect()
    };

    // Pass 1: means, summed chunk by chunk in a fixed order.
    let partial: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|&(a, b)| -> Result<Vec<Vec<f64>>> {
            let mut sums = vec![vec![0.0; dim]; rules.len()];
            for t in a..b {
                for (s, g) in sums.iter_mut().zip(estimates(t)?) {
                    s.iter_mut().zip(&g.values).for_each(|(x, y)| *x += y);
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut means = vec![vec![0.0; dim]; rules.len()];
    for sums in &partial {
        for (m, s) in means.iter_mut().zip(sums) {
            m.iter_mut().zip(s).for_each(|(x, y)| *x += y);
        }
    }
    means.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x /= trials as f64));

    // Pass 2: regenerate the same draws; squared deviations per trial and per coordinate.
    type Chunk = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let second: Vec<Chunk> = chunks
        .par_iter()
        .map(|&(a, b)| -> Result<Chunk> {
            let mut per_trial = vec![Vec::with_capacity(b - a); rules.len()];
            let mut coord = vec![vec![0.0; dim]; rules.len()];
            for t in a..b {
                for (r, g) in estimates(t)?.into_iter().enumerate() {
                    let mut sq = 0.0;
                    for ((c, x), m) in coord[r].iter_mut().zip(&g.values).zip(&means[r]) {
                        let d = (x - m) * (x - m);
                        *c += d;
                        sq += d;
                    }
                    per_trial[r].push(sq);
                }
            }
            Ok((per_trial, coord))
        })
        .collect::<Result<_>>()?;

    let mut per_trial = vec![Vec::with_capacity(trials); rules.len()];
    let mut coord = vec![vec![0.0; dim]; rules.len()];
    for (pt, co) in second {
        for r in 0..rules.len() {
            per_trial[r].extend_from_slice(&pt[r]);
            coord[r].iter_mut().zip(&co[r]).for_each(|(x, y)| *x += y);
        }
    }
    let n = trials as f64;
    let v = setup.params.spec().vocab_size();
    let rules_out = rules
        .iter()
        .enumerate()
        .map(|(r, &rule)| {
            let mean_sq = per_trial[r].iter().sum::<f64>() / n;
            let var_sq = per_trial[r].iter().map(|s| (s - mean_sq).powi(2)).sum::<f64>() / (n - 1.0);
            let mut top: Vec<(usize, usize, f64)> =
                coord[r].iter().enumerate().filter(|(_, &c)| c > 0.0).map(|(i, &c)| (i / v, i % v, c / (n - 1.0))).collect();
            top.sort_by(|a, b| b.2.total_cmp(&a.2));
            top.truncate(5);
            RuleVariance { rule, trace: mean_sq * n / (n - 1.0), std_error: (var_sq / n).sqrt() * n / (n - 1.0), top }
        })
        .collect();
    Ok(VarianceReport { trials, rules: rules_out, per_trial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FeatureSpec, SnapshotRole};
    use crate::tokens::{EnvKind, Vocab};

    fn mod_sum_spec(restriction: VocabRestriction) -> EnumerationSpec {
        let env = Environment::mod_sum();
        let q = Query::new(vec![3, 4, 5], EnvKind::ModSum, &Vocab::standard()).unwrap();
        EnumerationSpec::new(env, q, 2, restriction)
    }

    #[test]
    fn uniform_mod_sum_expected_reward() {
        let p = PolicyParams::zeros(FeatureSpec::default());
        let e = exact_expected_reward(&p, &mod_sum_spec(VocabRestriction::DigitsAndEos)).unwrap();
        assert!((e.value - 1.0 / 15.0).abs() < 1e-15);
        assert!((e.mass - 11.0 / 15.0).abs() < 1e-12);
        let full = exact_expected_reward(&p, &mod_sum_spec(VocabRestriction::Full)).unwrap();
        assert!((full.mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_scores_one() {
        let spec = mod_sum_spec(VocabRestriction::Full);
        let mut p = PolicyParams::zeros(FeatureSpec::default());
        p.set_weight(FeatureSpec::BIAS, 2, 60.0);
        assert_eq!(exact_expected_reward(&p, &spec).unwrap().value, 1.0);
        let mut wrong = PolicyParams::zeros(FeatureSpec::default());
        wrong.set_weight(FeatureSpec::BIAS, 7, 60.0);
        assert!(exact_expected_reward(&wrong, &spec).unwrap().value < 1e-20);
    }

    #[test]
    fn enumeration_counts_and_cap() {
        let spec = mod_sum_spec(VocabRestriction::Full);
        assert_eq!(spec.outputs().unwrap().len(), 15);
        let env = Environment::copy_reverse();
        let q = Query::new(vec![1, 2], EnvKind::CopyReverse, &Vocab::standard()).unwrap();
        let s3 = EnumerationSpec::new(env, q.clone(), 3, VocabRestriction::DigitsAndEos);
        assert_eq!(s3.outputs().unwrap().len(), 111);
        assert!(s3.outputs().unwrap().iter().all(|o| !o.truncated));
        assert!(EnumerationSpec::new(env, q, 4, VocabRestriction::Full).outputs().is_err());
    }

    #[test]
    fn on_policy_baseline_is_expected_reward() {
        let spec = mod_sum_spec(VocabRestriction::Full);
        let p = PolicyParams::gaussian(FeatureSpec::default(), 0.5, &mut seed::stream(3)).unwrap();
        let b = exact_optimal_baseline(&p, &p, &spec).unwrap();
        let e = exact_expected_reward(&p, &spec).unwrap();
        assert!((b - e.value).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_has_zero_gradient() {
        let env = Environment::mod_sum();
        let q = Query::new(vec![1, 1, 1], EnvKind::ModSum, &Vocab::standard()).unwrap();
        let spec = EnumerationSpec::new(env, q, 2, VocabRestriction::Full);
        let p = PolicyParams::gaussian(FeatureSpec::default(), 0.5, &mut seed::stream(4)).unwrap();
        // Shifting the reward by a constant leaves the exact gradient unchanged,
        // so R - R = 0 everywhere gives the zero vector up to rounding.
        let g0 = exact_policy_gradient(&p, &spec).unwrap();
        let g1 = exact_policy_gradient_with_baseline(&p, &spec, 3.0).unwrap();
        for (a, b) in g0.values.iter().zip(&g1.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_rejects_small_trials() {
        let spec = mod_sum_spec(VocabRestriction::Full);
        let p = PolicyParams::zeros(FeatureSpec::default());
        let setup = VarianceSetup { spec, params: p.clone(), reference: p.snapshot(SnapshotRole::Ref), group_size: 4 };
        assert!(estimator_variance(&setup, &BaselineRule::ALL, 10, 0).is_err());
    }
}
