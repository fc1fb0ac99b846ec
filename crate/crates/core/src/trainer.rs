//! Training loop: snapshots, group batching, AdamW updates and diagnostics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::{covariance_estimate, pass_at_k};
use crate::objectives::{assemble_group_gradient, ObjectiveReport, Snapshots, VariantConfig};
use crate::policy::{EvalContext, FeatureSpec, Gradient, Init, PolicyParams, PolicySnapshot, SnapshotRole};
use crate::rollout::{rollout_group, ContextConfig, Group};
use crate::seed;
use crate::tokens::{EnvKind, Environment, Query, Vocab};

const TAG_INIT: u64 = 1;
const TAG_DATASET: u64 = 2;
const TAG_QUERIES: u64 = 3;
const TAG_ROLLOUT: u64 = 4;
const TAG_EVAL: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub window: usize,
    pub max_position: usize,
    pub init: Init,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { window: FeatureSpec::DEFAULT_WINDOW, max_position: FeatureSpec::DEFAULT_MAX_POSITION, init: Init::Zeros }
    }
}

impl PolicyConfig {
    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec::new(Vocab::standard(), self.max_position, self.window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per evaluation query.
    pub samples: u64,
    pub ks: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 32, ks: vec![1, 2, 4, 8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub variant: VariantConfig,
    pub context: ContextConfig,
    pub policy: PolicyConfig,
    pub group_size: usize,
    pub queries_per_step: usize,
    pub steps: usize,
    /// Sized for a feature table, far above what large models use.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Steps between behaviour-snapshot refreshes. 1 is on-policy.
    pub snapshot_refresh: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Fixed pool of training queries drawn once from the seed.
    pub dataset_size: usize,
    /// Groups pooled into the running covariance diagnostic.
    pub cov_window: usize,
    pub eval: EvalConfig,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::ModSum,
            variant: VariantConfig::default(),
            context: ContextConfig::default(),
            policy: PolicyConfig::default(),
            group_size: 8,
            queries_per_step: 4,
            steps: 300,
            learning_rate: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            snapshot_refresh: 1,
            eval_interval: 50,
            seed: 0,
            dataset_size: 8,
            cov_window: 16,
            eval: EvalConfig::default(),
            workers: 1,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Config(msg.into()))
}

impl TrainConfig {
    pub fn environment(&self) -> Environment {
        Environment::new(self.env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return config_err(format!("group-size must be at least 2, got {}", self.group_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!("learning-rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("queries-per-step", self.queries_per_step),
            ("snapshot-refresh", self.snapshot_refresh),
            ("eval-interval", self.eval_interval),
            ("dataset-size", self.dataset_size),
            ("cov-window", self.cov_window),
            ("workers", self.workers),
        ] {
            if v < 1 {
                return config_err(format!("{name} must be at least 1"));
            }
        }
        for (name, b) in [("adam-beta1", self.adam_beta1), ("adam-beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config_err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return config_err("adam-eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return config_err("weight-decay must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return config_err("grad-clip must be positive");
        }
        self.variant.validate().map_err(|e| LabError::Config(format!("variant: {e}")))?;
        self.context.validate().map_err(|e| LabError::Config(format!("context: {e}")))?;
        let (_, q_max) = self.environment().query_len_range();
        let needed = q_max + 1 + self.context.budget();
        if needed > self.context.max_context {
            return config_err(format!(
                "context.max-context {} is below query length {q_max} + separator + budget {}",
                self.context.max_context,
                self.context.budget()
            ));
        }
        if self.policy.max_position < 1 {
            return config_err("policy.max-position must be at least 1");
        }
        if let Init::Gaussian { sigma } = self.policy.init {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return config_err("policy.init.sigma must be non-negative");
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return config_err("eval.ks must be a non-empty list of positive integers");
        }
        if self.eval.ks.iter().any(|&k| k > self.eval.samples) {
            return config_err(format!("eval.samples {} is below the largest k", self.eval.samples));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with global norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, dim: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.grad_clip,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Rescales `grad` in place so its norm is at most the clip; returns the
    /// norm before clipping.
    pub fn clip_gradient(&self, grad: &mut [f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip {
            let s = self.clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }

    /// One descent step on `loss_grad`, which is clipped first.
    pub fn step(&mut self, params: &mut PolicyParams, mut loss_grad: Vec<f64>) -> f64 {
        let norm = self.clip_gradient(&mut loss_grad);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        params.update(|w| {
            for i in 0..w.len() {
                let g = loss_grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                w[i] -= lr * (update + wd * w[i]);
            }
        });
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PassAtK {
    pub k: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_p_hat: f64,
    pub objective: f64,
    /// Norm of the averaged objective gradient, before clipping.
    pub grad_norm: f64,
    pub clip_fraction: f64,
    /// Pooled `Cov(R, delta)` over the trailing window of groups.
    pub cov: f64,
    pub fallback_groups: usize,
    pub bicc_groups: usize,
    pub kl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pass_at_k: Option<Vec<PassAtK>>,
    /// Kept out of the metrics stream so seeded runs stay byte-identical.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

/// `(reward, delta)` pairs of one group.
pub type GroupPairs = Vec<(f64, f64)>;

fn pooled_cov<'a>(groups: impl IntoIterator<Item = &'a GroupPairs>) -> Result<f64> {
    let (r, d): (Vec<f64>, Vec<f64>) = groups.into_iter().flatten().copied().unzip();
    if r.is_empty() {
        return Ok(0.0);
    }
    covariance_estimate(&r, &d)
}

/// Pooled covariance over consecutive non-overlapping windows of groups. A
/// trailing partial window is dropped.
pub fn track_covariance_window(history: &[GroupPairs], window: usize) -> Result<Vec<f64>> {
    if window < 1 {
        return Err(LabError::Input("covariance window must hold at least one group".into()));
    }
    history.chunks_exact(window).map(pooled_cov).collect()
}

/// First step whose trailing mean reward over `span` steps reaches `threshold`.
pub fn steps_to_threshold(metrics: &[StepMetrics], threshold: f64, span: usize) -> Option<usize> {
    let span = span.max(1);
    metrics
        .windows(span)
        .position(|w| w.iter().map(|m| m.mean_reward).sum::<f64>() / span as f64 >= threshold)
        .map(|i| metrics[i + span - 1].step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PassAtKTable {
    pub samples: u64,
    pub queries: usize,
    pub rows: Vec<PassAtK>,
}

/// Samples `n` outputs per query from `params` conditioned on the query
/// alone and averages the unbiased Pass@k estimate over queries.
pub fn evaluate_pass_at_k(
    params: &PolicyParams,
    env: &Environment,
    queries: &[Query],
    n: u64,
    ks: &[u64],
    seed_: u64,
) -> Result<PassAtKTable> {
    if queries.is_empty() {
        return Err(LabError::Input("evaluation needs at least one query".into()));
    }
    let mut sums = vec![0.0; ks.len()];
    for (qi, q) in queries.iter().enumerate() {
        let mut rng = seed::substream(seed_, &[TAG_EVAL, qi as u64]);
        let ctx = EvalContext::from_query(q);
        let mut c = 0;
        for _ in 0..n {
            let o = params.sample(&ctx, env.max_output_len, &mut rng)?;
            c += u64::from(env.reward(q, &o));
        }
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += pass_at_k(n, c, k)?;
        }
    }
    let rows = ks.iter().zip(sums).map(|(&k, s)| PassAtK { k, value: s / queries.len() as f64 }).collect();
    Ok(PassAtKTable { samples: n, queries: queries.len(), rows })
}

/// The fixed training and evaluation query pool of a run.
pub fn dataset(cfg: &TrainConfig) -> Vec<Query> {
    let env = cfg.environment();
    let mut rng = seed::substream(cfg.seed, &[TAG_DATASET]);
    (0..cfg.dataset_size).map(|_| env.sample_query(&mut rng)).collect()
}

pub fn initial_params(cfg: &TrainConfig) -> Result<PolicyParams> {
    PolicyParams::init(cfg.policy.feature_spec(), cfg.policy.init, &mut seed::substream(cfg.seed, &[TAG_INIT]))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub initial: PolicyParams,
    pub params: PolicyParams,
    /// Per-group `(reward, delta)` pairs in step and query order.
    pub cov_history: Vec<GroupPairs>,
}

/// Runs training, calling `observer` after every step with the metrics and
/// the updated parameters.
pub struct Trainer {
    cfg: TrainConfig,
    env: Environment,
    data: Vec<Query>,
    params: PolicyParams,
    reference: PolicySnapshot,
    old: PolicySnapshot,
    opt: AdamW,
    history: Vec<GroupPairs>,
    pool: Option<rayon::ThreadPool>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = initial_params(&cfg)?;
        let pool = if cfg.workers > 1 {
            Some(rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().map_err(|e| LabError::Config(format!("workers: {e}")))?)
        } else {
            None
        };
        Ok(Self {
            env: cfg.environment(),
            data: dataset(&cfg),
            reference: params.snapshot(SnapshotRole::Ref),
            old: params.snapshot(SnapshotRole::Old),
            opt: AdamW::new(&cfg, params.spec().num_params()),
            params,
            history: Vec::new(),
            pool,
            step: 0,
            cfg,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn reference(&self) -> &PolicySnapshot {
        &self.reference
    }

    pub fn dataset(&self) -> &[Query] {
        &self.data
    }

    pub fn cov_history(&self) -> &[GroupPairs] {
        &self.history
    }

    fn group_report(&self, step: usize, slot: usize, query: &Query) -> Result<(Group, ObjectiveReport)> {
        let mut rng = seed::substream(self.cfg.seed, &[TAG_ROLLOUT, step as u64, slot as u64]);
        let group = rollout_group(&self.env, &self.old, query, self.cfg.group_size, &mut rng)?;
        let snaps = Snapshots { old: &self.old, reference: &self.reference };
        let report = assemble_group_gradient(&group, &self.cfg.variant, &self.cfg.context, &self.env.vocab, &self.params, snaps)?;
        Ok((group, report))
    }

    /// Executes one step and returns its metrics.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step;
        if step.is_multiple_of(self.cfg.snapshot_refresh) {
            self.old = self.params.snapshot(SnapshotRole::Old);
        }
        let mut qrng = seed::substream(self.cfg.seed, &[TAG_QUERIES, step as u64]);
        let picks: Vec<usize> = (0..self.cfg.queries_per_step).map(|_| rand::Rng::random_range(&mut qrng, 0..self.data.len())).collect();

        let work = |(slot, &qi): (usize, &usize)| self.group_report(step, slot, &self.data[qi]);
        let results: Vec<(Group, ObjectiveReport)> = match &self.pool {
            Some(pool) => pool.install(|| picks.par_iter().enumerate().map(work).collect::<Result<_>>())?,
            None => picks.iter().enumerate().map(work).collect::<Result<_>>()?,
        };

        let n = results.len() as f64;
        let mut grad = Gradient::zeros(self.params.spec());
        let (mut objective, mut clip, mut reward, mut p_hat, mut kl) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut fallback_groups, mut bicc_groups) = (0, 0);
        for (group, report) in &results {
            grad.add_scaled(&report.grad, 1.0 / n);
            objective += report.value / n;
            clip += report.clip_fraction / n;
            kl += report.kl / n;
            reward += group.rewards_f64().iter().sum::<f64>() / group.size() as f64 / n;
            p_hat += group.p_hat() / n;
            fallback_groups += usize::from(report.fallback);
            bicc_groups += usize::from(report.bicc_applied);
            self.history.push(group.rewards_f64().into_iter().zip(report.ratios.deltas.iter().copied()).collect());
        }
        let start = self.history.len().saturating_sub(self.cfg.cov_window);
        let cov = pooled_cov(&self.history[start..])?;

        if !grad.is_finite() {
            return Err(LabError::Input(format!("non-finite gradient at step {step}")));
        }
        // Gradient ascent on the objective is descent on its negation.
        let loss_grad: Vec<f64> = grad.values.iter().map(|g| -g).collect();
        let grad_norm = self.opt.step(&mut self.params, loss_grad);
        self.step += 1;

        let pass = if self.step.is_multiple_of(self.cfg.eval_interval) {
            let table = evaluate_pass_at_k(
                &self.params,
                &self.env,
                &self.data,
                self.cfg.eval.samples,
                &self.cfg.eval.ks,
                seed::derive_seed(self.cfg.seed, &[TAG_EVAL, step as u64]),
            )?;
            Some(table.rows)
        } else {
            None
        };
        Ok(StepMetrics {
            step,
            mean_reward: reward,
            mean_p_hat: p_hat,
            objective,
            grad_norm,
            clip_fraction: clip,
            cov,
            fallback_groups,
            bicc_groups,
            kl,
            pass_at_k: pass,
            wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

pub fn train_with<F>(cfg: &TrainConfig, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepMetrics, &PolicyParams) -> Result<()>,
{
    let mut trainer = Trainer::new(cfg.clone())?;
    let initial = trainer.params().clone();
    let mut metrics = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.step()?;
        observer(&m, trainer.params())?;
        metrics.push(m);
    }
    Ok(TrainOutcome { metrics, initial, params: trainer.params, cov_history: trainer.history })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(steps: usize) -> TrainConfig {
        TrainConfig { steps, seed: 11, eval_interval: 5, ..TrainConfig::default() }
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig { group_size: 1, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
        let mut c = TrainConfig::default();
        c.context.max_context = 10;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.eval.ks = vec![64];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_steps_keeps_initial_params() {
        let out = train(&small(0)).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.initial.weights(), out.params.weights());
    }

    #[test]
    fn metrics_are_reproducible() {
        let a = train(&small(12)).unwrap();
        let b = train(&small(12)).unwrap();
        let ja: Vec<String> = a.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        let jb: Vec<String> = b.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        assert_eq!(ja, jb);
        assert_eq!(a.params.weights(), b.params.weights());
        for m in &a.metrics {
            assert!((0.0..=1.0).contains(&m.mean_reward));
            assert!((0.0..=1.0).contains(&m.clip_fraction));
        }
        assert!(a.metrics[4].pass_at_k.is_some() && a.metrics[3].pass_at_k.is_none());
    }

    #[test]
    fn workers_do_not_change_results() {
        let mut c = small(6);
        c.variant.bicc_enabled = true;
        let a = train(&c).unwrap();
        c.workers = 3;
        let b = train(&c).unwrap();
        assert_eq!(a.params.weights(), b.params.weights());
    }

    #[test]
    fn reference_stays_frozen() {
        let mut t = Trainer::new(small(3)).unwrap();
        let before = t.reference().weights().to_vec();
        for _ in 0..3 {
            t.step().unwrap();
        }
        assert_eq!(t.reference().weights(), &before[..]);
        assert_ne!(t.params().weights(), &before[..]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let cfg = TrainConfig::default();
        let opt = AdamW::new(&cfg, 3);
        let mut g = vec![3.0, 4.0, 12.0];
        assert_eq!(opt.clip_gradient(&mut g), 13.0);
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n <= 1.0 + 1e-9);
        let mut small = vec![0.1, 0.2];
        opt.clip_gradient(&mut small);
        assert_eq!(small, vec![0.1, 0.2]);
    }

    #[test]
    fn covariance_windows() {
        let g1: GroupPairs = vec![(1.0, 0.2), (0.0, 0.2)];
        assert_eq!(track_covariance_window(&[g1.clone(), g1], 2).unwrap(), vec![0.0]);
        let g: GroupPairs = vec![(1.0, 0.3), (0.0, -0.1), (0.0, 0.1)];
        let single = covariance_estimate(&[1.0, 0.0, 0.0], &[0.3, -0.1, 0.1]).unwrap();
        assert_eq!(track_covariance_window(&[g], 1).unwrap(), vec![single]);
        // Correct samples drift upward in delta.
        let drift: Vec<GroupPairs> =
            (0..6).map(|t| vec![(1.0, 0.1 * t as f64), (0.0, 0.0), (1.0, 0.05 * t as f64), (0.0, -0.01)]).collect();
        let s = track_covariance_window(&drift, 2).unwrap();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        assert!(track_covariance_window(&drift, 0).is_err());
    }

    #[test]
    fn threshold_search() {
        let mk = |r: f64, step| StepMetrics {
            step,
            mean_reward: r,
            mean_p_hat: r,
            objective: 0.0,
            grad_norm: 0.0,
            clip_fraction: 0.0,
            cov: 0.0,
            fallback_groups: 0,
            bicc_groups: 0,
            kl: 0.0,
            pass_at_k: None,
            wall_clock_ms: 0.0,
        };
        let m: Vec<StepMetrics> = [0.1, 0.9, 0.9, 0.95, 0.2].iter().enumerate().map(|(i, &r)| mk(r, i)).collect();
        assert_eq!(steps_to_threshold(&m, 0.8, 2), Some(2));
        assert_eq!(steps_to_threshold(&m, 0.99, 2), None);
    }

    #[test]
    fn perfect_policy_passes_everything() {
        let env = Environment::mod_sum();
        let q = Query::new(vec![2, 2, 2], EnvKind::ModSum, &env.vocab).unwrap();
        let mut p = PolicyParams::zeros(FeatureSpec::default());
        p.set_weight(FeatureSpec::BIAS, 6, 80.0);
        let t = evaluate_pass_at_k(&p, &env, &[q], 8, &[1, 2, 8], 0).unwrap();
        assert!(t.rows.iter().all(|r| r.value == 1.0));
    }
}
