//! Autoregressive feature-softmax policy.
//!
//! At every decoding step a small set of features fires, and the logit of
//! token `v` is the activation-weighted sum of `weights[feature][v]` over the
//! active features:
//!
//! * a bias feature,
//! * the previous output token (or a begin slot at step 0),
//! * the output position, capped at `max_position`,
//! * the query token aligned with the step (the query read in reverse; a
//!   dedicated slot once the query is exhausted),
//! * a bag of the last `window` context tokens, counted with multiplicity.
//!   Separators do not enter the bag.
//!
//! Log-probabilities and their gradients are exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::{Deref, Index};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, LabError, Result};
use crate::tokens::{Output, Query, Token, Vocab};

/// Fixed layout of the feature templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub vocab: Vocab,
    pub max_position: usize,
    pub window: usize,
}

impl FeatureSpec {
    pub const DEFAULT_WINDOW: usize = 16;
    pub const DEFAULT_MAX_POSITION: usize = 7;

    pub fn new(vocab: Vocab, max_position: usize, window: usize) -> Self {
        Self { vocab, max_position, window }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size
    }

    pub const BIAS: usize = 0;

    pub fn prev_base(&self) -> usize {
        1
    }

    pub fn position_base(&self) -> usize {
        self.prev_base() + self.vocab.size + 1
    }

    pub fn aligned_base(&self) -> usize {
        self.position_base() + self.max_position + 1
    }

    pub fn bag_base(&self) -> usize {
        self.aligned_base() + self.vocab.size + 1
    }

    pub fn num_features(&self) -> usize {
        self.bag_base() + self.vocab.size
    }

    pub fn num_params(&self) -> usize {
        self.num_features() * self.vocab.size
    }

    /// Short digest of the layout, stored in parameter files.
    pub fn digest(&self) -> String {
        let desc = format!(
            "vocab={};sep={};pos={};neg={};eos={};pad={};max-position={};window={}",
            self.vocab.size,
            self.vocab.sep,
            self.vocab.pos_mark,
            self.vocab.neg_mark,
            self.vocab.eos,
            self.vocab.pad,
            self.max_position,
            self.window
        );
        let hash = Sha256::digest(desc.as_bytes());
        hash.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self::new(Vocab::standard(), Self::DEFAULT_MAX_POSITION, Self::DEFAULT_WINDOW)
    }
}

/// Conditioning prefix: the query alone, or the query followed by a
/// separator and conditioning samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalContext {
    pub tokens: Vec<Token>,
}

impl EvalContext {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn from_query(q: &Query) -> Self {
        Self { tokens: q.tokens.clone() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens before the first separator.
    pub fn query_part(&self, sep: Token) -> &[Token] {
        let end = self.tokens.iter().position(|&t| t == sep).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

/// Dense gradient (or any other vector) over the `(feature, token)` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub vocab_size: usize,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(spec: &FeatureSpec) -> Self {
        Self { vocab_size: spec.vocab_size(), values: vec![0.0; spec.num_params()] }
    }

    pub fn get(&self, feature: usize, token: usize) -> f64 {
        self.values[feature * self.vocab_size + token]
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Nonzero entries as `(feature, token, value)` triples.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let v = self.vocab_size;
        self.values.iter().enumerate().filter(|(_, x)| **x != 0.0).map(move |(i, &x)| (i / v, i % v, x))
    }
}

impl Index<usize> for Gradient {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Features computed once per context.
#[derive(Debug, Clone)]
struct ContextFeatures {
    query: Vec<Token>,
    bag: Vec<(usize, f64)>,
}

/// One scored decoding step.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub token: Token,
    pub features: Vec<(usize, f64)>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl StepEval {
    pub fn log_prob(&self) -> f64 {
        self.log_probs[self.token as usize]
    }

    /// Adds `scale * d log pi(token) / d theta` into `grad`.
    pub fn add_score(&self, grad: &mut Gradient, scale: f64) {
        let v = grad.vocab_size;
        for &(f, a) in &self.features {
            let row = &mut grad.values[f * v..(f + 1) * v];
            let s = scale * a;
            row[self.token as usize] += s;
            for (g, p) in row.iter_mut().zip(&self.probs) {
                *g -= s * p;
            }
        }
    }
}

/// All scored steps of one output under one context.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepEval>,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(StepEval::log_prob).sum()
    }

    pub fn token_log_probs(&self) -> Vec<f64> {
        self.steps.iter().map(StepEval::log_prob).collect()
    }

    pub fn add_score(&self, grad: &mut Gradient, scale: f64) {
        for s in &self.steps {
            s.add_score(grad, scale);
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Exact KL(p || q) between two categorical distributions given as log-probs.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotRole {
    Old,
    Ref,
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Init {
    #[default]
    Zeros,
    Gaussian {
        sigma: f64,
    },
}

/// Live policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    spec: FeatureSpec,
    weights: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// Uniform policy.
    pub fn zeros(spec: FeatureSpec) -> Self {
        Self { spec, weights: vec![0.0; spec.num_params()], version: 0 }
    }

    pub fn gaussian<R: Rng + ?Sized>(spec: FeatureSpec, sigma: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| LabError::Input(e.to_string()))?;
        let weights = (0..spec.num_params()).map(|_| normal.sample(rng)).collect();
        Ok(Self { spec, weights, version: 0 })
    }

    pub fn init<R: Rng + ?Sized>(spec: FeatureSpec, init: Init, rng: &mut R) -> Result<Self> {
        match init {
            Init::Zeros => Ok(Self::zeros(spec)),
            Init::Gaussian { sigma } => Self::gaussian(spec, sigma, rng),
        }
    }

    pub fn from_weights(spec: FeatureSpec, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != spec.num_params() {
            return input_err(format!("expected {} weights, got {}", spec.num_params(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return input_err("weights must be finite");
        }
        Ok(Self { spec, weights, version: 0 })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.spec.vocab_size() + token]
    }

    pub fn set_weight(&mut self, feature: usize, token: usize, value: f64) {
        let v = self.spec.vocab_size();
        self.weights[feature * v + token] = value;
        self.version += 1;
    }

    /// Applies `f` to the raw weight vector as a single update.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.weights);
        self.version += 1;
    }

    /// Returns a copy with `delta * direction` added; used by finite differences.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut p = self.clone();
        p.weights[index] += delta;
        p
    }

    pub fn snapshot(&self, role: SnapshotRole) -> PolicySnapshot {
        PolicySnapshot { params: self.clone(), role }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.spec.vocab.contains(t)) {
            Some(t) => input_err(format!("token id {t} outside vocabulary of {}", self.spec.vocab.size)),
            None => Ok(()),
        }
    }

    fn context_features(&self, ctx: &EvalContext) -> Result<ContextFeatures> {
        self.check_tokens(&ctx.tokens)?;
        let vocab = &self.spec.vocab;
        let start = ctx.tokens.len().saturating_sub(self.spec.window);
        let mut counts = vec![0u32; vocab.size];
        for &t in &ctx.tokens[start..] {
            if t != vocab.sep {
                counts[t as usize] += 1;
            }
        }
        let base = self.spec.bag_base();
        let bag = counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(t, &c)| (base + t, f64::from(c))).collect();
        Ok(ContextFeatures { query: ctx.query_part(vocab.sep).to_vec(), bag })
    }

    fn step_features(&self, cf: &ContextFeatures, prefix: &[Token]) -> Vec<(usize, f64)> {
        let spec = &self.spec;
        let v = spec.vocab_size();
        let t = prefix.len();
        let prev = prefix.last().map_or(v, |&p| p as usize);
        let aligned = if t < cf.query.len() { cf.query[cf.query.len() - 1 - t] as usize } else { v };
        let mut feats = Vec::with_capacity(4 + cf.bag.len());
        feats.push((FeatureSpec::BIAS, 1.0));
        feats.push((spec.prev_base() + prev, 1.0));
        feats.push((spec.position_base() + t.min(spec.max_position), 1.0));
        feats.push((spec.aligned_base() + aligned, 1.0));
        feats.extend_from_slice(&cf.bag);
        feats
    }

    fn logits_from(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        let v = self.spec.vocab_size();
        let mut logits = vec![0.0; v];
        for &(f, a) in feats {
            for (z, w) in logits.iter_mut().zip(&self.weights[f * v..(f + 1) * v]) {
                *z += a * w;
            }
        }
        logits
    }

    /// Next-token logits after `prefix` under `ctx`.
    pub fn logits(&self, ctx: &EvalContext, prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        if prefix.contains(&self.spec.vocab.eos) {
            return input_err("prefix must not contain EOS");
        }
        let cf = self.context_features(ctx)?;
        Ok(self.logits_from(&self.step_features(&cf, prefix)))
    }

    /// Scores every probability-carrying step of `output`.
    pub fn trajectory(&self, ctx: &EvalContext, output: &Output) -> Result<Trajectory> {
        self.check_tokens(&output.tokens)?;
        let cf = self.context_features(ctx)?;
        let steps = (0..output.scored_len())
            .map(|t| {
                let features = self.step_features(&cf, &output.tokens[..t]);
                let log_probs = log_softmax(&self.logits_from(&features));
                let probs = log_probs.iter().map(|l| l.exp()).collect();
                StepEval { token: output.tokens[t], features, log_probs, probs }
            })
            .collect();
        Ok(Trajectory { steps })
    }

    pub fn log_prob(&self, ctx: &EvalContext, output: &Output) -> Result<f64> {
        Ok(self.trajectory(ctx, output)?.log_prob())
    }

    pub fn log_prob_grad(&self, ctx: &EvalContext, output: &Output) -> Result<Gradient> {
        let traj = self.trajectory(ctx, output)?;
        let mut g = Gradient::zeros(&self.spec);
        traj.add_score(&mut g, 1.0);
        Ok(g)
    }

    /// Ancestral sampling. Stops at a sampled EOS; otherwise forces EOS at
    /// position `max_len - 1` and marks the output truncated.
    pub fn sample<R: Rng + ?Sized>(&self, ctx: &EvalContext, max_len: usize, rng: &mut R) -> Result<Output> {
        if max_len < 2 {
            return input_err("max output length must be at least 2");
        }
        let eos = self.spec.vocab.eos;
        let cf = self.context_features(ctx)?;
        let mut tokens = Vec::with_capacity(max_len);
        while tokens.len() + 1 < max_len {
            let log_probs = log_softmax(&self.logits_from(&self.step_features(&cf, &tokens)));
            let tok = sample_categorical(&log_probs, rng) as Token;
            tokens.push(tok);
            if tok == eos {
                return Ok(Output::from_parts(tokens, false));
            }
        }
        tokens.push(eos);
        Ok(Output::from_parts(tokens, true))
    }

    /// Writes the parameter table in the line-oriented text format.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "grpo-lab-params vocab={} features={} max-position={} window={} spec={} version={}",
            self.spec.vocab_size(),
            self.spec.num_features(),
            self.spec.max_position,
            self.spec.window,
            self.spec.digest(),
            self.version
        )?;
        let v = self.spec.vocab_size();
        for (i, w_) in self.weights.iter().enumerate() {
            writeln!(w, "{} {} {}", i / v, i % v, w_)?;
        }
        Ok(())
    }

    /// Reads a parameter table written by [`PolicyParams::save`]. The header
    /// must match `vocab`; missing entries are zero.
    pub fn load<R: BufRead>(r: R, vocab: Vocab) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| LabError::Parse("empty parameter file".into()))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("grpo-lab-params") {
            return Err(LabError::Parse("missing parameter file header".into()));
        }
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| LabError::Parse(format!("bad header field {f:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| LabError::Parse(format!("header lacks {k}")))?
                .parse()
                .map_err(|_| LabError::Parse(format!("header field {k} is not an integer")))
        };
        if get("vocab")? != vocab.size {
            return Err(LabError::Parse("vocab size mismatch".into()));
        }
        let spec = FeatureSpec::new(vocab, get("max-position")?, get("window")?);
        if kv.get("spec").map(String::as_str) != Some(spec.digest().as_str()) || get("features")? != spec.num_features() {
            return Err(LabError::Parse("feature-spec digest mismatch".into()));
        }
        let version = get("version").unwrap_or(0) as u64;
        let mut weights = vec![0.0; spec.num_params()];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || LabError::Parse(format!("line {}: expected `feature token weight`", lineno + 2));
            let mut parts = line.split_whitespace();
            let f: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let t: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let x: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if f >= spec.num_features() || t >= vocab.size || !x.is_finite() || parts.next().is_some() {
                return Err(bad());
            }
            weights[f * vocab.size + t] = x;
        }
        Ok(Self { spec, weights, version })
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the accumulated mass; take the last token with mass.
    log_probs.iter().rposition(|lp| lp.is_finite()).unwrap_or(log_probs.len() - 1)
}

/// Frozen copy of the parameters acting as the behaviour or reference policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: PolicyParams,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn role(&self) -> SnapshotRole {
        self.role
    }
}

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}
