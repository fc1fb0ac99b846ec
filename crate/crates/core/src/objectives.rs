//! Clipped surrogate objectives for GRPO, Dr.GRPO, DAPO and GSPO, with and
//! without bilateral context conditioning, and their analytic gradients.
//!
//! Each objective is maximized. Advantages are data: no gradient flows
//! through them, including through the covariance term of the corrected
//! advantage. Gradients flow through the importance ratio only on the
//! unclipped branch of `min(rho A, clip(rho) A)`; a ratio sitting exactly on
//! a clip bound counts as unclipped.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::math::{clipped_term, covariance_estimate, rcc_advantages, standardized_advantages, AdvantageSet};
use crate::policy::{EvalContext, Gradient, PolicyParams, PolicySnapshot, Trajectory};
use crate::rollout::{build_bilateral_contexts, fallback_check, BilateralContext, ContextConfig, ContextMode, Group};
use crate::tokens::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Grpo,
    DrGrpo,
    Dapo,
    Gspo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Grpo, Variant::DrGrpo, Variant::Dapo, Variant::Gspo];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Token,
    Sequence,
}

/// How per-token log-probability differences are reduced into one `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaReduction {
    Sum,
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Symmetric clip width.
    pub epsilon: f64,
    /// Lower clip width for DAPO.
    pub epsilon_low: f64,
    /// Upper clip width for DAPO.
    pub epsilon_high: f64,
    /// KL penalty coefficient for Dr.GRPO.
    pub beta: f64,
    pub bicc_enabled: bool,
    pub rcc_enabled: bool,
    pub granularity: Granularity,
    pub delta_reduction: DeltaReduction,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Grpo,
            epsilon: 0.2,
            epsilon_low: 0.2,
            epsilon_high: 0.28,
            beta: 0.01,
            bicc_enabled: false,
            rcc_enabled: false,
            granularity: Granularity::Token,
            delta_reduction: DeltaReduction::Sum,
        }
    }
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("epsilon", self.epsilon), ("epsilon-low", self.epsilon_low), ("epsilon-high", self.epsilon_high)] {
            if !(e > 0.0 && e < 1.0) {
                return input_err(format!("{name} must lie in (0, 1), got {e}"));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return input_err(format!("beta must be a non-negative number, got {}", self.beta));
        }
        Ok(())
    }

    /// `(1 - eps_low, 1 + eps_high)` for DAPO, `(1 - eps, 1 + eps)` otherwise.
    pub fn clip_band(&self) -> (f64, f64) {
        match self.variant {
            Variant::Dapo => (1.0 - self.epsilon_low, 1.0 + self.epsilon_high),
            _ => (1.0 - self.epsilon, 1.0 + self.epsilon),
        }
    }

    /// GSPO always works on whole sequences.
    pub fn effective_granularity(&self) -> Granularity {
        match self.variant {
            Variant::Gspo => Granularity::Sequence,
            _ => self.granularity,
        }
    }
}

/// Behaviour and reference snapshots for one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Snapshots<'a> {
    pub old: &'a PolicySnapshot,
    pub reference: &'a PolicySnapshot,
}

/// A group together with the context each output is scored under (numerator
/// of the ratio) and frozen advantages.
#[derive(Debug, Clone)]
pub struct ObjectiveInput<'a> {
    pub group: &'a Group,
    pub contexts: Vec<EvalContext>,
    pub advantages: Vec<f64>,
}

impl<'a> ObjectiveInput<'a> {
    /// Every output scored under the query alone.
    pub fn unconditioned(group: &'a Group, advantages: Vec<f64>) -> Self {
        let ctx = EvalContext::from_query(&group.query);
        Self { group, contexts: vec![ctx; group.size()], advantages }
    }

    /// Outputs scored under their bilateral context.
    pub fn bilateral(group: &'a Group, bc: &BilateralContext, advantages: Vec<f64>) -> Self {
        let contexts = (0..group.size()).map(|i| bc.context_for(group.is_positive(i)).clone()).collect();
        Self { group, contexts, advantages }
    }

    fn check(&self) -> Result<()> {
        let g = self.group.size();
        if self.contexts.len() != g || self.advantages.len() != g {
            return input_err("contexts, advantages and outputs must align");
        }
        Ok(())
    }
}

/// Value, gradient and clipping diagnostics of one surrogate evaluation.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub value: f64,
    pub grad: Gradient,
    pub clip_fraction: f64,
    /// Mean per-token KL to the reference (Dr.GRPO only, zero otherwise).
    pub kl: f64,
}

/// Evaluates the configured variant on frozen advantages.
///
/// `sg_frozen`, when given, replaces the stop-gradient factor of GSPO with
/// `frozen[i]^(1 - 1/|o_i|)` so the value becomes a function whose plain
/// derivative is the GSPO gradient. It is ignored by the other variants.
pub fn surrogate_objective(
    input: &ObjectiveInput<'_>,
    params: &PolicyParams,
    snaps: Snapshots<'_>,
    cfg: &VariantConfig,
    sg_frozen: Option<&[f64]>,
) -> Result<Surrogate> {
    input.check()?;
    let group = input.group;
    let (lo, hi) = cfg.clip_band();
    let query_ctx = EvalContext::from_query(&group.query);
    let denominator = match cfg.variant {
        Variant::DrGrpo => snaps.reference,
        _ => snaps.old,
    };
    let mut grad = Gradient::zeros(params.spec());
    let mut value = 0.0;
    let mut kl_total = 0.0;
    let (mut clipped, mut counted) = (0usize, 0usize);

    for (i, output) in group.outputs.iter().enumerate() {
        let adv = input.advantages[i];
        let num = params.trajectory(&input.contexts[i], output)?;
        let den = denominator.trajectory(&query_ctx, output)?.token_log_probs();
        let len = num.len() as f64;
        match (cfg.variant, cfg.effective_granularity()) {
            (Variant::Gspo, _) => {
                let mean_log_ratio = num.steps.iter().zip(&den).map(|(s, d)| s.log_prob() - d).sum::<f64>() / len;
                let ratio = match sg_frozen {
                    None => mean_log_ratio.exp(),
                    Some(frozen) => (mean_log_ratio / len).exp() * frozen[i].powf(1.0 - 1.0 / len),
                };
                let term = clipped_term(ratio, adv, lo, hi);
                value += term.value;
                counted += 1;
                if term.unclipped {
                    if adv != 0.0 {
                        num.add_score(&mut grad, adv * ratio / (len * len));
                    }
                } else {
                    clipped += 1;
                }
            }
            (_, Granularity::Token) => {
                for (step, d) in num.steps.iter().zip(&den) {
                    let ratio = (step.log_prob() - d).exp();
                    let term = clipped_term(ratio, adv, lo, hi);
                    value += term.value / len;
                    counted += 1;
                    if term.unclipped {
                        if adv != 0.0 {
                            step.add_score(&mut grad, adv * ratio / len);
                        }
                    } else {
                        clipped += 1;
                    }
                }
            }
            (_, Granularity::Sequence) => {
                let ratio = (num.log_prob() - den.iter().sum::<f64>()).exp();
                let term = clipped_term(ratio, adv, lo, hi);
                value += term.value;
                counted += 1;
                if term.unclipped {
                    if adv != 0.0 {
                        num.add_score(&mut grad, adv * ratio);
                    }
                } else {
                    clipped += 1;
                }
            }
        }
        if cfg.variant == Variant::DrGrpo && cfg.beta != 0.0 {
            let live = params.trajectory(&query_ctx, output)?;
            let reference = snaps.reference.trajectory(&query_ctx, output)?;
            let kl = kl_penalty(&live, &reference, &mut grad, cfg.beta / len);
            value -= cfg.beta * kl / len;
            kl_total += kl / len;
        }
    }

    let g = group.size() as f64;
    grad.scale(1.0 / g);
    Ok(Surrogate {
        value: value / g,
        grad,
        clip_fraction: if counted == 0 { 0.0 } else { clipped as f64 / counted as f64 },
        kl: kl_total / g,
    })
}

/// Sum over steps of exact `KL(pi_theta || pi_ref)`; subtracts `scale` times its
/// gradient from `grad`.
fn kl_penalty(live: &Trajectory, reference: &Trajectory, grad: &mut Gradient, scale: f64) -> f64 {
    let v = grad.vocab_size;
    let mut total = 0.0;
    for (p, r) in live.steps.iter().zip(&reference.steps) {
        let kl = crate::policy::kl_divergence(&p.log_probs, &r.log_probs);
        total += kl;
        // d KL / d z_u = p_u (log p_u - log r_u - KL)
        let dz: Vec<f64> = (0..v).map(|u| p.probs[u] * (p.log_probs[u] - r.log_probs[u] - kl)).collect();
        for &(f, a) in &p.features {
            for (gv, d) in grad.values[f * v..(f + 1) * v].iter_mut().zip(&dz) {
                *gv -= scale * a * d;
            }
        }
    }
    total
}

/// GRPO objective at token granularity.
pub fn token_level_objective(
    input: &ObjectiveInput<'_>,
    params: &PolicyParams,
    snaps: Snapshots<'_>,
    cfg: &VariantConfig,
) -> Result<Surrogate> {
    let cfg = VariantConfig { variant: Variant::Grpo, granularity: Granularity::Token, ..*cfg };
    surrogate_objective(input, params, snaps, &cfg, None)
}

/// Ratio against the frozen reference policy, minus `beta` times the exact KL.
pub fn dr_grpo_objective(
    input: &ObjectiveInput<'_>,
    params: &PolicyParams,
    snaps: Snapshots<'_>,
    cfg: &VariantConfig,
) -> Result<Surrogate> {
    surrogate_objective(input, params, snaps, &cfg.with_variant(Variant::DrGrpo), None)
}

/// GRPO with the asymmetric clip band `[1 - eps_low, 1 + eps_high]`.
pub fn dapo_objective(input: &ObjectiveInput<'_>, params: &PolicyParams, snaps: Snapshots<'_>, cfg: &VariantConfig) -> Result<Surrogate> {
    surrogate_objective(input, params, snaps, &cfg.with_variant(Variant::Dapo), None)
}

/// Geometric-mean sequence ratio with the stop-gradient factor.
pub fn gspo_objective(input: &ObjectiveInput<'_>, params: &PolicyParams, snaps: Snapshots<'_>, cfg: &VariantConfig) -> Result<Surrogate> {
    surrogate_objective(input, params, snaps, &cfg.with_variant(Variant::Gspo), None)
}

/// Importance ratios of a group, conditioned and unconditioned.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioBundle {
    /// `pi_theta(o|q) / pi_old(o|q)`.
    pub ratios: Vec<f64>,
    /// Per-token `pi_theta(o_t|ctx, o_<t) / pi_old(o_t|q, o_<t)` under the scoring context.
    pub token_ratios: Vec<Vec<f64>>,
    /// `pi_theta(o|ctx) / pi_old(o|q)`.
    pub conditioned: Vec<f64>,
    /// `pi_theta(o|ctx) / pi_theta(o|q)`.
    pub weights: Vec<f64>,
    /// `log pi_theta(o|ctx) - log pi_ref(o|q)`, reduced per [`DeltaReduction`].
    pub deltas: Vec<f64>,
    /// `log pi_theta(o|q) - log pi_ref(o|q)`, same reduction.
    pub plain_deltas: Vec<f64>,
}

impl RatioBundle {
    /// Largest `|rho_c - w rho|` relative to `rho_c`.
    pub fn decomposition_error(&self) -> f64 {
        self.conditioned.iter().zip(self.weights.iter().zip(&self.ratios)).map(|(c, (w, r))| ((c - w * r) / c).abs()).fold(0.0, f64::max)
    }
}

pub fn ratio_bundle(
    group: &Group,
    contexts: &[EvalContext],
    params: &PolicyParams,
    snaps: Snapshots<'_>,
    reduction: DeltaReduction,
) -> Result<RatioBundle> {
    if contexts.len() != group.size() {
        return input_err("one context per output is required");
    }
    let query_ctx = EvalContext::from_query(&group.query);
    let mut b =
        RatioBundle { ratios: vec![], token_ratios: vec![], conditioned: vec![], weights: vec![], deltas: vec![], plain_deltas: vec![] };
    for (output, ctx) in group.outputs.iter().zip(contexts) {
        let cond = params.trajectory(ctx, output)?;
        let plain = params.log_prob(&query_ctx, output)?;
        let old = snaps.old.trajectory(&query_ctx, output)?;
        let reference = snaps.reference.log_prob(&query_ctx, output)?;
        let lp_cond = cond.log_prob();
        let lp_old = old.log_prob();
        let norm = match reduction {
            DeltaReduction::Sum => 1.0,
            DeltaReduction::TokenMean => cond.len() as f64,
        };
        b.ratios.push((plain - lp_old).exp());
        b.conditioned.push((lp_cond - lp_old).exp());
        b.weights.push((lp_cond - plain).exp());
        b.token_ratios.push(cond.steps.iter().zip(&old.steps).map(|(c, o)| (c.log_prob() - o.log_prob()).exp()).collect());
        b.deltas.push((lp_cond - reference) / norm);
        b.plain_deltas.push((plain - reference) / norm);
    }
    Ok(b)
}

/// Conditioned ratios for a mixed group scored under its bilateral contexts.
pub fn bicc_conditioned_ratios(
    group: &Group,
    bc: &BilateralContext,
    params: &PolicyParams,
    snaps: Snapshots<'_>,
    reduction: DeltaReduction,
) -> Result<RatioBundle> {
    if fallback_check(group) != ContextMode::Bilateral {
        return Err(crate::error::LabError::Degenerate("conditioned ratios need both partitions".into()));
    }
    let contexts: Vec<EvalContext> = (0..group.size()).map(|i| bc.context_for(group.is_positive(i)).clone()).collect();
    ratio_bundle(group, &contexts, params, snaps, reduction)
}

/// Full per-group result.
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub value: f64,
    pub grad: Gradient,
    pub clip_fraction: f64,
    /// `Cov(R, delta)` of the group under the scoring contexts.
    pub cov: f64,
    /// Either partition was empty.
    pub fallback: bool,
    /// Bilateral contexts were built and used.
    pub bicc_applied: bool,
    pub advantages: AdvantageSet,
    pub ratios: RatioBundle,
    pub kl: f64,
}

/// Partition, contexts, ratios and deltas, advantage selection, and the
/// variant objective for one group.
pub fn assemble_group_gradient(
    group: &Group,
    cfg: &VariantConfig,
    ctx_cfg: &ContextConfig,
    vocab: &Vocab,
    params: &PolicyParams,
    snaps: Snapshots<'_>,
) -> Result<ObjectiveReport> {
    let mode = fallback_check(group);
    let bicc_applied = cfg.bicc_enabled && mode == ContextMode::Bilateral;
    let input_contexts = if bicc_applied {
        let bc = build_bilateral_contexts(group, ctx_cfg, vocab)?;
        ObjectiveInput::bilateral(group, &bc, vec![]).contexts
    } else {
        ObjectiveInput::unconditioned(group, vec![]).contexts
    };
    let ratios = ratio_bundle(group, &input_contexts, params, snaps, cfg.delta_reduction)?;
    let rewards = group.rewards_f64();
    let advantages = if cfg.rcc_enabled { rcc_advantages(&rewards, &ratios.deltas)? } else { standardized_advantages(&rewards)? };
    let input = ObjectiveInput { group, contexts: input_contexts, advantages: advantages.values.clone() };
    let s = surrogate_objective(&input, params, snaps, cfg, None)?;
    Ok(ObjectiveReport {
        value: s.value,
        grad: s.grad,
        clip_fraction: s.clip_fraction,
        cov: covariance_estimate(&rewards, &ratios.deltas)?,
        fallback: mode == ContextMode::StandardGrpo,
        bicc_applied,
        advantages,
        ratios,
        kl: s.kl,
    })
}
