//! Group sampling, correctness partitions and bilateral contexts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::policy::{EvalContext, PolicySnapshot, SnapshotRole};
use crate::seed::SeedStream;
use crate::tokens::{Environment, Output, Query, Token, Vocab};

/// G outputs for one query, with rewards and the correct/incorrect split.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub query: Query,
    pub outputs: Vec<Output>,
    pub rewards: Vec<u8>,
    /// Indices of rewarded outputs, in sampling order.
    pub positives: Vec<usize>,
    /// Indices of unrewarded outputs, in sampling order.
    pub negatives: Vec<usize>,
}

impl Group {
    pub fn new(query: Query, outputs: Vec<Output>, rewards: Vec<u8>) -> Result<Self> {
        if outputs.len() != rewards.len() {
            return input_err("outputs and rewards differ in length");
        }
        if outputs.is_empty() {
            return input_err("a group needs at least one output");
        }
        if rewards.iter().any(|&r| r > 1) {
            return input_err("rewards must be bits");
        }
        let positives = (0..rewards.len()).filter(|&i| rewards[i] == 1).collect();
        let negatives = (0..rewards.len()).filter(|&i| rewards[i] == 0).collect();
        Ok(Self { query, outputs, rewards, positives, negatives })
    }

    /// Builds a group scoring each output with the environment's verifier.
    pub fn scored(env: &Environment, query: Query, outputs: Vec<Output>) -> Result<Self> {
        let rewards = outputs.iter().map(|o| env.reward(&query, o)).collect();
        Self::new(query, outputs, rewards)
    }

    pub fn size(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negative(&self) -> usize {
        self.negatives.len()
    }

    pub fn p_hat(&self) -> f64 {
        self.num_positive() as f64 / self.size() as f64
    }

    pub fn rewards_f64(&self) -> Vec<f64> {
        self.rewards.iter().map(|&r| f64::from(r)).collect()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.rewards[i] == 1
    }

    pub fn to_record(&self) -> GroupRecord {
        GroupRecord {
            query: self.query.tokens.clone(),
            outputs: self.outputs.iter().map(|o| o.tokens.clone()).collect(),
            rewards: self.rewards.clone(),
            num_positive: self.num_positive(),
            num_negative: self.num_negative(),
        }
    }
}

/// One line of a group dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GroupRecord {
    pub query: Vec<Token>,
    pub outputs: Vec<Vec<Token>>,
    pub rewards: Vec<u8>,
    pub num_positive: usize,
    pub num_negative: usize,
}

/// Writes groups as line-delimited JSON records.
pub fn dump_groups<W: Write>(groups: &[Group], mut w: W) -> Result<()> {
    for g in groups {
        serde_json::to_writer(&mut w, &g.to_record()).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Samples `g` outputs from the behaviour snapshot conditioned on the query.
pub fn rollout_group(env: &Environment, old: &PolicySnapshot, query: &Query, g: usize, rng: &mut SeedStream) -> Result<Group> {
    if g < 2 {
        return input_err(format!("group size must be at least 2, got {g}"));
    }
    if old.role() != SnapshotRole::Old {
        return input_err("rollouts must sample from the old-policy snapshot");
    }
    let ctx = EvalContext::from_query(query);
    let outputs = (0..g).map(|_| old.sample(&ctx, env.max_output_len, rng)).collect::<Result<Vec<_>>>()?;
    Group::scored(env, query.clone(), outputs)
}

/// Token budget for the conditioning samples appended to a context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ContextConfig {
    pub max_context: usize,
    pub ratio: f64,
}

impl ContextConfig {
    /// Appended-token budget, `floor(ratio * max_context)`.
    pub fn budget(&self) -> usize {
        (self.ratio * self.max_context as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return input_err(format!("context ratio {} outside [0, 1]", self.ratio));
        }
        Ok(())
    }
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { max_context: 24, ratio: 0.4 }
    }
}

/// Contexts used to score each partition: correct outputs are scored after
/// the incorrect ones, and vice versa.
#[derive(Debug, Clone, PartialEq)]
pub struct BilateralContext {
    /// `[q; SEP; NEG o_j ...]` over incorrect outputs.
    pub for_positive: EvalContext,
    /// `[q; SEP; POS o_i ...]` over correct outputs.
    pub for_negative: EvalContext,
    pub used_positive: usize,
    pub used_negative: usize,
}

impl BilateralContext {
    pub fn context_for(&self, positive: bool) -> &EvalContext {
        if positive {
            &self.for_positive
        } else {
            &self.for_negative
        }
    }
}

fn conditioned_context(group: &Group, members: &[usize], marker: Token, sep: Token, budget: usize) -> (EvalContext, usize) {
    let mut tokens = group.query.tokens.clone();
    tokens.push(sep);
    let mut used = 0;
    'outer: for &i in members {
        for &t in std::iter::once(&marker).chain(&group.outputs[i].tokens) {
            if used == budget {
                break 'outer;
            }
            tokens.push(t);
            used += 1;
        }
    }
    (EvalContext::new(tokens), used)
}

/// Appends opposite-partition outputs, each behind its partition marker, in
/// sampling order until the budget runs out. The last sample may be cut.
pub fn build_bilateral_contexts(group: &Group, cfg: &ContextConfig, vocab: &Vocab) -> Result<BilateralContext> {
    if fallback_check(group) != ContextMode::Bilateral {
        return Err(crate::error::LabError::Degenerate("bilateral contexts need both partitions non-empty".into()));
    }
    let budget = cfg.budget();
    let (for_positive, used_positive) = conditioned_context(group, &group.negatives, vocab.neg_mark, vocab.sep, budget);
    let (for_negative, used_negative) = conditioned_context(group, &group.positives, vocab.pos_mark, vocab.sep, budget);
    Ok(BilateralContext { for_positive, for_negative, used_positive, used_negative })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    Bilateral,
    StandardGrpo,
}

/// Standard GRPO whenever either partition is empty.
pub fn fallback_check(group: &Group) -> ContextMode {
    if group.num_positive() == 0 || group.num_negative() == 0 {
        ContextMode::StandardGrpo
    } else {
        ContextMode::Bilateral
    }
}
