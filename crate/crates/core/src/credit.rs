//! Credit calculus over a finished search tree.
//!
//! Every non-root node gets a shaped reward
//! `r̂ = r + γ·(r − b)`, with the mixed baseline
//! `b = (1−λ)·r_parent + λ·mean(sibling rewards)`. Advantages are z-scores of
//! the shaped rewards over all nodes of the tree. Root children have no
//! rewarded parent: their baseline is the sibling mean, or the node's own
//! reward when it has no siblings.
//!
//! Standard deviations are population standard deviations. When the spread
//! falls below `std_epsilon` every advantage is 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{NodeId, SearchTree, ROOT};

pub const DEFAULT_STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    /// Weight of the sibling mean in the baseline, in `[0, 1]`.
    pub lambda: f64,
    /// Shaping strength, `>= 0`.
    pub gamma: f64,
    #[serde(default = "default_std_epsilon")]
    pub std_epsilon: f64,
}

fn default_std_epsilon() -> f64 {
    DEFAULT_STD_EPSILON
}

impl ShapingConfig {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            gamma,
            std_epsilon: DEFAULT_STD_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.std_epsilon > 0.0) {
            return Err(Error::Config("std_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthPenaltyConfig {
    pub l_max: usize,
    pub l_cache: usize,
}

impl LengthPenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_cache == 0 || self.l_cache >= self.l_max {
            return Err(Error::Config(format!(
                "length penalty needs 0 < l_cache ({}) < l_max ({})",
                self.l_cache, self.l_max
            )));
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Z-scores `(r − mean)/std`; all zeros when `std < std_epsilon`.
pub fn z_scores(values: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Domain("advantages of an empty group".into()));
    }
    let m = mean(values);
    let s = population_std(values, m);
    if s < std_epsilon {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - m) / s).collect())
}

/// Group-relative advantages of one parallel sampling group.
pub fn group_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    z_scores(rewards, std_epsilon)
}

/// Piecewise-linear length term: 0 up to the knee, linear down to −1 at
/// `l_max`, −1 beyond.
pub fn overlong_penalty(length: usize, cfg: &LengthPenaltyConfig) -> f64 {
    let knee = cfg.l_max - cfg.l_cache;
    if length <= knee {
        0.0
    } else if length <= cfg.l_max {
        (knee as f64 - length as f64) / cfg.l_cache as f64
    } else {
        -1.0
    }
}

/// Per-node rewards fed to the shaping pass: raw reward plus the optional
/// length term. Index 0 (the root) is `None`.
fn node_rewards(tree: &SearchTree, penalty: Option<&LengthPenaltyConfig>) -> Result<Vec<Option<f64>>> {
    tree.nodes()
        .iter()
        .map(|n| {
            if n.is_root() {
                return Ok(None);
            }
            let r = n
                .raw_reward
                .ok_or_else(|| Error::Validation(format!("node {} has no raw reward", n.id)))?;
            let extra = penalty.map_or(0.0, |cfg| overlong_penalty(n.solution.len(), cfg));
            Ok(Some(r + extra))
        })
        .collect()
}

fn baseline_from(tree: &SearchTree, node_id: NodeId, lambda: f64, rewards: &[Option<f64>]) -> Result<f64> {
    let node = tree.node(node_id)?;
    let parent = node
        .parent_id
        .ok_or_else(|| Error::Domain("the root has no baseline".into()))?;
    let own = rewards[node_id].ok_or_else(|| Error::Validation(format!("node {node_id} has no reward")))?;
    let siblings: Vec<f64> = tree
        .siblings_excluding(node_id)?
        .into_iter()
        .map(|s| rewards[s].ok_or_else(|| Error::Validation(format!("node {s} has no reward"))))
        .collect::<Result<_>>()?;
    if parent == ROOT {
        return Ok(if siblings.is_empty() { own } else { mean(&siblings) });
    }
    let parent_reward =
        rewards[parent].ok_or_else(|| Error::Validation(format!("node {parent} has no reward")))?;
    if siblings.is_empty() {
        return Ok(parent_reward);
    }
    Ok((1.0 - lambda) * parent_reward + lambda * mean(&siblings))
}

/// Mixed baseline of a non-root node from raw rewards.
pub fn mixed_baseline(tree: &SearchTree, node_id: NodeId, lambda: f64) -> Result<f64> {
    let rewards = node_rewards(tree, None)?;
    baseline_from(tree, node_id, lambda, &rewards)
}

pub fn consistency_gain(reward: f64, baseline: f64) -> f64 {
    reward - baseline
}

/// `r + γ·Δ`, not clamped.
pub fn shaped_reward(reward: f64, gain: f64, gamma: f64) -> f64 {
    reward + gamma * gain
}

/// Sets `shaped_reward` on every non-root node. Sibling means use unshaped
/// rewards, so the result does not depend on visiting order.
pub fn shape_tree(
    tree: &mut SearchTree,
    cfg: &ShapingConfig,
    penalty: Option<&LengthPenaltyConfig>,
) -> Result<()> {
    cfg.validate()?;
    let rewards = node_rewards(tree, penalty)?;
    let mut shaped = Vec::with_capacity(tree.expansions());
    for node in tree.expanded_nodes() {
        let r = rewards[node.id].expect("non-root nodes carry rewards");
        let b = baseline_from(tree, node.id, cfg.lambda, &rewards)?;
        shaped.push((node.id, shaped_reward(r, consistency_gain(r, b), cfg.gamma)));
    }
    for (id, value) in shaped {
        tree.set_shaped_reward(id, value)?;
    }
    Ok(())
}

/// Z-scores of the shaped rewards, pooled over every node of the tree.
pub fn shaped_tree_advantages(tree: &SearchTree, std_epsilon: f64) -> Result<BTreeMap<NodeId, f64>> {
    if tree.expansions() == 0 {
        return Err(Error::Domain("tree has no expanded nodes".into()));
    }
    let mut ids = Vec::with_capacity(tree.expansions());
    let mut values = Vec::with_capacity(tree.expansions());
    for node in tree.expanded_nodes() {
        let v = node
            .shaped_reward
            .ok_or_else(|| Error::Validation(format!("node {} has not been shaped", node.id)))?;
        ids.push(node.id);
        values.push(v);
    }
    Ok(ids.into_iter().zip(z_scores(&values, std_epsilon)?).collect())
}
