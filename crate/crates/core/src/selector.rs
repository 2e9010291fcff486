//! Two-stage Thompson sampling over agents, then over the selected agent's
//! nodes.
//!
//! Each expansion first samples one Beta arm per agent and takes the argmax.
//! The chosen agent then descends from the root: at every anchor it compares
//! its generation arm for that anchor against the refinement arms of the
//! children it produced there. The generation arm winning stops the descent
//! and a new candidate is attached under the anchor; a child winning moves the
//! anchor into that child.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::tree::{NodeId, SearchTree, ROOT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaPosterior {
    fn default() -> Self {
        Self::uniform()
    }
}

impl BetaPosterior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Validation(format!(
                "Beta parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn uniform() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Beta::new(self.alpha, self.beta)
            .expect("posterior parameters stay positive")
            .sample(rng)
    }

    /// Fractional update: `alpha += r`, `beta += 1 - r`.
    pub fn observe(&mut self, reward: f64) -> Result<()> {
        check_unit_interval("reward", reward)?;
        self.alpha += reward;
        self.beta += 1.0 - reward;
        Ok(())
    }
}

/// Expansion type. `Generate` proposes a fresh candidate under the root;
/// `Refine` attaches a new candidate under an existing node of the same agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Generate,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionChoice {
    pub agent_id: usize,
    /// Node the new candidate is attached under.
    pub anchor_node_id: NodeId,
    pub action: Action,
    /// Refinement arms that won on the way down, root-most first. Empty for
    /// `Generate`; ends at `anchor_node_id` for `Refine`.
    pub refine_path: Vec<NodeId>,
}

impl ExpansionChoice {
    /// Checks the structural invariants against the tree the choice was made on.
    pub fn validate(&self, tree: &SearchTree) -> Result<()> {
        let bad = |msg: &str| Err(Error::Structural(format!("{msg}: {self:?}")));
        match self.action {
            Action::Generate => {
                if self.anchor_node_id != ROOT || !self.refine_path.is_empty() {
                    return bad("generation must anchor at the root with an empty path");
                }
            }
            Action::Refine => {
                if self.refine_path.last() != Some(&self.anchor_node_id) {
                    return bad("refinement path must end at the anchor");
                }
                let mut parent = ROOT;
                for &target in &self.refine_path {
                    let node = tree.node(target)?;
                    if node.parent_id != Some(parent) || node.agent_id != Some(self.agent_id) {
                        return bad("refinement target is not this agent's child of the anchor");
                    }
                    parent = target;
                }
            }
        }
        Ok(())
    }
}

/// One arm compared during selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arm", rename_all = "snake_case")]
pub enum ArmRef {
    Agent { agent: usize },
    Generate { agent: usize, anchor: NodeId },
    Refine { agent: usize, node: NodeId },
}

/// Sampled values of one Thompson comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub arms: Vec<ArmRef>,
    pub samples: Vec<f64>,
    pub winner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub agent_comparison: Comparison,
    pub descent: Vec<Comparison>,
}

/// Argmax with the lowest index winning ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorState {
    agents: Vec<BetaPosterior>,
    refine: BTreeMap<(usize, NodeId), BetaPosterior>,
    generate: BTreeMap<(usize, NodeId), BetaPosterior>,
}

impl SelectorState {
    pub fn new(num_agents: usize) -> Self {
        Self {
            agents: vec![BetaPosterior::uniform(); num_agents],
            refine: BTreeMap::new(),
            generate: BTreeMap::new(),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent_arm(&self, agent: usize) -> Option<&BetaPosterior> {
        self.agents.get(agent)
    }

    pub fn agent_arm_mut(&mut self, agent: usize) -> Option<&mut BetaPosterior> {
        self.agents.get_mut(agent)
    }

    pub fn refine_arm(&self, agent: usize, node: NodeId) -> Option<&BetaPosterior> {
        self.refine.get(&(agent, node))
    }

    pub fn generate_arm(&self, agent: usize, anchor: NodeId) -> Option<&BetaPosterior> {
        self.generate.get(&(agent, anchor))
    }

    pub fn set_refine_arm(&mut self, agent: usize, node: NodeId, arm: BetaPosterior) {
        self.refine.insert((agent, node), arm);
    }

    pub fn set_generate_arm(&mut self, agent: usize, anchor: NodeId, arm: BetaPosterior) {
        self.generate.insert((agent, anchor), arm);
    }

    pub fn refine_arms(&self) -> impl Iterator<Item = (&(usize, NodeId), &BetaPosterior)> {
        self.refine.iter()
    }

    pub fn generate_arms(&self) -> impl Iterator<Item = (&(usize, NodeId), &BetaPosterior)> {
        self.generate.iter()
    }

    /// Gives a freshly appended node its refinement arm for its producer.
    pub fn register_node(&mut self, agent: usize, node: NodeId) {
        self.refine.entry((agent, node)).or_default();
    }

    pub fn select_agent<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        Ok(self.select_agent_traced(rng)?.0)
    }

    pub fn select_agent_traced<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, Comparison)> {
        if self.agents.is_empty() {
            return Err(Error::Config("no agents registered".into()));
        }
        let samples: Vec<f64> = self.agents.iter().map(|arm| arm.sample(rng)).collect();
        let winner = argmax(&samples);
        let arms = (0..self.agents.len()).map(|agent| ArmRef::Agent { agent }).collect();
        Ok((winner, Comparison { arms, samples, winner }))
    }

    pub fn descend_and_choose<R: Rng + ?Sized>(
        &mut self,
        tree: &SearchTree,
        agent_id: usize,
        rng: &mut R,
    ) -> Result<ExpansionChoice> {
        Ok(self.descend_traced(tree, agent_id, rng)?.0)
    }

    pub fn descend_traced<R: Rng + ?Sized>(
        &mut self,
        tree: &SearchTree,
        agent_id: usize,
        rng: &mut R,
    ) -> Result<(ExpansionChoice, Vec<Comparison>)> {
        if agent_id >= self.agents.len() {
            return Err(Error::Config(format!("agent {agent_id} is not registered")));
        }
        let mut anchor = ROOT;
        let mut refine_path = Vec::new();
        let mut trace = Vec::new();
        loop {
            let eligible: Vec<NodeId> = tree
                .children(anchor)?
                .iter()
                .copied()
                .filter(|&c| tree.nodes()[c].agent_id == Some(agent_id))
                .collect();
            self.generate.entry((agent_id, anchor)).or_default();
            if eligible.is_empty() {
                break;
            }
            let mut arms = vec![ArmRef::Generate {
                agent: agent_id,
                anchor,
            }];
            let mut samples = vec![self.generate[&(agent_id, anchor)].sample(rng)];
            for &child in &eligible {
                let arm = *self.refine.entry((agent_id, child)).or_default();
                arms.push(ArmRef::Refine {
                    agent: agent_id,
                    node: child,
                });
                samples.push(arm.sample(rng));
            }
            let winner = argmax(&samples);
            trace.push(Comparison {
                arms,
                samples,
                winner,
            });
            if winner == 0 {
                break;
            }
            anchor = eligible[winner - 1];
            refine_path.push(anchor);
        }
        let action = if refine_path.is_empty() {
            Action::Generate
        } else {
            Action::Refine
        };
        Ok((
            ExpansionChoice {
                agent_id,
                anchor_node_id: anchor,
                action,
                refine_path,
            },
            trace,
        ))
    }

    /// Credits the chosen agent arm, the generation arm that ended the
    /// descent, and every refinement arm on the winning path.
    pub fn update_posteriors(&mut self, choice: &ExpansionChoice, raw_reward: f64) -> Result<()> {
        check_unit_interval("reward", raw_reward)?;
        let agent = choice.agent_id;
        self.agents
            .get_mut(agent)
            .ok_or_else(|| Error::Config(format!("agent {agent} is not registered")))?
            .observe(raw_reward)?;
        self.generate
            .entry((agent, choice.anchor_node_id))
            .or_default()
            .observe(raw_reward)?;
        for &node in &choice.refine_path {
            self.refine.entry((agent, node)).or_default().observe(raw_reward)?;
        }
        Ok(())
    }
}
