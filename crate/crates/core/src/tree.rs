//! Shared search tree expanded by all agents.
//!
//! The tree is append-only. A synthetic root (the bare task, no solution, no
//! reward) has id 0 and every expansion is a non-root node with ids 1..=N in
//! creation order, so a rollout with budget N holds exactly N rewarded nodes.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};

pub type NodeId = usize;
pub type Token = u32;

pub const ROOT: NodeId = 0;

/// Why a public test failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    /// Wrong token at the tested position.
    Mismatch,
    /// Solution had the wrong number of tokens.
    WrongLength,
    /// Program ran but produced the wrong value.
    WrongOutput,
    /// Program underflowed the stack or ended with a non-singleton stack.
    Malformed,
}

/// Observable outcome of running a candidate against the public tests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    flags: Vec<bool>,
    pass_fraction: f64,
    diagnostics: Vec<Option<Diagnostic>>,
}

impl FeedbackRecord {
    /// Builds a record; `diagnostics` must line up with `flags` and may only
    /// carry a tag on failed tests.
    pub fn new(flags: Vec<bool>, diagnostics: Vec<Option<Diagnostic>>) -> Result<Self> {
        if flags.len() != diagnostics.len() {
            return Err(Error::Validation(format!(
                "{} flags but {} diagnostics",
                flags.len(),
                diagnostics.len()
            )));
        }
        if flags.iter().zip(&diagnostics).any(|(&ok, d)| ok && d.is_some()) {
            return Err(Error::Validation("diagnostic attached to a passing test".into()));
        }
        let pass_fraction = if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
        };
        Ok(Self {
            flags,
            pass_fraction,
            diagnostics,
        })
    }

    /// Feedback of the synthetic root: no tests were run.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn pass_fraction(&self) -> f64 {
        self.pass_fraction
    }

    pub fn diagnostics(&self) -> &[Option<Diagnostic>] {
        &self.diagnostics
    }

    pub fn all_passed(&self) -> bool {
        !self.flags.is_empty() && self.flags.iter().all(|&f| f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent_id: Option<NodeId>,
    pub agent_id: Option<usize>,
    pub solution: Vec<Token>,
    pub raw_reward: Option<f64>,
    pub shaped_reward: Option<f64>,
    pub feedback: FeedbackRecord,
    pub children: Vec<NodeId>,
}

impl TreeNode {
    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    task_id: u32,
    nodes: Vec<TreeNode>,
}

impl SearchTree {
    pub fn new(task_id: u32) -> Self {
        let root = TreeNode {
            id: ROOT,
            parent_id: None,
            agent_id: None,
            solution: Vec::new(),
            raw_reward: None,
            shaped_reward: None,
            feedback: FeedbackRecord::empty(),
            children: Vec::new(),
        };
        Self {
            task_id,
            nodes: vec![root],
        }
    }

    pub fn task_id(&self) -> u32 {
        self.task_id
    }

    pub fn root_id(&self) -> NodeId {
        ROOT
    }

    /// Total node count, root included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Number of expansions (non-root nodes).
    pub fn expansions(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Structural(format!("unknown node {id}")))
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode> {
        self.nodes
            .get_mut(id)
            .ok_or_else(|| Error::Structural(format!("unknown node {id}")))
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Non-root nodes in creation order.
    pub fn expanded_nodes(&self) -> &[TreeNode] {
        &self.nodes[1..]
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId]> {
        Ok(&self.node(id)?.children)
    }

    pub fn append_node(
        &mut self,
        parent_id: NodeId,
        agent_id: usize,
        solution: Vec<Token>,
        raw_reward: f64,
        feedback: FeedbackRecord,
    ) -> Result<NodeId> {
        if parent_id >= self.nodes.len() {
            return Err(Error::Structural(format!("unknown parent {parent_id}")));
        }
        check_unit_interval("raw reward", raw_reward)?;
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            parent_id: Some(parent_id),
            agent_id: Some(agent_id),
            solution,
            raw_reward: Some(raw_reward),
            shaped_reward: None,
            feedback,
            children: Vec::new(),
        });
        self.nodes[parent_id].children.push(id);
        Ok(id)
    }

    /// Children of `parent(node)` other than `node`, in creation order.
    pub fn siblings_excluding(&self, node_id: NodeId) -> Result<Vec<NodeId>> {
        let node = self.node(node_id)?;
        let parent = node
            .parent_id
            .ok_or_else(|| Error::Domain("the root has no siblings".into()))?;
        Ok(self.nodes[parent]
            .children
            .iter()
            .copied()
            .filter(|&c| c != node_id)
            .collect())
    }

    /// `[node, parent, ..., root]`.
    pub fn path_to_root(&self, node_id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![node_id];
        let mut current = self.node(node_id)?;
        while let Some(parent) = current.parent_id {
            path.push(parent);
            current = &self.nodes[parent];
        }
        Ok(path)
    }

    pub fn depth(&self, node_id: NodeId) -> Result<usize> {
        Ok(self.path_to_root(node_id)?.len() - 1)
    }

    pub(crate) fn set_shaped_reward(&mut self, id: NodeId, value: f64) -> Result<()> {
        self.node_mut(id)?.shaped_reward = Some(value);
        Ok(())
    }

    /// One record per node in id order, for tree dumps.
    pub fn dump_records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                task_id: self.task_id,
                id: n.id,
                parent_id: n.parent_id,
                agent_id: n.agent_id,
                raw_reward: n.raw_reward,
                shaped_reward: n.shaped_reward,
                solution: n.solution.clone(),
                public_pass_fraction: n.feedback.pass_fraction(),
            })
            .collect()
    }

    /// Line-delimited JSON, one node per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.dump_records() {
            out.push_str(&serde_json::to_string(&rec).expect("node record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Serialized form of one tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub task_id: u32,
    pub id: NodeId,
    pub parent_id: Option<NodeId>,
    pub agent_id: Option<usize>,
    pub raw_reward: Option<f64>,
    pub shaped_reward: Option<f64>,
    pub solution: Vec<Token>,
    pub public_pass_fraction: f64,
}
