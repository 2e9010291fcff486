//! Rollouts, the clipped surrogate objective and the asynchronous per-agent
//! update loop.
//!
//! A training step samples a batch of tasks, snapshots every agent (the
//! behaviour policy `θ_old`), rolls out each kept task, assigns credit and
//! pushes per-agent samples into buffers. An agent updates as soon as its
//! buffer reaches the threshold, independently of the others, so later
//! updates within the same step see importance ratios away from 1.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::credit::{
    group_advantages, overlong_penalty, shape_tree, shaped_tree_advantages, LengthPenaltyConfig, ShapingConfig,
};
use crate::env::{evaluate, feedback_for, RewardMode, Split, Task};
use crate::error::{Error, Result};
use crate::metrics::{pass_at_1_mcts, pass_at_n, SolutionOutcome, TaskSolutions};
use crate::policy::{AgentPolicy, ContextKey, Gradient, PolicyParams};
use crate::rng::{stream, StreamRng};
use crate::selector::{BetaPosterior, Comparison, ExpansionChoice, SelectorState};
use crate::tree::{NodeId, SearchTree, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// N independent samples from the root, group-relative advantages.
    GrpoParallel,
    /// Several agents share one search tree per task.
    MarsTree,
    /// One agent on the search tree.
    Rs2Tree,
}

impl Mode {
    pub fn is_tree(self) -> bool {
        !matches!(self, Mode::GrpoParallel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Evaluated solutions per task per rollout.
    pub n_budget: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub buffer_threshold: usize,
    pub shaping: ShapingConfig,
    #[serde(default)]
    pub length_penalty: Option<LengthPenaltyConfig>,
    pub steps: usize,
    pub seed: u64,
    pub tasks_per_step: usize,
    #[serde(default)]
    pub reward_mode: RewardMode,
    /// Divide each agent's objective by its own node count instead of N.
    /// An extension; off reproduces the published weighting.
    #[serde(default)]
    pub per_agent_renorm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MarsTree,
            n_budget: 8,
            eps_low: 0.2,
            eps_high: 0.28,
            kl_beta: 0.0,
            // calibrated on the default suite; 1.0 barely moves a tabular policy in 300 steps
            learning_rate: 20.0,
            buffer_threshold: 8,
            shaping: ShapingConfig {
                lambda: 0.4,
                gamma: 0.5,
                std_epsilon: crate::credit::DEFAULT_STD_EPSILON,
            },
            length_penalty: None,
            steps: 300,
            seed: 0,
            tasks_per_step: 8,
            reward_mode: RewardMode::Fraction,
            per_agent_renorm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_budget < 2 {
            return Err(Error::Config(format!("n_budget {} must be >= 2", self.n_budget)));
        }
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return Err(Error::Config("eps_low and eps_high must be positive".into()));
        }
        if self.eps_low >= 1.0 {
            return Err(Error::Config("eps_low must be below 1".into()));
        }
        if self.buffer_threshold < 1 {
            return Err(Error::Config("buffer_threshold must be >= 1".into()));
        }
        if !(self.kl_beta >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("kl_beta must be >= 0 and learning_rate > 0".into()));
        }
        if self.tasks_per_step < 1 {
            return Err(Error::Config("tasks_per_step must be >= 1".into()));
        }
        self.shaping.validate()?;
        if let Some(p) = &self.length_penalty {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentsConfig {
    pub count: usize,
    /// Per-agent seeds for initialization; derived from the run seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Std of Gaussian noise added to each agent's initial root logits.
    /// Zero gives identical uniform agents.
    #[serde(default)]
    pub init_noise: f64,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            count: 2,
            seeds: Vec::new(),
            init_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate after every `every` steps (and always at step 0 and the end).
    pub every: usize,
    /// Pass@1 draws per agent per task.
    pub pass1_samples: usize,
    /// Node budget of the inference tree search.
    pub budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 25,
            pass1_samples: 4,
            budget: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    pub train: TrainConfig,
    pub agents: AgentsConfig,
    pub eval: EvalConfig,
    /// Emit agent checkpoints every this many steps; 0 only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.agents.count == 0 {
            return Err(Error::Config("agents.count must be >= 1".into()));
        }
        if !self.agents.seeds.is_empty() && self.agents.seeds.len() != self.agents.count {
            return Err(Error::Config(format!(
                "agents.seeds has {} entries for {} agents",
                self.agents.seeds.len(),
                self.agents.count
            )));
        }
        if !(self.agents.init_noise >= 0.0) {
            return Err(Error::Config("agents.init_noise must be >= 0".into()));
        }
        if matches!(self.train.mode, Mode::GrpoParallel | Mode::Rs2Tree) && self.agents.count != 1 {
            return Err(Error::Config(format!(
                "mode {:?} runs exactly one agent, got {}",
                self.train.mode, self.agents.count
            )));
        }
        if self.eval.every == 0 || self.eval.budget == 0 {
            return Err(Error::Config("eval.every and eval.budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Short content hash carried by every emitted record.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("settings serialize");
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn agent_seed(&self, agent: usize) -> u64 {
        self.agents
            .seeds
            .get(agent)
            .copied()
            .unwrap_or_else(|| stream(self.train.seed, &format!("agent-seed/{agent}")).random())
    }
}

/// One policy-gradient sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub agent_id: usize,
    pub context: ContextKey,
    pub tokens: Vec<Token>,
    pub advantage: f64,
    pub old_logprobs: Vec<f64>,
    /// Outer normalizer of the objective: 1/N, or 1/|T_j| with renormalization.
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentBuffer {
    pub agent_id: usize,
    pub samples: VecDeque<RolloutSample>,
    pub update_count: usize,
}

impl AgentBuffer {
    pub fn new(agent_id: usize) -> Self {
        Self {
            agent_id,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Selector state around one expansion, for debugging bandit behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTrace {
    pub task_id: u32,
    pub node_id: NodeId,
    pub agent_comparison: Comparison,
    pub descent: Vec<Comparison>,
    pub choice: ExpansionChoice,
    pub raw_reward: f64,
    pub agent_posteriors: Vec<BetaPosterior>,
}

/// Everything a tree rollout produced, indexed by node id (root included).
#[derive(Debug, Clone, PartialEq)]
pub struct TreeRollout {
    pub tree: SearchTree,
    pub contexts: Vec<ContextKey>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub outcomes: Vec<SolutionOutcome>,
    pub traces: Vec<ExpansionTrace>,
}

/// Builds a shared tree with exactly `n_budget` expansions. Agents sample
/// from their behaviour snapshots; rewards use the full test set, feedback
/// only the public tests.
pub fn rollout_tree(
    task: &Task,
    agents: &[AgentPolicy],
    selector: &mut SelectorState,
    n_budget: usize,
    reward_mode: RewardMode,
    rng: &mut StreamRng,
    trace: bool,
) -> Result<TreeRollout> {
    if agents.is_empty() {
        return Err(Error::Config("tree rollout without agents".into()));
    }
    if n_budget < 2 {
        return Err(Error::Config(format!("n_budget {n_budget} must be >= 2")));
    }
    if selector.num_agents() != agents.len() {
        return Err(Error::Config("selector and agent counts differ".into()));
    }
    let mut tree = SearchTree::new(task.task_id);
    let mut contexts = vec![ContextKey::root(task.task_id)];
    let mut old_logprobs = vec![Vec::new()];
    let mut outcomes = Vec::with_capacity(n_budget);
    let mut traces = Vec::new();
    for _ in 0..n_budget {
        let (agent_id, agent_comparison) = selector.select_agent_traced(rng)?;
        let (choice, descent) = selector.descend_traced(&tree, agent_id, rng)?;
        let anchor = tree.node(choice.anchor_node_id)?;
        let ctx = ContextKey::conditioned(task.task_id, &anchor.solution, anchor.feedback.flags());
        let behaviour = agents[agent_id].old_params();
        let solution = behaviour.sample_sequence(&ctx, rng, task.gen_length)?;
        let lps = behaviour.per_token_logprobs(&ctx, &solution)?;
        let result = evaluate(task, &solution, Split::TrainAll);
        let reward = result.reward_with(reward_mode);
        let feedback = feedback_for(task, &result)?;
        let id = tree.append_node(choice.anchor_node_id, agent_id, solution, reward, feedback)?;
        selector.register_node(agent_id, id);
        selector.update_posteriors(&choice, reward)?;
        contexts.push(ctx);
        old_logprobs.push(lps);
        outcomes.push(SolutionOutcome {
            index: id,
            passed_all_public: result.passed_all_public,
            passed_all_private: result.passed_all_private,
        });
        if trace {
            traces.push(ExpansionTrace {
                task_id: task.task_id,
                node_id: id,
                agent_comparison,
                descent,
                choice,
                raw_reward: reward,
                agent_posteriors: (0..agents.len())
                    .map(|j| *selector.agent_arm(j).expect("registered agent"))
                    .collect(),
            });
        }
    }
    Ok(TreeRollout {
        tree,
        contexts,
        old_logprobs,
        outcomes,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelSample {
    pub solution: Vec<Token>,
    pub reward: f64,
    pub old_logprobs: Vec<f64>,
    pub outcome: SolutionOutcome,
}

/// `n` i.i.d. samples from the root context.
pub fn rollout_parallel(
    task: &Task,
    agent: &AgentPolicy,
    n: usize,
    reward_mode: RewardMode,
    rng: &mut StreamRng,
) -> Result<Vec<ParallelSample>> {
    let ctx = ContextKey::root(task.task_id);
    let behaviour = agent.old_params();
    (0..n)
        .map(|index| {
            let solution = behaviour.sample_sequence(&ctx, rng, task.gen_length)?;
            let old_logprobs = behaviour.per_token_logprobs(&ctx, &solution)?;
            let result = evaluate(task, &solution, Split::TrainAll);
            Ok(ParallelSample {
                reward: result.reward_with(reward_mode),
                outcome: SolutionOutcome {
                    index,
                    passed_all_public: result.passed_all_public,
                    passed_all_private: result.passed_all_private,
                },
                solution,
                old_logprobs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Keep,
    Drop,
}

/// Drops a task whose latest group was uniformly perfect or uniformly zero.
pub fn filter_task(rewards: &[f64]) -> Result<FilterDecision> {
    if rewards.is_empty() {
        return Err(Error::Domain("filter on an empty reward group".into()));
    }
    if rewards.iter().all(|&r| r == 1.0) || rewards.iter().all(|&r| r == 0.0) {
        Ok(FilterDecision::Drop)
    } else {
        Ok(FilterDecision::Keep)
    }
}

/// Converts a shaped tree into per-agent samples.
pub fn tree_samples(rollout: &TreeRollout, std_epsilon: f64, per_agent_renorm: bool) -> Result<Vec<RolloutSample>> {
    let advantages = shaped_tree_advantages(&rollout.tree, std_epsilon)?;
    let n = rollout.tree.expansions() as f64;
    let mut per_agent: BTreeMap<usize, usize> = BTreeMap::new();
    for node in rollout.tree.expanded_nodes() {
        *per_agent.entry(node.agent_id.expect("non-root")).or_default() += 1;
    }
    Ok(rollout
        .tree
        .expanded_nodes()
        .iter()
        .map(|node| {
            let agent_id = node.agent_id.expect("non-root");
            let weight = if per_agent_renorm {
                1.0 / per_agent[&agent_id] as f64
            } else {
                1.0 / n
            };
            RolloutSample {
                agent_id,
                context: rollout.contexts[node.id],
                tokens: node.solution.clone(),
                advantage: advantages[&node.id],
                old_logprobs: rollout.old_logprobs[node.id].clone(),
                weight,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub objective: f64,
    /// Ascent direction.
    pub gradient: Gradient,
    pub tokens: usize,
    /// Share of tokens where the clipped branch of the min was active.
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

/// Clipped surrogate with a per-token KL penalty to the reference:
/// `Σ_v weight_v/|o_v| Σ_t [min(w·Â, clip(w, 1−ε_low, 1+ε_high)·Â) − β·KL_t]`.
/// Gradient flows through `w` only where the unclipped branch is the min.
pub fn surrogate_objective(samples: &[RolloutSample], agent: &AgentPolicy, cfg: &TrainConfig) -> Result<SurrogateOutput> {
    let params = agent.params();
    let reference = agent.ref_params();
    let mut objective = 0.0;
    let mut gradient = Gradient::new();
    let mut tokens = 0usize;
    let mut clipped_tokens = 0usize;
    let mut kl_sum = 0.0;
    for s in samples {
        if s.old_logprobs.len() != s.tokens.len() {
            return Err(Error::Validation(format!(
                "sample has {} old log-probs for {} tokens",
                s.old_logprobs.len(),
                s.tokens.len()
            )));
        }
        if !s.advantage.is_finite() {
            return Err(Error::Validation("non-finite advantage".into()));
        }
        if s.tokens.is_empty() {
            continue;
        }
        let scale = s.weight / s.tokens.len() as f64;
        for (pos, (&tok, &old_lp)) in s.tokens.iter().zip(&s.old_logprobs).enumerate() {
            let lp = params.token_logprobs(&s.context, pos)?[tok as usize];
            let w = (lp - old_lp).exp();
            let a = s.advantage;
            let unclipped = w * a;
            let clipped = w.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a;
            let mut term = unclipped.min(clipped);
            if unclipped <= clipped {
                if a != 0.0 {
                    gradient.add_scaled((s.context, pos), &params.token_grad(&s.context, pos, tok)?, scale * a * w);
                }
            } else {
                clipped_tokens += 1;
            }
            if cfg.kl_beta > 0.0 {
                let (kl, kl_grad) = params.kl_grad(reference, &s.context, pos)?;
                term -= cfg.kl_beta * kl;
                kl_sum += kl;
                gradient.add_scaled((s.context, pos), &kl_grad, -scale * cfg.kl_beta);
            } else {
                kl_sum += crate::policy::exact_kl(params, reference, &s.context, pos)?;
            }
            objective += scale * term;
            tokens += 1;
        }
    }
    let denom = tokens.max(1) as f64;
    Ok(SurrogateOutput {
        objective,
        gradient,
        tokens,
        clip_fraction: clipped_tokens as f64 / denom,
        mean_kl: kl_sum / denom,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub agent_id: usize,
    pub samples: usize,
    pub objective: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

/// Every agent whose buffer holds at least `buffer_threshold` samples drains
/// it and takes one gradient-ascent step on exactly those samples.
pub fn train_step_async(
    buffers: &mut [AgentBuffer],
    agents: &mut [AgentPolicy],
    cfg: &TrainConfig,
) -> Result<Vec<UpdateReport>> {
    let mut reports = Vec::new();
    for buffer in buffers.iter_mut() {
        if buffer.len() < cfg.buffer_threshold {
            continue;
        }
        let agent = agents
            .get_mut(buffer.agent_id)
            .ok_or_else(|| Error::Config(format!("buffer for unknown agent {}", buffer.agent_id)))?;
        let drained: Vec<RolloutSample> = buffer.samples.drain(..).collect();
        let out = surrogate_objective(&drained, agent, cfg)?;
        agent.apply_update(&out.gradient, cfg.learning_rate);
        buffer.update_count += 1;
        reports.push(UpdateReport {
            agent_id: buffer.agent_id,
            samples: drained.len(),
            objective: out.objective,
            clip_fraction: out.clip_fraction,
            mean_kl: out.mean_kl,
            tokens: out.tokens,
        });
    }
    Ok(reports)
}

/// Policy shape shared by every agent on a taskset.
pub fn policy_shape(tasks: &[Task]) -> Result<(usize, usize)> {
    let vocab = tasks.iter().map(|t| t.vocab).max();
    let len = tasks.iter().map(|t| t.gen_length).max();
    match (vocab, len) {
        (Some(v), Some(l)) => Ok((v, l)),
        _ => Err(Error::Config("empty taskset".into())),
    }
}

/// Fresh agents. With `init_noise > 0` each agent's root-context logits get
/// seeded Gaussian noise, and that noisy table is also its reference.
pub fn init_agents(settings: &ExperimentSettings, tasks: &[Task]) -> Result<Vec<AgentPolicy>> {
    let (vocab, len) = policy_shape(tasks)?;
    (0..settings.agents.count)
        .map(|j| {
            let mut params = PolicyParams::new(vocab, len)?;
            if settings.agents.init_noise > 0.0 {
                let mut rng = stream(settings.agent_seed(j), "agent-init");
                let normal = Normal::new(0.0, settings.agents.init_noise)
                    .map_err(|e| Error::Config(format!("init noise: {e}")))?;
                for task in tasks {
                    for pos in 0..task.gen_length {
                        let z = (0..vocab).map(|_| normal.sample(&mut rng)).collect();
                        params.set_logits(ContextKey::root(task.task_id), pos, z)?;
                    }
                }
            }
            Ok(AgentPolicy::new(params))
        })
        .collect()
}

/// Result of tree-search inference on a taskset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over agents of per-agent Pass@1.
    pub pass_at_1: f64,
    pub pass_at_1_per_agent: Vec<f64>,
    /// Mean training-split reward of the Pass@1 draws, averaged over agents.
    pub eval_reward: f64,
    pub pass_at_1_mcts: f64,
    /// Share of tasks where no node passed the public tests.
    pub mcts_fallback_fraction: f64,
    pub pass_at_n: f64,
    pub pass1_trials: usize,
    #[serde(skip)]
    pub solutions: Vec<TaskSolutions>,
    #[serde(skip)]
    pub traces: Vec<ExpansionTrace>,
}

/// Pass@1 from the root context for every agent, then one shared inference
/// tree per task with `budget` nodes for Pass@1(MCTS) and Pass@N.
pub fn evaluate_agents(
    agents: &[PolicyParams],
    tasks: &[Task],
    budget: usize,
    pass1_samples: usize,
    seed: u64,
    label: &str,
    trace: bool,
) -> Result<EvalReport> {
    if agents.is_empty() || tasks.is_empty() {
        return Err(Error::Config("evaluation needs agents and tasks".into()));
    }
    for p in agents {
        if p.vocab() < tasks.iter().map(|t| t.vocab).max().unwrap_or(0)
            || p.max_len() < tasks.iter().map(|t| t.gen_length).max().unwrap_or(0)
        {
            return Err(Error::Validation(format!(
                "policy shape (V={}, L={}) does not cover the taskset",
                p.vocab(),
                p.max_len()
            )));
        }
    }
    let mut per_agent = vec![0.0; agents.len()];
    let mut reward_sum = 0.0;
    for (j, params) in agents.iter().enumerate() {
        for task in tasks {
            let mut rng = stream(seed, &format!("{label}/pass1/agent={j}/task={}", task.task_id));
            let ctx = ContextKey::root(task.task_id);
            for _ in 0..pass1_samples {
                let solution = params.sample_sequence(&ctx, &mut rng, task.gen_length)?;
                let r = evaluate(task, &solution, Split::TrainAll);
                per_agent[j] += r.fully_correct() as u8 as f64;
                reward_sum += r.reward;
            }
        }
    }
    let draws = (tasks.len() * pass1_samples).max(1) as f64;
    for v in per_agent.iter_mut() {
        *v /= draws;
    }
    let policies: Vec<AgentPolicy> = agents.iter().cloned().map(AgentPolicy::new).collect();
    let mut mcts = 0.0;
    let mut fallback = 0.0;
    let mut any = 0.0;
    let mut solutions = Vec::with_capacity(tasks.len());
    let mut traces = Vec::new();
    for task in tasks {
        let mut rng = stream(seed, &format!("{label}/tree/task={}", task.task_id));
        let mut selector = SelectorState::new(policies.len());
        let rollout = if budget >= 2 {
            rollout_tree(task, &policies, &mut selector, budget, RewardMode::Fraction, &mut rng, trace)?
        } else {
            single_node_rollout(task, &policies, &mut selector, &mut rng, trace)?
        };
        let sel = pass_at_1_mcts(&rollout.outcomes)?;
        mcts += sel.passed as f64;
        fallback += sel.fallback as u8 as f64;
        any += pass_at_n(&rollout.outcomes)? as f64;
        solutions.push(TaskSolutions {
            task_id: task.task_id,
            solutions: rollout.tree.expanded_nodes().iter().map(|n| n.solution.clone()).collect(),
        });
        traces.extend(rollout.traces);
    }
    let t = tasks.len() as f64;
    Ok(EvalReport {
        pass_at_1: per_agent.iter().sum::<f64>() / agents.len() as f64,
        pass_at_1_per_agent: per_agent,
        eval_reward: reward_sum / (draws * agents.len() as f64),
        pass_at_1_mcts: mcts / t,
        mcts_fallback_fraction: fallback / t,
        pass_at_n: any / t,
        pass1_trials: pass1_samples,
        solutions,
        traces,
    })
}

/// Budget-1 inference: a single selection and expansion. Training requires
/// `n_budget >= 2`, so this path exists for evaluation only.
fn single_node_rollout(
    task: &Task,
    agents: &[AgentPolicy],
    selector: &mut SelectorState,
    rng: &mut StreamRng,
    trace: bool,
) -> Result<TreeRollout> {
    let mut tree = SearchTree::new(task.task_id);
    let (agent_id, agent_comparison) = selector.select_agent_traced(rng)?;
    let (choice, descent) = selector.descend_traced(&tree, agent_id, rng)?;
    let ctx = ContextKey::root(task.task_id);
    let params = agents[agent_id].old_params();
    let solution = params.sample_sequence(&ctx, rng, task.gen_length)?;
    let lps = params.per_token_logprobs(&ctx, &solution)?;
    let result = evaluate(task, &solution, Split::TrainAll);
    let id = tree.append_node(
        choice.anchor_node_id,
        agent_id,
        solution,
        result.reward,
        feedback_for(task, &result)?,
    )?;
    selector.update_posteriors(&choice, result.reward)?;
    let traces = if trace {
        vec![ExpansionTrace {
            task_id: task.task_id,
            node_id: id,
            agent_comparison,
            descent,
            choice,
            raw_reward: result.reward,
            agent_posteriors: (0..agents.len()).map(|j| *selector.agent_arm(j).unwrap()).collect(),
        }]
    } else {
        Vec::new()
    };
    Ok(TreeRollout {
        tree,
        contexts: vec![ContextKey::root(task.task_id), ctx],
        old_logprobs: vec![Vec::new(), lps],
        outcomes: vec![SolutionOutcome {
            index: id,
            passed_all_public: result.passed_all_public,
            passed_all_private: result.passed_all_private,
        }],
        traces,
    })
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

/// One record per evaluation point. Training statistics cover the steps
/// since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub reward_mode: RewardMode,
    pub step: usize,
    pub pass_at_1: f64,
    pub pass_at_1_per_agent: Vec<f64>,
    pub eval_reward: f64,
    pub pass_at_1_mcts: f64,
    pub mcts_fallback_fraction: f64,
    pub pass_at_n: f64,
    pub agent_mean_reward: Vec<Option<f64>>,
    pub agent_samples: Vec<usize>,
    pub agent_updates: Vec<usize>,
    pub raw_reward_mean: Option<f64>,
    pub raw_reward_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaped_reward_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaped_reward_std: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub mean_kl: Option<f64>,
    pub rollouts: usize,
    pub dropped: usize,
}

/// Receives run artefacts as they are produced. All methods default to no-ops.
pub trait RunObserver {
    fn on_metrics(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    fn on_tree(&mut self, _step: usize, _rollout: &TreeRollout) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _step: usize, _agents: &[AgentPolicy]) -> Result<()> {
        Ok(())
    }
    fn on_selector_trace(&mut self, _step: usize, _trace: &ExpansionTrace) -> Result<()> {
        Ok(())
    }
    fn on_final_eval(&mut self, _report: &EvalReport) -> Result<()> {
        Ok(())
    }
    /// Whether rollouts should record selector traces.
    fn wants_traces(&self) -> bool {
        false
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;
impl RunObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    pub agents: Vec<AgentPolicy>,
    /// Times the shaping pass ran; zero for parallel sampling.
    pub shaping_invocations: usize,
    pub samples_per_agent: Vec<usize>,
    pub final_eval: EvalReport,
}

#[derive(Default)]
struct WindowStats {
    agent_rewards: Vec<Vec<f64>>,
    raw: Vec<f64>,
    shaped: Vec<f64>,
    clip: Vec<(f64, usize)>,
    kl: Vec<(f64, usize)>,
    updates: Vec<usize>,
    rollouts: usize,
    dropped: usize,
}

impl WindowStats {
    fn new(agents: usize) -> Self {
        Self {
            agent_rewards: vec![Vec::new(); agents],
            updates: vec![0; agents],
            ..Self::default()
        }
    }
}

fn token_weighted(values: &[(f64, usize)]) -> Option<f64> {
    let tokens: usize = values.iter().map(|v| v.1).sum();
    (tokens > 0).then(|| values.iter().map(|(v, t)| v * *t as f64).sum::<f64>() / tokens as f64)
}

/// Runs the full training loop and emits metrics through `observer`.
pub fn run_experiment(
    settings: &ExperimentSettings,
    tasks: &[Task],
    observer: &mut dyn RunObserver,
) -> Result<RunSummary> {
    settings.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("empty taskset".into()));
    }
    let cfg = &settings.train;
    let hash = settings.hash();
    let n_agents = settings.agents.count;
    let mut agents = init_agents(settings, tasks)?;
    let mut buffers: Vec<AgentBuffer> = (0..n_agents).map(AgentBuffer::new).collect();
    let mut last_group: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut shaping_invocations = 0usize;
    let mut samples_per_agent = vec![0usize; n_agents];
    let mut records = Vec::new();
    let mut window = WindowStats::new(n_agents);
    let mut window_samples = vec![0usize; n_agents];
    let trace = observer.wants_traces();

    let mut emit = |step: usize,
                    agents: &[AgentPolicy],
                    window: &mut WindowStats,
                    window_samples: &mut Vec<usize>,
                    observer: &mut dyn RunObserver|
     -> Result<EvalReport> {
        let params: Vec<PolicyParams> = agents.iter().map(|a| a.params().clone()).collect();
        let report = evaluate_agents(
            &params,
            tasks,
            settings.eval.budget,
            settings.eval.pass1_samples,
            cfg.seed,
            &format!("eval/step={step}"),
            false,
        )?;
        let raw = mean_std(&window.raw);
        let shaped = mean_std(&window.shaped);
        let record = MetricsRecord {
            config_hash: hash.clone(),
            seed: cfg.seed,
            mode: cfg.mode,
            reward_mode: cfg.reward_mode,
            step,
            pass_at_1: report.pass_at_1,
            pass_at_1_per_agent: report.pass_at_1_per_agent.clone(),
            eval_reward: report.eval_reward,
            pass_at_1_mcts: report.pass_at_1_mcts,
            mcts_fallback_fraction: report.mcts_fallback_fraction,
            pass_at_n: report.pass_at_n,
            agent_mean_reward: window
                .agent_rewards
                .iter()
                .map(|r| mean_std(r).map(|(m, _)| m))
                .collect(),
            agent_samples: window_samples.clone(),
            agent_updates: window.updates.clone(),
            raw_reward_mean: raw.map(|v| v.0),
            raw_reward_std: raw.map(|v| v.1),
            shaped_reward_mean: shaped.map(|v| v.0),
            shaped_reward_std: shaped.map(|v| v.1),
            clip_fraction: token_weighted(&window.clip),
            mean_kl: token_weighted(&window.kl),
            rollouts: window.rollouts,
            dropped: window.dropped,
        };
        observer.on_metrics(&record)?;
        records.push(record);
        *window = WindowStats::new(agents.len());
        window_samples.iter_mut().for_each(|v| *v = 0);
        Ok(report)
    };

    let mut final_eval = emit(0, &agents, &mut window, &mut window_samples, observer)?;
    let batch = cfg.tasks_per_step.min(tasks.len());
    for step in 0..cfg.steps {
        let mut schedule_rng = stream(cfg.seed, &format!("schedule/step={step}"));
        let mut picked: Vec<usize> = sample_indices(&mut schedule_rng, tasks.len(), batch).into_vec();
        picked.sort_by_key(|&i| tasks[i].task_id);
        for agent in agents.iter_mut() {
            agent.snapshot();
        }
        for &ti in &picked {
            let task = &tasks[ti];
            if let Some(prev) = last_group.get(&task.task_id) {
                if filter_task(prev)? == FilterDecision::Drop {
                    // skip this visit; the next visit probes the task again
                    last_group.remove(&task.task_id);
                    window.dropped += 1;
                    continue;
                }
            }
            let mut rng = stream(cfg.seed, &format!("rollout/step={step}/task={}", task.task_id));
            let samples = if cfg.mode.is_tree() {
                let mut selector = SelectorState::new(n_agents);
                let mut rollout = rollout_tree(task, &agents, &mut selector, cfg.n_budget, cfg.reward_mode, &mut rng, trace)?;
                shape_tree(&mut rollout.tree, &cfg.shaping, cfg.length_penalty.as_ref())?;
                shaping_invocations += 1;
                let samples = tree_samples(&rollout, cfg.shaping.std_epsilon, cfg.per_agent_renorm)?;
                let rewards: Vec<f64> = rollout
                    .tree
                    .expanded_nodes()
                    .iter()
                    .map(|n| n.raw_reward.expect("non-root"))
                    .collect();
                for node in rollout.tree.expanded_nodes() {
                    window.agent_rewards[node.agent_id.expect("non-root")].push(node.raw_reward.expect("non-root"));
                    window.shaped.push(node.shaped_reward.expect("shaped"));
                }
                window.raw.extend(&rewards);
                for t in &rollout.traces {
                    observer.on_selector_trace(step, t)?;
                }
                observer.on_tree(step, &rollout)?;
                last_group.insert(task.task_id, rewards);
                samples
            } else {
                let group = rollout_parallel(task, &agents[0], cfg.n_budget, cfg.reward_mode, &mut rng)?;
                let rewards: Vec<f64> = group.iter().map(|s| s.reward).collect();
                let penalized: Vec<f64> = group
                    .iter()
                    .map(|s| s.reward + cfg.length_penalty.as_ref().map_or(0.0, |p| overlong_penalty(s.solution.len(), p)))
                    .collect();
                let adv = group_advantages(&penalized, cfg.shaping.std_epsilon)?;
                window.agent_rewards[0].extend(&rewards);
                window.raw.extend(&rewards);
                last_group.insert(task.task_id, rewards);
                let weight = 1.0 / group.len() as f64;
                group
                    .into_iter()
                    .zip(adv)
                    .map(|(s, a)| RolloutSample {
                        agent_id: 0,
                        context: ContextKey::root(task.task_id),
                        tokens: s.solution,
                        advantage: a,
                        old_logprobs: s.old_logprobs,
                        weight,
                    })
                    .collect()
            };
            window.rollouts += 1;
            for s in samples {
                samples_per_agent[s.agent_id] += 1;
                window_samples[s.agent_id] += 1;
                buffers[s.agent_id].samples.push_back(s);
            }
            for report in train_step_async(&mut buffers, &mut agents, cfg)? {
                window.updates[report.agent_id] += 1;
                window.clip.push((report.clip_fraction, report.tokens));
                window.kl.push((report.mean_kl, report.tokens));
            }
        }
        let done = step + 1;
        if settings.checkpoint_every > 0 && done % settings.checkpoint_every == 0 && done != cfg.steps {
            observer.on_checkpoint(done, &agents)?;
        }
        if done % settings.eval.every == 0 || done == cfg.steps {
            final_eval = emit(done, &agents, &mut window, &mut window_samples, observer)?;
        }
    }
    observer.on_checkpoint(cfg.steps, &agents)?;
    // the final inference pass keeps solutions for diversity reports
    let params: Vec<PolicyParams> = agents.iter().map(|a| a.params().clone()).collect();
    let with_solutions = evaluate_agents(
        &params,
        tasks,
        settings.eval.budget,
        settings.eval.pass1_samples,
        cfg.seed,
        &format!("eval/step={}", cfg.steps),
        trace,
    )?;
    debug_assert_eq!(with_solutions.pass_at_1, final_eval.pass_at_1);
    final_eval = with_solutions;
    observer.on_final_eval(&final_eval)?;
    Ok(RunSummary {
        records,
        agents,
        shaping_invocations,
        samples_per_agent,
        final_eval,
    })
}
