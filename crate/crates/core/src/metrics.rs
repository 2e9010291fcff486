//! Evaluation metrics: Pass@1, Pass@N, Pass@1 under tree search with the
//! latest-wins rule, and cluster-based diversity (DA@K, EA, NAUADC).

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{evaluate, operator_multiset, run_program, Split, Task, TaskKind};
use crate::error::{Error, Result};
use crate::policy::{ContextKey, PolicyParams};
use crate::tree::Token;

/// One sampled solution as seen by the evaluator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionOutcome {
    /// Expansion index in a tree, or sample index for parallel sampling.
    pub index: usize,
    pub passed_all_public: bool,
    pub passed_all_private: bool,
}

impl SolutionOutcome {
    pub fn fully_correct(&self) -> bool {
        self.passed_all_public && self.passed_all_private
    }
}

/// Draws one solution from the root context; 1 iff it passes every test.
pub fn pass_at_1<R: Rng + ?Sized>(policy: &PolicyParams, task: &Task, rng: &mut R) -> Result<u8> {
    let solution = policy.sample_sequence(&ContextKey::root(task.task_id), rng, task.gen_length)?;
    Ok(evaluate(task, &solution, Split::TrainAll).fully_correct() as u8)
}

pub fn pass_at_n(outcomes: &[SolutionOutcome]) -> Result<u8> {
    if outcomes.is_empty() {
        return Err(Error::Domain("Pass@N of no solutions".into()));
    }
    Ok(outcomes.iter().any(SolutionOutcome::fully_correct) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MctsSelection {
    pub index: usize,
    /// No node passed the public tests; the latest node was taken instead.
    pub fallback: bool,
    pub passed: u8,
}

/// Latest-wins: the public-test passer with the largest expansion index is
/// submitted and scored on the private tests. Without any public passer the
/// globally latest node is submitted.
pub fn pass_at_1_mcts(outcomes: &[SolutionOutcome]) -> Result<MctsSelection> {
    let latest = |it: &mut dyn Iterator<Item = &SolutionOutcome>| it.max_by_key(|o| o.index).cloned();
    if let Some(o) = latest(&mut outcomes.iter().filter(|o| o.passed_all_public)) {
        return Ok(MctsSelection {
            index: o.index,
            fallback: false,
            passed: o.passed_all_private as u8,
        });
    }
    let o = latest(&mut outcomes.iter()).ok_or_else(|| Error::Domain("Pass@1(MCTS) of an empty tree".into()))?;
    Ok(MctsSelection {
        index: o.index,
        fallback: true,
        passed: o.passed_all_private as u8,
    })
}

/// Sizes of solution clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterProfile {
    sizes: Vec<u64>,
}

impl ClusterProfile {
    pub fn new(sizes: Vec<u64>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Validation(format!("cluster sizes must be positive and non-empty: {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    /// Total solutions N.
    pub fn total(&self) -> u64 {
        self.sizes.iter().sum()
    }

    /// Cluster count M.
    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Expected number of distinct clusters hit by `k` draws without
/// replacement: `Σ_m 1 − C(N−s_m, K)/C(N, K)`, evaluated exactly.
pub fn da_at_k(profile: &ClusterProfile, k: u64) -> Result<f64> {
    Ok(da_at_k_exact(profile, k)?
        .to_f64()
        .expect("DA@K is a bounded rational"))
}

pub fn da_at_k_exact(profile: &ClusterProfile, k: u64) -> Result<BigRational> {
    let n = profile.total();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("K = {k} outside 1..={n}")));
    }
    let missed: BigUint = profile.sizes.iter().map(|&s| binomial(n - s, k)).sum();
    let total = binomial(n, k);
    let m = BigRational::from_integer(profile.clusters().into());
    Ok(m - BigRational::new(missed.into(), total.into()))
}

/// Exponential of the Shannon entropy of cluster proportions.
pub fn effective_algorithms(profile: &ClusterProfile) -> f64 {
    let sizes = &profile.sizes;
    // uniform profiles have the closed form EA = M
    if sizes.iter().all(|&s| s == sizes[0]) {
        return sizes.len() as f64;
    }
    let n = profile.total() as f64;
    let entropy: f64 = sizes
        .iter()
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NauadcVariant {
    /// `Σ_{k=1}^{K_max} DA@k / (K_max − 1)`.
    #[default]
    AsPublished,
    /// `Σ_{k=2}^{K_max} DA@k / (K_max − 1)`; not the published normalization.
    ExcludeFirst,
}

pub fn nauadc(profile: &ClusterProfile, k_max: u64, variant: NauadcVariant) -> Result<f64> {
    if k_max < 2 {
        return Err(Error::Domain("NAUADC needs K_max >= 2".into()));
    }
    if k_max > profile.total() {
        return Err(Error::Domain(format!("K_max {k_max} exceeds N = {}", profile.total())));
    }
    let first = match variant {
        NauadcVariant::AsPublished => 1,
        NauadcVariant::ExcludeFirst => 2,
    };
    let mut sum = BigRational::zero();
    for k in first..=k_max {
        sum += da_at_k_exact(profile, k)?;
    }
    let value = sum / BigRational::from_integer((k_max - 1).into());
    Ok(value.to_f64().expect("bounded rational"))
}

/// Inputs used to fingerprint programs semantically.
pub const CANONICAL_GRID: std::ops::RangeInclusive<i64> = -5..=5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Fingerprint {
    Tokens(Vec<Token>),
    Program { outputs: Vec<i64>, operators: [usize; 3] },
}

/// Semantic identity of a correct solution. Strings are their tokens;
/// programs are their outputs on [`CANONICAL_GRID`] plus the multiset of
/// arithmetic operators they execute.
pub fn fingerprint(task: &Task, solution: &[Token]) -> Result<Fingerprint> {
    if !evaluate(task, solution, Split::TrainAll).fully_correct() {
        return Err(Error::Validation(format!(
            "solution {solution:?} is not correct for task {}",
            task.task_id
        )));
    }
    Ok(match task.kind {
        TaskKind::StringMatch => Fingerprint::Tokens(solution.to_vec()),
        TaskKind::ExprSynth => Fingerprint::Program {
            outputs: CANONICAL_GRID
                .map(|x| run_program(solution, x, task.max_const).expect("correct programs are well formed"))
                .collect(),
            operators: operator_multiset(solution, task.max_const),
        },
    })
}

/// Cluster id of each solution, numbered by first appearance.
pub fn cluster_ids(solutions: &[Vec<Token>], task: &Task) -> Result<Vec<usize>> {
    let mut seen: BTreeMap<Fingerprint, usize> = BTreeMap::new();
    solutions
        .iter()
        .map(|s| {
            let fp = fingerprint(task, s)?;
            let next = seen.len();
            Ok(*seen.entry(fp).or_insert(next))
        })
        .collect()
}

pub fn canonical_cluster(solutions: &[Vec<Token>], task: &Task) -> Result<ClusterProfile> {
    let ids = cluster_ids(solutions, task)?;
    let clusters = ids.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0u64; clusters];
    for id in ids {
        sizes[id] += 1;
    }
    ClusterProfile::new(sizes)
}

/// Solutions one method produced for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSolutions {
    pub task_id: u32,
    pub solutions: Vec<Vec<Token>>,
}

/// One row of the diversity table; every column is a mean over the
/// commonly solved tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub method: String,
    pub tasks: usize,
    pub pass_at_n: f64,
    pub da_at_1: f64,
    pub da_at_half: f64,
    pub da_at_n: f64,
    pub ea: f64,
    pub nauadc: f64,
}

/// Builds the diversity table over tasks that every method solved at least
/// once. Pass@N is measured over all tasks a method attempted.
pub fn diversity_table(
    methods: &[(String, Vec<TaskSolutions>)],
    tasks: &BTreeMap<u32, Task>,
    variant: NauadcVariant,
) -> Result<Vec<DiversityRow>> {
    let mut correct: Vec<BTreeMap<u32, Vec<Vec<Token>>>> = Vec::new();
    let mut pass_n = Vec::new();
    for (_, per_task) in methods {
        let mut by_task = BTreeMap::new();
        let mut solved = 0usize;
        for ts in per_task {
            let task = tasks
                .get(&ts.task_id)
                .ok_or_else(|| Error::Structural(format!("unknown task {}", ts.task_id)))?;
            let good: Vec<Vec<Token>> = ts
                .solutions
                .iter()
                .filter(|s| evaluate(task, s, Split::TrainAll).fully_correct())
                .cloned()
                .collect();
            if !good.is_empty() {
                solved += 1;
                by_task.insert(ts.task_id, good);
            }
        }
        pass_n.push(if per_task.is_empty() {
            0.0
        } else {
            solved as f64 / per_task.len() as f64
        });
        correct.push(by_task);
    }
    let common: Vec<u32> = match correct.first() {
        None => Vec::new(),
        Some(first) => first
            .keys()
            .copied()
            .filter(|id| correct.iter().all(|m| m.contains_key(id)))
            .collect(),
    };
    if common.is_empty() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for (((name, _), by_task), method_pass_n) in methods.iter().zip(&correct).zip(pass_n) {
        let mut sums = [0.0; 5];
        let mut nauadc_tasks = 0usize;
        for id in &common {
            let profile = canonical_cluster(&by_task[id], &tasks[id])?;
            let n = profile.total();
            sums[0] += da_at_k(&profile, 1)?;
            sums[1] += da_at_k(&profile, (n / 2).max(1))?;
            sums[2] += da_at_k(&profile, n)?;
            sums[3] += effective_algorithms(&profile);
            if n >= 2 {
                sums[4] += nauadc(&profile, n, variant)?;
                nauadc_tasks += 1;
            }
        }
        let t = common.len() as f64;
        rows.push(DiversityRow {
            method: name.clone(),
            tasks: common.len(),
            pass_at_n: method_pass_n,
            da_at_1: sums[0] / t,
            da_at_half: sums[1] / t,
            da_at_n: sums[2] / t,
            ea: sums[3] / t,
            nauadc: if nauadc_tasks == 0 {
                f64::NAN
            } else {
                sums[4] / nauadc_tasks as f64
            },
        });
    }
    Ok(rows)
}

/// Comma-separated rendering of the diversity table.
pub fn diversity_csv(rows: &[DiversityRow]) -> String {
    let mut out = String::from("method,tasks,pass_at_n,da_at_1,da_at_half_n,da_at_n,ea,nauadc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.method, r.tasks, r.pass_at_n, r.da_at_1, r.da_at_half, r.da_at_n, r.ea, r.nauadc
        ));
    }
    out
}
