//! Verifiable synthetic tasks with public and private test splits.
//!
//! `StringMatch` asks for a hidden token string; each test checks one
//! position. `ExprSynth` asks for a fixed-length postfix program over
//! `{x, 0..=C, +, -, *, noop}` whose output matches a hidden program on a set
//! of integer inputs. Malformed programs fail every test.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{Diagnostic, FeedbackRecord, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    StringMatch,
    ExprSynth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Public,
    Private,
    /// Public and private together; the training reward.
    TrainAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TestCase {
    /// Token at `index` must equal the target token.
    Position { index: usize },
    /// Program run on `input` must return `output`.
    Io { input: i64, output: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub task_id: u32,
    pub kind: TaskKind,
    /// Token vocabulary the task is posed over.
    pub vocab: usize,
    /// Largest constant in the expression language (unused for string tasks).
    #[serde(default)]
    pub max_const: u32,
    /// Target string, or the hidden reference program.
    pub hidden_target: Vec<Token>,
    pub public_tests: Vec<TestCase>,
    pub private_tests: Vec<TestCase>,
    pub gen_length: usize,
}

impl Task {
    pub fn tests(&self, split: Split) -> Vec<TestCase> {
        match split {
            Split::Public => self.public_tests.clone(),
            Split::Private => self.private_tests.clone(),
            Split::TrainAll => self
                .public_tests
                .iter()
                .chain(&self.private_tests)
                .copied()
                .collect(),
        }
    }

    /// Checks that splits are non-empty and disjoint and that the hidden
    /// target passes every test.
    pub fn validate(&self) -> Result<()> {
        if self.public_tests.is_empty() || self.private_tests.is_empty() {
            return Err(Error::Validation(format!("task {}: empty test split", self.task_id)));
        }
        let public: BTreeSet<_> = self.public_tests.iter().map(test_identity).collect();
        if self.private_tests.iter().any(|t| public.contains(&test_identity(t))) {
            return Err(Error::Validation(format!(
                "task {}: public and private tests overlap",
                self.task_id
            )));
        }
        if self.hidden_target.len() != self.gen_length {
            return Err(Error::Validation(format!(
                "task {}: target length differs from gen_length",
                self.task_id
            )));
        }
        let r = evaluate(self, &self.hidden_target, Split::TrainAll);
        if !(r.passed_all_public && r.passed_all_private) {
            return Err(Error::Validation(format!(
                "task {}: hidden target fails its own tests",
                self.task_id
            )));
        }
        Ok(())
    }
}

fn test_identity(t: &TestCase) -> (i64, i64) {
    match *t {
        TestCase::Position { index } => (0, index as i64),
        TestCase::Io { input, .. } => (1, input),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: Split,
    /// Fraction of the split's tests passed.
    pub reward: f64,
    /// Per-test outcomes on the split, public tests first for `TrainAll`.
    pub flags: Vec<bool>,
    pub diagnostics: Vec<Option<Diagnostic>>,
    pub passed_all_public: bool,
    pub passed_all_private: bool,
}

impl EvalResult {
    pub fn fully_correct(&self) -> bool {
        self.passed_all_public && self.passed_all_private
    }

    pub fn reward_with(&self, mode: RewardMode) -> f64 {
        match mode {
            RewardMode::Fraction => self.reward,
            RewardMode::Binary => {
                if self.flags.iter().all(|&f| f) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Training reward granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Fraction,
    /// 1 only when every test of the split passes.
    Binary,
}

fn outcome(test_outcomes: Vec<(bool, Option<Diagnostic>)>, split: Split) -> EvalResult {
    let flags: Vec<bool> = test_outcomes.iter().map(|o| o.0).collect();
    let diagnostics = test_outcomes.iter().map(|o| o.1).collect();
    let reward = if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
    };
    EvalResult {
        split,
        reward,
        flags,
        diagnostics,
        passed_all_public: false,
        passed_all_private: false,
    }
}

fn run_tests(task: &Task, tests: &[TestCase], solution: &[Token]) -> Vec<(bool, Option<Diagnostic>)> {
    match task.kind {
        TaskKind::StringMatch => {
            if solution.len() != task.gen_length {
                return vec![(false, Some(Diagnostic::WrongLength)); tests.len()];
            }
            tests
                .iter()
                .map(|t| match *t {
                    TestCase::Position { index } => {
                        if solution[index] == task.hidden_target[index] {
                            (true, None)
                        } else {
                            (false, Some(Diagnostic::Mismatch))
                        }
                    }
                    TestCase::Io { .. } => (false, Some(Diagnostic::WrongOutput)),
                })
                .collect()
        }
        TaskKind::ExprSynth => {
            if solution.len() != task.gen_length {
                return vec![(false, Some(Diagnostic::Malformed)); tests.len()];
            }
            tests
                .iter()
                .map(|t| match *t {
                    TestCase::Io { input, output } => match run_program(solution, input, task.max_const) {
                        Ok(v) if v == output => (true, None),
                        Ok(_) => (false, Some(Diagnostic::WrongOutput)),
                        Err(_) => (false, Some(Diagnostic::Malformed)),
                    },
                    TestCase::Position { .. } => (false, Some(Diagnostic::WrongOutput)),
                })
                .collect()
        }
    }
}

fn evaluate_kind(task: &Task, solution: &[Token], split: Split) -> EvalResult {
    let public = run_tests(task, &task.public_tests, solution);
    let private = run_tests(task, &task.private_tests, solution);
    let passed_all_public = public.iter().all(|o| o.0);
    let passed_all_private = private.iter().all(|o| o.0);
    let selected = match split {
        Split::Public => public,
        Split::Private => private,
        Split::TrainAll => public.into_iter().chain(private).collect(),
    };
    let mut r = outcome(selected, split);
    r.passed_all_public = passed_all_public;
    r.passed_all_private = passed_all_private;
    r
}

/// Scores a string candidate; wrong-length candidates fail every test.
pub fn evaluate_string_match(task: &Task, solution: &[Token], split: Split) -> Result<EvalResult> {
    if task.kind != TaskKind::StringMatch {
        return Err(Error::Domain(format!("task {} is not a string task", task.task_id)));
    }
    Ok(evaluate_kind(task, solution, split))
}

/// Scores a program candidate; malformed programs fail every test.
pub fn evaluate_expr_synth(task: &Task, program: &[Token], split: Split) -> Result<EvalResult> {
    if task.kind != TaskKind::ExprSynth {
        return Err(Error::Domain(format!("task {} is not an expression task", task.task_id)));
    }
    Ok(evaluate_kind(task, program, split))
}

pub fn evaluate(task: &Task, solution: &[Token], split: Split) -> EvalResult {
    evaluate_kind(task, solution, split)
}

/// Public-split feedback of an evaluation. Private outcomes never appear.
pub fn feedback_for(task: &Task, result: &EvalResult) -> Result<FeedbackRecord> {
    let n = task.public_tests.len();
    match result.split {
        Split::Private => Err(Error::Domain("feedback requested from a private-split result".into())),
        Split::Public | Split::TrainAll => {
            if result.flags.len() < n {
                return Err(Error::Validation("result has fewer flags than public tests".into()));
            }
            FeedbackRecord::new(result.flags[..n].to_vec(), result.diagnostics[..n].to_vec())
        }
    }
}

/// Instruction of the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Input,
    Const(i64),
    Add,
    Sub,
    Mul,
    Noop,
}

/// Vocabulary size of the expression language with constants `0..=max_const`.
pub fn expr_vocab(max_const: u32) -> usize {
    max_const as usize + 6
}

pub fn decode_op(token: Token, max_const: u32) -> Option<Op> {
    let c = max_const;
    Some(match token {
        0 => Op::Input,
        t if t >= 1 && t <= c + 1 => Op::Const((t - 1) as i64),
        t if t == c + 2 => Op::Add,
        t if t == c + 3 => Op::Sub,
        t if t == c + 4 => Op::Mul,
        t if t == c + 5 => Op::Noop,
        _ => return None,
    })
}

pub fn encode_op(op: Op, max_const: u32) -> Token {
    let c = max_const;
    match op {
        Op::Input => 0,
        Op::Const(v) => {
            assert!((0..=c as i64).contains(&v), "constant {v} outside 0..={c}");
            v as Token + 1
        }
        Op::Add => c + 2,
        Op::Sub => c + 3,
        Op::Mul => c + 4,
        Op::Noop => c + 5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Malformed;

/// Runs a postfix program on one input with a stack machine.
pub fn run_program(program: &[Token], input: i64, max_const: u32) -> std::result::Result<i64, Malformed> {
    let mut stack: Vec<i64> = Vec::with_capacity(program.len());
    for &tok in program {
        match decode_op(tok, max_const).ok_or(Malformed)? {
            Op::Input => stack.push(input),
            Op::Const(v) => stack.push(v),
            Op::Noop => {}
            op => {
                let b = stack.pop().ok_or(Malformed)?;
                let a = stack.pop().ok_or(Malformed)?;
                stack.push(match op {
                    Op::Add => a.wrapping_add(b),
                    Op::Sub => a.wrapping_sub(b),
                    Op::Mul => a.wrapping_mul(b),
                    _ => unreachable!(),
                });
            }
        }
    }
    if stack.len() == 1 {
        Ok(stack[0])
    } else {
        Err(Malformed)
    }
}

/// Counts of executed `+`, `-`, `*` in a well-formed program.
pub fn operator_multiset(program: &[Token], max_const: u32) -> [usize; 3] {
    let mut counts = [0; 3];
    for &tok in program {
        match decode_op(tok, max_const) {
            Some(Op::Add) => counts[0] += 1,
            Some(Op::Sub) => counts[1] += 1,
            Some(Op::Mul) => counts[2] += 1,
            _ => {}
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksetConfig {
    pub string_tasks: usize,
    pub string_vocab: usize,
    pub string_length: usize,
    pub string_public: usize,
    pub string_private: usize,
    pub expr_tasks: usize,
    pub expr_max_const: u32,
    pub expr_length: usize,
    pub expr_public: usize,
    pub expr_private: usize,
    /// Test inputs are drawn from `expr_input_min..=expr_input_max`.
    pub expr_input_min: i64,
    pub expr_input_max: i64,
}

impl Default for TasksetConfig {
    fn default() -> Self {
        Self {
            string_tasks: 32,
            string_vocab: 4,
            string_length: 6,
            string_public: 3,
            string_private: 3,
            expr_tasks: 16,
            expr_max_const: 3,
            expr_length: 4,
            expr_public: 3,
            expr_private: 3,
            expr_input_min: -3,
            expr_input_max: 3,
        }
    }
}

impl TasksetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.string_tasks > 0 {
            if self.string_vocab < 2 || self.string_length == 0 {
                return Err(Error::Config("string tasks need vocab >= 2 and length >= 1".into()));
            }
            if self.string_public == 0 || self.string_private == 0 {
                return Err(Error::Config("string splits must be non-empty".into()));
            }
            if self.string_public + self.string_private > self.string_length {
                return Err(Error::Config(format!(
                    "string splits ({} + {}) exceed the {} testable positions",
                    self.string_public, self.string_private, self.string_length
                )));
            }
        }
        if self.expr_tasks > 0 {
            if self.expr_length < 1 {
                return Err(Error::Config("expression length must be positive".into()));
            }
            if self.expr_public == 0 || self.expr_private == 0 {
                return Err(Error::Config("expression splits must be non-empty".into()));
            }
            if self.expr_input_max < self.expr_input_min {
                return Err(Error::Config("empty expression input range".into()));
            }
            let grid = (self.expr_input_max - self.expr_input_min + 1) as usize;
            if self.expr_public + self.expr_private > grid {
                return Err(Error::Config(format!(
                    "expression splits ({} + {}) exceed the {grid} available inputs",
                    self.expr_public, self.expr_private
                )));
            }
        }
        Ok(())
    }

    /// Largest vocabulary and length across the generated tasks.
    pub fn policy_shape(&self) -> (usize, usize) {
        let mut vocab = 0;
        let mut len = 0;
        if self.string_tasks > 0 {
            vocab = vocab.max(self.string_vocab);
            len = len.max(self.string_length);
        }
        if self.expr_tasks > 0 {
            vocab = vocab.max(expr_vocab(self.expr_max_const));
            len = len.max(self.expr_length);
        }
        (vocab, len)
    }
}

fn string_task<R: Rng + ?Sized>(id: u32, cfg: &TasksetConfig, rng: &mut R) -> Task {
    let target: Vec<Token> = (0..cfg.string_length)
        .map(|_| rng.random_range(0..cfg.string_vocab as Token))
        .collect();
    let mut positions: Vec<usize> = (0..cfg.string_length).collect();
    positions.shuffle(rng);
    let mut public: Vec<usize> = positions[..cfg.string_public].to_vec();
    let mut private: Vec<usize> =
        positions[cfg.string_public..cfg.string_public + cfg.string_private].to_vec();
    public.sort_unstable();
    private.sort_unstable();
    Task {
        task_id: id,
        kind: TaskKind::StringMatch,
        vocab: cfg.string_vocab,
        max_const: 0,
        hidden_target: target,
        public_tests: public.into_iter().map(|index| TestCase::Position { index }).collect(),
        private_tests: private.into_iter().map(|index| TestCase::Position { index }).collect(),
        gen_length: cfg.string_length,
    }
}

fn expr_task<R: Rng + ?Sized>(id: u32, cfg: &TasksetConfig, rng: &mut R) -> Task {
    let vocab = expr_vocab(cfg.expr_max_const);
    let grid: Vec<i64> = (cfg.expr_input_min..=cfg.expr_input_max).collect();
    // rejection-sample a well-formed program that actually depends on x
    let program = loop {
        let candidate: Vec<Token> = (0..cfg.expr_length)
            .map(|_| rng.random_range(0..vocab as Token))
            .collect();
        let outputs: Option<Vec<i64>> = grid
            .iter()
            .map(|&x| run_program(&candidate, x, cfg.expr_max_const).ok())
            .collect();
        if let Some(outputs) = outputs {
            if outputs.windows(2).any(|w| w[0] != w[1]) {
                break candidate;
            }
        }
    };
    let mut inputs = grid;
    inputs.shuffle(rng);
    let io = |input: i64| TestCase::Io {
        input,
        output: run_program(&program, input, cfg.expr_max_const).expect("target is well formed"),
    };
    let mut public: Vec<i64> = inputs[..cfg.expr_public].to_vec();
    let mut private: Vec<i64> = inputs[cfg.expr_public..cfg.expr_public + cfg.expr_private].to_vec();
    public.sort_unstable();
    private.sort_unstable();
    let public_tests = public.into_iter().map(io).collect();
    let private_tests = private.into_iter().map(io).collect();
    Task {
        task_id: id,
        kind: TaskKind::ExprSynth,
        vocab,
        max_const: cfg.expr_max_const,
        hidden_target: program,
        public_tests,
        private_tests,
        gen_length: cfg.expr_length,
    }
}

/// String tasks get ids `0..string_tasks`, expression tasks follow.
pub fn generate_taskset<R: Rng + ?Sized>(cfg: &TasksetConfig, rng: &mut R) -> Result<Vec<Task>> {
    cfg.validate()?;
    let mut tasks = Vec::with_capacity(cfg.string_tasks + cfg.expr_tasks);
    for i in 0..cfg.string_tasks {
        tasks.push(string_task(i as u32, cfg, rng));
    }
    for i in 0..cfg.expr_tasks {
        tasks.push(expr_task((cfg.string_tasks + i) as u32, cfg, rng));
    }
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

/// One task per line.
pub fn taskset_to_jsonl(tasks: &[Task]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task serializes"));
        out.push('\n');
    }
    out
}

pub fn taskset_from_jsonl(text: &str) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(line)
            .map_err(|e| Error::Validation(format!("taskset line {}: {e}", lineno + 1)))?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}
