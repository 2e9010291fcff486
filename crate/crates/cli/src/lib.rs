//! Command implementations behind the `arbor` binary. Each experiment owns
//! one output directory; commands never write into a non-empty one.

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use arbor_core::env::{taskset_from_jsonl, taskset_to_jsonl, Task};
use arbor_core::metrics::{diversity_csv, diversity_table, DiversityRow, NauadcVariant, TaskSolutions};
use arbor_core::policy::{AgentPolicy, PolicyParams};
use arbor_core::rng::stream;
use arbor_core::selector::SelectorState;
use arbor_core::trainer::{
    evaluate_agents, rollout_tree, run_experiment, EvalReport, ExpansionTrace, MetricsRecord, RunObserver, RunSummary,
    TreeRollout,
};
use arbor_core::env::RewardMode;
use serde::Serialize;
use serde_json::{json, Map, Value};

pub use config::{ExperimentConfig, LoadedConfig};
pub use error::CliError;

/// Record fields that survive any metric-subset filter.
pub const IDENTITY_FIELDS: [&str; 5] = ["config_hash", "seed", "mode", "reward_mode", "step"];

/// Every field of a metrics record, in serialization order.
pub const METRIC_FIELDS: [&str; 23] = [
    "config_hash",
    "seed",
    "mode",
    "reward_mode",
    "step",
    "pass_at_1",
    "pass_at_1_per_agent",
    "eval_reward",
    "pass_at_1_mcts",
    "mcts_fallback_fraction",
    "pass_at_n",
    "agent_mean_reward",
    "agent_samples",
    "agent_updates",
    "raw_reward_mean",
    "raw_reward_std",
    "shaped_reward_mean",
    "shaped_reward_std",
    "clip_fraction",
    "mean_kl",
    "rollouts",
    "dropped",
    "pass1_trials",
];

/// Names of every random stream a run draws from; `{..}` marks a field.
pub const STREAM_NAMES: [&str; 7] = [
    "taskset (seeded by taskset.seed)",
    "agent-seed/{agent}",
    "agent-init (seeded by the agent seed)",
    "schedule/step={step}",
    "rollout/step={step}/task={task_id}",
    "eval/step={step}/pass1/agent={agent}/task={task_id}",
    "eval/step={step}/tree/task={task_id}",
];

fn to_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("record serializes");
    s.push('\n');
    s
}

/// Creates `dir`, refusing one that already has content.
pub fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() {
            return Err(CliError::Usage(format!(
                "refusing to write into non-empty directory {}",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes run artefacts as the trainer produces them.
struct RunWriter {
    dir: PathBuf,
    config_hash: String,
    pass1_trials: usize,
    keep: Option<Vec<String>>,
    metrics: BufWriter<File>,
    trees: Option<BufWriter<File>>,
    traces: Option<BufWriter<File>>,
    io_error: Option<std::io::Error>,
}

impl RunWriter {
    fn guard(&mut self, r: std::io::Result<()>) -> arbor_core::Result<()> {
        r.map_err(|e| {
            let msg = e.to_string();
            self.io_error = Some(e);
            arbor_core::Error::Domain(format!("output write failed: {msg}"))
        })
    }

    fn metrics_line(&self, record: &MetricsRecord) -> String {
        let mut value = serde_json::to_value(record).expect("record serializes");
        let obj = value.as_object_mut().expect("record is an object");
        obj.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        obj.insert("pass1_trials".into(), json!(self.pass1_trials));
        let ordered: Map<String, Value> = METRIC_FIELDS
            .iter()
            .filter(|f| {
                IDENTITY_FIELDS.contains(f) || self.keep.as_ref().is_none_or(|k| k.iter().any(|x| x == *f))
            })
            .filter_map(|f| obj.get(*f).map(|v| ((*f).to_owned(), v.clone())))
            .collect();
        to_line(&ordered)
    }
}

impl RunObserver for RunWriter {
    fn on_metrics(&mut self, record: &MetricsRecord) -> arbor_core::Result<()> {
        let line = self.metrics_line(record);
        let r = self.metrics.write_all(line.as_bytes()).and_then(|_| self.metrics.flush());
        self.guard(r)
    }

    fn on_tree(&mut self, step: usize, rollout: &TreeRollout) -> arbor_core::Result<()> {
        let Some(w) = self.trees.as_mut() else { return Ok(()) };
        let mut out = String::new();
        for rec in rollout.tree.dump_records() {
            let mut v = serde_json::to_value(&rec).expect("node record serializes");
            v.as_object_mut().expect("object").insert("step".into(), json!(step));
            out.push_str(&to_line(&v));
        }
        let r = w.write_all(out.as_bytes());
        self.guard(r)
    }

    fn on_checkpoint(&mut self, step: usize, agents: &[AgentPolicy]) -> arbor_core::Result<()> {
        let dir = self.dir.join("checkpoints");
        let r = (|| {
            fs::create_dir_all(&dir)?;
            for (j, a) in agents.iter().enumerate() {
                fs::write(dir.join(format!("agent{j}_step{step}.json")), a.params().to_json())?;
            }
            Ok(())
        })();
        self.guard(r)
    }

    fn on_selector_trace(&mut self, step: usize, trace: &ExpansionTrace) -> arbor_core::Result<()> {
        let Some(w) = self.traces.as_mut() else { return Ok(()) };
        let mut v = serde_json::to_value(trace).expect("trace serializes");
        v.as_object_mut().expect("object").insert("step".into(), json!(step));
        let r = w.write_all(to_line(&v).as_bytes());
        self.guard(r)
    }

    fn wants_traces(&self) -> bool {
        self.traces.is_some()
    }
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub trace_selector: bool,
}

/// Loads, validates and runs one experiment into `args.out`.
pub fn cmd_train(args: &TrainArgs) -> Result<RunSummary, CliError> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let loaded = LoadedConfig::load(&args.config, &overrides)?;
    if let Some(keep) = &loaded.config.output.metrics {
        if let Some(bad) = keep.iter().find(|k| !METRIC_FIELDS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("output.metrics: unknown metric `{bad}`")));
        }
    }
    let tasks = loaded.tasks()?;
    prepare_out_dir(&args.out)?;
    train_into(&loaded, &tasks, &args.out, args.trace_selector)
}

fn train_into(loaded: &LoadedConfig, tasks: &[Task], out: &Path, trace: bool) -> Result<RunSummary, CliError> {
    let cfg = &loaded.config;
    let settings = loaded.settings();
    let hash = cfg.hash();
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    fs::write(out.join("taskset.jsonl"), taskset_to_jsonl(tasks))?;
    fs::write(
        out.join("run.json"),
        to_line(&json!({
            "config_hash": hash,
            "seed": settings.train.seed,
            "taskset_seed": cfg.taskset.seed,
            "mode": settings.train.mode,
            "streams": STREAM_NAMES,
        })),
    )?;
    let create = |name: &str| -> Result<BufWriter<File>, CliError> { Ok(BufWriter::new(File::create(out.join(name))?)) };
    let mut writer = RunWriter {
        dir: out.to_path_buf(),
        config_hash: hash,
        pass1_trials: settings.eval.pass1_samples,
        keep: cfg.output.metrics.clone(),
        metrics: create("metrics.jsonl")?,
        trees: if cfg.output.dump_trees { Some(create("trees.jsonl")?) } else { None },
        traces: if trace { Some(create("selector_trace.jsonl")?) } else { None },
        io_error: None,
    };
    let result = run_experiment(&settings, tasks, &mut writer);
    if let Some(e) = writer.io_error.take() {
        return Err(e.into());
    }
    let summary = result?;
    for w in [writer.trees.as_mut(), writer.traces.as_mut()].into_iter().flatten() {
        w.flush()?;
    }
    writer.metrics.flush()?;
    write_solutions(&out.join("solutions.jsonl"), &summary.final_eval.solutions)?;
    fs::write(out.join("final_eval.json"), to_line(&summary.final_eval))?;
    Ok(summary)
}

fn write_solutions(path: &Path, solutions: &[TaskSolutions]) -> Result<(), CliError> {
    let text: String = solutions.iter().map(to_line).collect();
    fs::write(path, text)?;
    Ok(())
}

fn read_tasks(path: &Path) -> Result<Vec<Task>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    taskset_from_jsonl(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read_checkpoints(paths: &[PathBuf]) -> Result<Vec<PolicyParams>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("at least one --checkpoint is required".into()));
    }
    paths
        .iter()
        .map(|p| {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            PolicyParams::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub taskset: PathBuf,
    pub budget: usize,
    pub seed: u64,
    pub pass1_samples: usize,
    pub out: Option<PathBuf>,
    pub trace_selector: bool,
}

/// Tree-search inference with one agent per checkpoint.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    if args.budget == 0 {
        return Err(CliError::Usage("--budget must be >= 1".into()));
    }
    let agents = read_checkpoints(&args.checkpoints)?;
    let tasks = read_tasks(&args.taskset)?;
    if let Some(out) = &args.out {
        prepare_out_dir(out)?;
    }
    let report = evaluate_agents(
        &agents,
        &tasks,
        args.budget,
        args.pass1_samples,
        args.seed,
        "cli-eval",
        args.trace_selector,
    )?;
    if let Some(out) = &args.out {
        fs::write(out.join("eval.json"), to_line(&report))?;
        write_solutions(&out.join("solutions.jsonl"), &report.solutions)?;
        fs::write(out.join("taskset.jsonl"), taskset_to_jsonl(&tasks))?;
        if args.trace_selector {
            let text: String = report.traces.iter().map(to_line).collect();
            fs::write(out.join("selector_trace.jsonl"), text)?;
        }
    }
    Ok(report)
}

/// Methods found under `run_dir`: each subdirectory holding
/// `solutions.jsonl`, or the directory itself when it holds one.
pub fn discover_methods(run_dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if !run_dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", run_dir.display())));
    }
    let mut found: Vec<(String, PathBuf)> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("solutions.jsonl").is_file())
        .map(|p| (p.file_name().expect("named entry").to_string_lossy().into_owned(), p))
        .collect();
    found.sort();
    if found.is_empty() && run_dir.join("solutions.jsonl").is_file() {
        let name = run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        found.push((name, run_dir.to_path_buf()));
    }
    if found.is_empty() {
        return Err(CliError::Usage(format!("no solutions.jsonl under {}", run_dir.display())));
    }
    Ok(found)
}

pub struct DiversityOutput {
    pub rows: Vec<DiversityRow>,
    pub csv: String,
}

/// Diversity table over the tasks every method solved at least once.
pub fn cmd_diversity(run_dir: &Path, variant: NauadcVariant, out: Option<&Path>) -> Result<DiversityOutput, CliError> {
    let methods = discover_methods(run_dir)?;
    let mut tasks: BTreeMap<u32, Task> = BTreeMap::new();
    let mut inputs = Vec::new();
    for (name, dir) in &methods {
        for t in read_tasks(&dir.join("taskset.jsonl"))? {
            if let Some(prev) = tasks.get(&t.task_id) {
                if prev != &t {
                    return Err(CliError::Config(format!(
                        "method {name} defines task {} differently from an earlier method",
                        t.task_id
                    )));
                }
            } else {
                tasks.insert(t.task_id, t);
            }
        }
        let text = fs::read_to_string(dir.join("solutions.jsonl"))?;
        let sols: Vec<TaskSolutions> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| CliError::Config(format!("{name}/solutions.jsonl line {}: {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?;
        inputs.push((name.clone(), sols));
    }
    let rows = diversity_table(&inputs, &tasks, variant)?;
    if rows.is_empty() {
        eprintln!("warning: no task is solved by every method; the table is empty");
    }
    let csv = diversity_csv(&rows);
    if let Some(path) = out {
        fs::write(path, &csv)?;
    }
    Ok(DiversityOutput { rows, csv })
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub param: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub pass_at_1: (f64, f64),
    pub pass_at_1_mcts: (f64, f64),
    pub pass_at_n: (f64, f64),
    pub eval_reward: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Typed override value for a numeric sweep parameter.
fn numeric_value(param: &str, raw: &str, current: Option<&toml::Value>) -> Result<toml::Value, CliError> {
    let x: f64 = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("sweep value `{raw}` for `{param}` is not numeric")))?;
    match current {
        Some(toml::Value::Integer(_)) => {
            if x.fract() != 0.0 || x < 0.0 {
                return Err(CliError::Config(format!("`{param}` takes non-negative integers, got `{raw}`")));
            }
            Ok(toml::Value::Integer(x as i64))
        }
        Some(toml::Value::Float(_)) | None => Ok(toml::Value::Float(x)),
        Some(other) => Err(CliError::Config(format!(
            "`{param}` is not a numeric field (found {})",
            other.type_str()
        ))),
    }
}

/// Runs every (value, seed) cell and writes `summary.csv`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>, CliError> {
    if args.values.is_empty() || args.seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value and one seed".into()));
    }
    let base = LoadedConfig::load(&args.config, &args.overrides)?;
    let path: Vec<String> = args.param.split('.').map(str::to_owned).collect();
    let resolved: toml::Table = toml::from_str(&base.config.to_toml()).expect("canonical config parses");
    let current = config::get_path(&resolved, &path);
    let typed: Vec<toml::Value> = args
        .values
        .iter()
        .map(|v| numeric_value(&args.param, v, current))
        .collect::<Result<_, _>>()?;
    let text = fs::read_to_string(&args.config)?;
    let origin = args.config.display().to_string();
    let base_dir = args.config.parent().unwrap_or(Path::new("."));
    let mut parsed: Vec<_> = args
        .overrides
        .iter()
        .map(|o| config::parse_override(o))
        .collect::<Result<_, _>>()?;
    // validate every cell before running any of them
    let mut cells = Vec::new();
    for (raw, value) in args.values.iter().zip(&typed) {
        for &seed in &args.seeds {
            parsed.push((path.clone(), value.clone()));
            parsed.push((config::seed_path(), toml::Value::Integer(seed as i64)));
            let cell = LoadedConfig::from_text(&text, &origin, &parsed, base_dir)?;
            parsed.truncate(parsed.len() - 2);
            cells.push((raw.clone(), seed, cell));
        }
    }
    prepare_out_dir(&args.out)?;
    let mut finals: BTreeMap<usize, Vec<[f64; 4]>> = BTreeMap::new();
    for (i, (raw, seed, cell)) in cells.iter().enumerate() {
        let tasks = cell.tasks()?;
        let dir = args.out.join(format!("{}={}", args.param, raw)).join(format!("seed={seed}"));
        fs::create_dir_all(&dir)?;
        let summary = train_into(cell, &tasks, &dir, false)?;
        let last = summary.records.last().expect("final record");
        finals.entry(i / args.seeds.len()).or_default().push([
            last.pass_at_1,
            last.pass_at_1_mcts,
            last.pass_at_n,
            last.eval_reward,
        ]);
    }
    let rows: Vec<SweepRow> = finals
        .into_iter()
        .map(|(vi, runs)| {
            let col = |k: usize| mean_std(&runs.iter().map(|r| r[k]).collect::<Vec<_>>());
            SweepRow {
                value: args.values[vi].clone(),
                runs: runs.len(),
                pass_at_1: col(0),
                pass_at_1_mcts: col(1),
                pass_at_n: col(2),
                eval_reward: col(3),
            }
        })
        .collect();
    let mut csv = String::from(
        "param,value,runs,pass_at_1_mean,pass_at_1_std,pass_at_1_mcts_mean,pass_at_1_mcts_std,pass_at_n_mean,pass_at_n_std,eval_reward_mean,eval_reward_std\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            args.param,
            r.value,
            r.runs,
            r.pass_at_1.0,
            r.pass_at_1.1,
            r.pass_at_1_mcts.0,
            r.pass_at_1_mcts.1,
            r.pass_at_n.0,
            r.pass_at_n.1,
            r.eval_reward.0,
            r.eval_reward.1
        ));
    }
    fs::write(args.out.join("summary.csv"), csv)?;
    Ok(rows)
}

pub struct DumpTreeArgs {
    pub checkpoints: Vec<PathBuf>,
    pub taskset: PathBuf,
    pub task_id: u32,
    pub budget: usize,
    pub seed: u64,
    pub trace_selector: bool,
}

/// One inference tree for a single task, as node records (and optionally
/// the selector trace).
pub fn cmd_dump_tree(args: &DumpTreeArgs) -> Result<(String, Option<String>), CliError> {
    let params = read_checkpoints(&args.checkpoints)?;
    let tasks = read_tasks(&args.taskset)?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == args.task_id)
        .ok_or_else(|| CliError::Usage(format!("task {} is not in the taskset", args.task_id)))?;
    for p in &params {
        if p.vocab() < task.vocab || p.max_len() < task.gen_length {
            return Err(CliError::Runtime(format!(
                "checkpoint shape (V={}, L={}) does not cover task {}",
                p.vocab(),
                p.max_len(),
                task.task_id
            )));
        }
    }
    let agents: Vec<AgentPolicy> = params.into_iter().map(AgentPolicy::new).collect();
    let mut selector = SelectorState::new(agents.len());
    let mut rng = stream(args.seed, &format!("dump-tree/task={}", task.task_id));
    let rollout = rollout_tree(
        task,
        &agents,
        &mut selector,
        args.budget,
        RewardMode::Fraction,
        &mut rng,
        args.trace_selector,
    )?;
    let traces = args
        .trace_selector
        .then(|| rollout.traces.iter().map(to_line).collect::<String>());
    Ok((rollout.tree.to_jsonl(), traces))
}
