//! Experiment configuration file: parsing, dotted overrides, validation and
//! resolution into core settings.

use std::path::{Path, PathBuf};

use arbor_core::credit::{LengthPenaltyConfig, ShapingConfig, DEFAULT_STD_EPSILON};
use arbor_core::env::{generate_taskset, taskset_from_jsonl, RewardMode, Task, TasksetConfig};
use arbor_core::rng::stream;
use arbor_core::trainer::{AgentsConfig, EvalConfig, ExperimentSettings, Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub taskset: TasksetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksetSection {
    /// Seed of the taskset generator, independent of the training seed so
    /// that seed sweeps share one suite.
    #[serde(default)]
    pub seed: u64,
    /// Load tasks from a taskset file instead of generating them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub generate: TasksetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_std_epsilon")]
    pub std_epsilon: f64,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_std_epsilon() -> f64 {
    DEFAULT_STD_EPSILON
}

impl Default for ShapingSection {
    fn default() -> Self {
        Self {
            lambda: Some(0.4),
            gamma: default_gamma(),
            std_epsilon: DEFAULT_STD_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub n_budget: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub buffer_threshold: usize,
    pub shaping: ShapingSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_penalty: Option<LengthPenaltyConfig>,
    pub steps: usize,
    pub seed: u64,
    pub tasks_per_step: usize,
    pub reward_mode: RewardMode,
    pub per_agent_renorm: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            n_budget: t.n_budget,
            eps_low: t.eps_low,
            eps_high: t.eps_high,
            kl_beta: t.kl_beta,
            learning_rate: t.learning_rate,
            buffer_threshold: t.buffer_threshold,
            shaping: ShapingSection::default(),
            length_penalty: t.length_penalty,
            steps: t.steps,
            seed: t.seed,
            tasks_per_step: t.tasks_per_step,
            reward_mode: t.reward_mode,
            per_agent_renorm: t.per_agent_renorm,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write agent checkpoints every this many steps; the final step is always written.
    pub checkpoint_every: usize,
    /// Write every training tree to `trees.jsonl`.
    pub dump_trees: bool,
    /// Keep only these metric fields (identity fields are always kept).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<String>>,
}

/// A loaded config together with the text it came from, for line lookups.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    source: String,
    origin: String,
    overridden: bool,
    base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Parses `key=value` into a dotted path and a TOML value. Values that are
/// not valid TOML are taken as bare strings.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    Ok((path, value))
}

pub fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override path `{}` crosses a non-table value", path[..=i].join(".")))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

pub fn get_path<'a>(table: &'a toml::Table, path: &[String]) -> Option<&'a toml::Value> {
    let (last, parents) = path.split_last()?;
    let mut cur = table;
    for seg in parents {
        cur = cur.get(seg)?.as_table()?;
    }
    cur.get(last)
}

/// The key `train.seed` as a dotted path.
pub fn seed_path() -> Vec<String> {
    vec!["train".into(), "seed".into()]
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Vec<_> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_, _>>()?;
        Self::from_text(&text, &path.display().to_string(), &parsed, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_text(
        text: &str,
        origin: &str,
        overrides: &[(Vec<String>, toml::Value)],
        base_dir: &Path,
    ) -> Result<Self, CliError> {
        let config = if overrides.is_empty() {
            // parse the text directly so error spans point at file lines
            toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
            for (path, value) in overrides {
                set_path(&mut table, path, value.clone())?;
            }
            ExperimentConfig::deserialize(toml::Value::Table(table))
                .map_err(|e| CliError::Config(format!("{origin} (after overrides): {e}")))?
        };
        let loaded = Self {
            config,
            source: text.to_owned(),
            origin: origin.to_owned(),
            overridden: !overrides.is_empty(),
            base_dir: base_dir.to_path_buf(),
        };
        loaded.check()?;
        Ok(loaded)
    }

    /// 1-based line of `key` inside `[section]`, or of the section header.
    fn locate(&self, section: &str, key: Option<&str>) -> Option<usize> {
        let header = format!("[{section}]");
        let mut in_section = false;
        let mut header_line = None;
        for (i, line) in self.source.lines().enumerate() {
            let l = line.trim();
            if l.starts_with('[') {
                in_section = l == header;
                if in_section {
                    header_line = Some(i + 1);
                }
                continue;
            }
            if in_section {
                if let Some(k) = key {
                    let name = l.split('=').next().unwrap_or("").trim();
                    if name == k {
                        return Some(i + 1);
                    }
                }
            }
        }
        header_line
    }

    fn field_error(&self, section: &str, key: &str, message: &str) -> CliError {
        let field = format!("{section}.{key}");
        let at = match self.locate(section, Some(key)).or_else(|| self.locate(section, None)) {
            Some(line) => format!("{}:{line}", self.origin),
            None => self.origin.clone(),
        };
        let note = if self.overridden { " (after overrides)" } else { "" };
        CliError::Config(format!("{at}: `{field}` {message}{note}"))
    }

    fn check(&self) -> Result<(), CliError> {
        let c = &self.config;
        if c.train.mode.is_tree() && c.train.shaping.gamma > 0.0 && c.train.shaping.lambda.is_none() {
            return Err(self.field_error(
                "train.shaping",
                "lambda",
                "is required when a tree mode uses gamma > 0",
            ));
        }
        self.settings()
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {}", self.origin, e)))?;
        if self.config.taskset.path.is_none() {
            self.config
                .taskset
                .generate
                .validate()
                .map_err(|e| CliError::Config(format!("{}: [taskset.generate] {e}", self.origin)))?;
        }
        Ok(())
    }

    pub fn settings(&self) -> ExperimentSettings {
        let t = &self.config.train;
        ExperimentSettings {
            train: TrainConfig {
                mode: t.mode,
                n_budget: t.n_budget,
                eps_low: t.eps_low,
                eps_high: t.eps_high,
                kl_beta: t.kl_beta,
                learning_rate: t.learning_rate,
                buffer_threshold: t.buffer_threshold,
                shaping: ShapingConfig {
                    lambda: t.shaping.lambda.unwrap_or(0.0),
                    gamma: t.shaping.gamma,
                    std_epsilon: t.shaping.std_epsilon,
                },
                length_penalty: t.length_penalty,
                steps: t.steps,
                seed: t.seed,
                tasks_per_step: t.tasks_per_step,
                reward_mode: t.reward_mode,
                per_agent_renorm: t.per_agent_renorm,
            },
            agents: self.config.agents.clone(),
            eval: self.config.eval.clone(),
            checkpoint_every: self.config.output.checkpoint_every,
        }
    }

    pub fn tasks(&self) -> Result<Vec<Task>, CliError> {
        let ts = &self.config.taskset;
        match &ts.path {
            Some(p) => {
                let full = if p.is_absolute() { p.clone() } else { self.base_dir.join(p) };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::Config(format!("cannot read taskset {}: {e}", full.display())))?;
                taskset_from_jsonl(&text).map_err(|e| CliError::Config(format!("taskset {}: {e}", full.display())))
            }
            None => generate_taskset(&ts.generate, &mut stream(ts.seed, "taskset"))
                .map_err(|e| CliError::Config(format!("[taskset.generate] {e}"))),
        }
    }
}
