//! Run configuration: defaults, then an optional config file, then flag
//! overrides — later sources win — with per-field provenance retained and
//! stamped into every artifact a command writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use rearev_core::eval::F1Rule;
use rearev_core::model::ModelConfig;
use rearev_core::reasoner::ExecMode;
use rearev_core::synth::GenConfig;
use rearev_core::train::TrainConfig;
use rearev_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Stamped at compile time from `git describe`.
pub const BUILD_ID: &str = env!("REAREV_BUILD_ID");

/// Flags every subcommand accepts. Unset flags leave the config-file or
/// default value in place.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Config file (.toml or .json) applied over defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset directory (defaults to $REAREV_DATA_DIR)
    #[arg(long = "data-dir", value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Master seed for generation, initialization, and training
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reasoning stages
    #[arg(long = "T", value_name = "N")]
    pub t: Option<usize>,
    /// Instructions per stage
    #[arg(long = "K", value_name = "N")]
    pub k: Option<usize>,
    /// Message-passing layers per stage
    #[arg(long = "L", value_name = "N")]
    pub l: Option<usize>,
    /// Hidden dimension
    #[arg(long)]
    pub d: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dropout probability
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Instruction execution: bfs | sequential
    #[arg(long)]
    pub mode: Option<String>,
    /// Fraction of KG facts kept when generating data
    #[arg(long = "kg-keep")]
    pub kg_keep: Option<f64>,
    /// Fraction of the train split used for training
    #[arg(long = "train-frac")]
    pub train_frac: Option<f64>,
    /// Subgraph node budget per question
    #[arg(long)]
    pub m: Option<usize>,
    /// Worker threads for parallel sections (0 = library default)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Skip the hyperparameter grid check
    #[arg(long = "allow-any")]
    pub allow_any: bool,
    /// Probability-mass threshold for the answer-set F1
    #[arg(long)]
    pub tau: Option<f64>,
    /// Answer-set rule: cumulative | pernode
    #[arg(long = "f1-rule")]
    pub f1_rule: Option<String>,
    /// Movies in the generated world
    #[arg(long)]
    pub movies: Option<usize>,
    /// Questions in the generated dataset
    #[arg(long)]
    pub questions: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub mode: String,
    pub dropout: f64,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub tau: f64,
    pub f1_rule: String,
    pub kg_keep: f64,
    pub train_frac: f64,
    pub m: usize,
    pub movies: usize,
    pub questions: usize,
    pub jobs: usize,
    pub allow_any: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 50,
            t: 2,
            k: 3,
            l: 3,
            mode: "bfs".into(),
            dropout: 0.1,
            seed: 0,
            lr: 5e-4,
            batch: 16,
            epochs: 30,
            tau: 0.95,
            f1_rule: "cumulative".into(),
            kg_keep: 1.0,
            train_frac: 1.0,
            m: 200,
            movies: 500,
            questions: 5000,
            jobs: 0,
            allow_any: false,
            data_dir: None,
        }
    }
}

/// A fully-merged configuration plus where each field's value came from.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub provenance: BTreeMap<String, String>,
}

impl Resolved {
    /// The provenance block embedded into every artifact.
    pub fn stamp(&self) -> serde_json::Value {
        json!({
            "build_id": BUILD_ID,
            "run_config": self.cfg,
            "provenance": self.provenance,
        })
    }
}

fn as_usize(key: &str, v: &serde_json::Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("config key '{key}' must be a non-negative integer")))
}

fn as_u64(key: &str, v: &serde_json::Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("config key '{key}' must be a non-negative integer")))
}

fn as_f64(key: &str, v: &serde_json::Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("config key '{key}' must be a number")))
}

fn as_str(key: &str, v: &serde_json::Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("config key '{key}' must be a string")))
}

fn as_bool(key: &str, v: &serde_json::Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("config key '{key}' must be a boolean")))
}

impl RunConfig {
    fn apply_file(
        &mut self,
        prov: &mut BTreeMap<String, String>,
        path: &Path,
    ) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let table: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let Some(obj) = table.as_object() else {
            return Err(Error::Config(format!(
                "{}: config file must hold a table of keys",
                path.display()
            )));
        };
        // A run-config stamp written by an earlier command replays directly:
        // accept its nested layout by descending into "run_config".
        let obj = match obj.get("run_config").and_then(|v| v.as_object()) {
            Some(inner) => inner,
            None => obj,
        };
        for (key, v) in obj {
            match key.as_str() {
                "d" => self.d = as_usize(key, v)?,
                "T" => self.t = as_usize(key, v)?,
                "K" => self.k = as_usize(key, v)?,
                "L" => self.l = as_usize(key, v)?,
                "mode" => self.mode = as_str(key, v)?,
                "dropout" => self.dropout = as_f64(key, v)?,
                "seed" => self.seed = as_u64(key, v)?,
                "lr" => self.lr = as_f64(key, v)?,
                "batch" => self.batch = as_usize(key, v)?,
                "epochs" => self.epochs = as_usize(key, v)?,
                "tau" => self.tau = as_f64(key, v)?,
                "f1_rule" => self.f1_rule = as_str(key, v)?,
                "kg_keep" => self.kg_keep = as_f64(key, v)?,
                "train_frac" => self.train_frac = as_f64(key, v)?,
                "m" => self.m = as_usize(key, v)?,
                "movies" => self.movies = as_usize(key, v)?,
                "questions" => self.questions = as_usize(key, v)?,
                "jobs" => self.jobs = as_usize(key, v)?,
                "allow_any" => self.allow_any = as_bool(key, v)?,
                "data_dir" => self.data_dir = Some(PathBuf::from(as_str(key, v)?)),
                other => {
                    return Err(Error::Config(format!(
                        "unknown config key '{other}' in {}",
                        path.display()
                    )))
                }
            }
            prov.insert(key.clone(), "file".into());
        }
        Ok(())
    }

    fn apply_flags(&mut self, prov: &mut BTreeMap<String, String>, flags: &Common) {
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = &flags.$field {
                    self.$field = v.clone();
                    prov.insert($key.into(), "flag".into());
                }
            };
        }
        take!(d, "d");
        take!(t, "T");
        take!(k, "K");
        take!(l, "L");
        take!(mode, "mode");
        take!(dropout, "dropout");
        take!(seed, "seed");
        take!(lr, "lr");
        take!(batch, "batch");
        take!(epochs, "epochs");
        take!(tau, "tau");
        take!(f1_rule, "f1_rule");
        take!(kg_keep, "kg_keep");
        take!(train_frac, "train_frac");
        take!(m, "m");
        take!(movies, "movies");
        take!(questions, "questions");
        take!(jobs, "jobs");
        if let Some(dir) = &flags.data_dir {
            self.data_dir = Some(dir.clone());
            prov.insert("data_dir".into(), "flag".into());
        }
        if flags.allow_any {
            self.allow_any = true;
            prov.insert("allow_any".into(), "flag".into());
        }
    }

    pub fn exec_mode(&self) -> Result<ExecMode> {
        self.mode.parse()
    }

    pub fn f1_rule(&self) -> Result<F1Rule> {
        self.f1_rule.parse()
    }

    pub fn model_config(&self, vocab_size: usize, rels_ext: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.d, self.t, self.k, self.l, vocab_size, rels_ext);
        cfg.mode = self.exec_mode()?;
        cfg.dropout = self.dropout;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tcfg = TrainConfig::new(self.epochs, self.batch, self.lr, self.seed);
        tcfg.tau = self.tau;
        tcfg
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let mut gen = GenConfig::for_movies(self.movies);
        gen.questions = self.questions;
        gen.seed = self.seed;
        gen.keep_ratio = self.kg_keep;
        gen.subgraph_nodes = self.m;
        gen.validate()?;
        Ok(gen)
    }

    fn validate(&self) -> Result<()> {
        if self.exec_mode()? == ExecMode::Sequential && self.k != self.l {
            return Err(Error::Config(format!(
                "sequential mode binds one instruction per layer and needs K = L, got K={} L={}",
                self.k, self.l
            )));
        }
        self.f1_rule()?;
        if !(self.kg_keep > 0.0 && self.kg_keep <= 1.0) {
            return Err(Error::Config(format!(
                "kg_keep must be in (0, 1], got {}",
                self.kg_keep
            )));
        }
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return Err(Error::Config(format!(
                "train_frac must be in (0, 1], got {}",
                self.train_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !self.allow_any {
            self.check_grid()?;
        }
        Ok(())
    }

    /// Hyperparameters outside the published tuning grid are rejected unless
    /// `--allow-any` is set. The epoch count is a budget, not a shape, and a
    /// one-epoch smoke run must work, so it stays unchecked.
    fn check_grid(&self) -> Result<()> {
        fn in_set(v: f64, set: &[f64]) -> bool {
            set.iter().any(|&s| (v - s).abs() <= 1e-12)
        }
        let checks: [(&str, bool, String); 7] = [
            ("d", [50usize, 100].contains(&self.d), "50 or 100".into()),
            ("T", [2usize, 3].contains(&self.t), "2 or 3".into()),
            ("K", [2usize, 3].contains(&self.k), "2 or 3".into()),
            ("L", [2usize, 3, 4].contains(&self.l), "2, 3, or 4".into()),
            ("lr", in_set(self.lr, &[1e-4, 5e-4]), "1e-4 or 5e-4".into()),
            ("batch", [8usize, 16, 40].contains(&self.batch), "8, 16, or 40".into()),
            (
                "dropout",
                in_set(self.dropout, &[0.1, 0.2, 0.3]),
                "0.1, 0.2, or 0.3".into(),
            ),
        ];
        for (name, ok, allowed) in checks {
            if !ok {
                return Err(Error::Config(format!(
                    "{name} is outside the tuning grid (allowed: {allowed}); \
                     pass --allow-any to override"
                )));
            }
        }
        Ok(())
    }
}

/// Merge defaults ← $REAREV_DATA_DIR ← config file ← flags, recording where
/// each field's final value came from, then validate the result.
pub fn resolve(flags: &Common) -> Result<Resolved> {
    let mut cfg = RunConfig::default();
    let mut provenance: BTreeMap<String, String> = [
        "d", "T", "K", "L", "mode", "dropout", "seed", "lr", "batch", "epochs", "tau",
        "f1_rule", "kg_keep", "train_frac", "m", "movies", "questions", "jobs", "allow_any",
        "data_dir",
    ]
    .into_iter()
    .map(|k| (k.to_string(), "default".to_string()))
    .collect();

    if let Ok(dir) = std::env::var("REAREV_DATA_DIR") {
        if !dir.is_empty() {
            cfg.data_dir = Some(PathBuf::from(dir));
            provenance.insert("data_dir".into(), "env".into());
        }
    }
    if let Some(path) = &flags.config {
        cfg.apply_file(&mut provenance, path)?;
    }
    cfg.apply_flags(&mut provenance, flags);
    cfg.validate()?;
    Ok(Resolved { cfg, provenance })
}
