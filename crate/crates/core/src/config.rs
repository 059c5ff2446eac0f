//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default, so an empty file is a complete configuration.
//! [`ExperimentConfig::to_config_string`] writes every key back out, and
//! parsing that text yields the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::federation::{AggregationScope, FederationConfig, Schedule, Strategy};
use crate::model::ReferenceMode;
use crate::prototypes::PrototypeWeighting;

/// Environment variable that, when set, is prefixed to relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDMLP_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub d_in: usize,
    pub per_class: usize,
    pub spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            d_in: 16,
            per_class: 600,
            spread: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Sharding,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    /// Shards per task (sharding).
    pub shards: usize,
    /// Dirichlet concentration.
    pub beta: f64,
    /// Long-tail imbalance rate, `min n_k / max n_k`.
    pub gamma: f64,
    pub clients: usize,
    pub tasks: usize,
    pub test_fraction: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Sharding,
            shards: 4,
            beta: 1.0,
            gamma: 0.5,
            clients: 20,
            tasks: 5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub synth: SynthSpec,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub csv_path: Option<PathBuf>,
    pub partition: PartitionSpec,
    pub federation: FederationConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synth,
            synth: SynthSpec::default(),
            idx_images: None,
            idx_labels: None,
            csv_path: None,
            partition: PartitionSpec::default(),
            federation: FederationConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: expected {what}, got `{value}`"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T, String> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("{key}: expected one of {}, got `{value}`", names.join("|"))
        })
}

fn name_of<T: Copy + PartialEq>(value: T, options: &[(&'static str, T)]) -> &'static str {
    options
        .iter()
        .find(|(_, v)| *v == value)
        .map(|(n, _)| *n)
        .expect("every variant is listed")
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn auto_count(key: &str, value: &str) -> Result<Option<usize>, String> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value, "a count or `auto`").map(Some)
    }
}

const DATASETS: &[(&str, DatasetKind)] = &[
    ("synth", DatasetKind::Synth),
    ("idx", DatasetKind::Idx),
    ("csv", DatasetKind::Csv),
];
const PARTITIONS: &[(&str, PartitionKind)] = &[
    ("sharding", PartitionKind::Sharding),
    ("dirichlet", PartitionKind::Dirichlet),
];
const STRATEGIES: &[(&str, Strategy)] = &[
    ("fedavg", Strategy::FedAvg),
    ("fedprox", Strategy::FedProx),
    ("fedproto", Strategy::FedProto),
    ("fedmlp", Strategy::FedMlp),
];
const SCOPES: &[(&str, AggregationScope)] = &[
    ("full", AggregationScope::Full),
    ("extractor_only", AggregationScope::ExtractorOnly),
];
const SCHEDULES: &[(&str, Schedule)] = &[
    ("sequential", Schedule::Sequential),
    ("interleaved", Schedule::Interleaved),
];
const REFERENCES: &[(&str, ReferenceMode)] = &[
    ("per_sample", ReferenceMode::PerSample),
    ("class_mean", ReferenceMode::ClassMean),
];
const WEIGHTINGS: &[(&str, PrototypeWeighting)] = &[
    ("unweighted", PrototypeWeighting::Unweighted),
    ("by_count", PrototypeWeighting::ByCount),
];

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let fed = &mut self.federation;
        let st = &mut fed.strategy;
        let hy = &mut fed.hyper;
        let pa = &mut self.partition;
        match key {
            "dataset" => self.dataset = choice(key, value, DATASETS)?,
            "synth.classes" => self.synth.classes = num(key, value, "an integer")?,
            "synth.d_in" => self.synth.d_in = num(key, value, "an integer")?,
            "synth.per_class" => self.synth.per_class = num(key, value, "an integer")?,
            "synth.spread" => self.synth.spread = num(key, value, "a real number")?,
            "idx.images" => self.idx_images = path(value),
            "idx.labels" => self.idx_labels = path(value),
            "csv.path" => self.csv_path = path(value),
            "partition" => pa.kind = choice(key, value, PARTITIONS)?,
            "partition.shards" => pa.shards = num(key, value, "an integer")?,
            "partition.beta" => pa.beta = num(key, value, "a real number")?,
            "gamma" => pa.gamma = num(key, value, "a real number")?,
            "clients" => pa.clients = num(key, value, "an integer")?,
            "tasks" => pa.tasks = num(key, value, "an integer")?,
            "test_fraction" => pa.test_fraction = num(key, value, "a real number")?,
            "strategy" => st.strategy = choice(key, value, STRATEGIES)?,
            "fedprox.mu" => st.fedprox_mu = num(key, value, "a real number")?,
            "loss.prototype" => st.loss_prototype = flag(key, value)?,
            "loss.intertask" => st.loss_intertask = flag(key, value)?,
            "loss.semantic" => st.loss_semantic = flag(key, value)?,
            "aggregation_scope" => st.scope = choice(key, value, SCOPES)?,
            "reference_mode" => st.reference_mode = choice(key, value, REFERENCES)?,
            "prototype_weighting" => st.prototype_weighting = choice(key, value, WEIGHTINGS)?,
            "alpha" => hy.alpha = num(key, value, "a real number")?,
            "lr" => hy.lr = num(key, value, "a real number")?,
            "momentum" => hy.momentum = num(key, value, "a real number")?,
            "weight_decay" => hy.weight_decay = num(key, value, "a real number")?,
            "batch_size" => hy.batch_size = num(key, value, "an integer")?,
            "kl_temperature" => hy.kl_temperature = num(key, value, "a real number")?,
            "smooth_l1_delta" => hy.smooth_l1_delta = num(key, value, "a real number")?,
            "epochs" => fed.epochs = num(key, value, "an integer")?,
            "rounds_local" => fed.rounds_local = num(key, value, "an integer")?,
            "m_active" => fed.m_active = num(key, value, "an integer")?,
            "u" => fed.local_clusters = auto_count(key, value)?,
            "v" => fed.global_clusters = auto_count(key, value)?,
            "schedule" => fed.schedule = choice(key, value, SCHEDULES)?,
            "hidden" => fed.hidden = num(key, value, "an integer")?,
            "feature_dim" => fed.feature_dim = num(key, value, "an integer")?,
            "threads" => fed.threads = num(key, value, "an integer")?,
            "seed" => fed.seed = num(key, value, "an unsigned integer")?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every cross-field and range violation, in key order.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let (s, pa, fed) = (&self.synth, &self.partition, &self.federation);
        let hy = &fed.hyper;
        match self.dataset {
            DatasetKind::Synth => {
                check(s.classes >= 2, format!("synth.classes must be >= 2, got {}", s.classes));
                check(s.d_in >= 1, format!("synth.d_in must be >= 1, got {}", s.d_in));
                check(
                    s.per_class >= 1,
                    format!("synth.per_class must be >= 1, got {}", s.per_class),
                );
                check(s.spread > 0.0, format!("synth.spread must be > 0, got {}", s.spread));
            }
            DatasetKind::Idx => {
                check(self.idx_images.is_some(), "dataset = idx requires idx.images".into());
                check(self.idx_labels.is_some(), "dataset = idx requires idx.labels".into());
            }
            DatasetKind::Csv => check(self.csv_path.is_some(), "dataset = csv requires csv.path".into()),
        }
        check(
            pa.shards >= 1,
            format!("partition.shards must be >= 1, got {}", pa.shards),
        );
        check(pa.beta > 0.0, format!("partition.beta must be > 0, got {}", pa.beta));
        check(
            pa.gamma > 0.0 && pa.gamma <= 1.0,
            format!("gamma must be in (0, 1], got {}", pa.gamma),
        );
        check(pa.clients >= 1, format!("clients must be >= 1, got {}", pa.clients));
        check(pa.tasks >= 1, format!("tasks must be >= 1, got {}", pa.tasks));
        check(
            pa.test_fraction > 0.0 && pa.test_fraction < 1.0,
            format!("test_fraction must be in (0, 1), got {}", pa.test_fraction),
        );
        check(
            fed.strategy.fedprox_mu >= 0.0,
            format!("fedprox.mu must be >= 0, got {}", fed.strategy.fedprox_mu),
        );
        check(hy.alpha >= 0.0, format!("alpha must be >= 0, got {}", hy.alpha));
        check(hy.lr > 0.0, format!("lr must be > 0, got {}", hy.lr));
        check(
            (0.0..1.0).contains(&hy.momentum),
            format!("momentum must be in [0, 1), got {}", hy.momentum),
        );
        check(
            hy.weight_decay >= 0.0,
            format!("weight_decay must be >= 0, got {}", hy.weight_decay),
        );
        check(
            hy.batch_size >= 1,
            format!("batch_size must be >= 1, got {}", hy.batch_size),
        );
        check(
            hy.kl_temperature > 0.0,
            format!("kl_temperature must be > 0, got {}", hy.kl_temperature),
        );
        check(
            hy.smooth_l1_delta > 0.0,
            format!("smooth_l1_delta must be > 0, got {}", hy.smooth_l1_delta),
        );
        check(fed.epochs >= 1, format!("epochs must be >= 1, got {}", fed.epochs));
        check(
            fed.rounds_local >= 1,
            format!("rounds_local must be >= 1, got {}", fed.rounds_local),
        );
        check(
            fed.m_active >= 1,
            format!("m_active must be >= 1, got {}", fed.m_active),
        );
        check(
            fed.m_active <= pa.clients,
            format!("m_active ({}) must not exceed clients ({})", fed.m_active, pa.clients),
        );
        check(fed.local_clusters != Some(0), "u must be >= 1".into());
        check(fed.global_clusters != Some(0), "v must be >= 1".into());
        check(fed.hidden >= 1, format!("hidden must be >= 1, got {}", fed.hidden));
        check(
            fed.feature_dim >= 1,
            format!("feature_dim must be >= 1, got {}", fed.feature_dim),
        );
        errs
    }

    /// Serializes every key, in the order [`ExperimentConfig::set`] lists
    /// them.
    pub fn to_config_string(&self) -> String {
        let (s, pa, fed) = (&self.synth, &self.partition, &self.federation);
        let (st, hy) = (&fed.strategy, &fed.hyper);
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let auto = |o: Option<usize>| o.map_or("auto".to_string(), |n| n.to_string());
        let entries: Vec<(&str, String)> = vec![
            ("dataset", name_of(self.dataset, DATASETS).into()),
            ("synth.classes", s.classes.to_string()),
            ("synth.d_in", s.d_in.to_string()),
            ("synth.per_class", s.per_class.to_string()),
            ("synth.spread", s.spread.to_string()),
            ("idx.images", p(&self.idx_images)),
            ("idx.labels", p(&self.idx_labels)),
            ("csv.path", p(&self.csv_path)),
            ("partition", name_of(pa.kind, PARTITIONS).into()),
            ("partition.shards", pa.shards.to_string()),
            ("partition.beta", pa.beta.to_string()),
            ("gamma", pa.gamma.to_string()),
            ("clients", pa.clients.to_string()),
            ("tasks", pa.tasks.to_string()),
            ("test_fraction", pa.test_fraction.to_string()),
            ("strategy", name_of(st.strategy, STRATEGIES).into()),
            ("fedprox.mu", st.fedprox_mu.to_string()),
            ("loss.prototype", st.loss_prototype.to_string()),
            ("loss.intertask", st.loss_intertask.to_string()),
            ("loss.semantic", st.loss_semantic.to_string()),
            ("aggregation_scope", name_of(st.scope, SCOPES).into()),
            ("reference_mode", name_of(st.reference_mode, REFERENCES).into()),
            (
                "prototype_weighting",
                name_of(st.prototype_weighting, WEIGHTINGS).into(),
            ),
            ("alpha", hy.alpha.to_string()),
            ("lr", hy.lr.to_string()),
            ("momentum", hy.momentum.to_string()),
            ("weight_decay", hy.weight_decay.to_string()),
            ("batch_size", hy.batch_size.to_string()),
            ("kl_temperature", hy.kl_temperature.to_string()),
            ("smooth_l1_delta", hy.smooth_l1_delta.to_string()),
            ("epochs", fed.epochs.to_string()),
            ("rounds_local", fed.rounds_local.to_string()),
            ("m_active", fed.m_active.to_string()),
            ("u", auto(fed.local_clusters)),
            ("v", auto(fed.global_clusters)),
            ("schedule", name_of(fed.schedule, SCHEDULES).into()),
            ("hidden", fed.hidden.to_string()),
            ("feature_dim", fed.feature_dim.to_string()),
            ("threads", fed.threads.to_string()),
            ("seed", fed.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// `output_dir`, placed under `$FEDMLP_OUTPUT_ROOT` when that is set and
    /// the directory is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Splits `key = value` lines, keeping each 1-based line number.
fn parse_lines(text: &str) -> (Vec<(String, String, usize)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut errs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string(), i + 1)),
            None => errs.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
        }
    }
    (pairs, errs)
}

/// Parses `key=value` override strings as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("override `{s}` is not of the form key=value"))
}

/// Builds a configuration from config text plus overrides applied in order.
/// All problems are collected into a single [`Error::Config`].
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let (pairs, mut errs) = parse_lines(text);
    for (k, v, line) in pairs {
        if let Err(e) = cfg.set(&k, &v) {
            errs.push(format!("line {line}: {e}"));
        }
    }
    for (k, v) in overrides {
        if let Err(e) = cfg.set(k, v) {
            errs.push(format!("override: {e}"));
        }
    }
    errs.extend(cfg.violations());
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

/// Reads a configuration file (or starts from defaults when `path` is
/// `None`) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", p.display())]))?
        }
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
