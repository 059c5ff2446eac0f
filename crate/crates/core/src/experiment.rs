//! End-to-end runs: dataset construction from a config, the federated
//! simulation, and the on-disk run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DatasetKind, ExperimentConfig, PartitionKind};
use crate::data::{
    apply_longtail, balanced_test_set, build_task_streams, load_csv, load_idx, partition_dirichlet, partition_sharding,
    synth_blobs, LabeledDataset, TaskStream,
};
use crate::error::{invalid, Result};
use crate::federation::Simulation;
use crate::metrics::{forgetting_delta, FinalMetrics, MetricsLog, FINAL_WINDOW};
use crate::prototypes::{PrototypeSnapshot, Scope};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROTOTYPES_FILE: &str = "prototypes.json";
pub const INCOMPLETE_MARKER: &str = ".incomplete";

/// Loads or synthesizes the raw dataset named by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let missing = |key: &str| invalid(format!("{key} is not set"));
    match cfg.dataset {
        DatasetKind::Synth => {
            let s = &cfg.synth;
            synth_blobs(s.classes, s.d_in, s.per_class, s.spread, cfg.federation.seed)
        }
        DatasetKind::Idx => load_idx(
            cfg.idx_images.as_ref().ok_or_else(|| missing("idx.images"))?,
            cfg.idx_labels.as_ref().ok_or_else(|| missing("idx.labels"))?,
        ),
        DatasetKind::Csv => load_csv(cfg.csv_path.as_ref().ok_or_else(|| missing("csv.path"))?),
    }
}

/// Client task streams and the pooled balanced test set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub streams: Vec<TaskStream>,
    pub balanced_test: LabeledDataset,
}

/// Long-tail imbalancing, partitioning into `clients * tasks` parts and the
/// per-client train/test split.
pub fn prepare_data(cfg: &ExperimentConfig, raw: &LabeledDataset) -> Result<PreparedData> {
    let pa = &cfg.partition;
    let seed = cfg.federation.seed;
    let imbalanced = apply_longtail(raw, pa.gamma, seed)?;
    let parts = pa.clients * pa.tasks;
    let partitions = match pa.kind {
        PartitionKind::Sharding => partition_sharding(&imbalanced, parts, pa.shards, seed)?,
        PartitionKind::Dirichlet => partition_dirichlet(&imbalanced, parts, pa.beta, seed)?,
    };
    let streams = build_task_streams(&partitions, pa.clients, pa.tasks, pa.test_fraction, seed)?;
    let balanced_test = balanced_test_set(&streams, seed);
    Ok(PreparedData { streams, balanced_test })
}

pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation> {
    let raw = load_dataset(cfg)?;
    let data = prepare_data(cfg, &raw)?;
    Simulation::new(data.streams, data.balanced_test, cfg.federation.clone())
}

/// Runs the configured experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    build_simulation(cfg)?.run()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub rounds: usize,
    /// Accuracies are means over this many final rounds.
    pub final_window_rounds: usize,
    pub final_metrics: FinalMetrics,
    /// `(stage, delta)` for every stage boundary.
    pub forgetting: Vec<(usize, Option<f64>)>,
}

impl RunSummary {
    pub fn from_log(log: &MetricsLog) -> Self {
        let forgetting = (2..=log.num_stages())
            .map(|b| (b, forgetting_delta(log, b).ok().flatten()))
            .collect();
        Self {
            rounds: log.records.len(),
            final_window_rounds: FINAL_WINDOW,
            final_metrics: log.final_metrics(),
            forgetting,
        }
    }
}

/// Runs the experiment and writes the run directory. A `.incomplete` file
/// sits in the directory until every output has been written.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "")?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_config_string())?;

    let mut sim = build_simulation(cfg)?;
    let log = sim.run()?;
    fs::write(dir.join(METRICS_CSV), log.to_csv())?;
    fs::write(dir.join(METRICS_JSONL), log.to_json_lines()?)?;
    let summary = RunSummary::from_log(&log);
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    let snapshot = PrototypeSnapshot::new(Scope::Global, &sim.server.prototypes.prototypes);
    fs::write(dir.join(PROTOTYPES_FILE), snapshot.to_json()? + "\n")?;

    fs::remove_file(marker)?;
    Ok(summary)
}

/// Mean and sample standard deviation of each final metric across runs.
#[derive(Debug, Clone, Serialize)]
pub struct SweepStat {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
}

pub fn sweep_stats(summaries: &[RunSummary]) -> Vec<SweepStat> {
    FinalMetrics::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let xs: Vec<f64> = summaries.iter().filter_map(|s| s.final_metrics.values()[i]).collect();
            let n = xs.len();
            let mean = (n > 0).then(|| xs.iter().sum::<f64>() / n as f64);
            let std = mean
                .filter(|_| n > 1)
                .map(|m| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            SweepStat {
                metric: name.to_string(),
                mean,
                std,
                runs: n,
            }
        })
        .collect()
}

/// Runs each seed into `root/seed-<n>` and writes `root/summary.json` plus
/// a `summary.csv` table of mean and std per metric.
pub fn sweep_to_dir(cfg: &ExperimentConfig, seeds: &[u64], root: &Path) -> Result<Vec<SweepStat>> {
    if seeds.is_empty() {
        return Err(invalid("sweep needs at least one seed"));
    }
    let mut summaries = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut run = cfg.clone();
        run.federation.seed = seed;
        run.output_dir = seed_dir(&cfg.output_dir, seed);
        summaries.push(run_to_dir(&run, &seed_dir(root, seed))?);
    }
    let stats = sweep_stats(&summaries);
    fs::write(root.join(SUMMARY_FILE), serde_json::to_string_pretty(&stats)? + "\n")?;
    let mut table = String::from("metric,mean,std,runs\n");
    for s in &stats {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        table.push_str(&format!("{},{},{},{}\n", s.metric, f(s.mean), f(s.std), s.runs));
    }
    fs::write(root.join("summary.csv"), table)?;
    Ok(stats)
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}
