//! Top-1 accuracy measures, forgetting deltas and the per-round metrics log
//! with its CSV / JSON-lines / embedding-dump writers.
//!
//! Accuracies that are undefined (empty test set or empty class filter) are
//! `None` and written as an empty CSV field / JSON `null`, never as 0.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::model::{argmax, forward, ModelParams};

/// Rounds averaged for the final reported metrics.
pub const FINAL_WINDOW: usize = 10;

/// Fraction of samples (restricted to `class_filter` when given) whose
/// argmax logit equals the label. `None` when no sample qualifies.
pub fn accuracy(params: &ModelParams, dataset: &LabeledDataset, class_filter: Option<&BTreeSet<usize>>) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (x, y) in dataset.iter() {
        if class_filter.is_some_and(|f| !f.contains(&y)) {
            continue;
        }
        total += 1;
        let f = forward(params, x).expect("dataset matches model input");
        if argmax(&f.logits) == y {
            correct += 1;
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub stage: usize,
    pub a_sel: Option<f64>,
    pub a_loc: Option<f64>,
    pub a_glo: Option<f64>,
    pub a_loc_minority: Option<f64>,
    pub a_glo_minority: Option<f64>,
    pub loss_c: Option<f64>,
    pub loss_p: Option<f64>,
    pub loss_i: Option<f64>,
    pub loss_s: Option<f64>,
    pub proto_upload_bytes: usize,
}

/// A client as seen by the evaluator.
#[derive(Debug, Clone, Copy)]
pub struct ClientView<'a> {
    pub params: &'a ModelParams,
    /// Union of the client's test shards up to the current stage.
    pub cumulative_test: &'a LabeledDataset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracies {
    pub a_sel: Option<f64>,
    pub a_loc: Option<f64>,
    pub a_glo: Option<f64>,
    pub a_loc_minority: Option<f64>,
    pub a_glo_minority: Option<f64>,
}

/// Evaluates every client model and the global model on frozen parameters.
pub fn evaluate_round(
    global: &ModelParams,
    clients: &[ClientView<'_>],
    balanced_test: &LabeledDataset,
    minority: &BTreeSet<usize>,
) -> Accuracies {
    let per_client: Vec<(Option<f64>, Option<f64>, Option<f64>)> = clients
        .par_iter()
        .map(|c| {
            (
                accuracy(c.params, c.cumulative_test, None),
                accuracy(c.params, balanced_test, None),
                accuracy(c.params, balanced_test, Some(minority)),
            )
        })
        .collect();
    Accuracies {
        a_sel: mean(per_client.iter().map(|c| c.0)),
        a_loc: mean(per_client.iter().map(|c| c.1)),
        a_glo: accuracy(global, balanced_test, None),
        a_loc_minority: mean(per_client.iter().map(|c| c.2)),
        a_glo_minority: accuracy(global, balanced_test, Some(minority)),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub a_sel: Option<f64>,
    pub a_loc: Option<f64>,
    pub a_glo: Option<f64>,
    pub a_loc_minority: Option<f64>,
    pub a_glo_minority: Option<f64>,
    /// Mean forgetting delta over all stage boundaries.
    pub forgetting: Option<f64>,
}

impl FinalMetrics {
    pub const NAMES: [&'static str; 6] = [
        "a_sel",
        "a_loc",
        "a_glo",
        "a_loc_minority",
        "a_glo_minority",
        "forgetting",
    ];

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.a_sel,
            self.a_loc,
            self.a_glo,
            self.a_loc_minority,
            self.a_glo_minority,
            self.forgetting,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<RoundRecord>,
}

pub const CSV_HEADER: &str =
    "round,stage,a_sel,a_loc,a_glo,a_loc_minority,a_glo_minority,loss_c,loss_p,loss_i,loss_s,proto_upload_bytes";

fn field(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

impl MetricsLog {
    pub fn push(&mut self, record: RoundRecord) {
        self.records.push(record);
    }

    pub fn num_stages(&self) -> usize {
        self.records.iter().map(|r| r.stage).max().unwrap_or(0)
    }

    /// Mean of each accuracy over the last [`FINAL_WINDOW`] rounds.
    pub fn final_metrics(&self) -> FinalMetrics {
        let tail = &self.records[self.records.len().saturating_sub(FINAL_WINDOW)..];
        let deltas: Vec<Option<f64>> = (2..=self.num_stages())
            .map(|b| forgetting_delta(self, b).ok().flatten())
            .collect();
        FinalMetrics {
            a_sel: mean(tail.iter().map(|r| r.a_sel)),
            a_loc: mean(tail.iter().map(|r| r.a_loc)),
            a_glo: mean(tail.iter().map(|r| r.a_glo)),
            a_loc_minority: mean(tail.iter().map(|r| r.a_loc_minority)),
            a_glo_minority: mean(tail.iter().map(|r| r.a_glo_minority)),
            forgetting: mean(deltas),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{}", r.round, r.stage);
            for v in [
                r.a_sel,
                r.a_loc,
                r.a_glo,
                r.a_loc_minority,
                r.a_glo_minority,
                r.loss_c,
                r.loss_p,
                r.loss_i,
                r.loss_s,
            ] {
                field(&mut out, v);
            }
            let _ = writeln!(out, ",{}", r.proto_upload_bytes);
        }
        out
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// `A_sel` of the round just before stage `stage_boundary` starts minus
/// `A_sel` after that stage's first round. Positive means forgetting.
/// `None` when either accuracy is undefined.
pub fn forgetting_delta(log: &MetricsLog, stage_boundary: usize) -> Result<Option<f64>> {
    if stage_boundary < 2 {
        return Err(invalid(format!("stage boundary must be >= 2, got {stage_boundary}")));
    }
    let first = log
        .records
        .iter()
        .position(|r| r.stage == stage_boundary)
        .ok_or_else(|| invalid(format!("stage {stage_boundary} never starts in this log")))?;
    if first == 0 {
        return Err(invalid(format!("stage {stage_boundary} has no preceding round")));
    }
    Ok(match (log.records[first - 1].a_sel, log.records[first].a_sel) {
        (Some(before), Some(after)) => Some(before - after),
        _ => None,
    })
}

/// Writes `sample_id,label,z0,..` rows with the extractor's features.
pub fn write_embeddings(params: &ModelParams, dataset: &LabeledDataset, mut out: impl Write) -> Result<()> {
    let d = params.shape().feature_dim;
    let header: Vec<String> = ["sample_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|j| format!("z{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, (x, y)) in dataset.iter().enumerate() {
        let z = params.features(x)?;
        let mut line = format!("{i},{y}");
        for v in z {
            let _ = write!(line, ",{v}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
