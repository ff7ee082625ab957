//! Token-position baselines for progress prediction.
//!
//! These are diagnostic controls: they rely on completed-length statistics of
//! the evaluation corpus, so they are not online predictors.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::trace::{GroupKey, ProgressAnnotation, ReasoningTrace};
use crate::{Error, Result};

pub fn clip(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLengths {
    pub model_family: String,
    pub task: String,
    pub count: usize,
    pub mean: f64,
    /// Lower-middle element for even counts.
    pub median: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub global_mean: f64,
    pub count: usize,
    /// Sorted by `(model_family, task)`.
    pub groups: Vec<GroupLengths>,
}

impl LengthStats {
    pub fn from_lengths(items: impl IntoIterator<Item = (GroupKey, u64)>) -> Result<Self> {
        let mut by_group: BTreeMap<GroupKey, Vec<u64>> = BTreeMap::new();
        for (key, len) in items {
            if key.model_family.is_empty() || key.task.is_empty() {
                return Err(Error::Schema("empty group key".into()));
            }
            if len == 0 {
                return Err(Error::Data(format!("zero length in group {key}")));
            }
            by_group.entry(key).or_default().push(len);
        }
        if by_group.is_empty() {
            return Err(Error::Empty("no traces for length statistics".into()));
        }
        let mut total: u128 = 0;
        let mut count = 0usize;
        let groups = by_group
            .into_iter()
            .map(|(key, mut lens)| {
                lens.sort_unstable();
                let sum: u128 = lens.iter().map(|&l| u128::from(l)).sum();
                total += sum;
                count += lens.len();
                GroupLengths {
                    model_family: key.model_family,
                    task: key.task,
                    count: lens.len(),
                    mean: sum as f64 / lens.len() as f64,
                    median: lens[(lens.len() - 1) / 2],
                }
            })
            .collect();
        Ok(Self {
            global_mean: total as f64 / count as f64,
            count,
            groups,
        })
    }

    pub fn group(&self, key: &GroupKey) -> Option<&GroupLengths> {
        self.groups
            .binary_search_by(|g| {
                (g.model_family.as_str(), g.task.as_str()).cmp(&(key.model_family.as_str(), key.task.as_str()))
            })
            .ok()
            .map(|i| &self.groups[i])
    }
}

pub fn compute_length_stats(traces: &[ReasoningTrace]) -> Result<LengthStats> {
    LengthStats::from_lengths(traces.iter().map(|t| (t.group(), t.token_count)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatistic {
    Mean,
    Median,
}

pub fn global_mean_baseline(prefix_len: u64, stats: &LengthStats) -> f64 {
    clip(prefix_len as f64 / stats.global_mean)
}

/// Falls back to the global mean, with a warning, for unknown groups.
pub fn group_stat_baseline(prefix_len: u64, group: &GroupKey, stats: &LengthStats, statistic: GroupStatistic) -> f64 {
    match stats.group(group) {
        Some(g) => {
            let denom = match statistic {
                GroupStatistic::Mean => g.mean,
                GroupStatistic::Median => g.median as f64,
            };
            clip(prefix_len as f64 / denom)
        }
        None => {
            warn!("unknown group {group}; using global mean length");
            global_mean_baseline(prefix_len, stats)
        }
    }
}

/// Extrapolate from the previous report: `c(k_j * p_{j-1} / k_{j-1})`, or
/// `c(k_1 / median)` for the first marker.
pub fn previous_marker_baseline(
    marker_index: usize,
    prefix_len: u64,
    previous: Option<(u64, f64)>,
    group_median: f64,
) -> Result<f64> {
    match (marker_index, previous) {
        (0, _) => Err(Error::Range("marker index 0".into())),
        (1, _) => Ok(clip(prefix_len as f64 / group_median)),
        (_, None) => Err(Error::Data(format!("marker {marker_index} has no previous report"))),
        (_, Some((prev_len, prev_pred))) => {
            if prev_pred == 0.0 || prev_len == 0 {
                return Err(Error::DivisionByZero(format!(
                    "previous report at marker {} is zero",
                    marker_index - 1
                )));
            }
            Ok(clip(prefix_len as f64 * prev_pred / prev_len as f64))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    GlobalMean,
    TaskMean,
    TaskMedian,
    PreviousMarker,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::GlobalMean,
        BaselineKind::TaskMean,
        BaselineKind::TaskMedian,
        BaselineKind::PreviousMarker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::GlobalMean => "global_mean",
            BaselineKind::TaskMean => "task_mean",
            BaselineKind::TaskMedian => "task_median",
            BaselineKind::PreviousMarker => "previous_marker",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub trace_id: String,
    pub marker_index: usize,
    pub prefix_len: u64,
    pub baseline_name: String,
    pub prediction: f64,
    pub realized: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub baseline_name: String,
    pub markers: usize,
    pub mae: f64,
    pub diagnostic: bool,
}

/// Score every baseline, plus the reported values themselves (`reported`),
/// at each marker of each trace. Markers at offset 0 or past the trace end
/// are skipped with a warning.
pub fn baseline_report(
    traces: &[(ReasoningTrace, Vec<ProgressAnnotation>)],
    stats: &LengthStats,
) -> (Vec<BaselineRow>, Vec<BaselineSummary>) {
    let mut rows = Vec::new();
    for (trace, annotations) in traces {
        let group = trace.group();
        let median = stats
            .group(&group)
            .map(|g| g.median as f64)
            .unwrap_or(stats.global_mean);
        let mut previous: Option<(u64, f64)> = None;
        for (j, ann) in annotations.iter().enumerate() {
            let marker_index = j + 1;
            let k = ann.position_k;
            let reported = clip(ann.fraction());
            if k == 0 || k > trace.token_count {
                warn!("{}: marker {marker_index} at offset {k} skipped", trace.id);
                previous = None;
                continue;
            }
            let realized = k as f64 / trace.token_count as f64;
            let mut push = |name: &str, prediction: f64| {
                rows.push(BaselineRow {
                    trace_id: trace.id.clone(),
                    marker_index,
                    prefix_len: k,
                    baseline_name: name.to_string(),
                    prediction,
                    realized,
                    abs_error: (prediction - realized).abs(),
                })
            };
            push("reported", reported);
            for kind in BaselineKind::ALL {
                let prediction = match kind {
                    BaselineKind::GlobalMean => global_mean_baseline(k, stats),
                    BaselineKind::TaskMean => group_stat_baseline(k, &group, stats, GroupStatistic::Mean),
                    BaselineKind::TaskMedian => group_stat_baseline(k, &group, stats, GroupStatistic::Median),
                    BaselineKind::PreviousMarker => {
                        let prev = if marker_index == 1 { None } else { previous };
                        let index = if prev.is_none() { 1 } else { marker_index };
                        match previous_marker_baseline(index, k, prev, median) {
                            Ok(p) => p,
                            Err(e) => {
                                warn!("{}: marker {marker_index}: {e}", trace.id);
                                continue;
                            }
                        }
                    }
                };
                push(kind.name(), prediction);
            }
            previous = Some((k, reported));
        }
    }

    let mut sums: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in &rows {
        let e = sums.entry(r.baseline_name.as_str()).or_default();
        e.0 += 1;
        e.1 += r.abs_error;
    }
    let summary = sums
        .into_iter()
        .map(|(name, (n, total))| BaselineSummary {
            baseline_name: name.to_string(),
            markers: n,
            mae: total / n as f64,
            diagnostic: name != "reported",
        })
        .collect();
    (rows, summary)
}
