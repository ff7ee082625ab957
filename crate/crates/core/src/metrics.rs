//! Progress-prediction scoring and rollout dispersion.
//!
//! Every reduction sorts its terms before summing, so results are
//! bit-identical under any permutation of the input.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::label::rollout_progress;
use crate::{Error, Result};

/// One sampled prefix with the lengths of its sampled continuations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub trace_id: String,
    pub prefix_len: u64,
    pub continuation_lens: Vec<u64>,
}

impl RolloutGroup {
    /// Realized progress per continuation, in ascending order.
    pub fn realized(&self) -> Result<Vec<f64>> {
        if self.continuation_lens.len() < 2 {
            return Err(Error::Data(format!(
                "{}: rollout group at {} has {} continuations, need 2",
                self.trace_id,
                self.prefix_len,
                self.continuation_lens.len()
            )));
        }
        let mut g = self
            .continuation_lens
            .iter()
            .map(|&c| rollout_progress(self.prefix_len, c))
            .collect::<Result<Vec<_>>>()?;
        g.sort_by(f64::total_cmp);
        Ok(g)
    }

    pub fn mean_realized(&self) -> Result<f64> {
        let g = self.realized()?;
        Ok(sorted_sum(g.clone()) / g.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerPoint {
    pub prefix_len: u64,
    pub predicted: f64,
    pub realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSeries {
    pub trace_id: String,
    pub markers: Vec<MarkerPoint>,
}

impl MarkerSeries {
    pub fn new(trace_id: impl Into<String>, markers: Vec<MarkerPoint>) -> Result<Self> {
        let trace_id = trace_id.into();
        for w in markers.windows(2) {
            if w[1].prefix_len <= w[0].prefix_len {
                return Err(Error::Data(format!("{trace_id}: marker positions not increasing")));
            }
        }
        for m in &markers {
            if !(0.0..=1.0).contains(&m.predicted) || !(0.0..=1.0).contains(&m.realized) {
                return Err(Error::Range(format!("{trace_id}: marker value outside [0, 1]")));
            }
        }
        Ok(Self { trace_id, markers })
    }
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Pooled mean of `|predicted - realized|` over every marker.
pub fn progress_mae(series: &[MarkerSeries]) -> Result<f64> {
    let errs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.markers.iter().map(|m| (m.predicted - m.realized).abs()))
        .collect();
    if errs.is_empty() {
        return Err(Error::Empty("no markers to score".into()));
    }
    let n = errs.len();
    Ok(sorted_sum(errs) / n as f64)
}

/// Per-group `(1/r) sum |g - g_bar|` and the same divided by `g_bar`.
fn group_deviation(group: &RolloutGroup) -> Result<(f64, f64)> {
    let g = group.realized()?;
    let r = g.len() as f64;
    let mean = sorted_sum(g.clone()) / r;
    let dev = sorted_sum(g.iter().map(|x| (x - mean).abs()).collect()) / r;
    Ok((dev, dev / mean))
}

fn dispersion(groups: &[&RolloutGroup]) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(Error::Empty("no rollout groups".into()));
    }
    let (mads, mapds): (Vec<f64>, Vec<f64>) = groups
        .iter()
        .map(|g| group_deviation(g))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let n = groups.len() as f64;
    Ok((sorted_sum(mads) / n, sorted_sum(mapds) / n))
}

/// Mean absolute deviation of realized progress across continuations,
/// averaged per group then over groups.
pub fn mad(groups: &[RolloutGroup]) -> Result<f64> {
    Ok(dispersion(&groups.iter().collect::<Vec<_>>())?.0)
}

/// MAD with each residual divided by its group's mean realized progress.
pub fn mapd(groups: &[RolloutGroup]) -> Result<f64> {
    Ok(dispersion(&groups.iter().collect::<Vec<_>>())?.1)
}

pub fn mad_mapd(groups: &[RolloutGroup]) -> Result<(f64, f64)> {
    dispersion(&groups.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinValue {
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
    pub value: f64,
}

fn unit_bin(x: f64, n_bins: usize) -> usize {
    ((x * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Share of markers whose prediction drops below the previous one, per
/// equal-width bin of realized progress. The first marker of a trace is not
/// eligible. Only populated bins are returned.
pub fn nonmonotonic_fraction(series: &[MarkerSeries], position_bins: usize) -> Result<Vec<BinValue>> {
    if position_bins == 0 {
        return Err(Error::Range("0 position bins".into()));
    }
    let mut counts = vec![(0usize, 0usize); position_bins];
    for s in series {
        for w in s.markers.windows(2) {
            let c = &mut counts[unit_bin(w[1].realized, position_bins)];
            c.0 += 1;
            if w[1].predicted < w[0].predicted {
                c.1 += 1;
            }
        }
    }
    if counts.iter().all(|c| c.0 == 0) {
        return Err(Error::Empty("no eligible markers".into()));
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.0 > 0)
        .map(|(b, (n, bad))| BinValue {
            bin_lower: b as f64 / position_bins as f64,
            bin_upper: (b + 1) as f64 / position_bins as f64,
            count: n,
            value: bad as f64 / n as f64,
        })
        .collect())
}

/// Bin index of every input length under equal-population binning; ties in
/// length keep input order.
pub fn quantile_bins(lengths: &[u64], n_bins: usize) -> Vec<usize> {
    let n = lengths.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * n_bins / n.max(1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub bin_lower: u64,
    pub bin_upper: u64,
    pub count: usize,
    pub mean: f64,
}

/// Equal-population bins over completed length with the mean value per bin.
pub fn bin_by_length(items: &[(u64, f64)], n_bins: usize) -> Result<Vec<LengthBin>> {
    if n_bins == 0 {
        return Err(Error::Range("0 length bins".into()));
    }
    if items.is_empty() {
        return Err(Error::Empty("no values to bin".into()));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = sorted.len();
    Ok((0..n_bins)
        .filter_map(|b| {
            let chunk = &sorted[b * n / n_bins..(b + 1) * n / n_bins];
            let (first, last) = (chunk.first()?, chunk.last()?);
            Some(LengthBin {
                bin_lower: first.0,
                bin_upper: last.0,
                count: chunk.len(),
                mean: sorted_sum(chunk.iter().map(|x| x.1).collect()) / chunk.len() as f64,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionKey {
    /// Mean realized progress of the group, equal-width over `[0, 1]`.
    #[default]
    Position,
    /// Prefix length, equal-width over the observed range.
    PrefixLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionBin {
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
    pub mad: f64,
    pub mapd: f64,
}

/// MAD and MAPD per bin; empty bins are omitted.
pub fn dispersion_curve(groups: &[RolloutGroup], n_bins: usize, key: DispersionKey) -> Result<Vec<DispersionBin>> {
    if n_bins == 0 {
        return Err(Error::Range("0 dispersion bins".into()));
    }
    if groups.is_empty() {
        return Err(Error::Empty("no rollout groups".into()));
    }
    let (lo, hi) = match key {
        DispersionKey::Position => (0.0, 1.0),
        DispersionKey::PrefixLength => {
            let min = groups.iter().map(|g| g.prefix_len).min().unwrap_or(0) as f64;
            let max = groups.iter().map(|g| g.prefix_len).max().unwrap_or(0) as f64;
            (min, if max > min { max } else { min + 1.0 })
        }
    };
    let edge = |i: usize| lo + (hi - lo) * i as f64 / n_bins as f64;
    let mut bins: Vec<Vec<&RolloutGroup>> = vec![Vec::new(); n_bins];
    for g in groups {
        let x = match key {
            DispersionKey::Position => g.mean_realized()?,
            DispersionKey::PrefixLength => g.prefix_len as f64,
        };
        bins[unit_bin((x - lo) / (hi - lo), n_bins)].push(g);
    }
    bins.into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(i, members)| {
            let (mad, mapd) = dispersion(&members)?;
            Ok(DispersionBin {
                bin_lower: edge(i),
                bin_upper: edge(i + 1),
                count: members.len(),
                mad,
                mapd,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedMae {
    pub cond_mae: f64,
    pub uncond_mae: f64,
    pub markers: usize,
}

fn marker_keys(series: &[MarkerSeries]) -> BTreeSet<(String, usize)> {
    series
        .iter()
        .flat_map(|s| (1..=s.markers.len()).map(move |j| (s.trace_id.clone(), j)))
        .collect()
}

/// Score conditioned and unconditioned reports over the same markers.
pub fn conditioned_vs_unconditioned(cond: &[MarkerSeries], uncond: &[MarkerSeries]) -> Result<PairedMae> {
    let a = marker_keys(cond);
    let b = marker_keys(uncond);
    let missing: Vec<String> = a
        .symmetric_difference(&b)
        .map(|(id, j)| format!("{id}#{j}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Alignment { missing });
    }
    Ok(PairedMae {
        cond_mae: progress_mae(cond)?,
        uncond_mae: progress_mae(uncond)?,
        markers: a.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(k: u64, lens: &[u64]) -> RolloutGroup {
        RolloutGroup {
            trace_id: "t".into(),
            prefix_len: k,
            continuation_lens: lens.to_vec(),
        }
    }

    fn series(preds: &[f64]) -> MarkerSeries {
        let n = preds.len() as f64;
        MarkerSeries::new(
            "s",
            preds
                .iter()
                .enumerate()
                .map(|(i, &p)| MarkerPoint {
                    prefix_len: i as u64 + 1,
                    predicted: p,
                    realized: (i as f64 + 1.0) / n,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_point_dispersion() {
        let (m, p) = mad_mapd(&[group(100, &[400, 100])]).unwrap();
        assert!((m - 0.15).abs() < 1e-15);
        assert!((p - 0.15 / 0.35).abs() < 1e-12);
        assert_eq!(mad(&[group(100, &[50, 50, 50])]).unwrap(), 0.0);
        assert!(mad(&[group(100, &[50])]).is_err());
    }

    #[test]
    fn mae_examples() {
        let s = MarkerSeries::new(
            "a",
            vec![MarkerPoint {
                prefix_len: 5,
                predicted: 0.3,
                realized: 0.5,
            }],
        )
        .unwrap();
        assert!((progress_mae(&[s]).unwrap() - 0.2).abs() < 1e-15);
        assert!(progress_mae(&[]).is_err());
    }

    #[test]
    fn monotonicity_examples() {
        let inc = nonmonotonic_fraction(&[series(&[0.1, 0.2, 0.3, 0.4])], 4).unwrap();
        assert!(inc.iter().all(|b| b.value == 0.0));
        let alt = nonmonotonic_fraction(&[series(&[0.5, 0.4, 0.5, 0.4])], 1).unwrap();
        assert_eq!(alt.len(), 1);
        assert!((alt[0].value - 2.0 / 3.0).abs() < 1e-15);
        assert!(nonmonotonic_fraction(&[series(&[0.5])], 3).is_err());
    }

    #[test]
    fn length_bins() {
        let items: Vec<(u64, f64)> = (1..=10).map(|l| (l, l as f64)).collect();
        let one = bin_by_length(&items, 1).unwrap();
        assert_eq!(one[0].mean, 5.5);
        let two = bin_by_length(&items, 2).unwrap();
        assert_eq!((two[0].mean, two[1].mean), (3.0, 8.0));
        assert_eq!(quantile_bins(&[30, 10, 20, 40], 2), vec![1, 0, 0, 1]);
    }

    #[test]
    fn curve_single_bin_matches_global() {
        let gs = vec![group(100, &[400, 100]), group(50, &[10, 90, 20]), group(7, &[0, 3])];
        let (m, p) = mad_mapd(&gs).unwrap();
        let c = dispersion_curve(&gs, 1, DispersionKey::Position).unwrap();
        assert_eq!((c[0].mad, c[0].mapd), (m, p));
        let c = dispersion_curve(&gs, 1, DispersionKey::PrefixLength).unwrap();
        assert_eq!((c[0].mad, c[0].mapd), (m, p));
    }

    #[test]
    fn paired_alignment() {
        let a = series(&[0.1, 0.2]);
        let r = conditioned_vs_unconditioned(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!(r.cond_mae, r.uncond_mae);
        let b = series(&[0.1]);
        match conditioned_vs_unconditioned(&[a], &[b]) {
            Err(Error::Alignment { missing }) => assert_eq!(missing, vec!["s#2".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
