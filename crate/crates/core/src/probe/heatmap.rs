//! Aggregated probe distributions over a shared normalized-position grid.
//!
//! Each trace's per-token distributions are placed at positions `j / (m - 1)`
//! and linearly interpolated onto `grid_points` evenly spaced positions in
//! `[0, 1]`. Traces in one length group are averaged cell by cell, and the
//! expected-progress curve is read off the averaged distribution.

use log::warn;

use crate::label::midpoint;
use crate::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 101;

/// Per-token probability rows of one trace (`m x Q`, `m >= 2`).
pub type TraceDistributions = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGroup {
    /// Index of the input group.
    pub group: usize,
    pub n_traces: usize,
    pub grid: Vec<f64>,
    /// `grid_points x Q` averaged probabilities.
    pub cells: Vec<Vec<f64>>,
    pub expected: Vec<f64>,
}

pub fn grid(points: usize) -> Vec<f64> {
    (0..points).map(|t| t as f64 / (points - 1) as f64).collect()
}

fn interpolate(rows: &[Vec<f64>], x: f64) -> Vec<f64> {
    let last = rows.len() - 1;
    let s = x * last as f64;
    let j = (s.floor() as usize).min(last - 1);
    let frac = s - j as f64;
    rows[j]
        .iter()
        .zip(&rows[j + 1])
        .map(|(&a, &b)| a + frac * (b - a))
        .collect()
}

fn check_trace(rows: &[Vec<f64>], buckets: usize) -> Result<()> {
    if rows.len() < 2 {
        return Err(Error::Data(format!("trace has {} distribution rows, need 2", rows.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != buckets) {
        return Err(Error::Dimension {
            expected: buckets,
            actual: r.len(),
        });
    }
    Ok(())
}

/// Aggregate each group of traces. Empty groups are skipped with a warning.
pub fn heatmap(groups: &[Vec<TraceDistributions>], grid_points: usize) -> Result<Vec<HeatmapGroup>> {
    if grid_points < 2 {
        return Err(Error::Range(format!("grid of {grid_points} points")));
    }
    let xs = grid(grid_points);
    let mut out = Vec::new();
    for (g, traces) in groups.iter().enumerate() {
        let Some(first) = traces.first().and_then(|t| t.first()) else {
            warn!("heatmap group {g} is empty; skipped");
            continue;
        };
        let q = first.len();
        let mut cells = vec![vec![0.0; q]; grid_points];
        for trace in traces {
            check_trace(trace, q)?;
            for (cell, &x) in cells.iter_mut().zip(&xs) {
                for (acc, v) in cell.iter_mut().zip(interpolate(trace, x)) {
                    *acc += v;
                }
            }
        }
        let n = traces.len() as f64;
        for cell in &mut cells {
            cell.iter_mut().for_each(|v| *v /= n);
        }
        let expected = cells
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(i, &p)| p * midpoint(i as u32 + 1, q as u32))
                    .sum()
            })
            .collect();
        out.push(HeatmapGroup {
            group: g,
            n_traces: traces.len(),
            grid: xs.clone(),
            cells,
            expected,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_trace_is_flat() {
        let trace = vec![vec![0.1; 10]; 5];
        let h = heatmap(&[vec![trace]], 11).unwrap();
        assert_eq!(h.len(), 1);
        for cell in &h[0].cells {
            assert!(cell.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        }
        assert!(h[0].expected.iter().all(|&e| (e - 0.5).abs() < 1e-12));
    }

    #[test]
    fn duplicates_do_not_change_the_mean() {
        let t = vec![vec![1.0, 0.0], vec![0.25, 0.75], vec![0.0, 1.0]];
        let one = heatmap(&[vec![t.clone()]], 7).unwrap();
        let two = heatmap(&[vec![t.clone(), t]], 7).unwrap();
        for (a, b) in one[0].cells.iter().flatten().zip(two[0].cells.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_groups_are_skipped() {
        let t = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let h = heatmap(&[vec![], vec![t]], 3).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].group, 1);
        assert!(heatmap(&[vec![vec![vec![1.0, 0.0]]]], 3).is_err());
        assert!(heatmap(&[], 1).is_err());
    }

    #[test]
    fn endpoints_hit_first_and_last_rows() {
        let t = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
        let h = heatmap(&[vec![t]], 5).unwrap();
        assert_eq!(h[0].cells[0], vec![1.0, 0.0]);
        assert_eq!(h[0].cells[4], vec![0.0, 1.0]);
        assert_eq!(h[0].cells[1], vec![0.75, 0.25]);
    }
}
