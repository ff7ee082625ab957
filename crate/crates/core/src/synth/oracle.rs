//! Reference implementations used to cross-check the main code paths.
//!
//! They are deliberately written differently: bucket lookup by scanning
//! intervals, dispersion and error metrics in exact rational arithmetic,
//! length statistics by full sorts, and heatmap interpolation by searching
//! for the bracketing pair of rows on an integer lattice.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::metrics::{MarkerSeries, RolloutGroup};
use crate::trace::GroupKey;
use crate::{Error, Result};

fn rat(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite value")
}

fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("representable")
}

fn clip(x: BigRational) -> BigRational {
    if x > BigRational::one() {
        BigRational::one()
    } else if x.is_negative() {
        BigRational::zero()
    } else {
        x
    }
}

/// Bucket by walking the intervals `[(q-1)/Q, q/Q)` in order.
pub fn oracle_bucket(k: u64, m: u64, buckets: u32) -> Result<u32> {
    if buckets < 2 || k == 0 || k > m {
        return Err(Error::Range(format!("position {k} of {m} in {buckets} buckets")));
    }
    let pos = rat(k, m);
    for q in 1..=u64::from(buckets) {
        let lower = rat(q - 1, u64::from(buckets));
        let upper = rat(q, u64::from(buckets));
        if pos >= lower && pos < upper {
            return Ok(q as u32);
        }
    }
    Ok(buckets)
}

/// Exact MAD and MAPD.
pub fn oracle_mad_mapd(groups: &[RolloutGroup]) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(Error::Empty("no rollout groups".into()));
    }
    let mut mad = BigRational::zero();
    let mut mapd = BigRational::zero();
    for g in groups {
        let r = g.continuation_lens.len() as u64;
        if r < 2 || g.prefix_len == 0 {
            return Err(Error::Data("invalid rollout group".into()));
        }
        let realized: Vec<BigRational> = g
            .continuation_lens
            .iter()
            .map(|&c| rat(g.prefix_len, g.prefix_len + c))
            .collect();
        let mean = realized.iter().fold(BigRational::zero(), |a, b| a + b) / rat(r, 1);
        for x in &realized {
            let dev = (x - &mean).abs() / rat(r, 1);
            mapd += &dev / &mean;
            mad += dev;
        }
    }
    let n = rat(groups.len() as u64, 1);
    Ok((to_f64(&(mad / &n)), to_f64(&(mapd / n))))
}

pub fn oracle_progress_mae(series: &[MarkerSeries]) -> Result<f64> {
    let mut total = BigRational::zero();
    let mut n = 0u64;
    for s in series {
        for m in &s.markers {
            total += (exact(m.predicted) - exact(m.realized)).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no markers".into()));
    }
    Ok(to_f64(&(total / rat(n, 1))))
}

/// Exact length statistics and the four position baselines.
pub struct OracleBaselines {
    global_mean: BigRational,
    groups: BTreeMap<GroupKey, (BigRational, u64)>,
}

impl OracleBaselines {
    pub fn new(lengths: &[(GroupKey, u64)]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Empty("no lengths".into()));
        }
        let total: u64 = lengths.iter().map(|(_, l)| l).sum();
        let mut per: BTreeMap<GroupKey, Vec<u64>> = BTreeMap::new();
        for (k, l) in lengths {
            per.entry(k.clone()).or_default().push(*l);
        }
        let groups = per
            .into_iter()
            .map(|(k, mut v)| {
                v.sort();
                let mean = rat(v.iter().sum(), v.len() as u64);
                // lower-middle for even counts
                let median = if v.len() % 2 == 1 { v[v.len() / 2] } else { v[v.len() / 2 - 1] };
                (k, (mean, median))
            })
            .collect();
        Ok(Self {
            global_mean: rat(total, lengths.len() as u64),
            groups,
        })
    }

    pub fn global_mean_length(&self) -> f64 {
        to_f64(&self.global_mean)
    }

    pub fn group_mean_length(&self, key: &GroupKey) -> Option<f64> {
        self.groups.get(key).map(|(m, _)| to_f64(m))
    }

    pub fn group_median_length(&self, key: &GroupKey) -> Option<u64> {
        self.groups.get(key).map(|(_, m)| *m)
    }

    pub fn global(&self, prefix_len: u64) -> f64 {
        to_f64(&clip(rat(prefix_len, 1) / &self.global_mean))
    }

    pub fn task_mean(&self, prefix_len: u64, key: &GroupKey) -> f64 {
        match self.groups.get(key) {
            Some((mean, _)) => to_f64(&clip(rat(prefix_len, 1) / mean)),
            None => self.global(prefix_len),
        }
    }

    pub fn task_median(&self, prefix_len: u64, key: &GroupKey) -> f64 {
        match self.groups.get(key) {
            Some((_, median)) => to_f64(&clip(rat(prefix_len, *median))),
            None => self.global(prefix_len),
        }
    }

    pub fn previous_marker(&self, prefix_len: u64, previous: Option<(u64, f64)>, key: &GroupKey) -> Result<f64> {
        match previous {
            None => Ok(self.task_median(prefix_len, key)),
            Some((prev_len, prev_pred)) => {
                let p = exact(prev_pred);
                if p.is_zero() || prev_len == 0 {
                    return Err(Error::DivisionByZero("previous report".into()));
                }
                Ok(to_f64(&clip(rat(prefix_len, prev_len) * p)))
            }
        }
    }
}

/// Heatmap cells and expected-progress curves for each non-empty group.
pub fn oracle_heatmap(groups: &[Vec<Vec<Vec<f64>>>], grid_points: usize) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    let steps = grid_points as u64 - 1;
    groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|traces| {
            let q = traces[0][0].len();
            let cells: Vec<Vec<f64>> = (0..=steps)
                .map(|t| {
                    let mut acc = vec![0.0; q];
                    for rows in traces {
                        let gaps = rows.len() as u64 - 1;
                        // grid point t/steps lies between rows j and j+1 when
                        // j*steps <= t*gaps <= (j+1)*steps
                        let target = t * gaps;
                        let j = (0..gaps)
                            .find(|&j| j * steps <= target && target <= (j + 1) * steps)
                            .expect("bracketing rows") as usize;
                        let w = (target - j as u64 * steps) as f64 / steps as f64;
                        for (b, a) in acc.iter_mut().enumerate() {
                            *a += rows[j][b] * (1.0 - w) + rows[j + 1][b] * w;
                        }
                    }
                    acc.into_iter().map(|v| v / traces.len() as f64).collect()
                })
                .collect();
            let expected = cells
                .iter()
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .map(|(i, p)| p * (2 * i + 1) as f64 / (2 * q) as f64)
                        .sum()
                })
                .collect();
            (cells, expected)
        })
        .collect()
}
