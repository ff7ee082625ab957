//! Progress labels: bucket quantization of normalized position and realized
//! progress ratios.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BUCKETS: u32 = 10;

/// Bucket `index` (1-based) of `count` equal intervals over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgressBucket {
    pub index: u32,
    pub count: u32,
}

impl ProgressBucket {
    pub fn new(index: u32, count: u32) -> Result<Self> {
        if count < 2 {
            return Err(Error::Range(format!("bucket count {count}")));
        }
        if index == 0 || index > count {
            return Err(Error::Range(format!("bucket {index} of {count}")));
        }
        Ok(Self { index, count })
    }

    pub fn midpoint(&self) -> f64 {
        midpoint(self.index, self.count)
    }

    pub fn lower(&self) -> f64 {
        f64::from(self.index - 1) / f64::from(self.count)
    }

    pub fn upper(&self) -> f64 {
        f64::from(self.index) / f64::from(self.count)
    }
}

/// `c_q = (q - 0.5) / Q`.
pub fn midpoint(index: u32, count: u32) -> f64 {
    (f64::from(index) - 0.5) / f64::from(count)
}

/// Bucket of token `k` (1-based) in a trace of `m` tokens.
///
/// `k/m` falls in `[(q-1)/Q, q/Q)`; `k = m` is assigned to the last bucket.
pub fn bucketize(k: u64, m: u64, buckets: u32) -> Result<ProgressBucket> {
    if buckets < 2 {
        return Err(Error::Range(format!("bucket count {buckets}")));
    }
    if k == 0 || k > m {
        return Err(Error::Range(format!("position {k} of {m}")));
    }
    let q = u128::from(k) * u128::from(buckets) / u128::from(m);
    let index = (q as u32 + 1).min(buckets);
    Ok(ProgressBucket {
        index,
        count: buckets,
    })
}

/// `g = prefix_len / total_len`.
pub fn realized_progress(prefix_len: u64, total_len: u64) -> Result<f64> {
    if total_len == 0 {
        return Err(Error::DivisionByZero("total length 0".into()));
    }
    if prefix_len == 0 || prefix_len > total_len {
        return Err(Error::Range(format!("prefix {prefix_len} of {total_len}")));
    }
    Ok(prefix_len as f64 / total_len as f64)
}

/// Progress realized by one continuation: `k / (k + continuation_len)`.
pub fn rollout_progress(prefix_len: u64, continuation_len: u64) -> Result<f64> {
    if prefix_len == 0 {
        return Err(Error::Range("prefix length 0".into()));
    }
    realized_progress(prefix_len, prefix_len + continuation_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_examples() {
        assert_eq!(bucketize(5, 100, 10).unwrap().index, 1);
        assert_eq!(bucketize(100, 100, 10).unwrap().index, 10);
        assert_eq!(bucketize(10, 100, 10).unwrap().index, 2);
        assert_eq!(bucketize(99, 100, 10).unwrap().index, 10);
        assert!(bucketize(0, 10, 10).is_err());
        assert!(bucketize(11, 10, 10).is_err());
        assert!(bucketize(1, 10, 1).is_err());
    }

    #[test]
    fn midpoints() {
        assert_eq!(midpoint(1, 10), 0.05);
        assert_eq!(ProgressBucket::new(6, 10).unwrap().midpoint(), 0.55);
    }

    #[test]
    fn realized_examples() {
        assert_eq!(realized_progress(50, 200).unwrap(), 0.25);
        assert_eq!(realized_progress(200, 200).unwrap(), 1.0);
        assert!(realized_progress(1, 0).is_err());
        assert_eq!(rollout_progress(100, 300).unwrap(), 0.25);
        assert_eq!(rollout_progress(100, 0).unwrap(), 1.0);
        assert!(rollout_progress(0, 5).is_err());
    }
}
