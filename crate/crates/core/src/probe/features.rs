//! Hidden-state matrices, the `PPHS` feature file and probe feature assembly.
//!
//! `PPHS` layout, all little-endian:
//!
//! ```text
//! magic      b"PPHS"
//! version    u32 (= 1)
//! d          u32
//! n_question u32
//! m          u32
//! rows       (n_question + m) * d * f32, question rows first
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PPHS_MAGIC: &[u8; 4] = b"PPHS";
pub const PPHS_VERSION: u32 = 1;

/// Number of question-context rows concatenated in question+token mode.
pub const DEFAULT_QUESTION_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateMatrix {
    /// `n_question x d`
    pub question_rows: Array2<f32>,
    /// `m x d`
    pub token_rows: Array2<f32>,
}

impl HiddenStateMatrix {
    pub fn new(question_rows: Array2<f32>, token_rows: Array2<f32>) -> Result<Self> {
        let d = token_rows.ncols();
        if d == 0 {
            return Err(Error::Feature("feature dimension 0".into()));
        }
        if token_rows.nrows() == 0 {
            return Err(Error::Feature("no token rows".into()));
        }
        if question_rows.ncols() != d && question_rows.nrows() > 0 {
            return Err(Error::Dimension {
                expected: d,
                actual: question_rows.ncols(),
            });
        }
        if token_rows.iter().chain(question_rows.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Feature("non-finite hidden state".into()));
        }
        let question_rows = if question_rows.nrows() == 0 {
            Array2::zeros((0, d))
        } else {
            question_rows
        };
        Ok(Self {
            question_rows,
            token_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.token_rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.token_rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.token_rows.nrows() == 0
    }

    pub fn write_pphs<W: Write>(&self, mut w: W) -> Result<()> {
        let header = [
            PPHS_VERSION,
            self.dim() as u32,
            self.question_rows.nrows() as u32,
            self.token_rows.nrows() as u32,
        ];
        w.write_all(PPHS_MAGIC)?;
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        for v in self.question_rows.iter().chain(self.token_rows.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_pphs<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PPHS_MAGIC {
            return Err(Error::Format("bad PPHS magic".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(&mut r)?;
        if version != PPHS_VERSION {
            return Err(Error::Format(format!("unsupported PPHS version {version}")));
        }
        let d = next_u32(&mut r)? as usize;
        let n_question = next_u32(&mut r)? as usize;
        let m = next_u32(&mut r)? as usize;

        let total = (n_question + m)
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("PPHS size overflow".into()))?;
        let mut bytes = vec![0u8; total];
        r.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after PPHS payload".into()));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (q, t) = values.split_at(n_question * d);
        let question_rows = Array2::from_shape_vec((n_question, d), q.to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        let token_rows = Array2::from_shape_vec((m, d), t.to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(question_rows, token_rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_pphs(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_pphs(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `h_ij` alone.
    #[default]
    Token,
    /// `[h_ij; e_i]` with `e_i` the last `n` question rows.
    QuestionToken,
}

impl FeatureMode {
    pub fn feature_dim(self, d: usize, n: usize) -> usize {
        match self {
            FeatureMode::Token => d,
            FeatureMode::QuestionToken => (n + 1) * d,
        }
    }
}

/// Feature matrix (`m x D`) for one trace.
pub fn build_features(hs: &HiddenStateMatrix, mode: FeatureMode, n: usize) -> Result<Array2<f64>> {
    let tokens = hs.token_rows.mapv(f64::from);
    match mode {
        FeatureMode::Token => Ok(tokens),
        FeatureMode::QuestionToken => {
            let nq = hs.question_rows.nrows();
            if nq < n {
                return Err(Error::Feature(format!(
                    "{nq} question rows, need {n}"
                )));
            }
            let d = hs.dim();
            let context: Vec<f64> = hs
                .question_rows
                .slice(s![nq - n.., ..])
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let mut out = Array2::zeros((hs.len(), (n + 1) * d));
            out.slice_mut(s![.., ..d]).assign(&tokens);
            for mut row in out.rows_mut() {
                row.slice_mut(s![d..])
                    .iter_mut()
                    .zip(&context)
                    .for_each(|(dst, &v)| *dst = v);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Read a manifest JSONL mapping trace ids to PPHS paths. Relative paths are
/// resolved against the manifest's directory.
pub fn read_feature_manifest(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: FeatureManifestEntry =
            serde_json::from_str(&line).map_err(|source| Error::Parse { line: i + 1, source })?;
        let resolved = if entry.path.is_absolute() {
            entry.path
        } else {
            base.join(entry.path)
        };
        if out.insert(entry.id.clone(), resolved).is_some() {
            return Err(Error::Schema(format!("line {}: duplicate id {}", i + 1, entry.id)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> HiddenStateMatrix {
        HiddenStateMatrix::new(
            array![[9., 9., 9., 9.], [1., 2., 3., 4.], [5., 6., 7., 8.]],
            array![[0., 1., 2., 3.], [4., 5., 6., 7.], [8., 9., 10., 11.]],
        )
        .unwrap()
    }

    #[test]
    fn token_features_are_identity() {
        let hs = sample();
        let f = build_features(&hs, FeatureMode::Token, 2).unwrap();
        assert_eq!(f, hs.token_rows.mapv(f64::from));
    }

    #[test]
    fn question_features_share_context() {
        let f = build_features(&sample(), FeatureMode::QuestionToken, 2).unwrap();
        assert_eq!(f.dim(), (3, 12));
        for row in f.rows() {
            assert_eq!(row.slice(s![4..]).to_vec(), vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        }
        assert!(build_features(&sample(), FeatureMode::QuestionToken, 4).is_err());
    }

    #[test]
    fn pphs_round_trip_and_errors() {
        let hs = sample();
        let mut buf = Vec::new();
        hs.write_pphs(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PPHS");
        assert_eq!(buf.len(), 20 + 6 * 4 * 4);
        assert_eq!(HiddenStateMatrix::read_pphs(buf.as_slice()).unwrap(), hs);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(HiddenStateMatrix::read_pphs(bad.as_slice()), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(HiddenStateMatrix::read_pphs(long.as_slice()).is_err());
        assert!(HiddenStateMatrix::read_pphs(&buf[..buf.len() - 1]).is_err());
        let mut nan = buf;
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(HiddenStateMatrix::read_pphs(nan.as_slice()), Err(Error::Feature(_))));
    }
}
