//! Linear softmax probe over progress buckets, trained with mini-batch
//! gradient descent on the token-averaged cross-entropy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::BucketDistribution;
use super::features::FeatureMode;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PPRB";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Standardize each feature with training-split mean and deviation.
    pub standardize: bool,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            step_size: 0.1,
            epochs: 5,
            batch_size: 256,
            seed,
            standardize: true,
        }
    }
}

/// Probe layout metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub buckets: u32,
    pub mode: FeatureMode,
    pub question_tokens: usize,
    /// Free-form label for the source layer (early / middle / late).
    pub layer_tag: String,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            buckets: crate::label::DEFAULT_BUCKETS,
            mode: FeatureMode::Token,
            question_tokens: super::features::DEFAULT_QUESTION_TOKENS,
            layer_tag: "middle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(x.ncols());
        for row in x.rows() {
            var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
        }
        let scale = var.mapv(|v: f64| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Self { mean, scale }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub spec: ProbeSpec,
    /// `Q x D`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub rows: usize,
}

impl ProbeModel {
    pub fn zeros(spec: ProbeSpec, dim: usize) -> Self {
        let q = spec.buckets as usize;
        Self {
            spec,
            weights: Array2::zeros((q, dim)),
            bias: Array1::zeros(q),
            standardizer: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn buckets(&self) -> u32 {
        self.spec.buckets
    }

    /// Raw logits `W x + b` for one feature row (before standardization).
    pub fn logits(&self, row: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if row.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: row.len(),
            });
        }
        let x = match &self.standardizer {
            Some(s) => (&row - &s.mean) / &s.scale,
            None => row.to_owned(),
        };
        Ok(self.weights.dot(&x) + &self.bias)
    }

    pub fn predict(&self, row: ArrayView1<'_, f64>) -> Result<BucketDistribution> {
        Ok(BucketDistribution::from_logits(self.logits(row)?.view()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ModelHeader {
            buckets: self.spec.buckets,
            dim: self.dim(),
            mode: self.spec.mode,
            question_tokens: self.spec.question_tokens,
            layer_tag: self.spec.layer_tag.clone(),
            standardized: self.standardizer.is_some(),
            payload: "f64-le".into(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut put = |vals: &mut dyn Iterator<Item = &f64>| -> Result<()> {
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put(&mut self.weights.iter())?;
        put(&mut self.bias.iter())?;
        if let Some(s) = &self.standardizer {
            put(&mut s.mean.iter())?;
            put(&mut s.scale.iter())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("bad probe model magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported probe model version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)?;
        let header: ModelHeader = serde_json::from_slice(&json)?;
        if header.payload != "f64-le" {
            return Err(Error::Format(format!("unknown payload {}", header.payload)));
        }
        let q = header.buckets as usize;
        let d = header.dim;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights = Array2::from_shape_vec((q, d), take(q * d)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = Array1::from(take(q)?);
        let standardizer = if header.standardized {
            Some(Standardizer {
                mean: Array1::from(take(d)?),
                scale: Array1::from(take(d)?),
            })
        } else {
            None
        };
        Ok(Self {
            spec: ProbeSpec {
                buckets: header.buckets,
                mode: header.mode,
                question_tokens: header.question_tokens,
                layer_tag: header.layer_tag,
            },
            weights,
            bias,
            standardizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    buckets: u32,
    dim: usize,
    mode: FeatureMode,
    question_tokens: usize,
    layer_tag: String,
    standardized: bool,
    payload: String,
}

/// Numerically stable log-softmax of one logit row.
fn log_softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.mapv(|z| z - lse)
}

/// Mean cross-entropy of a linear softmax model over the rows of `x`.
/// `labels` are 1-based bucket indices.
pub fn cross_entropy(weights: &Array2<f64>, bias: &Array1<f64>, x: ArrayView2<'_, f64>, labels: &[u32]) -> f64 {
    let logits = x.dot(&weights.t()) + bias;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| -log_softmax(row)[y as usize - 1])
        .sum();
    total / x.nrows() as f64
}

/// Mean cross-entropy with its gradient `(loss, dL/dW, dL/db)`.
pub fn cross_entropy_grad(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    x: ArrayView2<'_, f64>,
    labels: &[u32],
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut residual = x.dot(&weights.t()) + bias;
    let mut loss = 0.0;
    for (mut row, &y) in residual.rows_mut().into_iter().zip(labels) {
        let logp = log_softmax(row.view());
        loss -= logp[y as usize - 1];
        row.assign(&logp.mapv(f64::exp));
        row[y as usize - 1] -= 1.0;
    }
    residual /= n;
    let grad_w = residual.t().dot(&x);
    let grad_b = residual.sum_axis(Axis(0));
    (loss / n, grad_w, grad_b)
}

fn validate(features: &Array2<f64>, labels: &[u32], spec: &ProbeSpec) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: features.nrows(),
            actual: labels.len(),
        });
    }
    if spec.buckets < 2 {
        return Err(Error::Range(format!("bucket count {}", spec.buckets)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y > spec.buckets) {
        return Err(Error::Range(format!("label {bad} of {}", spec.buckets)));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature".into()));
    }
    Ok(())
}

/// Fit a probe from zero initialization. Rows are shuffled uniformly at the
/// token level every epoch; the run is a pure function of its inputs.
pub fn train_probe(
    features: &Array2<f64>,
    labels: &[u32],
    spec: &ProbeSpec,
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainReport)> {
    validate(features, labels, spec)?;
    if config.batch_size == 0 || !(config.step_size.is_finite() && config.step_size > 0.0) {
        return Err(Error::Range("batch_size and step_size must be positive".into()));
    }

    let standardizer = config.standardize.then(|| Standardizer::fit(features));
    let x = match &standardizer {
        Some(s) => s.apply(features.view()),
        None => features.clone(),
    };

    let mut model = ProbeModel::zeros(spec.clone(), x.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let (_, gw, gb) = cross_entropy_grad(&model.weights, &model.bias, xb.view(), &yb);
            model.weights.scaled_add(-config.step_size, &gw);
            model.bias.scaled_add(-config.step_size, &gb);
            steps += 1;
        }
        epoch_losses.push(cross_entropy(&model.weights, &model.bias, x.view(), labels));
    }
    let final_loss = epoch_losses
        .last()
        .copied()
        .unwrap_or_else(|| cross_entropy(&model.weights, &model.bias, x.view(), labels));
    model.standardizer = standardizer;
    Ok((
        model,
        TrainReport {
            final_loss,
            epoch_losses,
            steps,
            rows: x.nrows(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_model_is_uniform() {
        let m = ProbeModel::zeros(ProbeSpec::default(), 3);
        let p = m.predict(array![1.0, -2.0, 0.5].view()).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!(matches!(m.predict(array![1.0].view()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn saturated_logit_dominates() {
        let mut m = ProbeModel::zeros(ProbeSpec::default(), 1);
        m.bias[3] = 20.0;
        assert!(m.predict(array![0.0].view()).unwrap().probs()[3] > 0.999);
    }

    #[test]
    fn single_point_descent_is_monotone() {
        let x = array![[0.3, -1.2, 2.0]];
        let config = TrainConfig {
            step_size: 0.05,
            epochs: 10,
            batch_size: 1,
            seed: 1,
            standardize: false,
        };
        let (_, report) = train_probe(&x, &[4], &ProbeSpec::default(), &config).unwrap();
        assert_eq!(report.steps, 10);
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn rejects_bad_data() {
        let spec = ProbeSpec::default();
        let cfg = TrainConfig::with_seed(0);
        assert!(train_probe(&Array2::zeros((0, 2)), &[], &spec, &cfg).is_err());
        assert!(matches!(
            train_probe(&array![[f64::NAN, 1.0]], &[1], &spec, &cfg),
            Err(Error::Data(_))
        ));
        assert!(train_probe(&array![[0.0, 1.0]], &[11], &spec, &cfg).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        let (model, _) = train_probe(&x, &[1, 5, 10], &ProbeSpec::default(), &TrainConfig::with_seed(9)).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(ProbeModel::read_from(buf.as_slice()).unwrap(), model);
    }
}
