//! Seeded synthetic corpora and planted-signal hidden states.
//!
//! Token row `k` of an `m`-token trace is `signal_scale * (k/m) * u + eps`,
//! where `u` is one unit direction drawn from the seed and `eps` is Gaussian
//! with standard deviation `noise_sigma` per coordinate. Question rows are
//! pure noise. Generation is single-threaded and fully determined by the seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::metrics::RolloutGroup;
use crate::probe::HiddenStateMatrix;
use crate::trace::ReasoningTrace;
use crate::{Error, Result};

pub mod oracle;

pub const GROUPS: [(&str, &str); 2] = [("synth-a", "math"), ("synth-b", "logic")];

const WORDS: &[&str] = &[
    "so", "then", "let", "x", "equals", "the", "sum", "of", "check", "wait", "we", "have", "factor", "square",
    "root", "hence", "case", "two", "three", "prime", "value", "is", "therefore", "consider",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthShape {
    Uniform,
    /// Log-normal with median `sqrt(min * max)` and `sigma = ln(max/min) / 4`,
    /// rounded and clamped to `[min, max]`.
    Lognormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_traces: usize,
    pub min_len: u64,
    pub max_len: u64,
    pub shape: LengthShape,
    pub dim: usize,
    pub signal_scale: f64,
    pub noise_sigma: f64,
    pub question_rows: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_traces: 200,
            min_len: 50,
            max_len: 150,
            shape: LengthShape::Uniform,
            dim: 64,
            signal_scale: 1.0,
            noise_sigma: 0.1,
            question_rows: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 10 {
            return Err(Error::Range(format!("min_len {} (need >= 10)", self.min_len)));
        }
        if self.max_len < self.min_len {
            return Err(Error::Range(format!("max_len {} < min_len {}", self.max_len, self.min_len)));
        }
        if self.dim < 2 {
            return Err(Error::Range(format!("dim {}", self.dim)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Range(format!("noise_sigma {}", self.noise_sigma)));
        }
        if !self.signal_scale.is_finite() {
            return Err(Error::Range(format!("signal_scale {}", self.signal_scale)));
        }
        Ok(())
    }

    fn lognormal(&self) -> LogNormal<f64> {
        let (lo, hi) = ((self.min_len as f64).ln(), (self.max_len as f64).ln());
        LogNormal::new((lo + hi) / 2.0, ((hi - lo) / 4.0).max(1e-12)).expect("finite parameters")
    }

    fn sample_length(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self.shape {
            LengthShape::Uniform => rng.random_range(self.min_len..=self.max_len),
            LengthShape::Lognormal => {
                let x: f64 = self.lognormal().sample(rng);
                (x.round() as u64).clamp(self.min_len, self.max_len)
            }
        }
    }
}

fn pseudo_text(len: u64, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    let mut until_break = rng.random_range(15..60);
    for i in 0..len {
        if i > 0 {
            until_break -= 1;
            if until_break == 0 {
                out.push_str("\n\n");
                until_break = rng.random_range(15..60);
            } else {
                out.push(' ');
            }
        }
        out.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    out
}

/// Traces of sampled lengths, alternating between the two synthetic groups.
pub fn gen_traces(cfg: &SynthConfig) -> Result<Vec<ReasoningTrace>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n_traces)
        .map(|i| {
            let len = cfg.sample_length(&mut rng);
            let (family, task) = GROUPS[i % GROUPS.len()];
            ReasoningTrace {
                id: format!("synth-{i:05}"),
                question: format!("synthetic question {i}"),
                reasoning: pseudo_text(len, &mut rng),
                answer: String::new(),
                model_family: family.into(),
                task: task.into(),
                token_count: len,
            }
        })
        .collect())
}

/// Planted progress direction for `cfg`.
pub fn signal_direction(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    loop {
        let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Hidden states for traces of the given lengths.
pub fn gen_features(lengths: &[u64], cfg: &SynthConfig) -> Result<Vec<HiddenStateMatrix>> {
    cfg.validate()?;
    let u = signal_direction(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Range(e.to_string()))?;
    let eps = |rng: &mut ChaCha8Rng| {
        if cfg.noise_sigma == 0.0 {
            0.0
        } else {
            noise.sample(rng)
        }
    };
    let d = cfg.dim;
    lengths
        .iter()
        .map(|&m| {
            if m == 0 {
                return Err(Error::Range("trace length 0".into()));
            }
            let question = Array2::from_shape_fn((cfg.question_rows, d), |_| eps(&mut rng) as f32);
            let mut tokens = Array2::<f32>::zeros((m as usize, d));
            for (j, mut row) in tokens.rows_mut().into_iter().enumerate() {
                let progress = (j as f64 + 1.0) / m as f64;
                for (x, &ui) in row.iter_mut().zip(&u) {
                    *x = (cfg.signal_scale * progress * ui + eps(&mut rng)) as f32;
                }
            }
            HiddenStateMatrix::new(question, tokens)
        })
        .collect()
}

/// `prefixes` rollout groups per trace. Each prefix position is uniform over
/// the trace and each of its `r` continuations runs to a total length drawn
/// from the configured distribution (at least one more token).
pub fn gen_rollouts(traces: &[ReasoningTrace], cfg: &SynthConfig, prefixes: usize, r: usize) -> Result<Vec<RolloutGroup>> {
    cfg.validate()?;
    if r < 2 {
        return Err(Error::Range(format!("{r} continuations per prefix, need 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut groups = Vec::with_capacity(traces.len() * prefixes);
    for t in traces {
        if t.token_count < 2 {
            return Err(Error::Range(format!("{}: too short for rollouts", t.id)));
        }
        for _ in 0..prefixes {
            let k = rng.random_range(1..t.token_count);
            let continuation_lens = (0..r)
                .map(|_| cfg.sample_length(&mut rng).saturating_sub(k).max(1))
                .collect();
            groups.push(RolloutGroup {
                trace_id: t.id.clone(),
                prefix_len: k,
                continuation_lens,
            });
        }
    }
    Ok(groups)
}
