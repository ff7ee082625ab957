//! Command-line front end.
//!
//! Every subcommand that writes files takes `--out DIR` and leaves a
//! `manifest.json` there recording the command, its resolved configuration,
//! SHA-256 digests of the inputs, the seed and the tool version. Values from
//! an optional TOML `--config` file (one table per subcommand) are applied
//! first, so flags on the command line win.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure, 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::annotate::{self, AnnotatedRecord, BlankLineSegmenter, MaskPolicy, MaskingSchedule};
use crate::baselines::{baseline_report, compute_length_stats, LengthStats};
use crate::label::bucketize;
use crate::metrics::{self, DispersionKey, MarkerPoint, MarkerSeries, RolloutGroup};
use crate::probe::{self, FeatureMode, HiddenStateMatrix, ProbeModel, ProbeSpec, TrainConfig};
use crate::stream::{EventRecord, StreamEvent, StreamParser};
use crate::synth::{self, LengthShape, SynthConfig};
use crate::trace::{self, ReasoningTrace};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "cot-progress", version, about = "Reasoning-progress annotation, probing and scoring")]
pub struct Cli {
    /// TOML file with one table of flag values per subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel scoring.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Insert progress markers after every paragraph.
    Annotate(AnnotateArgs),
    /// Randomly drop earlier markers following the cosine schedule.
    Mask(MaskArgs),
    /// Dump bucket labels for token prefixes.
    Label(LabelArgs),
    /// Split traces by length into in-domain and held-out sets.
    Split(SplitArgs),
    /// Train a linear progress probe on hidden states.
    ProbeTrain(ProbeTrainArgs),
    /// Score a trained probe on hidden states.
    ProbeEval(ProbeEvalArgs),
    /// Average probe distributions over normalized position per group.
    Heatmap(HeatmapArgs),
    /// Score length-based baselines against the realized progress.
    Baseline(BaselineArgs),
    /// Mean absolute error of reported progress.
    Score(ScoreArgs),
    /// MAD and MAPD of realized progress across rollouts.
    Dispersion(DispersionArgs),
    /// Fraction of reports that drop below the previous one.
    Monotonicity(MonotonicityArgs),
    /// Parse a token stream into newline-delimited JSON events.
    StreamParse(StreamParseArgs),
    /// Generate a seeded synthetic corpus with planted hidden states.
    Synth(SynthArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Annotate(_) => "annotate",
            Command::Mask(_) => "mask",
            Command::Label(_) => "label",
            Command::Split(_) => "split",
            Command::ProbeTrain(_) => "probe-train",
            Command::ProbeEval(_) => "probe-eval",
            Command::Heatmap(_) => "heatmap",
            Command::Baseline(_) => "baseline",
            Command::Score(_) => "score",
            Command::Dispersion(_) => "dispersion",
            Command::Monotonicity(_) => "monotonicity",
            Command::StreamParse(_) => "stream-parse",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also emit per-token loss weights.
    #[arg(long)]
    pub loss_weights: bool,
    /// Weight of tokens inside markers.
    #[arg(long, default_value_t = annotate::DEFAULT_GAMMA)]
    pub gamma: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Training step t of the schedule.
    #[arg(long)]
    pub step: u64,
    /// Total steps T of the schedule.
    #[arg(long)]
    pub total_steps: u64,
    #[arg(long, default_value_t = annotate::DEFAULT_RHO_MAX)]
    pub rho_max: f64,
    /// Fixed masking probability, bypassing the schedule.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Allow the final marker of a trace to be dropped too.
    #[arg(long)]
    pub all_spans: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct LabelArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::label::DEFAULT_BUCKETS)]
    pub buckets: u32,
    /// Label every n-th prefix.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = trace::DEFAULT_SPLIT_THRESHOLD)]
    pub threshold: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Token,
    QuestionToken,
}

impl From<ModeArg> for FeatureMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Token => FeatureMode::Token,
            ModeArg::QuestionToken => FeatureMode::QuestionToken,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeTrainArgs {
    /// JSONL manifest mapping trace ids to PPHS files.
    #[arg(long)]
    pub features: PathBuf,
    /// Restrict training to the traces in this JSONL file.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::label::DEFAULT_BUCKETS)]
    pub buckets: u32,
    #[arg(long, value_enum, default_value_t = ModeArg::Token)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = probe::DEFAULT_QUESTION_TOKENS)]
    pub question_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Train on raw features instead of standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
    /// Use every n-th token row.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value = "middle")]
    pub layer_tag: String,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Restrict to these trace ids.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = probe::DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    /// Equal-population bins over trace length.
    #[arg(long, default_value_t = 4)]
    pub length_bins: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BaselineArgs {
    /// Traces carrying reported markers in their reasoning.
    #[arg(long)]
    pub input: PathBuf,
    /// Traces to take length statistics from (defaults to the input).
    #[arg(long)]
    pub stats_from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    /// Traces with predicted markers.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference traces whose markers give the realized values, matched by
    /// trace id and marker index. Without it, realized = k / trace length.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Unconditioned predictions over the same markers, for a paired report.
    #[arg(long)]
    pub pred_uncond: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub length_bins: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyArg {
    Position,
    PrefixLength,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionMetric {
    Mad,
    Mapd,
}

#[derive(Args, Debug, Serialize)]
pub struct DispersionArgs {
    /// JSONL rollout groups: trace_id, prefix_len, continuation_lens.
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = KeyArg::Position)]
    pub key: KeyArg,
    /// Metric written to the `value` column.
    #[arg(long, value_enum, default_value_t = DispersionMetric::Mapd)]
    pub metric: DispersionMetric,
}

#[derive(Args, Debug, Serialize)]
pub struct MonotonicityArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct StreamParseArgs {
    /// Read from a file instead of stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    pub chunk_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeArg {
    Uniform,
    Lognormal,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n_traces: usize,
    #[arg(long, default_value_t = 50)]
    pub min_len: u64,
    #[arg(long, default_value_t = 150)]
    pub max_len: u64,
    #[arg(long, value_enum, default_value_t = ShapeArg::Uniform)]
    pub shape: ShapeArg,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub question_rows: usize,
    /// Skip hidden-state files.
    #[arg(long)]
    pub no_features: bool,
    /// Rollout prefixes per trace (0 for none).
    #[arg(long, default_value_t = 0)]
    pub rollouts: usize,
    /// Continuations per rollout prefix.
    #[arg(long, default_value_t = 8)]
    pub continuations: usize,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            n_traces: self.n_traces,
            min_len: self.min_len,
            max_len: self.max_len,
            shape: match self.shape {
                ShapeArg::Uniform => LengthShape::Uniform,
                ShapeArg::Lognormal => LengthShape::Lognormal,
            },
            dim: self.dim,
            signal_scale: self.signal_scale,
            noise_sigma: self.noise_sigma,
            question_rows: self.question_rows,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub version: String,
    /// Unix seconds; `SOURCE_DATE_EPOCH` pins both when set.
    pub started_at: u64,
    pub finished_at: u64,
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Tracks inputs and writes the manifest once the command succeeds.
struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started_at: u64,
}

impl Run {
    fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            started_at: now(),
        })
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn finish(self, out: &Path) -> Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.into(),
            config: self.config,
            inputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: self.started_at,
            finished_at: now(),
        };
        write_json(&out.join("manifest.json"), &manifest)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_trace_file(path: &Path) -> Result<Vec<ReasoningTrace>> {
    trace::read_traces(BufReader::new(File::open(path)?))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct BinRow {
    bin_lower: f64,
    bin_upper: f64,
    count: usize,
    value: f64,
}

fn write_bins(path: &Path, rows: impl IntoIterator<Item = BinRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Range("stride must be at least 1".into()));
    }
    Ok(())
}

fn annotate_cmd(a: &AnnotateArgs) -> Result<()> {
    let mut run = Run::new("annotate", a, None)?;
    run.input(&a.input);
    let traces = read_trace_file(&a.input)?;
    let gamma = a.loss_weights.then_some(a.gamma);
    let records = traces
        .iter()
        .map(|t| annotate::annotate_trace(t, &BlankLineSegmenter, gamma))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&a.out)?;
    write_jsonl(&a.out.join("annotated.jsonl"), &records)?;
    let markers: usize = records.iter().map(|r| r.annotations.len()).sum();
    println!("traces {}", records.len());
    println!("markers {markers}");
    run.finish(&a.out)
}

#[derive(Serialize)]
struct MaskStats {
    rho: f64,
    eligible: usize,
    removed: usize,
}

fn mask_cmd(a: &MaskArgs) -> Result<()> {
    let mut run = Run::new("mask", a, Some(a.seed))?;
    run.input(&a.input);
    let rho = match a.rho {
        Some(r) => r,
        None => MaskingSchedule::new(a.total_steps, a.rho_max)?.rho(a.step)?,
    };
    let policy = if a.all_spans { MaskPolicy::AllSpans } else { MaskPolicy::KeepFinal };
    let traces = read_trace_file(&a.input)?;
    // one seed per record, drawn in file order
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    let mut stats = MaskStats {
        rho,
        eligible: 0,
        removed: 0,
    };
    let mut records = Vec::with_capacity(traces.len());
    for t in traces {
        let outcome = annotate::mask_annotations(&t.reasoning, rho, seeds.next_u64(), policy)?;
        stats.eligible += outcome.eligible;
        stats.removed += outcome.removed;
        let annotations = trace::extract_annotations(&outcome.text)?.annotations;
        records.push(AnnotatedRecord {
            trace: ReasoningTrace {
                reasoning: outcome.text,
                ..t
            },
            annotations,
            loss_weights: None,
        });
    }
    ensure_dir(&a.out)?;
    write_jsonl(&a.out.join("masked.jsonl"), &records)?;
    write_json(&a.out.join("stats.json"), &stats)?;
    println!("rho {rho}");
    println!("removed {} of {}", stats.removed, stats.eligible);
    run.finish(&a.out)
}

fn label_cmd(a: &LabelArgs) -> Result<()> {
    check_stride(a.stride)?;
    let mut run = Run::new("label", a, None)?;
    run.input(&a.input);
    let traces = read_trace_file(&a.input)?;
    ensure_dir(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("labels.csv"))?;
    w.write_record(["trace_id", "k", "m", "bucket"])?;
    let mut rows = 0usize;
    for t in &traces {
        let m = t.token_count;
        for k in (1..=m).step_by(a.stride) {
            let b = bucketize(k, m, a.buckets)?;
            w.write_record([t.id.as_str(), &k.to_string(), &m.to_string(), &b.index.to_string()])?;
            rows += 1;
        }
    }
    w.flush()?;
    println!("labels {rows}");
    run.finish(&a.out)
}

#[derive(Serialize)]
struct SplitStats {
    threshold: u64,
    in_domain: usize,
    held_out: usize,
}

fn split_cmd(a: &SplitArgs) -> Result<()> {
    let mut run = Run::new("split", a, None)?;
    run.input(&a.input);
    let traces = read_trace_file(&a.input)?;
    let split = trace::split_by_length(&traces, a.threshold)?;
    ensure_dir(&a.out)?;
    trace::write_traces(create(&a.out.join("in_domain.jsonl"))?, &split.in_domain)?;
    trace::write_traces(create(&a.out.join("held_out.jsonl"))?, &split.held_out)?;
    let stats = SplitStats {
        threshold: a.threshold,
        in_domain: split.in_domain.len(),
        held_out: split.held_out.len(),
    };
    write_json(&a.out.join("stats.json"), &stats)?;
    println!("in_domain {}", stats.in_domain);
    println!("held_out {}", stats.held_out);
    run.finish(&a.out)
}

/// Hidden states of the selected traces, in id order.
fn load_states(
    run: &mut Run,
    manifest: &Path,
    traces: Option<&[ReasoningTrace]>,
) -> Result<Vec<(String, HiddenStateMatrix)>> {
    run.input(manifest);
    let entries = probe::read_feature_manifest(manifest)?;
    let wanted: Option<Vec<&str>> = traces.map(|ts| ts.iter().map(|t| t.id.as_str()).collect());
    let mut out = Vec::new();
    if let Some(ids) = &wanted {
        let missing: Vec<String> = ids.iter().filter(|id| !entries.contains_key(**id)).map(|s| s.to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::Alignment { missing });
        }
    }
    for (id, path) in &entries {
        if wanted.as_ref().is_some_and(|ids| !ids.contains(&id.as_str())) {
            continue;
        }
        run.input(path);
        out.push((id.clone(), HiddenStateMatrix::load(path)?));
    }
    if out.is_empty() {
        return Err(Error::Empty("no hidden-state files selected".into()));
    }
    Ok(out)
}

/// Selected rows (every `stride`-th prefix) with their 1-based prefix length.
fn strided_rows(features: &Array2<f64>, stride: usize) -> Vec<(u64, ndarray::ArrayView1<'_, f64>)> {
    features
        .rows()
        .into_iter()
        .enumerate()
        .step_by(stride)
        .map(|(j, row)| (j as u64 + 1, row))
        .collect()
}

fn labelled_matrix(
    states: &[(String, HiddenStateMatrix)],
    spec: &ProbeSpec,
    stride: usize,
) -> Result<(Array2<f64>, Vec<u32>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (_, hs) in states {
        let f = probe::build_features(hs, spec.mode, spec.question_tokens)?;
        if *dim.get_or_insert(f.ncols()) != f.ncols() {
            return Err(Error::Dimension {
                expected: dim.unwrap_or(0),
                actual: f.ncols(),
            });
        }
        let m = f.nrows() as u64;
        for (k, row) in strided_rows(&f, stride) {
            data.extend(row.iter().copied());
            labels.push(bucketize(k, m, spec.buckets)?.index);
        }
    }
    let dim = dim.unwrap_or(0);
    let x = Array2::from_shape_vec((labels.len(), dim), data).map_err(|e| Error::Feature(e.to_string()))?;
    Ok((x, labels))
}

fn probe_train_cmd(a: &ProbeTrainArgs) -> Result<()> {
    check_stride(a.stride)?;
    let mut run = Run::new("probe-train", a, Some(a.seed))?;
    let traces = match &a.traces {
        Some(p) => {
            run.input(p);
            Some(read_trace_file(p)?)
        }
        None => None,
    };
    let states = load_states(&mut run, &a.features, traces.as_deref())?;
    let spec = ProbeSpec {
        buckets: a.buckets,
        mode: a.mode.into(),
        question_tokens: a.question_tokens,
        layer_tag: a.layer_tag.clone(),
    };
    let (x, labels) = labelled_matrix(&states, &spec, a.stride)?;
    let config = TrainConfig {
        step_size: a.step_size,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        standardize: !a.no_standardize,
    };
    let (model, report) = probe::train_probe(&x, &labels, &spec, &config)?;
    ensure_dir(&a.out)?;
    model.save(&a.out.join("probe.pprb"))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    println!("rows {}", report.rows);
    println!("final_loss {}", report.final_loss);
    run.finish(&a.out)
}

fn probe_eval_cmd(a: &ProbeEvalArgs) -> Result<()> {
    check_stride(a.stride)?;
    let mut run = Run::new("probe-eval", a, None)?;
    run.input(&a.model);
    let model = ProbeModel::load(&a.model)?;
    let traces = match &a.traces {
        Some(p) => {
            run.input(p);
            Some(read_trace_file(p)?)
        }
        None => None,
    };
    let states = load_states(&mut run, &a.features, traces.as_deref())?;
    let (x, labels) = labelled_matrix(&states, &model.spec, a.stride)?;
    let eval = probe::evaluate_probe(&model, &x, &labels)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("eval.json"), &eval)?;
    println!("top1_accuracy {}", eval.top1_accuracy);
    println!("bucket_mae {}", eval.bucket_mae);
    run.finish(&a.out)
}

fn heatmap_cmd(a: &HeatmapArgs) -> Result<()> {
    check_stride(a.stride)?;
    if a.length_bins == 0 {
        return Err(Error::Range("--length-bins must be at least 1".into()));
    }
    let mut run = Run::new("heatmap", a, None)?;
    run.input(&a.model);
    let model = ProbeModel::load(&a.model)?;
    let traces = match &a.traces {
        Some(p) => {
            run.input(p);
            Some(read_trace_file(p)?)
        }
        None => None,
    };
    let states = load_states(&mut run, &a.features, traces.as_deref())?;
    let lengths: Vec<u64> = states.iter().map(|(_, hs)| hs.token_rows.nrows() as u64).collect();
    let bin_of = metrics::quantile_bins(&lengths, a.length_bins);
    let mut grouped: Vec<Vec<probe::TraceDistributions>> = vec![Vec::new(); a.length_bins];
    let mut ranges: Vec<Option<(u64, u64)>> = vec![None; a.length_bins];
    for (i, (_, hs)) in states.iter().enumerate() {
        let f = probe::build_features(hs, model.spec.mode, model.spec.question_tokens)?;
        let mut rows: Vec<(u64, ndarray::ArrayView1<'_, f64>)> = strided_rows(&f, a.stride);
        // keep the final token so every trace spans the full position range
        if rows.last().map(|r| r.0) != Some(f.nrows() as u64) && f.nrows() > 0 {
            rows.push((f.nrows() as u64, f.row(f.nrows() - 1)));
        }
        let dists = rows
            .iter()
            .map(|(_, row)| Ok(model.predict(*row)?.probs().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let b = bin_of[i];
        grouped[b].push(dists);
        let m = lengths[i];
        ranges[b] = Some(ranges[b].map_or((m, m), |(lo, hi)| (lo.min(m), hi.max(m))));
    }
    let keys: Vec<String> = ranges
        .iter()
        .map(|r| r.map_or_else(String::new, |(lo, hi)| format!("{lo}-{hi}")))
        .collect();
    let inputs = grouped;
    let maps = probe::heatmap(&inputs, a.grid_points)?;
    ensure_dir(&a.out)?;
    let mut cells = csv::Writer::from_path(a.out.join("heatmap.csv"))?;
    cells.write_record(["length_bin", "position", "bucket", "probability"])?;
    let mut curve = csv::Writer::from_path(a.out.join("expected.csv"))?;
    curve.write_record(["length_bin", "position", "expected_progress"])?;
    for h in &maps {
        let name = keys[h.group].as_str();
        for (t, (x, row)) in h.grid.iter().zip(&h.cells).enumerate() {
            for (q, p) in row.iter().enumerate() {
                cells.write_record([name, &x.to_string(), &(q + 1).to_string(), &p.to_string()])?;
            }
            curve.write_record([name, &x.to_string(), &h.expected[t].to_string()])?;
        }
        println!("length_bin {name} traces {}", h.n_traces);
    }
    cells.flush()?;
    curve.flush()?;
    run.finish(&a.out)
}

fn baseline_cmd(a: &BaselineArgs) -> Result<()> {
    let mut run = Run::new("baseline", a, None)?;
    run.input(&a.input);
    let traces = read_trace_file(&a.input)?;
    let stats: LengthStats = match &a.stats_from {
        Some(p) => {
            run.input(p);
            compute_length_stats(&read_trace_file(p)?)?
        }
        None => compute_length_stats(&traces)?,
    };
    let annotated = traces
        .into_iter()
        .map(|t| {
            let ann = trace::extract_annotations(&t.reasoning)?.annotations;
            Ok((t, ann))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, summary) = baseline_report(&annotated, &stats);
    ensure_dir(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("baseline_report.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&a.out.join("stats.json"), &stats)?;
    write_json(&a.out.join("summary.json"), &summary)?;
    for s in &summary {
        println!("{} mae {} markers {}", s.baseline_name, s.mae, s.markers);
    }
    run.finish(&a.out)
}

/// Marker series of the predicted traces. Realized values come from the
/// reference markers when given, otherwise from `k / trace length`.
fn load_series(
    run: &mut Run,
    pred: &Path,
    reference: Option<&Path>,
) -> Result<(Vec<MarkerSeries>, Vec<u64>)> {
    run.input(pred);
    let traces = read_trace_file(pred)?;
    let refs: Option<BTreeMap<String, Vec<trace::ProgressAnnotation>>> = match reference {
        Some(p) => {
            run.input(p);
            Some(
                read_trace_file(p)?
                    .into_iter()
                    .map(|t| Ok((t.id.clone(), trace::extract_annotations(&t.reasoning)?.annotations)))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let mut series = Vec::with_capacity(traces.len());
    let mut lengths = Vec::with_capacity(traces.len());
    let mut missing = Vec::new();
    for t in &traces {
        let ann = trace::extract_annotations(&t.reasoning)?.annotations;
        let mut markers = Vec::with_capacity(ann.len());
        for (j, a) in ann.iter().enumerate() {
            let realized = match &refs {
                Some(r) => match r.get(&t.id).and_then(|v| v.get(j)) {
                    Some(x) => x.fraction(),
                    None => {
                        missing.push(format!("{}#{}", t.id, j + 1));
                        continue;
                    }
                },
                None => crate::label::realized_progress(a.position_k, t.token_count)?,
            };
            markers.push(MarkerPoint {
                prefix_len: a.position_k,
                predicted: a.fraction(),
                realized,
            });
        }
        series.push(MarkerSeries::new(t.id.clone(), markers)?);
        lengths.push(t.token_count);
    }
    if !missing.is_empty() {
        return Err(Error::Alignment { missing });
    }
    Ok((series, lengths))
}

#[derive(Serialize)]
struct ScoreReport {
    mae: f64,
    markers: usize,
    traces: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    paired: Option<metrics::PairedMae>,
}

fn score_cmd(a: &ScoreArgs) -> Result<()> {
    let mut run = Run::new("score", a, None)?;
    let (series, lengths) = load_series(&mut run, &a.pred, a.reference.as_deref())?;
    let mae = metrics::progress_mae(&series)?;
    let paired = match &a.pred_uncond {
        Some(p) => {
            let (uncond, _) = load_series(&mut run, p, a.reference.as_deref())?;
            Some(metrics::conditioned_vs_unconditioned(&series, &uncond)?)
        }
        None => None,
    };
    let per_trace: Vec<(u64, f64)> = series
        .iter()
        .zip(&lengths)
        .filter(|(s, _)| !s.markers.is_empty())
        .map(|(s, &len)| Ok((len, metrics::progress_mae(std::slice::from_ref(s))?)))
        .collect::<Result<_>>()?;
    let bins = metrics::bin_by_length(&per_trace, a.length_bins)?;
    ensure_dir(&a.out)?;
    write_bins(
        &a.out.join("mae_by_length.csv"),
        bins.iter().map(|b| BinRow {
            bin_lower: b.bin_lower as f64,
            bin_upper: b.bin_upper as f64,
            count: b.count,
            value: b.mean,
        }),
    )?;
    let report = ScoreReport {
        mae,
        markers: series.iter().map(|s| s.markers.len()).sum(),
        traces: series.len(),
        paired,
    };
    write_json(&a.out.join("score.json"), &report)?;
    println!("mae {mae}");
    if let Some(p) = &report.paired {
        println!("cond_mae {}", p.cond_mae);
        println!("uncond_mae {}", p.uncond_mae);
    }
    run.finish(&a.out)
}

#[derive(Serialize)]
struct DispersionStats {
    groups: usize,
    mad: f64,
    mapd: f64,
}

fn dispersion_cmd(a: &DispersionArgs) -> Result<()> {
    let mut run = Run::new("dispersion", a, None)?;
    run.input(&a.rollouts);
    let groups: Vec<RolloutGroup> = read_jsonl(&a.rollouts)?;
    let (mad, mapd) = metrics::mad_mapd(&groups)?;
    let key = match a.key {
        KeyArg::Position => DispersionKey::Position,
        KeyArg::PrefixLength => DispersionKey::PrefixLength,
    };
    let curve = metrics::dispersion_curve(&groups, a.bins, key)?;
    ensure_dir(&a.out)?;
    write_bins(
        &a.out.join("dispersion_bins.csv"),
        curve.iter().map(|b| BinRow {
            bin_lower: b.bin_lower,
            bin_upper: b.bin_upper,
            count: b.count,
            value: match a.metric {
                DispersionMetric::Mad => b.mad,
                DispersionMetric::Mapd => b.mapd,
            },
        }),
    )?;
    write_json(
        &a.out.join("stats.json"),
        &DispersionStats {
            groups: groups.len(),
            mad,
            mapd,
        },
    )?;
    println!("mad {mad}");
    println!("mapd {mapd}");
    run.finish(&a.out)
}

fn monotonicity_cmd(a: &MonotonicityArgs) -> Result<()> {
    let mut run = Run::new("monotonicity", a, None)?;
    let (series, _) = load_series(&mut run, &a.pred, a.reference.as_deref())?;
    let bins = metrics::nonmonotonic_fraction(&series, a.bins)?;
    ensure_dir(&a.out)?;
    let (eligible, drops) = bins
        .iter()
        .fold((0usize, 0.0), |(n, d), b| (n + b.count, d + b.value * b.count as f64));
    write_bins(
        &a.out.join("monotonicity_bins.csv"),
        bins.into_iter().map(|b| BinRow {
            bin_lower: b.bin_lower,
            bin_upper: b.bin_upper,
            count: b.count,
            value: b.value,
        }),
    )?;
    println!("nonmonotonic_fraction {}", drops / eligible as f64);
    run.finish(&a.out)
}

/// Converts text payloads to UTF-8, holding back a character split across
/// events.
#[derive(Default)]
struct Utf8Carry {
    pending: Vec<u8>,
}

impl Utf8Carry {
    fn push(&mut self, bytes: &[u8]) -> String {
        self.pending.extend_from_slice(bytes);
        let mut out = String::new();
        loop {
            match std::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    return out;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(std::str::from_utf8(&self.pending[..valid]).expect("checked"));
                    match e.error_len() {
                        None => {
                            self.pending.drain(..valid);
                            return out;
                        }
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            self.pending.drain(..valid + bad);
                        }
                    }
                }
            }
        }
    }

    fn flush(&mut self) -> String {
        let s = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        s
    }
}

fn emit(w: &mut impl Write, record: &EventRecord<'_>) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn emit_events(w: &mut impl Write, carry: &mut Utf8Carry, events: Vec<StreamEvent>) -> Result<()> {
    for e in events {
        if !matches!(e, StreamEvent::Text(_)) {
            let rest = carry.flush();
            if !rest.is_empty() {
                emit(w, &EventRecord::Text { text: &rest })?;
            }
        }
        match &e {
            StreamEvent::Text(bytes) => {
                let s = carry.push(bytes);
                if !s.is_empty() {
                    emit(w, &EventRecord::Text { text: &s })?;
                }
            }
            StreamEvent::Progress { value, offset, raw } => emit(
                w,
                &EventRecord::Progress {
                    value: *value,
                    offset: *offset,
                    raw: &String::from_utf8_lossy(raw),
                },
            )?,
            StreamEvent::Warning { message, offset } => {
                warn!("offset {offset}: {message}");
                emit(
                    w,
                    &EventRecord::Warning {
                        message,
                        offset: *offset,
                    },
                )?
            }
            StreamEvent::End => emit(w, &EventRecord::End)?,
        }
    }
    w.flush()?;
    Ok(())
}

fn stream_parse_cmd(a: &StreamParseArgs) -> Result<()> {
    if a.chunk_size == 0 {
        return Err(Error::Range("chunk size must be at least 1".into()));
    }
    let mut input: Box<dyn Read> = match &a.input {
        Some(p) => Box::new(File::open(p)?),
        None => Box::new(io::stdin().lock()),
    };
    let mut output: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut parser = StreamParser::new();
    let mut carry = Utf8Carry::default();
    let mut buf = vec![0u8; a.chunk_size];
    loop {
        let n = match input.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        let events = parser.feed(&buf[..n])?;
        emit_events(&mut output, &mut carry, events)?;
    }
    emit_events(&mut output, &mut carry, parser.finish())
}

#[derive(Serialize)]
struct FeatureEntry<'a> {
    id: &'a str,
    path: String,
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let run = Run::new("synth", a, Some(a.seed))?;
    let cfg = a.config();
    let traces = synth::gen_traces(&cfg)?;
    ensure_dir(&a.out)?;
    trace::write_traces(create(&a.out.join("traces.jsonl"))?, &traces)?;
    if !a.no_features {
        let lengths: Vec<u64> = traces.iter().map(|t| t.token_count).collect();
        let states = synth::gen_features(&lengths, &cfg)?;
        ensure_dir(&a.out.join("features"))?;
        let mut entries = Vec::with_capacity(traces.len());
        for (t, hs) in traces.iter().zip(&states) {
            let rel = format!("features/{}.pphs", t.id);
            hs.save(&a.out.join(&rel))?;
            entries.push(FeatureEntry { id: &t.id, path: rel });
        }
        write_jsonl(&a.out.join("features.jsonl"), &entries)?;
    }
    if a.rollouts > 0 {
        let groups = synth::gen_rollouts(&traces, &cfg, a.rollouts, a.continuations)?;
        write_jsonl(&a.out.join("rollouts.jsonl"), &groups)?;
        println!("rollout_groups {}", groups.len());
    }
    println!("traces {}", traces.len());
    info!("wrote synthetic corpus to {}", a.out.display());
    run.finish(&a.out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
        .map_err(|e| Error::Range(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Annotate(a) => annotate_cmd(a),
        Command::Mask(a) => mask_cmd(a),
        Command::Label(a) => label_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::ProbeTrain(a) => probe_train_cmd(a),
        Command::ProbeEval(a) => probe_eval_cmd(a),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Dispersion(a) => dispersion_cmd(a),
        Command::Monotonicity(a) => monotonicity_cmd(a),
        Command::StreamParse(a) => stream_parse_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    })
}

const SUBCOMMANDS: [&str; 13] = [
    "annotate",
    "mask",
    "label",
    "split",
    "probe-train",
    "probe-eval",
    "heatmap",
    "baseline",
    "score",
    "dispersion",
    "monotonicity",
    "stream-parse",
    "synth",
];

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Flags for `subcommand` from a TOML config file.
pub fn config_flags(text: &str, subcommand: &str) -> Result<Vec<String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    let Some(section) = table.get(subcommand) else {
        return Ok(Vec::new());
    };
    let section = section
        .as_table()
        .ok_or_else(|| Error::Format(format!("[{subcommand}] is not a table")))?;
    let mut flags = Vec::new();
    for (key, value) in section {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => flags.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => flags.extend([flag, s.clone()]),
            toml::Value::Integer(i) => flags.extend([flag, i.to_string()]),
            toml::Value::Float(f) => flags.extend([flag, f.to_string()]),
            other => return Err(Error::Format(format!("{key}: unsupported value {other}"))),
        }
    }
    Ok(flags)
}

/// Insert config-file flags right after the subcommand name so that flags
/// given on the command line come later and override them.
fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)?;
    let Some(at) = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let flags = config_flags(&text, &args[at].to_string_lossy())?;
    let mut merged = args[..=at].to_vec();
    merged.extend(flags.into_iter().map(OsString::from));
    merged.extend_from_slice(&args[at + 1..]);
    Ok(merged)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let command = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_tables_become_flags() {
        let text = "[synth]\nseed = 7\nshape = \"lognormal\"\nno_features = true\nnoise_sigma = 0.5\n[label]\nstride = 2\n";
        let flags = config_flags(text, "synth").unwrap();
        assert!(flags.windows(2).any(|w| w == ["--seed", "7"]));
        assert!(flags.windows(2).any(|w| w == ["--shape", "lognormal"]));
        assert!(flags.contains(&"--no-features".to_string()));
        assert!(config_flags(text, "mask").unwrap().is_empty());
    }

    #[test]
    fn utf8_carry_joins_split_characters() {
        let mut c = Utf8Carry::default();
        let bytes = "é".as_bytes();
        assert_eq!(c.push(&bytes[..1]), "");
        assert_eq!(c.push(&bytes[1..]), "é");
        assert_eq!(c.push(&[0xff, b'a']), "\u{fffd}a");
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
