//! Score reported progress markers against the four length baselines on a
//! synthetic corpus.

use cot_progress::annotate::{annotate_trace, BlankLineSegmenter};
use cot_progress::baselines::{baseline_report, compute_length_stats};
use cot_progress::synth::{gen_traces, LengthShape, SynthConfig};
use cot_progress::trace::extract_annotations;

fn main() -> cot_progress::Result<()> {
    let cfg = SynthConfig {
        n_traces: 400,
        min_len: 50,
        max_len: 3_000,
        shape: LengthShape::Lognormal,
        ..SynthConfig::new(3)
    };
    let traces = gen_traces(&cfg)?;
    let stats = compute_length_stats(&traces)?;
    println!("global mean length {:.1}", stats.global_mean);
    for g in &stats.groups {
        println!("  {}/{}: n={} mean={:.1} median={}", g.model_family, g.task, g.count, g.mean, g.median);
    }

    let annotated = traces
        .iter()
        .map(|t| {
            let record = annotate_trace(t, &BlankLineSegmenter, None)?;
            let markers = extract_annotations(&record.trace.reasoning)?.annotations;
            Ok((t.clone(), markers))
        })
        .collect::<cot_progress::Result<Vec<_>>>()?;
    let (_, summary) = baseline_report(&annotated, &stats);
    println!("\n{:<16} {:>8} {:>8}", "predictor", "markers", "MAE");
    for s in &summary {
        println!("{:<16} {:>8} {:>8.4}", s.baseline_name, s.markers, s.mae);
    }
    Ok(())
}
