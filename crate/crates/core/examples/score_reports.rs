//! Score a model's self-reported progress: pooled MAE, error by trace length,
//! non-monotonic reports, and conditioned versus unconditioned runs.

use cot_progress::metrics::{
    bin_by_length, conditioned_vs_unconditioned, nonmonotonic_fraction, progress_mae, MarkerPoint, MarkerSeries,
};

fn series(id: &str, total: u64, reports: &[(u64, f64)]) -> cot_progress::Result<MarkerSeries> {
    let markers = reports
        .iter()
        .map(|&(k, predicted)| MarkerPoint {
            prefix_len: k,
            predicted,
            realized: k as f64 / total as f64,
        })
        .collect();
    MarkerSeries::new(id, markers)
}

fn main() -> cot_progress::Result<()> {
    let cond = vec![
        series("short", 400, &[(100, 0.3), (200, 0.55), (300, 0.7), (400, 1.0)])?,
        series("long", 4_000, &[(500, 0.3), (1_500, 0.5), (2_500, 0.45), (4_000, 0.9)])?,
    ];
    let uncond = vec![
        series("short", 400, &[(100, 0.5), (200, 0.5), (300, 0.6), (400, 0.6)])?,
        series("long", 4_000, &[(500, 0.5), (1_500, 0.6), (2_500, 0.5), (4_000, 0.6)])?,
    ];

    println!("progress MAE {:.4}", progress_mae(&cond)?);

    let per_trace = [(400, progress_mae(&cond[..1])?), (4_000, progress_mae(&cond[1..])?)];
    for b in bin_by_length(&per_trace, 2)? {
        println!("length {}-{}: MAE {:.4}", b.bin_lower, b.bin_upper, b.mean);
    }

    for b in nonmonotonic_fraction(&cond, 4)? {
        println!(
            "position {:.2}-{:.2}: {:.2} of {} reports dropped",
            b.bin_lower, b.bin_upper, b.value, b.count
        );
    }

    let paired = conditioned_vs_unconditioned(&cond, &uncond)?;
    println!(
        "with earlier reports {:.4}, without {:.4} ({} markers)",
        paired.cond_mae, paired.uncond_mae, paired.markers
    );
    Ok(())
}
