//! How much does the remaining length vary across sampled continuations of
//! the same prefix? MAD and MAPD over synthetic rollouts, overall and by
//! normalized position.

use cot_progress::metrics::{dispersion_curve, mad_mapd, DispersionKey, RolloutGroup};
use cot_progress::synth::{gen_rollouts, gen_traces, LengthShape, SynthConfig};

fn main() -> cot_progress::Result<()> {
    let two_point = RolloutGroup {
        trace_id: "example".into(),
        prefix_len: 100,
        continuation_lens: vec![400, 100],
    };
    let (mad, mapd) = mad_mapd(std::slice::from_ref(&two_point))?;
    println!("prefix 100, continuations 400 and 100: MAD {mad:.4}, MAPD {mapd:.4}");

    let cfg = SynthConfig {
        n_traces: 200,
        min_len: 100,
        max_len: 4_000,
        shape: LengthShape::Lognormal,
        ..SynthConfig::new(9)
    };
    let traces = gen_traces(&cfg)?;
    let groups = gen_rollouts(&traces, &cfg, 6, 8)?;
    let (mad, mapd) = mad_mapd(&groups)?;
    println!("{} groups of 8 rollouts: MAD {mad:.4}, MAPD {mapd:.4}\n", groups.len());

    println!("{:>11} {:>6} {:>7} {:>7}", "position", "groups", "MAD", "MAPD");
    for b in dispersion_curve(&groups, 10, DispersionKey::Position)? {
        println!(
            "{:>5.2}-{:<5.2} {:>6} {:>7.4} {:>7.4}",
            b.bin_lower, b.bin_upper, b.count, b.mad, b.mapd
        );
    }
    Ok(())
}
