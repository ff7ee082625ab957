//! Train a linear progress probe on synthetic hidden states with a planted
//! progress direction and compare it with chance.
//!
//! `cargo run --release --example planted_probe -- 0.02` sets the noise level.

use cot_progress::label::bucketize;
use cot_progress::probe::{
    build_features, evaluate_probe, heatmap, train_probe, FeatureMode, HiddenStateMatrix, ProbeModel, ProbeSpec,
    TrainConfig,
};
use cot_progress::synth::{gen_features, gen_traces, SynthConfig};
use ndarray::Array2;

fn stack(states: &[HiddenStateMatrix]) -> cot_progress::Result<(Array2<f64>, Vec<u32>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for hs in states {
        let f = build_features(hs, FeatureMode::Token, 2)?;
        dim = f.ncols();
        let m = f.nrows() as u64;
        for (j, row) in f.rows().into_iter().enumerate() {
            rows.extend(row.iter().copied());
            labels.push(bucketize(j as u64 + 1, m, 10)?.index);
        }
    }
    let x = Array2::from_shape_vec((labels.len(), dim), rows).expect("rows are complete");
    Ok((x, labels))
}

fn distributions(model: &ProbeModel, hs: &HiddenStateMatrix) -> cot_progress::Result<Vec<Vec<f64>>> {
    let f = build_features(hs, FeatureMode::Token, 2)?;
    f.rows()
        .into_iter()
        .map(|row| Ok(model.predict(row)?.probs().to_vec()))
        .collect()
}

fn main() -> cot_progress::Result<()> {
    let noise: f64 = std::env::args().nth(1).map(|s| s.parse().expect("noise level")).unwrap_or(0.02);
    let cfg = SynthConfig {
        noise_sigma: noise,
        ..SynthConfig::new(42)
    };
    let lengths: Vec<u64> = gen_traces(&cfg)?.iter().map(|t| t.token_count).collect();
    let states = gen_features(&lengths, &cfg)?;
    let (train, test) = states.split_at(160);

    let (x, y) = stack(train)?;
    let config = TrainConfig {
        epochs: 50,
        ..TrainConfig::with_seed(42)
    };
    let (model, report) = train_probe(&x, &y, &ProbeSpec::default(), &config)?;
    println!("trained on {} tokens, final loss {:.4}", report.rows, report.final_loss);

    let (xt, yt) = stack(test)?;
    let eval = evaluate_probe(&model, &xt, &yt)?;
    println!(
        "noise {noise}: held-out top-1 {:.3} (chance 0.100), bucket MAE {:.3} (chance 3.3)",
        eval.top1_accuracy, eval.bucket_mae
    );

    let dists = test.iter().map(|hs| distributions(&model, hs)).collect::<Result<Vec<_>, _>>()?;
    let maps = heatmap(&[dists], 11)?;
    println!("\nposition  expected progress");
    for (x, e) in maps[0].grid.iter().zip(&maps[0].expected) {
        println!("{x:>8.1}  {e:.3}");
    }
    Ok(())
}
