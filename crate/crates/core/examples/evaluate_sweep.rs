//! Sweep K and weights on the reference fixture and print the report table.
//!
//! `cargo run --release --example evaluate_sweep -- [distractor multiple]`

use c2f::eval::{format_table, prepare_queries, sweep, SweepSpec};
use c2f::fusion::Engine;
use c2f::holistic::{hsv_histogram, normalize_histogram};
use c2f::synthgen::{generate, reference_config, reference_spec};

fn main() -> c2f::Result<()> {
    let multiple: usize = std::env::args().nth(1).map_or(Ok(10), |s| s.parse()).expect("integer multiple");
    let spec = reference_spec(multiple);
    let corpus = generate(&spec)?;
    let cfg = reference_config();
    let histograms = corpus
        .images
        .iter()
        .map(|img| normalize_histogram(&hsv_histogram(img, cfg.hsv_dims), cfg.alpha))
        .collect::<c2f::Result<Vec<_>>>()?;
    let engine = Engine::build(histograms, &corpus.descriptors, &cfg)?;
    let queries = prepare_queries(&engine, &corpus.descriptors, &corpus.ground_truth, &cfg)?;

    let n = corpus.images.len();
    let mut ks: Vec<usize> = [1, 2, 4, 6, 8, 10, 12, 14].iter().map(|f| f * n / 15).collect();
    ks.push(n);
    let sweep_spec = SweepSpec { candidates: ks, weights: vec![true, false], timing: false };
    let rows = sweep(&engine, &queries, &corpus.ground_truth, spec.protocol, &cfg, &sweep_spec, spec.n_distractors)?;
    print!("{}", format_table(&rows));
    Ok(())
}
