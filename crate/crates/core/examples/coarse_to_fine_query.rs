//! Full coarse-to-fine query on the reference fixture: holistic filtering to
//! K candidates, adaptive weights, Hamming-embedding refinement and fusion.

use c2f::eval::prepare_queries;
use c2f::fusion::Engine;
use c2f::holistic::{hsv_histogram, normalize_histogram};
use c2f::synthgen::{generate, reference_config, reference_spec};

fn main() -> c2f::Result<()> {
    let corpus = generate(&reference_spec(1))?;
    let cfg = c2f::fusion::PipelineConfig { candidates: 40, ..reference_config() };
    let histograms = corpus
        .images
        .iter()
        .map(|img| normalize_histogram(&hsv_histogram(img, cfg.hsv_dims), cfg.alpha))
        .collect::<c2f::Result<Vec<_>>>()?;
    let engine = Engine::build(histograms, &corpus.descriptors, &cfg)?;
    let queries = prepare_queries(&engine, &corpus.descriptors, &corpus.ground_truth, &cfg)?;

    let q = &queries[3];
    let id = q.id.expect("database query");
    let positives = corpus.ground_truth.positives(id).expect("ground truth");
    let result = engine.run_query(q, &cfg)?;
    println!("query {id}, K = {}, {} comparisons", cfg.candidates, result.comparison_count);
    println!("{:>5} {:>10} {:>10} {:>8} {:>9}", "id", "final", "local", "weight", "holistic");
    for e in result.entries.iter().take(8) {
        let mark = if positives.contains(&e.image_id) { " *" } else { "" };
        println!(
            "{:>5} {:>10.5} {:>10.4} {:>8.4} {:>9.4}{mark}",
            e.image_id, e.final_score, e.local_score, e.weight, e.holistic_score
        );
    }
    Ok(())
}
