//! Train a visual vocabulary with k-means on rootSIFT-processed synthetic
//! descriptors, then quantize with single and multiple assignment.

use c2f::codebook::{root_preprocess, train_kmeans_with_report};
use c2f::synthgen::{generate, SynthSpec};

fn main() -> c2f::Result<()> {
    let corpus = generate(&SynthSpec::default())?;
    let prepared = corpus
        .descriptors
        .iter()
        .map(root_preprocess)
        .collect::<c2f::Result<Vec<_>>>()?;
    let (cb, report) = train_kmeans_with_report(&prepared, 32, 20, 0)?;
    println!(
        "{} descriptors, k = {}, dim = {}: objective {:.4} after {} iterations ({} clusters reseeded)",
        prepared.len(),
        cb.k(),
        cb.dim(),
        report.objective.last().copied().unwrap_or(0.0),
        report.iterations_run,
        report.reseeded_clusters
    );
    for d in prepared.iter().take(4) {
        println!(
            "image {:>2}: word {:>2}, three nearest {:?}",
            d.image_id,
            cb.quantize(&d.values)?,
            cb.multi_assign(&d.values, 3)?
        );
    }
    Ok(())
}
