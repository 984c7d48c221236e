//! Build the inverted index, score a restricted candidate set and print the
//! memory breakdown.

use c2f::codebook::{root_preprocess, train_kmeans};
use c2f::embedding::train_he;
use c2f::fusion::quantize_database;
use c2f::index::{build_index, IndexConfig, ScoringOptions};
use c2f::synthgen::{generate, SynthSpec};

fn main() -> c2f::Result<()> {
    let spec = SynthSpec { n_distractors: 32, ..SynthSpec::default() };
    let corpus = generate(&spec)?;
    let prepared = corpus
        .descriptors
        .iter()
        .map(root_preprocess)
        .collect::<c2f::Result<Vec<_>>>()?;
    let cb = train_kmeans(&prepared, 32, 20, 0)?;
    let he = train_he(&cb, &prepared, 128, 0)?;
    let features = quantize_database(&corpus.descriptors, &cb, &he, true)?;
    let config = IndexConfig { k: 32, ..IndexConfig::default() };
    let index = build_index(&features, corpus.images.len() as u32, config)?;

    let query: Vec<_> = features.iter().filter(|f| f.image_id == 0).cloned().collect();
    let candidates: Vec<u32> = (0..16).collect();
    let scored = index.score_candidates(&query, &candidates, ScoringOptions::default())?;
    println!("{} Hamming comparisons over {} candidates", scored.comparisons, candidates.len());
    for (id, s) in scored.scores.iter() {
        println!("  image {id:>2}  local score {s:.4}");
    }

    let m = index.memory_report();
    println!(
        "postings {} -> {} bytes; norms {} B, idf {} B, total {} B",
        index.total_postings(),
        m.posting_bytes,
        m.norm_bytes,
        m.idf_bytes,
        m.total_bytes
    );
    Ok(())
}
