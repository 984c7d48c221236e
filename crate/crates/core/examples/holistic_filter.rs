//! Rank a small synthetic database by HSV-histogram cosine similarity and
//! keep the top K candidates.

use c2f::holistic::{hsv_histogram, normalize_histogram, rank_database, HsvDims};
use c2f::synthgen::{generate, SynthSpec};

fn main() -> c2f::Result<()> {
    let spec = SynthSpec {
        n_groups: 4,
        n_distractors: 12,
        ..SynthSpec::default()
    };
    let corpus = generate(&spec)?;
    let dims = HsvDims::default();
    let db = corpus
        .images
        .iter()
        .map(|img| normalize_histogram(&hsv_histogram(img, dims), 0.5))
        .collect::<c2f::Result<Vec<_>>>()?;

    let query = 0;
    let ranked = rank_database(&db[query], &db)?;
    let top = ranked.filter_top_k(6)?;
    println!("query {query}, {} bins, {} database images", dims.len(), db.len());
    for (id, score) in top.entries() {
        let group = corpus.group_of[*id as usize].map_or("distractor".to_string(), |g| format!("group {g}"));
        println!("  {id:>3}  {score:.4}  {group}");
    }
    Ok(())
}
