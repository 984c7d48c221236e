//! Learn Hamming-embedding parameters and compare signature distances for
//! descriptors of the same planted group against other groups.

use c2f::codebook::{root_preprocess, train_kmeans};
use c2f::embedding::{hamming, train_he};
use c2f::synthgen::{generate, SynthSpec};

fn main() -> c2f::Result<()> {
    let corpus = generate(&SynthSpec::default())?;
    let prepared = corpus
        .descriptors
        .iter()
        .map(root_preprocess)
        .collect::<c2f::Result<Vec<_>>>()?;
    let cb = train_kmeans(&prepared, 32, 20, 0)?;
    let he = train_he(&cb, &prepared, 128, 0)?;
    println!("projection orthonormality error {:.2e}", he.orthonormality_error());

    // Descriptor j of every image in a group perturbs the same base descriptor.
    let per_image = SynthSpec::default().descriptors_per_image;
    let sig = |image: usize, j: usize| -> c2f::Result<_> {
        let d = &prepared[image * per_image + j];
        let w = cb.quantize(&d.values)?;
        Ok((w, he.sign(&d.values, w)?))
    };
    let (mut same, mut other) = (Vec::new(), Vec::new());
    for j in 0..per_image {
        let (w0, s0) = sig(0, j)?;
        let (w1, s1) = sig(1, j)?;
        if w0 == w1 {
            same.push(hamming(&s0, &s1)?);
        }
        for img in (4..corpus.images.len()).step_by(4) {
            for k in 0..per_image {
                let (w, s) = sig(img, k)?;
                if w == w0 {
                    other.push(hamming(&s0, &s)?);
                }
            }
        }
    }
    let mean = |v: &[u32]| v.iter().sum::<u32>() as f64 / v.len().max(1) as f64;
    println!("same group, same word:   {} pairs, mean distance {:.1}", same.len(), mean(&same));
    println!("other groups, same word: {} pairs, mean distance {:.1}", other.len(), mean(&other));
    println!("pairs within h_t = 52: same {} / other {}",
        same.iter().filter(|&&h| h <= 52).count(),
        other.iter().filter(|&&h| h <= 52).count());
    Ok(())
}
