//! Visual vocabulary: descriptor preprocessing, k-means training and
//! nearest-word quantization.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{usize_to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::{ImageId, WordId};

/// One local descriptor and the image it was extracted from.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDescriptor {
    pub image_id: ImageId,
    /// Keypoint x, y and scale; carried through untouched.
    pub keypoint: [f32; 3],
    pub values: Vec<f32>,
}

impl LocalDescriptor {
    pub fn new(image_id: ImageId, values: Vec<f32>) -> Self {
        Self {
            image_id,
            keypoint: [0.0; 3],
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// rootSIFT: l1-normalize, then take the element-wise square root.
pub fn root_preprocess(d: &LocalDescriptor) -> Result<LocalDescriptor> {
    if let Some(i) = d.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidDescriptor(i));
    }
    let l1: f64 = d.values.iter().map(|&v| v as f64).sum();
    if l1 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let values = d
        .values
        .iter()
        .map(|&v| (v as f64 / l1).sqrt() as f32)
        .collect();
    Ok(LocalDescriptor {
        image_id: d.image_id,
        keypoint: d.keypoint,
        values,
    })
}

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn squared_distance_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f32>,
    seed: u64,
}

impl Codebook {
    /// Builds a codebook from explicit centroids, row-major `k × dim`.
    pub fn from_centroids(dim: usize, centroids: Vec<f32>, seed: u64) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::Parameter(format!(
                "{} centroid values do not form rows of dimension {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite centroid value".into()));
        }
        Ok(Self {
            dim,
            centroids,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroid(&self, word: WordId) -> &[f32] {
        let w = word as usize;
        &self.centroids[w * self.dim..(w + 1) * self.dim]
    }

    pub fn centroids(&self) -> impl Iterator<Item = &[f32]> {
        self.centroids.chunks_exact(self.dim)
    }

    fn check_dim(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        Ok(())
    }

    /// Nearest centroid; ties go to the smallest word id.
    pub fn quantize(&self, values: &[f32]) -> Result<WordId> {
        self.check_dim(values)?;
        let mut best = (0 as WordId, f64::INFINITY);
        for (j, c) in self.centroids().enumerate() {
            let d = squared_distance(values, c);
            if d < best.1 {
                best = (j as WordId, d);
            }
        }
        Ok(best.0)
    }

    /// The `m` nearest words, nearest first. `m` is clamped to k.
    pub fn multi_assign(&self, values: &[f32], m: usize) -> Result<Vec<WordId>> {
        if m == 0 {
            return Err(Error::Parameter("multiple assignment needs m >= 1".into()));
        }
        self.check_dim(values)?;
        let mut dists: Vec<(f64, WordId)> = self
            .centroids()
            .enumerate()
            .map(|(j, c)| (squared_distance(values, c), j as WordId))
            .collect();
        let m = m.min(dists.len());
        let cmp = |a: &(f64, WordId), b: &(f64, WordId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if m < dists.len() {
            dists.select_nth_unstable_by(m - 1, cmp);
            dists.truncate(m);
        }
        dists.sort_by(cmp);
        Ok(dists.into_iter().map(|(_, j)| j).collect())
    }
}

/// See [`Codebook::quantize`].
pub fn quantize(d: &LocalDescriptor, cb: &Codebook) -> Result<WordId> {
    cb.quantize(&d.values)
}

/// See [`Codebook::multi_assign`].
pub fn multi_assign(d: &LocalDescriptor, cb: &Codebook, m: usize) -> Result<Vec<WordId>> {
    cb.multi_assign(&d.values, m)
}

/// Per-iteration within-cluster sum of squares from a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KMeansReport {
    pub objective: Vec<f64>,
    pub iterations_run: usize,
    pub reseeded_clusters: usize,
}

pub fn train_kmeans(
    corpus: &[LocalDescriptor],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook> {
    train_kmeans_with_report(corpus, k, iters, seed).map(|(cb, _)| cb)
}

/// Lloyd's k-means with k-means++ seeding. Deterministic for a fixed corpus
/// order and seed. Empty clusters are re-seeded from the point farthest from
/// its centroid.
pub fn train_kmeans_with_report(
    corpus: &[LocalDescriptor],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Codebook, KMeansReport)> {
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    if corpus.len() < k {
        return Err(Error::CorpusTooSmall {
            corpus: corpus.len(),
            k,
        });
    }
    let dim = corpus[0].dim();
    if dim == 0 {
        return Err(Error::Parameter("descriptor dimension is zero".into()));
    }
    for d in corpus {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: d.dim(),
            });
        }
        if d.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite descriptor value".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(corpus, k, &mut rng);
    let mut report = KMeansReport::default();
    let mut assignment: Vec<usize> = vec![usize::MAX; corpus.len()];

    for _ in 0..iters.max(1) {
        let nearest: Vec<(usize, f64)> = corpus
            .par_iter()
            .map(|d| nearest_f64(&d.values, &centroids))
            .collect();
        let changed = nearest
            .iter()
            .zip(&assignment)
            .any(|(n, &a)| n.0 != a);
        if !changed {
            break;
        }
        for (a, n) in assignment.iter_mut().zip(&nearest) {
            *a = n.0;
        }

        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (d, &a) in corpus.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(&d.values) {
                *s += v as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
            }
        }

        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut dist: Vec<f64> = corpus
                .iter()
                .zip(&assignment)
                .map(|(d, &a)| squared_distance_f64(&d.values, &centroids[a]))
                .collect();
            for j in empty {
                let far = argmax(&dist);
                centroids[j] = corpus[far].values.iter().map(|&v| v as f64).collect();
                assignment[far] = j;
                dist[far] = 0.0;
                report.reseeded_clusters += 1;
            }
        }

        let objective: f64 = corpus
            .par_iter()
            .map(|d| nearest_f64(&d.values, &centroids).1)
            .sum();
        report.objective.push(objective);
        report.iterations_run += 1;
    }

    let flat = centroids.into_iter().flatten().map(|v| v as f32).collect();
    Ok((Codebook::from_centroids(dim, flat, seed)?, report))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn nearest_f64(values: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance_f64(values, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(corpus: &[LocalDescriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |d: &LocalDescriptor| d.values.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let first = rng.random_range(0..corpus.len());
    let mut centroids = vec![to_f64(&corpus[first])];
    let mut dist: Vec<f64> = corpus
        .par_iter()
        .map(|d| squared_distance_f64(&d.values, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = dist.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Every point coincides with a centroid already.
            rng.random_range(0..corpus.len())
        };
        let c = to_f64(&corpus[pick]);
        dist.par_iter_mut().zip(corpus).for_each(|(dd, d)| {
            let nd = squared_distance_f64(&d.values, &c);
            if nd < *dd {
                *dd = nd;
            }
        });
        centroids.push(c);
    }
    centroids
}

const DESC_MAGIC: &[u8; 4] = b"C2FD";
const CODEBOOK_MAGIC: &[u8; 4] = b"C2FC";

/// Writes `C2FD`: u32 D, u32 count, then per record u32 image id, f32 x,
/// f32 y, f32 scale and D f32 values.
pub fn write_descriptors<W: Write>(out: W, dim: usize, descs: &[LocalDescriptor]) -> Result<()> {
    let mut w = Writer::new(out);
    w.magic(DESC_MAGIC)?;
    w.u32(usize_to_u32(dim, "D")?)?;
    w.u32(usize_to_u32(descs.len(), "count")?)?;
    for d in descs {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: d.dim(),
            });
        }
        w.u32(d.image_id)?;
        w.f32_slice(&d.keypoint)?;
        w.f32_slice(&d.values)?;
    }
    w.finish()
}

/// Returns the descriptor dimension and the records.
pub fn read_descriptors<R: Read>(input: R) -> Result<(usize, Vec<LocalDescriptor>)> {
    let mut r = Reader::new(input, "descriptor file");
    r.magic(DESC_MAGIC)?;
    let dim = r.u32("D")? as usize;
    let count = r.u32("count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let image_id = r.u32("image id")?;
        let x = r.f32("x")?;
        let y = r.f32("y")?;
        let scale = r.f32("scale")?;
        let values = r.f32_vec(dim, "values")?;
        out.push(LocalDescriptor {
            image_id,
            keypoint: [x, y, scale],
            values,
        });
    }
    r.finish()?;
    Ok((dim, out))
}

impl Codebook {
    /// Writes `C2FC`: u32 D, u32 k, k×D f32 centroids, u64 seed.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.magic(CODEBOOK_MAGIC)?;
        w.u32(usize_to_u32(self.dim, "D")?)?;
        w.u32(usize_to_u32(self.k(), "k")?)?;
        w.f32_slice(&self.centroids)?;
        w.u64(self.seed)?;
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "codebook file");
        r.magic(CODEBOOK_MAGIC)?;
        let dim = r.u32("D")? as usize;
        let k = r.u32("k")? as usize;
        let centroids = r.f32_vec(k * dim, "centroids")?;
        let seed = r.u64("seed")?;
        r.finish()?;
        Codebook::from_centroids(dim, centroids, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desc(values: &[f32]) -> LocalDescriptor {
        LocalDescriptor::new(0, values.to_vec())
    }

    #[test]
    fn root_preprocess_examples() {
        let mut one_hot = vec![0.0; 8];
        one_hot[0] = 1.0;
        assert_eq!(root_preprocess(&desc(&one_hot)).unwrap().values, one_hot);
        assert_eq!(
            root_preprocess(&desc(&[4.0; 4])).unwrap().values,
            vec![0.5; 4]
        );
        assert!(matches!(
            root_preprocess(&desc(&[1.0, -0.5])),
            Err(Error::InvalidDescriptor(1))
        ));
        assert!(matches!(
            root_preprocess(&desc(&[0.0, 0.0])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn kmeans_recovers_planted_clouds() {
        // Two symmetric clouds around (0.2,0.2) and (0.8,0.8).
        let offsets = [[0.01, 0.0], [-0.01, 0.0], [0.0, 0.02], [0.0, -0.02]];
        let mut corpus = Vec::new();
        for c in [0.2f32, 0.8] {
            for o in offsets {
                corpus.push(desc(&[c + o[0], c + o[1]]));
            }
        }
        let cb = train_kmeans(&corpus, 2, 20, 7).unwrap();
        let mut cents: Vec<&[f32]> = cb.centroids().collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (c, expected) in cents.iter().zip([0.2f64, 0.8]) {
            // Oracle: mean of the planted cloud, computed in f64.
            let cloud: Vec<f64> = (0..2)
                .map(|axis| {
                    offsets
                        .iter()
                        .map(|o| (expected as f32 + o[axis]) as f64)
                        .sum::<f64>()
                        / 4.0
                })
                .collect();
            assert!((c[0] as f64 - cloud[0]).abs() < 1e-6, "{c:?} vs {cloud:?}");
            assert!((c[1] as f64 - cloud[1]).abs() < 1e-6, "{c:?} vs {cloud:?}");
        }
        // Planted members quantize to their cloud's centroid.
        let low = cb.quantize(&[0.21, 0.2]).unwrap();
        let high = cb.quantize(&[0.79, 0.8]).unwrap();
        assert_ne!(low, high);
        assert_eq!(cb.quantize(&corpus[0].values).unwrap(), low);
        assert_eq!(cb.quantize(&corpus[5].values).unwrap(), high);
    }

    #[test]
    fn kmeans_on_duplicated_points_returns_them() {
        let points = [[0.0f32, 1.0], [5.0, 5.0], [9.0, 0.0]];
        let corpus: Vec<_> = points
            .iter()
            .flat_map(|p| std::iter::repeat_n(desc(p), 3))
            .collect();
        let cb = train_kmeans(&corpus, 3, 10, 1).unwrap();
        let mut got: Vec<Vec<f32>> = cb.centroids().map(<[f32]>::to_vec).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, points.iter().map(|p| p.to_vec()).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let corpus = vec![desc(&[0.0, 2.0]), desc(&[1.0, 4.0]), desc(&[2.0, 0.0])];
        let cb = train_kmeans(&corpus, 1, 5, 3).unwrap();
        assert_eq!(cb.centroid(0), &[1.0, 2.0]);
    }

    #[test]
    fn kmeans_errors() {
        let corpus = vec![desc(&[0.0]), desc(&[1.0])];
        assert!(matches!(
            train_kmeans(&corpus, 3, 5, 0),
            Err(Error::CorpusTooSmall { corpus: 2, k: 3 })
        ));
        assert!(train_kmeans(&corpus, 0, 5, 0).is_err());
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Duplicate points force k-means++ to re-pick an existing centroid.
        let corpus = vec![desc(&[0.0]), desc(&[0.0]), desc(&[0.0]), desc(&[10.0])];
        let (cb, _) = train_kmeans_with_report(&corpus, 3, 10, 5).unwrap();
        assert_eq!(cb.k(), 3);
        let words: std::collections::BTreeSet<_> =
            corpus.iter().map(|d| cb.quantize(&d.values).unwrap()).collect();
        assert_eq!(words.len(), 2);
    }

    fn centroid_fixture() -> Codebook {
        let c: Vec<f32> = vec![0.0, 0.0, 1.0, 0.0, 5.0, 5.0, 3.0, 0.0, 0.0, 2.0];
        Codebook::from_centroids(2, c, 0).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let cb = centroid_fixture();
        assert_eq!(cb.quantize(&[3.0, 0.0]).unwrap(), 3);
        assert_eq!(cb.quantize(&[4.9, 5.2]).unwrap(), 2);
        assert!(cb.quantize(&[1.0]).is_err());
    }

    #[test]
    fn quantize_tie_prefers_smaller_id() {
        // (0.5, 1.0) is at squared distance 1.25 from both word 1 (1,0) and
        // word 4 (0,2); the remaining words are far away.
        let cb = Codebook::from_centroids(
            2,
            vec![9.0, 9.0, 1.0, 0.0, 9.0, 8.0, 8.0, 9.0, 0.0, 2.0],
            0,
        )
        .unwrap();
        assert_eq!(cb.quantize(&[0.5, 1.0]).unwrap(), 1);
        assert_eq!(cb.multi_assign(&[0.5, 1.0], 2).unwrap(), vec![1, 4]);
    }

    #[test]
    fn multi_assign_examples() {
        let cb = Codebook::from_centroids(2, vec![0.0, 0.0, 4.0, 0.0, 0.0, 3.0], 0).unwrap();
        let d = [1.0, 1.0];
        // Squared distances: word0 = 2, word1 = 10, word2 = 5.
        assert_eq!(cb.multi_assign(&d, 1).unwrap(), vec![cb.quantize(&d).unwrap()]);
        assert_eq!(cb.multi_assign(&d, 2).unwrap(), vec![0, 2]);
        assert_eq!(cb.multi_assign(&d, 3).unwrap(), vec![0, 2, 1]);
        assert_eq!(cb.multi_assign(&d, 10).unwrap(), vec![0, 2, 1]);
        assert!(cb.multi_assign(&d, 0).is_err());
    }

    #[test]
    fn descriptor_and_codebook_files_roundtrip() {
        let descs = vec![
            LocalDescriptor {
                image_id: 3,
                keypoint: [1.0, 2.0, 3.5],
                values: vec![0.1, 0.2],
            },
            LocalDescriptor::new(7, vec![0.3, 0.4]),
        ];
        let mut buf = Vec::new();
        write_descriptors(&mut buf, 2, &descs).unwrap();
        assert_eq!(buf.len(), 12 + 2 * (16 + 8));
        assert_eq!(read_descriptors(&buf[..]).unwrap(), (2, descs));

        let cb = centroid_fixture();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 10 * 4 + 8);
        assert_eq!(Codebook::read_from(&buf[..]).unwrap(), cb);
        assert!(Codebook::read_from(&buf[..20]).is_err());
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<LocalDescriptor>> {
        prop::collection::vec(prop::collection::vec(0.0f32..1.0, 3), 8..40)
            .prop_map(|rows| rows.into_iter().map(|r| LocalDescriptor::new(0, r)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn objective_never_increases(corpus in corpus_strategy(), k in 1usize..6, seed in 0u64..1000) {
            let (_, report) = train_kmeans_with_report(&corpus, k, 25, seed).unwrap();
            for w in report.objective.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", report.objective);
            }
        }

        #[test]
        fn training_is_deterministic(corpus in corpus_strategy(), seed in 0u64..1000) {
            let a = train_kmeans(&corpus, 4, 10, seed).unwrap();
            let b = train_kmeans(&corpus, 4, 10, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn single_assignment_matches_quantize(corpus in corpus_strategy(),
                                              q in prop::collection::vec(0.0f32..1.0, 3)) {
            let cb = train_kmeans(&corpus, 5, 5, 11).unwrap();
            prop_assert_eq!(cb.multi_assign(&q, 1).unwrap()[0], cb.quantize(&q).unwrap());
        }
    }
}
