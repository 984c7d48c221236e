//! Brute-force reference implementations shared by the integration tests.
//!
//! Nothing here calls the library's scoring, ranking, weighting or metric
//! code; only the trained vocabulary and quantized features are reused as
//! inputs.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use c2f::codebook::LocalDescriptor;
use c2f::embedding::BinarySignature;
use c2f::eval::GroundTruth;
use c2f::fusion::{quantize_database, Engine, PipelineConfig};
use c2f::holistic::{hsv_histogram, normalize_histogram, HsvHistogram};
use c2f::index::QuantizedFeature;
use c2f::synthgen::SynthCorpus;
use c2f::ImageId;

pub fn bit_distance(a: &BinarySignature, b: &BinarySignature) -> u32 {
    assert_eq!(a.bits(), b.bits());
    (0..a.bits()).filter(|&i| a.get(i) != b.get(i)).count() as u32
}

/// idf(w) = ln(N / number of distinct images containing w), stored as f32.
pub fn naive_idf(features: &[QuantizedFeature], n_images: u32, k: u32) -> Vec<f32> {
    (0..k)
        .map(|w| {
            let images: BTreeSet<ImageId> =
                features.iter().filter(|f| f.word == w).map(|f| f.image_id).collect();
            if images.is_empty() {
                0.0
            } else {
                (n_images as f64 / images.len() as f64).ln() as f32
            }
        })
        .collect()
}

/// sqrt of the summed squared idf over an image's features; 1 when empty.
pub fn naive_norms(features: &[QuantizedFeature], idf: &[f32], n_images: u32) -> Vec<f32> {
    let mut sums = vec![0f64; n_images as usize];
    for f in features {
        let w = idf[f.word as usize] as f64;
        sums[f.image_id as usize] += w * w;
    }
    sums.into_iter()
        .map(|s| if s > 0.0 { s.sqrt() as f32 } else { 1.0 })
        .collect()
}

/// Local scores by a double loop over (query feature, database feature)
/// pairs. Returns the score of every candidate with at least one match and
/// the number of same-word pairs compared.
#[allow(clippy::too_many_arguments)]
pub fn naive_local_scores(
    query: &[QuantizedFeature],
    db: &[QuantizedFeature],
    candidates: &BTreeSet<ImageId>,
    idf: &[f32],
    norms: &[f32],
    h_t: u32,
    sigma: f32,
    normalize: bool,
) -> (BTreeMap<ImageId, f64>, u64) {
    let mut acc: BTreeMap<ImageId, f64> = BTreeMap::new();
    let mut compared = 0u64;
    for q in query {
        for x in db {
            if x.word != q.word || !candidates.contains(&x.image_id) {
                continue;
            }
            compared += 1;
            let h = bit_distance(&q.signature, &x.signature);
            if h <= h_t {
                let w = idf[q.word as usize] as f64;
                let s = sigma as f64;
                *acc.entry(x.image_id).or_insert(0.0) += w * w * (-(h as f64 * h as f64) / (s * s)).exp();
            }
        }
    }
    if normalize {
        for (id, v) in acc.iter_mut() {
            *v /= norms[*id as usize] as f64;
        }
    }
    (acc, compared)
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    (dot / (aa.sqrt() * bb.sqrt())).min(1.0)
}

/// All images by descending cosine, ascending id on ties.
pub fn naive_holistic(q: &[f64], db: &[HsvHistogram]) -> Vec<(ImageId, f64)> {
    let mut v: Vec<(ImageId, f64)> = db
        .iter()
        .enumerate()
        .map(|(i, h)| (i as ImageId, naive_cosine(q, h.bins())))
        .collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v
}

pub fn naive_weights(scores: &[f64], enabled: bool) -> Vec<f64> {
    let k = scores.len();
    if !enabled {
        return vec![1.0 / k as f64; k];
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    let mm: Vec<f64> = scores.iter().map(|s| (s - lo) / (hi - lo)).collect();
    let total: f64 = mm.iter().sum();
    mm.iter().map(|m| m / total).collect()
}

/// Fused ranking of the top-K holistic candidates followed by the rest in
/// holistic order.
pub fn naive_ranking(holistic: &[(ImageId, f64)], local: &BTreeMap<ImageId, f64>, k: usize, weights: bool) -> Vec<ImageId> {
    let k = k.min(holistic.len());
    let cand = &holistic[..k];
    let w = naive_weights(&cand.iter().map(|c| c.1).collect::<Vec<_>>(), weights);
    let mut fused: Vec<(ImageId, f64, f64)> = cand
        .iter()
        .zip(&w)
        .map(|(&(id, s), &w)| (id, local.get(&id).copied().unwrap_or(0.0) * w, s))
        .collect();
    fused.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(b.2.partial_cmp(&a.2).unwrap())
            .then(a.0.cmp(&b.0))
    });
    fused
        .iter()
        .map(|f| f.0)
        .chain(holistic[k..].iter().map(|h| h.0))
        .collect()
}

/// Area under the precision-recall step curve, computed from the full
/// precision and recall series.
pub fn pr_area(ranking: &[ImageId], positives: &BTreeSet<ImageId>) -> f64 {
    let total = positives.len() as f64;
    let mut hits = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
        }
        let precision = hits as f64 / (i + 1) as f64;
        let recall = hits as f64 / total;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

pub fn normalized_histograms(corpus: &SynthCorpus, cfg: &PipelineConfig) -> Vec<HsvHistogram> {
    corpus
        .images
        .iter()
        .map(|img| normalize_histogram(&hsv_histogram(img, cfg.hsv_dims), cfg.alpha).unwrap())
        .collect()
}

/// Brute-force pipeline over one corpus with a trained vocabulary.
pub struct OraclePipeline {
    pub histograms: Vec<HsvHistogram>,
    pub db: Vec<QuantizedFeature>,
    pub idf: Vec<f32>,
    pub norms: Vec<f32>,
    pub cfg: PipelineConfig,
    pub queries: Vec<(ImageId, Vec<QuantizedFeature>)>,
}

impl OraclePipeline {
    /// Reuses `engine`'s codebook and HE parameters for quantization only.
    pub fn new(engine: &Engine, descriptors: &[LocalDescriptor], gt: &GroundTruth, cfg: &PipelineConfig) -> Self {
        let db = quantize_database(descriptors, engine.codebook(), engine.he(), cfg.root_sift).unwrap();
        let n = engine.n_images() as u32;
        let idf = naive_idf(&db, n, cfg.vocab_size as u32);
        let norms = naive_norms(&db, &idf, n);
        let queries = gt
            .queries()
            .map(|q| {
                let own: Vec<LocalDescriptor> = descriptors.iter().filter(|d| d.image_id == q).cloned().collect();
                (q, engine.quantize_query(&own, cfg.ma, cfg.root_sift).unwrap())
            })
            .collect();
        Self {
            histograms: engine.histograms().to_vec(),
            db,
            idf,
            norms,
            cfg: cfg.clone(),
            queries,
        }
    }

    pub fn n(&self) -> usize {
        self.histograms.len()
    }

    pub fn holistic(&self, q: ImageId) -> Vec<(ImageId, f64)> {
        naive_holistic(self.histograms[q as usize].bins(), &self.histograms)
    }

    pub fn local(&self, feats: &[QuantizedFeature], candidates: &BTreeSet<ImageId>) -> (BTreeMap<ImageId, f64>, u64) {
        naive_local_scores(
            feats,
            &self.db,
            candidates,
            &self.idf,
            &self.norms,
            self.cfg.h_t,
            self.cfg.sigma,
            self.cfg.normalization_enabled,
        )
    }

    /// mAP (query excluded from its own ranking) and mean comparison count
    /// for every (K, weights) pair.
    pub fn sweep(&self, gt: &GroundTruth, ks: &[usize], weights: &[bool]) -> Vec<OracleRow> {
        let max_k = ks.iter().copied().max().unwrap_or(0).min(self.n());
        let per_query: Vec<_> = self
            .queries
            .iter()
            .map(|(q, feats)| {
                let h = self.holistic(*q);
                let pool: BTreeSet<ImageId> = h[..max_k].iter().map(|x| x.0).collect();
                let (local, _) = self.local(feats, &pool);
                let mut pairs = vec![0u64; self.n()];
                for f in feats.iter() {
                    for x in self.db.iter().filter(|x| x.word == f.word) {
                        pairs[x.image_id as usize] += 1;
                    }
                }
                (*q, h, local, pairs)
            })
            .collect();
        let mut rows = Vec::new();
        for &k in ks {
            for &w in weights {
                let mut ap_sum = 0.0;
                let mut cmp_sum = 0u64;
                for (q, h, local, pairs) in &per_query {
                    let kk = k.min(h.len());
                    let cands: BTreeSet<ImageId> = h[..kk].iter().map(|x| x.0).collect();
                    let restricted: BTreeMap<ImageId, f64> =
                        local.iter().filter(|(id, _)| cands.contains(id)).map(|(a, b)| (*a, *b)).collect();
                    let ranking: Vec<ImageId> =
                        naive_ranking(h, &restricted, k, w).into_iter().filter(|id| id != q).collect();
                    let pos: BTreeSet<ImageId> = gt.positives(*q).unwrap().iter().copied().filter(|p| p != q).collect();
                    ap_sum += pr_area(&ranking, &pos);
                    let compared: u64 = cands.iter().map(|&c| pairs[c as usize]).sum();
                    cmp_sum += self.n() as u64 + compared;
                }
                let nq = per_query.len() as f64;
                rows.push(OracleRow {
                    candidates: k,
                    weights: w,
                    value: ap_sum / nq,
                    mean_comparisons: cmp_sum as f64 / nq,
                });
            }
        }
        rows
    }

    /// Smallest K whose holistic candidates contain every positive of every query.
    pub fn cover(&self, gt: &GroundTruth) -> usize {
        self.queries
            .iter()
            .map(|(q, _)| {
                let h = self.holistic(*q);
                gt.positives(*q)
                    .unwrap()
                    .iter()
                    .map(|p| h.iter().position(|x| x.0 == *p).unwrap() + 1)
                    .max()
                    .unwrap()
            })
            .max()
            .unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub candidates: usize,
    pub weights: bool,
    pub value: f64,
    pub mean_comparisons: f64,
}
