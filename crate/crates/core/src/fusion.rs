//! Two-layer query pipeline: holistic filter, adaptive weights, local
//! refinement and multiplicative fusion.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::codebook::{root_preprocess, train_kmeans, Codebook, LocalDescriptor};
use crate::embedding::{train_he, HeParameters};
use crate::error::{Error, Result};
use crate::holistic::{normalize_histogram, rank_database, HolisticScoreList, HsvDims, HsvHistogram};
use crate::index::{build_index, IndexConfig, InvertedIndex, LocalScoreMap, QuantizedFeature, ScoringOptions, TfMode};
use crate::weighting::{make_weights, uniform_weights, WeightedCandidateSet};
use crate::ImageId;

/// Every knob of the pipeline. Defaults follow the reference setup: HSV bins
/// 20/10/5, alpha 0.5, 128-bit signatures, threshold 52, sigma 26, three
/// query-side assignments and a 20k vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of candidates K kept by the holistic filter.
    pub candidates: usize,
    pub alpha: f64,
    pub hsv_dims: HsvDims,
    pub vocab_size: usize,
    pub bits: usize,
    pub h_t: u32,
    pub sigma: f32,
    /// Query-side multiple assignment.
    pub ma: usize,
    pub weights_enabled: bool,
    pub normalization_enabled: bool,
    pub tf: TfMode,
    pub root_sift: bool,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            candidates: 1000,
            alpha: 0.5,
            hsv_dims: HsvDims::default(),
            vocab_size: 20_000,
            bits: 128,
            h_t: 52,
            sigma: 26.0,
            ma: 3,
            weights_enabled: true,
            normalization_enabled: true,
            tf: TfMode::PerOccurrence,
            root_sift: true,
            kmeans_iters: 20,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Parameter("candidate count K must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Parameter(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if self.ma == 0 {
            return Err(Error::Parameter("ma must be >= 1".into()));
        }
        if self.vocab_size == 0 || self.bits == 0 {
            return Err(Error::Parameter("vocab_size and bits must be >= 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            k: self.vocab_size as u32,
            bits: self.bits as u32,
            h_t: self.h_t,
            sigma: self.sigma,
        }
    }

    pub fn scoring(&self) -> ScoringOptions {
        ScoringOptions {
            normalize: self.normalization_enabled,
            tf: self.tf,
        }
    }
}

/// One ranked candidate with every score that produced its position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: ImageId,
    #[serde(rename = "final")]
    pub final_score: f64,
    #[serde(rename = "local")]
    pub local_score: f64,
    pub weight: f64,
    #[serde(rename = "holistic")]
    pub holistic_score: f64,
}

/// Final ranking for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    pub query_id: Option<ImageId>,
    pub comparison_count: u64,
    pub entries: Vec<RankedEntry>,
    /// Images removed by the holistic filter, in holistic order.
    #[serde(skip)]
    pub filtered_out: Vec<ImageId>,
}

impl RankList {
    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.entries.iter().map(|e| e.image_id)
    }

    /// Candidates followed by every filtered-out image in holistic order.
    pub fn full_ranking(&self) -> Vec<ImageId> {
        self.ids().chain(self.filtered_out.iter().copied()).collect()
    }

    /// One-line JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("rank list serializes")
    }
}

fn fused_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then(b.holistic_score.total_cmp(&a.holistic_score))
        .then(a.image_id.cmp(&b.image_id))
}

/// Multiplies each candidate's local score by its weight and sorts by the
/// product, then by holistic score, then by image id.
pub fn fuse_scores(local: &LocalScoreMap, weights: &WeightedCandidateSet) -> Result<Vec<RankedEntry>> {
    let by_id: HashMap<ImageId, usize> = weights
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id, i))
        .collect();
    if let Some((id, _)) = local.iter().find(|(id, _)| !by_id.contains_key(id)) {
        return Err(Error::MissingWeight(id));
    }
    let mut out: Vec<RankedEntry> = weights
        .entries()
        .iter()
        .map(|w| {
            let s_l = local.get(w.image_id);
            RankedEntry {
                image_id: w.image_id,
                final_score: s_l * w.weight,
                local_score: s_l,
                weight: w.weight,
                holistic_score: w.holistic_score,
            }
        })
        .collect();
    out.sort_by(fused_order);
    Ok(out)
}

/// A query ready for scoring: normalized histogram plus quantized features
/// with multiple-assignment expansions.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedQuery {
    pub id: Option<ImageId>,
    pub histogram: HsvHistogram,
    pub features: Vec<QuantizedFeature>,
}

/// Read-only stores for one corpus.
#[derive(Clone, Debug)]
pub struct Engine {
    histograms: Vec<HsvHistogram>,
    codebook: Codebook,
    he: HeParameters,
    index: InvertedIndex,
}

impl Engine {
    /// Assembles an engine from stores, checking they describe one corpus.
    pub fn new(
        histograms: Vec<HsvHistogram>,
        codebook: Codebook,
        he: HeParameters,
        index: InvertedIndex,
    ) -> Result<Self> {
        let mismatch = |what: String| Err(Error::ConfigMismatch(format!("stores disagree: {what}")));
        if histograms.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if histograms.len() != index.n_images() as usize {
            return mismatch(format!(
                "{} histograms but index covers {} images",
                histograms.len(),
                index.n_images()
            ));
        }
        let p = histograms[0].len();
        if histograms.iter().any(|h| h.len() != p) {
            return mismatch("histograms have differing lengths".into());
        }
        if codebook.k() != he.k() || codebook.k() != index.config().k as usize {
            return mismatch(format!(
                "vocabulary sizes codebook={} he={} index={}",
                codebook.k(),
                he.k(),
                index.config().k
            ));
        }
        if codebook.dim() != he.dim() {
            return mismatch(format!("descriptor dims codebook={} he={}", codebook.dim(), he.dim()));
        }
        if he.bits() != index.config().bits as usize {
            return mismatch(format!("signature bits he={} index={}", he.bits(), index.config().bits));
        }
        Ok(Self {
            histograms,
            codebook,
            he,
            index,
        })
    }

    /// Trains the vocabulary and HE parameters on the database descriptors,
    /// then indexes them. `histograms` must already be normalized.
    pub fn build(
        histograms: Vec<HsvHistogram>,
        descriptors: &[LocalDescriptor],
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let prepared = preprocess_all(descriptors, cfg.root_sift)?;
        let codebook = train_kmeans(&prepared, cfg.vocab_size, cfg.kmeans_iters, cfg.seed)?;
        let he = train_he(&codebook, &prepared, cfg.bits, cfg.seed)?;
        Self::build_with_vocabulary(histograms, descriptors, codebook, he, cfg)
    }

    /// Indexes `descriptors` with an existing vocabulary.
    pub fn build_with_vocabulary(
        histograms: Vec<HsvHistogram>,
        descriptors: &[LocalDescriptor],
        codebook: Codebook,
        he: HeParameters,
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = histograms.len() as u32;
        let features = quantize_database(descriptors, &codebook, &he, cfg.root_sift)?;
        let index = build_index(&features, n, cfg.index_config())?;
        Self::new(histograms, codebook, he, index)
    }

    pub fn histograms(&self) -> &[HsvHistogram] {
        &self.histograms
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn he(&self) -> &HeParameters {
        &self.he
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn n_images(&self) -> usize {
        self.histograms.len()
    }

    /// Quantizes query descriptors with `ma` assignments each.
    pub fn quantize_query(
        &self,
        descriptors: &[LocalDescriptor],
        ma: usize,
        root_sift: bool,
    ) -> Result<Vec<QuantizedFeature>> {
        let mut out = Vec::with_capacity(descriptors.len() * ma);
        for d in descriptors {
            let d = if root_sift { root_preprocess(d)? } else { d.clone() };
            for word in self.codebook.multi_assign(&d.values, ma)? {
                out.push(QuantizedFeature {
                    image_id: d.image_id,
                    word,
                    signature: self.he.sign(&d.values, word)?,
                });
            }
        }
        Ok(out)
    }

    /// Prepares a query from a raw (unnormalized) histogram and descriptors.
    pub fn prepare(
        &self,
        id: Option<ImageId>,
        raw_histogram: &HsvHistogram,
        descriptors: &[LocalDescriptor],
        cfg: &PipelineConfig,
    ) -> Result<PreparedQuery> {
        Ok(PreparedQuery {
            id,
            histogram: normalize_histogram(raw_histogram, cfg.alpha)?,
            features: self.quantize_query(descriptors, cfg.ma, cfg.root_sift)?,
        })
    }

    /// Prepares database image `id` as a query, reusing its stored histogram.
    pub fn prepare_database_image(
        &self,
        id: ImageId,
        descriptors: &[LocalDescriptor],
        cfg: &PipelineConfig,
    ) -> Result<PreparedQuery> {
        let histogram = self
            .histograms
            .get(id as usize)
            .ok_or(Error::UnknownQuery(id))?
            .clone();
        let own: Vec<LocalDescriptor> = descriptors
            .iter()
            .filter(|d| d.image_id == id)
            .cloned()
            .collect();
        Ok(PreparedQuery {
            id: Some(id),
            histogram,
            features: self.quantize_query(&own, cfg.ma, cfg.root_sift)?,
        })
    }

    fn check_query_config(&self, cfg: &PipelineConfig) -> Result<()> {
        cfg.validate()?;
        let ic = self.index.config();
        if ic.h_t != cfg.h_t || ic.sigma != cfg.sigma {
            return Err(Error::ConfigMismatch(format!(
                "index built with h_t={} sigma={}, query asks h_t={} sigma={}",
                ic.h_t, ic.sigma, cfg.h_t, cfg.sigma
            )));
        }
        Ok(())
    }

    /// Holistic ranking of the full database.
    pub fn holistic_ranking(&self, query: &PreparedQuery) -> Result<HolisticScoreList> {
        rank_database(&query.histogram, &self.histograms)
    }

    pub fn run_query(&self, query: &PreparedQuery, cfg: &PipelineConfig) -> Result<RankList> {
        self.check_query_config(cfg)?;
        let holistic = self.holistic_ranking(query)?;
        self.rank_from_holistic(query, &holistic, cfg)
    }

    /// Runs the filter/weight/refine/fuse steps on a precomputed holistic
    /// ranking, so several K values can share one holistic pass.
    pub fn rank_from_holistic(
        &self,
        query: &PreparedQuery,
        holistic: &HolisticScoreList,
        cfg: &PipelineConfig,
    ) -> Result<RankList> {
        self.check_query_config(cfg)?;
        let candidates = holistic.filter_top_k(cfg.candidates)?;
        let mut weights = if cfg.weights_enabled {
            make_weights(&candidates)
        } else {
            uniform_weights(&candidates)
        };
        weights.query_id = query.id;
        let ids: Vec<ImageId> = candidates.ids().collect();
        let local = self.index.score_candidates(&query.features, &ids, cfg.scoring())?;
        let entries = fuse_scores(&local.scores, &weights)?;
        let filtered_out = holistic.entries()[candidates.len()..]
            .iter()
            .map(|e| e.0)
            .collect();
        Ok(RankList {
            query_id: query.id,
            comparison_count: holistic.len() as u64 + local.comparisons,
            entries,
            filtered_out,
        })
    }
}

fn preprocess_all(descriptors: &[LocalDescriptor], root_sift: bool) -> Result<Vec<LocalDescriptor>> {
    if root_sift {
        descriptors.iter().map(root_preprocess).collect()
    } else {
        Ok(descriptors.to_vec())
    }
}

/// Single-assignment quantization of database descriptors.
pub fn quantize_database(
    descriptors: &[LocalDescriptor],
    codebook: &Codebook,
    he: &HeParameters,
    root_sift: bool,
) -> Result<Vec<QuantizedFeature>> {
    use rayon::prelude::*;
    descriptors
        .par_iter()
        .map(|d| {
            let d = if root_sift { root_preprocess(d)? } else { d.clone() };
            let word = codebook.quantize(&d.values)?;
            Ok(QuantizedFeature {
                image_id: d.image_id,
                word,
                signature: he.sign(&d.values, word)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::holistic::HolisticScoreList;

    #[test]
    fn fuse_examples() {
        let holistic = HolisticScoreList::from_unsorted(vec![(0, 0.9), (1, 0.5)]);
        let mut w = make_weights(&holistic);
        let local = LocalScoreMap::from_pairs([(0, 2.0), (1, 1.0)]);
        // Weights [1, 0]: candidate 1 is zeroed regardless of its local score.
        let fused = fuse_scores(&local, &w).unwrap();
        assert_eq!(fused[1].final_score, 0.0);

        w = uniform_weights(&holistic);
        let fused = fuse_scores(&LocalScoreMap::from_pairs([(0, 1.0), (1, 2.0)]), &w).unwrap();
        assert_eq!(fused.iter().map(|e| e.image_id).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn fuse_product_flips_order() {
        let holistic = HolisticScoreList::from_unsorted(vec![(0, 0.9), (1, 0.5)]);
        let mut w = uniform_weights(&holistic);
        // Hand-set weights 0.25 and 0.75.
        let entries: Vec<_> = w
            .entries()
            .iter()
            .zip([0.25, 0.75])
            .map(|(e, wt)| (e.image_id, e.holistic_score, wt))
            .collect();
        w = crate::weighting::WeightedCandidateSet::from_parts(None, entries);
        let fused = fuse_scores(&LocalScoreMap::from_pairs([(0, 2.0), (1, 1.0)]), &w).unwrap();
        assert_eq!(fused[0].image_id, 1);
        assert_eq!(fused[0].final_score, 0.75);
        assert_eq!(fused[1].final_score, 0.5);
    }

    #[test]
    fn zero_scores_order_by_holistic() {
        let holistic = HolisticScoreList::from_unsorted(vec![(3, 0.2), (1, 0.9), (2, 0.5)]);
        let fused = fuse_scores(&LocalScoreMap::default(), &make_weights(&holistic)).unwrap();
        assert_eq!(fused.iter().map(|e| e.image_id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn fuse_rejects_unweighted_candidate() {
        let holistic = HolisticScoreList::from_unsorted(vec![(0, 0.9)]);
        let local = LocalScoreMap::from_pairs([(0, 1.0), (5, 1.0)]);
        assert!(matches!(
            fuse_scores(&local, &make_weights(&holistic)),
            Err(Error::MissingWeight(5))
        ));
    }

    #[test]
    fn config_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.hsv_dims, HsvDims { h: 20, s: 10, v: 5 });
        assert_eq!((c.alpha, c.bits, c.h_t, c.sigma, c.ma), (0.5, 128, 52, 26.0, 3));
        assert_eq!(c.vocab_size, 20_000);
        assert!(PipelineConfig { candidates: 0, ..c.clone() }.validate().is_err());
    }
}
