//! Adaptive per-candidate weights from holistic scores.
//!
//! Scores are min-max normalized to [0,1] and then divided by their sum, so
//! the best candidate carries the largest weight and the worst carries zero.
//! When every score is equal the min-max step is 0/0; every entry then gets
//! the uniform value 1/K.

use serde::{Deserialize, Serialize};

use crate::holistic::HolisticScoreList;
use crate::ImageId;

pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let (min, max) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let range = max - min;
    if range <= 0.0 {
        let uniform = 1.0 / scores.len() as f64;
        return vec![uniform; scores.len()];
    }
    scores.iter().map(|&s| (s - min) / range).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedCandidate {
    pub image_id: ImageId,
    pub holistic_score: f64,
    pub weight: f64,
}

/// The K candidates that survived filtering, with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCandidateSet {
    pub query_id: Option<ImageId>,
    entries: Vec<WeightedCandidate>,
}

impl WeightedCandidateSet {
    /// Wraps explicit `(image_id, holistic_score, weight)` triples.
    pub fn from_parts(query_id: Option<ImageId>, entries: Vec<(ImageId, f64, f64)>) -> Self {
        Self {
            query_id,
            entries: entries
                .into_iter()
                .map(|(image_id, holistic_score, weight)| WeightedCandidate {
                    image_id,
                    holistic_score,
                    weight,
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[WeightedCandidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn get(&self, id: ImageId) -> Option<&WeightedCandidate> {
        self.entries.iter().find(|e| e.image_id == id)
    }
}

/// Min-max normalization followed by sum normalization.
pub fn make_weights(candidates: &HolisticScoreList) -> WeightedCandidateSet {
    let scores: Vec<f64> = candidates.entries().iter().map(|e| e.1).collect();
    if scores.windows(2).all(|w| w[0] == w[1]) {
        return uniform_weights(candidates);
    }
    let normalized = min_max_normalize(&scores);
    let total: f64 = normalized.iter().sum();
    let entries = candidates
        .entries()
        .iter()
        .zip(&normalized)
        .map(|(&(image_id, holistic_score), &n)| WeightedCandidate {
            image_id,
            holistic_score,
            weight: n / total,
        })
        .collect();
    WeightedCandidateSet {
        query_id: None,
        entries,
    }
}

/// Every candidate gets 1/K; used when adaptive weighting is switched off.
pub fn uniform_weights(candidates: &HolisticScoreList) -> WeightedCandidateSet {
    let w = 1.0 / candidates.len().max(1) as f64;
    let entries = candidates
        .entries()
        .iter()
        .map(|&(image_id, holistic_score)| WeightedCandidate {
            image_id,
            holistic_score,
            weight: w,
        })
        .collect();
    WeightedCandidateSet {
        query_id: None,
        entries,
    }
}
