//! Inverted file over quantized database features, with Hamming-gated
//! idf² scoring restricted to a candidate set.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio::{usize_to_u32, Reader, Writer};
use crate::embedding::{hamming_words, BinarySignature};
use crate::error::{Error, Result};
use crate::{ImageId, WordId};

/// A descriptor reduced to its visual word and binary signature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedFeature {
    pub image_id: ImageId,
    pub word: WordId,
    pub signature: BinarySignature,
}

/// Parameters persisted in the index header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub k: u32,
    pub bits: u32,
    pub h_t: u32,
    pub sigma: f32,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            k: 20_000,
            bits: 128,
            h_t: 52,
            sigma: 26.0,
        }
    }
}

/// How repeated matches inside one visual word are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TfMode {
    /// Every matching feature pair contributes.
    #[default]
    PerOccurrence,
    /// Each query word contributes at most once per image, using its
    /// closest matching pair.
    PerWord,
}

/// Query-time scoring switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringOptions {
    /// Divide by the database image's idf norm.
    pub normalize: bool,
    pub tf: TfMode,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            tf: TfMode::PerOccurrence,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct PostingList {
    ids: Vec<ImageId>,
    // Signatures inline, `words_per_sig` u64 per posting.
    sigs: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    config: IndexConfig,
    n_images: u32,
    words_per_sig: usize,
    postings: Vec<PostingList>,
    idf: Vec<f32>,
    norms: Vec<f32>,
    featureless: Vec<ImageId>,
}

/// Per-candidate local scores. Candidates without any match are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalScoreMap {
    scores: BTreeMap<ImageId, f64>,
}

impl LocalScoreMap {
    pub fn get(&self, id: ImageId) -> f64 {
        self.scores.get(&id).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.scores.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, f64)> + '_ {
        self.scores.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (ImageId, f64)>) -> Self {
        Self {
            scores: pairs.into_iter().collect(),
        }
    }
}

/// Local scores together with the number of signature comparisons made.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalScores {
    pub scores: LocalScoreMap,
    pub comparisons: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub header_bytes: u64,
    pub posting_count_bytes: u64,
    pub posting_bytes: u64,
    pub norm_bytes: u64,
    pub idf_bytes: u64,
    pub total_bytes: u64,
}

impl InvertedIndex {
    pub fn config(&self) -> IndexConfig {
        self.config
    }

    pub fn n_images(&self) -> u32 {
        self.n_images
    }

    pub fn idf(&self, word: WordId) -> f32 {
        self.idf[word as usize]
    }

    pub fn idf_table(&self) -> &[f32] {
        &self.idf
    }

    pub fn norm(&self, image: ImageId) -> f32 {
        self.norms[image as usize]
    }

    /// Images indexed without any feature; they carry norm 1.
    pub fn featureless_images(&self) -> &[ImageId] {
        &self.featureless
    }

    pub fn posting_len(&self, word: WordId) -> usize {
        self.postings[word as usize].ids.len()
    }

    pub fn total_postings(&self) -> usize {
        self.postings.iter().map(|p| p.ids.len()).sum()
    }

    /// Image ids in one posting list, ascending.
    pub fn posting_ids(&self, word: WordId) -> &[ImageId] {
        &self.postings[word as usize].ids
    }

    fn posting_entry_bytes(&self) -> u64 {
        4 + (self.config.bits as u64).div_ceil(8)
    }

    pub fn posting_bytes_for_word(&self, word: WordId) -> u64 {
        self.posting_len(word) as u64 * self.posting_entry_bytes()
    }

    /// Byte totals of the on-disk layout.
    pub fn memory_report(&self) -> MemoryReport {
        let header_bytes = 4 + 5 * 4;
        let posting_count_bytes = 4 * self.config.k as u64;
        let posting_bytes = self.total_postings() as u64 * self.posting_entry_bytes();
        let norm_bytes = 4 * self.n_images as u64;
        let idf_bytes = 4 * self.config.k as u64;
        MemoryReport {
            header_bytes,
            posting_count_bytes,
            posting_bytes,
            norm_bytes,
            idf_bytes,
            total_bytes: header_bytes + posting_count_bytes + posting_bytes + norm_bytes + idf_bytes,
        }
    }

    fn check_feature(&self, f: &QuantizedFeature) -> Result<()> {
        if f.word >= self.config.k {
            return Err(Error::ConfigMismatch(format!(
                "word {} outside index vocabulary of {}",
                f.word, self.config.k
            )));
        }
        if f.signature.bits() != self.config.bits {
            return Err(Error::ConfigMismatch(format!(
                "{}-bit signature against a {}-bit index",
                f.signature.bits(),
                self.config.bits
            )));
        }
        Ok(())
    }

    /// Scores `candidates` against the query features. Only postings that
    /// belong to candidates are visited; each one costs one comparison.
    pub fn score_candidates(
        &self,
        query: &[QuantizedFeature],
        candidates: &[ImageId],
        opts: ScoringOptions,
    ) -> Result<LocalScores> {
        for f in query {
            self.check_feature(f)?;
        }
        let mut cands = candidates.to_vec();
        cands.sort_unstable();
        cands.dedup();
        if let Some(&bad) = cands.iter().find(|&&c| c >= self.n_images) {
            return Err(Error::UnknownImage(bad));
        }

        let h_t = self.config.h_t;
        let sigma2 = (self.config.sigma as f64).powi(2);
        let gauss = |h: u32| (-(h as f64 * h as f64) / sigma2).exp();
        let mut acc = vec![0f64; cands.len()];
        let mut hit = vec![false; cands.len()];
        let mut comparisons = 0u64;

        match opts.tf {
            TfMode::PerOccurrence => {
                for f in query {
                    let idf2 = (self.idf[f.word as usize] as f64).powi(2);
                    self.visit(f, &cands, &mut comparisons, |pos, h| {
                        if h <= h_t {
                            acc[pos] += idf2 * gauss(h);
                            hit[pos] = true;
                        }
                    });
                }
            }
            TfMode::PerWord => {
                let mut by_word: BTreeMap<WordId, Vec<&QuantizedFeature>> = BTreeMap::new();
                for f in query {
                    by_word.entry(f.word).or_default().push(f);
                }
                let mut best = vec![u32::MAX; cands.len()];
                for (word, feats) in by_word {
                    best.fill(u32::MAX);
                    for f in feats {
                        self.visit(f, &cands, &mut comparisons, |pos, h| {
                            if h <= h_t && h < best[pos] {
                                best[pos] = h;
                            }
                        });
                    }
                    let idf2 = (self.idf[word as usize] as f64).powi(2);
                    for (pos, &h) in best.iter().enumerate() {
                        if h != u32::MAX {
                            acc[pos] += idf2 * gauss(h);
                            hit[pos] = true;
                        }
                    }
                }
            }
        }

        let scores = cands
            .iter()
            .zip(acc)
            .zip(hit)
            .filter(|(_, hit)| *hit)
            .map(|((&id, a), _)| {
                let s = if opts.normalize {
                    a / self.norms[id as usize] as f64
                } else {
                    a
                };
                (id, s)
            })
            .collect();
        Ok(LocalScores {
            scores: LocalScoreMap { scores },
            comparisons,
        })
    }

    // Calls `on_match(candidate_position, hamming)` for every posting of a
    // candidate image in the feature's word.
    fn visit(
        &self,
        f: &QuantizedFeature,
        cands: &[ImageId],
        comparisons: &mut u64,
        mut on_match: impl FnMut(usize, u32),
    ) {
        let list = &self.postings[f.word as usize];
        if list.ids.is_empty() {
            return;
        }
        let q = f.signature.words();
        let stride = self.words_per_sig;
        let mut lo = 0;
        for (pos, &c) in cands.iter().enumerate() {
            lo += list.ids[lo..].partition_point(|&x| x < c);
            if lo == list.ids.len() {
                break;
            }
            while lo < list.ids.len() && list.ids[lo] == c {
                let h = hamming_words(q, &list.sigs[lo * stride..(lo + 1) * stride]);
                *comparisons += 1;
                on_match(pos, h);
                lo += 1;
            }
        }
    }
}

/// Builds the inverted file for `n_images` database images.
///
/// idf(w) = ln(N / n_w) with n_w the number of distinct images containing w,
/// and the norm of image d is sqrt(Σ idf(word)²) over its features.
pub fn build_index(
    features: &[QuantizedFeature],
    n_images: u32,
    config: IndexConfig,
) -> Result<InvertedIndex> {
    if n_images == 0 {
        return Err(Error::EmptyDatabase);
    }
    if config.k == 0 || config.bits == 0 {
        return Err(Error::Parameter("index needs k >= 1 and bits >= 1".into()));
    }
    if !(config.sigma.is_finite() && config.sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {}", config.sigma)));
    }
    let words_per_sig = (config.bits as usize).div_ceil(64);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); config.k as usize];
    for (i, f) in features.iter().enumerate() {
        if f.image_id >= n_images {
            return Err(Error::UnknownImage(f.image_id));
        }
        if f.word >= config.k || f.signature.bits() != config.bits {
            return Err(Error::ConfigMismatch(format!(
                "feature {i} (word {}, {} bits) does not fit index k = {}, bits = {}",
                f.word,
                f.signature.bits(),
                config.k,
                config.bits
            )));
        }
        buckets[f.word as usize].push(i);
    }

    let n = n_images as f64;
    let mut postings = Vec::with_capacity(buckets.len());
    let mut idf = Vec::with_capacity(buckets.len());
    for mut bucket in buckets {
        bucket.sort_by_key(|&i| features[i].image_id);
        let mut list = PostingList {
            ids: Vec::with_capacity(bucket.len()),
            sigs: Vec::with_capacity(bucket.len() * words_per_sig),
        };
        let mut distinct = 0usize;
        for &i in &bucket {
            let f = &features[i];
            if list.ids.last() != Some(&f.image_id) {
                distinct += 1;
            }
            list.ids.push(f.image_id);
            list.sigs.extend_from_slice(f.signature.words());
        }
        idf.push(if distinct == 0 {
            0.0
        } else {
            (n / distinct as f64).ln() as f32
        });
        postings.push(list);
    }

    let mut sq = vec![0f64; n_images as usize];
    let mut counts = vec![0usize; n_images as usize];
    for f in features {
        let w = idf[f.word as usize] as f64;
        sq[f.image_id as usize] += w * w;
        counts[f.image_id as usize] += 1;
    }
    let norms = sq
        .iter()
        .map(|&s| if s > 0.0 { s.sqrt() as f32 } else { 1.0 })
        .collect();
    let featureless = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i as ImageId)
        .collect();

    Ok(InvertedIndex {
        config,
        n_images,
        words_per_sig,
        postings,
        idf,
        norms,
        featureless,
    })
}

const INDEX_MAGIC: &[u8; 4] = b"C2FI";

impl InvertedIndex {
    /// Writes `C2FI`: header (k, d_b, h_t, sigma, n_images), per word a u32
    /// count and (u32 image id, signature bytes) postings, then f32 norms and
    /// f32 idf values.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.magic(INDEX_MAGIC)?;
        w.u32(self.config.k)?;
        w.u32(self.config.bits)?;
        w.u32(self.config.h_t)?;
        w.f32(self.config.sigma)?;
        w.u32(self.n_images)?;
        let stride = self.words_per_sig;
        for list in &self.postings {
            w.u32(usize_to_u32(list.ids.len(), "posting count")?)?;
            for (j, &id) in list.ids.iter().enumerate() {
                w.u32(id)?;
                let sig = BinarySignature::from_words(
                    self.config.bits,
                    &list.sigs[j * stride..(j + 1) * stride],
                );
                w.bytes(&sig.to_bytes())?;
            }
        }
        w.f32_slice(&self.norms)?;
        w.f32_slice(&self.idf)?;
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "index file");
        r.magic(INDEX_MAGIC)?;
        let config = IndexConfig {
            k: r.u32("k")?,
            bits: r.u32("d_b")?,
            h_t: r.u32("h_t")?,
            sigma: r.f32("sigma")?,
        };
        let n_images = r.u32("n_images")?;
        if config.k == 0 || config.bits == 0 {
            return Err(Error::format("index file", "zero k or d_b"));
        }
        let words_per_sig = (config.bits as usize).div_ceil(64);
        let mut buf = vec![0u8; (config.bits as usize).div_ceil(8)];
        let mut postings = Vec::with_capacity(config.k as usize);
        for _ in 0..config.k {
            let count = r.u32("posting count")? as usize;
            let mut list = PostingList {
                ids: Vec::with_capacity(count),
                sigs: Vec::with_capacity(count * words_per_sig),
            };
            for _ in 0..count {
                let id = r.u32("posting image id")?;
                if id >= n_images {
                    return Err(Error::format("index file", format!("posting for image {id} >= n_images")));
                }
                if list.ids.last().is_some_and(|&prev| prev > id) {
                    return Err(Error::format("index file", "posting list not sorted by image id"));
                }
                r.bytes(&mut buf, "signature")?;
                let sig = BinarySignature::from_bytes(config.bits, &buf)?;
                list.ids.push(id);
                list.sigs.extend_from_slice(sig.words());
            }
            postings.push(list);
        }
        let norms = r.f32_vec(n_images as usize, "norms")?;
        let idf = r.f32_vec(config.k as usize, "idf")?;
        r.finish()?;
        Ok(Self {
            config,
            n_images,
            words_per_sig,
            postings,
            idf,
            norms,
            featureless: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(bits: &[u8]) -> BinarySignature {
        BinarySignature::from_bits(bits.iter().map(|&b| b == 1))
    }

    fn feat(image_id: ImageId, word: WordId, s: &[u8]) -> QuantizedFeature {
        QuantizedFeature {
            image_id,
            word,
            signature: sig(s),
        }
    }

    fn cfg(k: u32) -> IndexConfig {
        IndexConfig {
            k,
            bits: 4,
            h_t: 2,
            sigma: 2.0,
        }
    }

    #[test]
    fn idf_of_disjoint_and_shared_words() {
        let feats = vec![feat(0, 0, &[0; 4]), feat(1, 1, &[0; 4])];
        let idx = build_index(&feats, 2, cfg(3)).unwrap();
        assert_eq!(idx.idf(0), (2f64).ln() as f32);
        assert_eq!(idx.idf(1), (2f64).ln() as f32);
        assert_eq!(idx.idf(2), 0.0);

        let feats = vec![feat(0, 0, &[0; 4]), feat(1, 0, &[0; 4]), feat(1, 1, &[0; 4])];
        let idx = build_index(&feats, 2, cfg(2)).unwrap();
        assert_eq!(idx.idf(0), 0.0);
        let s = idx
            .score_candidates(&[feat(9, 0, &[0; 4])], &[0, 1], ScoringOptions::default())
            .unwrap();
        assert_eq!(s.scores.get(0), 0.0);
        assert_eq!(s.scores.get(1), 0.0);
    }

    #[test]
    fn empty_database_and_featureless_images() {
        assert!(matches!(build_index(&[], 0, cfg(2)), Err(Error::EmptyDatabase)));
        let idx = build_index(&[feat(0, 1, &[0; 4])], 3, cfg(2)).unwrap();
        assert_eq!(idx.featureless_images(), &[1, 2]);
        assert_eq!(idx.norm(1), 1.0);
    }

    #[test]
    fn postings_sorted_by_image() {
        let feats = vec![feat(2, 0, &[0; 4]), feat(0, 0, &[1; 4]), feat(1, 0, &[0; 4]), feat(0, 0, &[0; 4])];
        let idx = build_index(&feats, 3, cfg(1)).unwrap();
        assert_eq!(idx.posting_ids(0), &[0, 0, 1, 2]);
    }

    #[test]
    fn self_query_scores_highest_and_outsiders_absent() {
        let feats = vec![
            feat(0, 0, &[0, 0, 0, 0]),
            feat(0, 1, &[1, 1, 0, 0]),
            feat(1, 0, &[1, 1, 1, 1]),
            feat(1, 2, &[0, 0, 0, 0]),
            feat(2, 3, &[0, 0, 0, 0]),
        ];
        let idx = build_index(&feats, 3, cfg(4)).unwrap();
        let q: Vec<_> = feats[..2].iter().cloned().collect();
        let s = idx.score_candidates(&q, &[0, 1, 2], ScoringOptions::default()).unwrap();
        assert!(s.scores.get(0) > 0.0);
        // Image 1 shares word 0 but at Hamming distance 4 > 2.
        assert!(!s.scores.contains(1));
        assert!(!s.scores.contains(2));
        assert_eq!(s.comparisons, 3);
    }

    #[test]
    fn query_config_mismatch() {
        let idx = build_index(&[feat(0, 0, &[0; 4])], 1, cfg(1)).unwrap();
        let bad_word = feat(0, 5, &[0; 4]);
        let bad_bits = feat(0, 0, &[0; 8]);
        assert!(matches!(
            idx.score_candidates(&[bad_word], &[0], ScoringOptions::default()),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(idx.score_candidates(&[bad_bits], &[0], ScoringOptions::default()).is_err());
        assert!(matches!(
            idx.score_candidates(&[], &[3], ScoringOptions::default()),
            Err(Error::UnknownImage(3))
        ));
    }

    #[test]
    fn memory_report_arithmetic() {
        let feats: Vec<_> = (0..1000)
            .map(|i| QuantizedFeature {
                image_id: i % 10,
                word: i % 7,
                signature: BinarySignature::zeros(128),
            })
            .collect();
        let idx = build_index(
            &feats,
            10,
            IndexConfig {
                k: 8,
                ..IndexConfig::default()
            },
        )
        .unwrap();
        let m = idx.memory_report();
        assert_eq!(m.posting_bytes, 20_000);
        assert_eq!(idx.posting_bytes_for_word(7), 0);
        assert_eq!(m.idf_bytes, 32);
        assert_eq!(m.norm_bytes, 40);
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, m.total_bytes);
    }

    #[test]
    fn index_file_roundtrip() {
        let feats = vec![
            feat(0, 0, &[1, 0, 1, 1]),
            feat(1, 0, &[0, 1, 0, 0]),
            feat(1, 1, &[1, 1, 1, 1]),
        ];
        let idx = build_index(&feats, 3, cfg(2)).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let mut back = InvertedIndex::read_from(&buf[..]).unwrap();
        back.featureless = idx.featureless.clone();
        assert_eq!(back, idx);
        assert!(InvertedIndex::read_from(&buf[..buf.len() - 2]).is_err());
    }
}
