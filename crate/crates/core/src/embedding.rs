//! Hamming embedding: binary signatures that locate a descriptor inside its
//! Voronoi cell.
//!
//! A seeded random orthonormal projection maps each descriptor to `d_b`
//! coordinates. Each visual word stores the per-coordinate median of the
//! training descriptors assigned to it, and bit `i` of a signature is set when
//! the projected coordinate is strictly above that word's median.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use crate::binio::{usize_to_u32, Reader, Writer};
use crate::codebook::{Codebook, LocalDescriptor};
use crate::error::{Error, Result};
use crate::index::QuantizedFeature;
use crate::WordId;

/// Packed bit vector; bit `i` lives in word `i / 64`, position `i % 64`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinarySignature {
    bits: u32,
    words: SmallVec<[u64; 2]>,
}

impl BinarySignature {
    pub fn zeros(bits: u32) -> Self {
        Self {
            bits,
            words: SmallVec::from_elem(0, (bits as usize).div_ceil(64)),
        }
    }

    /// Builds a signature from a bit iterator, bit 0 first.
    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let bools: Vec<bool> = bits.into_iter().collect();
        let mut sig = Self::zeros(bools.len() as u32);
        for (i, b) in bools.into_iter().enumerate() {
            if b {
                sig.set(i as u32, true);
            }
        }
        sig
    }

    pub(crate) fn from_words(bits: u32, words: &[u64]) -> Self {
        debug_assert_eq!(words.len(), (bits as usize).div_ceil(64));
        Self {
            bits,
            words: SmallVec::from_slice(words),
        }
    }

    /// Little-endian bytes, `ceil(bits / 8)` long.
    pub fn from_bytes(bits: u32, bytes: &[u8]) -> Result<Self> {
        let nbytes = (bits as usize).div_ceil(8);
        if bytes.len() != nbytes {
            return Err(Error::DimensionMismatch {
                expected: nbytes,
                actual: bytes.len(),
            });
        }
        let mut sig = Self::zeros(bits);
        for (i, &b) in bytes.iter().enumerate() {
            sig.words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        if bits % 64 != 0 {
            let mask = (1u64 << (bits % 64)) - 1;
            if sig.words.last().is_some_and(|w| w & !mask != 0) {
                return Err(Error::format("signature", "padding bits are set"));
            }
        }
        Ok(sig)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = (self.bits as usize).div_ceil(8);
        (0..nbytes)
            .map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8)
            .collect()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: u32) -> bool {
        assert!(i < self.bits, "bit {i} out of range {}", self.bits);
        self.words[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: u32, value: bool) {
        assert!(i < self.bits, "bit {i} out of range {}", self.bits);
        let w = &mut self.words[(i / 64) as usize];
        if value {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    pub fn flip(&mut self, i: u32) {
        let v = self.get(i);
        self.set(i, !v);
    }

    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.bits {
            out.flip(i);
        }
        out
    }
}

impl fmt::Debug for BinarySignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinarySignature({}b:", self.bits)?;
        for i in 0..self.bits {
            write!(f, "{}", self.get(i) as u8)?;
        }
        write!(f, ")")
    }
}

/// Popcount of the XOR of two packed word slices.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

pub fn hamming(a: &BinarySignature, b: &BinarySignature) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::DimensionMismatch {
            expected: a.bits as usize,
            actual: b.bits as usize,
        });
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// True when both features fall in the same word and their signatures are
/// within `h_t` bits of each other.
pub fn matches(x: &QuantizedFeature, y: &QuantizedFeature, h_t: u32) -> bool {
    x.word == y.word
        && x.signature.bits == y.signature.bits
        && hamming_words(&x.signature.words, &y.signature.words) <= h_t
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeParameters {
    dim: usize,
    bits: usize,
    k: usize,
    projection: Vec<f32>,
    thresholds: Vec<f32>,
    seed: u64,
}

impl HeParameters {
    /// Assembles parameters from explicit parts. Projection rows must be
    /// orthonormal.
    pub fn from_parts(
        dim: usize,
        bits: usize,
        projection: Vec<f32>,
        thresholds: Vec<f32>,
        seed: u64,
    ) -> Result<Self> {
        if bits == 0 || bits > dim {
            return Err(Error::Parameter(format!(
                "signature length {bits} must be in 1..={dim}"
            )));
        }
        if projection.len() != bits * dim {
            return Err(Error::DimensionMismatch {
                expected: bits * dim,
                actual: projection.len(),
            });
        }
        if thresholds.is_empty() || thresholds.len() % bits != 0 {
            return Err(Error::Parameter(format!(
                "{} thresholds do not form rows of {bits}",
                thresholds.len()
            )));
        }
        if projection.iter().chain(&thresholds).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite HE parameter".into()));
        }
        let he = Self {
            dim,
            bits,
            k: thresholds.len() / bits,
            projection,
            thresholds,
            seed,
        };
        let err = he.orthonormality_error();
        if err > 1e-5 {
            return Err(Error::Parameter(format!(
                "projection rows are not orthonormal (max deviation {err:.2e})"
            )));
        }
        Ok(he)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection_row(&self, i: usize) -> &[f32] {
        &self.projection[i * self.dim..(i + 1) * self.dim]
    }

    pub fn thresholds(&self, word: WordId) -> &[f32] {
        let w = word as usize;
        &self.thresholds[w * self.bits..(w + 1) * self.bits]
    }

    /// Largest deviation of the projection Gram matrix from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0f64;
        for i in 0..self.bits {
            for j in i..self.bits {
                let dot: f64 = self
                    .projection_row(i)
                    .iter()
                    .zip(self.projection_row(j))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Projected coordinates, rounded to f32 so thresholds compare exactly.
    pub fn project(&self, values: &[f32]) -> Result<Vec<f32>> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        Ok(self
            .projection
            .chunks_exact(self.dim)
            .map(|row| {
                row.iter()
                    .zip(values)
                    .map(|(&p, &v)| p as f64 * v as f64)
                    .sum::<f64>() as f32
            })
            .collect())
    }

    pub fn sign(&self, values: &[f32], word: WordId) -> Result<BinarySignature> {
        if word as usize >= self.k {
            return Err(Error::Parameter(format!(
                "word {word} outside vocabulary of {}",
                self.k
            )));
        }
        let projected = self.project(values)?;
        Ok(BinarySignature::from_bits(
            projected
                .iter()
                .zip(self.thresholds(word))
                .map(|(p, t)| p > t),
        ))
    }
}

/// See [`HeParameters::sign`].
pub fn sign(d: &LocalDescriptor, word: WordId, he: &HeParameters) -> Result<BinarySignature> {
    he.sign(&d.values, word)
}

/// First `bits` rows of the Q factor of a seeded `dim × dim` Gaussian matrix.
pub fn random_orthonormal_rows(dim: usize, bits: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(dim * dim);
    for _ in 0..dim * dim {
        entries.push(rng.sample::<f64, _>(StandardNormal));
    }
    let gaussian = DMatrix::from_row_slice(dim, dim, &entries);
    let q = gaussian.qr().q();
    let mut out = Vec::with_capacity(bits * dim);
    for i in 0..bits {
        out.extend(q.row(i).iter().map(|&v| v as f32));
    }
    out
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        ((values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0) as f32
    }
}

/// Learns the projection and per-word median thresholds. Training
/// descriptors are assigned to their nearest word; words that receive none
/// keep all-zero thresholds.
pub fn train_he(
    cb: &Codebook,
    training: &[LocalDescriptor],
    bits: usize,
    seed: u64,
) -> Result<HeParameters> {
    let dim = cb.dim();
    if bits == 0 || bits > dim {
        return Err(Error::Parameter(format!(
            "signature length {bits} exceeds descriptor dimension {dim}"
        )));
    }
    let projection = random_orthonormal_rows(dim, bits, seed);
    let mut he = HeParameters {
        dim,
        bits,
        k: cb.k(),
        projection,
        thresholds: vec![0.0; cb.k() * bits],
        seed,
    };

    let mut per_word: Vec<Vec<Vec<f32>>> = vec![Vec::new(); cb.k()];
    for d in training {
        let w = cb.quantize(&d.values)?;
        per_word[w as usize].push(he.project(&d.values)?);
    }
    let mut column = Vec::new();
    for (w, rows) in per_word.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        for i in 0..bits {
            column.clear();
            column.extend(rows.iter().map(|r| r[i]));
            he.thresholds[w * bits + i] = median(&mut column);
        }
    }
    Ok(he)
}

const HE_MAGIC: &[u8; 4] = b"C2FE";

impl HeParameters {
    /// Writes `C2FE`: u32 D, u32 d_b, u32 k, projection, thresholds, u64 seed.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.magic(HE_MAGIC)?;
        w.u32(usize_to_u32(self.dim, "D")?)?;
        w.u32(usize_to_u32(self.bits, "d_b")?)?;
        w.u32(usize_to_u32(self.k, "k")?)?;
        w.f32_slice(&self.projection)?;
        w.f32_slice(&self.thresholds)?;
        w.u64(self.seed)?;
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "HE parameter file");
        r.magic(HE_MAGIC)?;
        let dim = r.u32("D")? as usize;
        let bits = r.u32("d_b")? as usize;
        let k = r.u32("k")? as usize;
        let projection = r.f32_vec(bits * dim, "projection")?;
        let thresholds = r.f32_vec(k * bits, "thresholds")?;
        let seed = r.u64("seed")?;
        r.finish()?;
        Self::from_parts(dim, bits, projection, thresholds, seed)
    }
}
