//! Holistic color layer: PPM decoding, HSV histograms, cosine ranking and
//! top-K candidate filtering.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{usize_to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::ImageId;

/// RGB image with 8-bit channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Serializes as binary P6 with maxval 255.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Parses the next header number, returning it with its start offset.
    fn number(&mut self, what: &str) -> Result<(u32, usize)> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| Error::Decode {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary (P6) PPM with maxval 255. Pixel values are returned as
/// stored.
pub fn decode_ppm(bytes: &[u8]) -> Result<PixelImage> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("missing magic number"));
    }
    if &bytes[..2] != b"P6" {
        return Err(cur.err(format!(
            "unsupported magic {:?}, only binary P6 is accepted",
            String::from_utf8_lossy(&bytes[..2])
        )));
    }
    cur.pos = 2;
    let (width, _) = cur.number("width")?;
    let (height, _) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Decode {
            offset: maxval_at,
            reason: format!("maxval {maxval} is not 255"),
        });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(cur.err(format!("zero image dimension {width}x{height}")));
    }
    let need = width as usize * height as usize * 3;
    let data = &bytes[cur.pos..];
    if data.len() < need {
        return Err(Error::Decode {
            offset: bytes.len(),
            reason: format!(
                "truncated pixel data: need {need} bytes from offset {}, have {}",
                cur.pos,
                data.len()
            ),
        });
    }
    PixelImage::new(width, height, data[..need].to_vec())
}

/// Hexagonal-cone RGB to HSV. Returns H in [0,360), S and V in [0,1].
/// Achromatic pixels get H = 0 and S = 0.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta == 0.0 {
        return (0.0, 0.0, v);
    }
    let s = delta / max;
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = 60.0 * sector;
    (if h >= 360.0 { 0.0 } else { h }, s, v)
}

/// Inverse of [`rgb_to_hsv`], rounding to the nearest 8-bit value.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r1), to8(g1), to8(b1)]
}

/// Bin counts along H, S and V.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsvDims {
    pub h: u32,
    pub s: u32,
    pub v: u32,
}

impl HsvDims {
    pub fn new(h: u32, s: u32, v: u32) -> Result<Self> {
        if h == 0 || s == 0 || v == 0 {
            return Err(Error::Parameter(format!(
                "histogram dims must be >= 1, got ({h},{s},{v})"
            )));
        }
        Ok(Self { h, s, v })
    }

    pub fn len(&self) -> usize {
        self.h as usize * self.s as usize * self.v as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat bin index of an HSV triple; S = 1 and V = 1 land in the top bin.
    pub fn bin_of(&self, h: f64, s: f64, v: f64) -> usize {
        let q = |x: f64, n: u32| ((x * n as f64).floor() as i64).clamp(0, n as i64 - 1) as usize;
        let hb = q(h / 360.0, self.h);
        let sb = q(s, self.s);
        let vb = q(v, self.v);
        (hb * self.s as usize + sb) * self.v as usize + vb
    }
}

impl Default for HsvDims {
    fn default() -> Self {
        Self { h: 20, s: 10, v: 5 }
    }
}

/// P-dimensional color histogram, P = h·s·v.
#[derive(Clone, Debug, PartialEq)]
pub struct HsvHistogram {
    dims: HsvDims,
    bins: Vec<f64>,
}

impl HsvHistogram {
    pub fn from_bins(dims: HsvDims, bins: Vec<f64>) -> Result<Self> {
        if bins.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                actual: bins.len(),
            });
        }
        if let Some(i) = bins.iter().position(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Parameter(format!(
                "histogram bin {i} is negative or non-finite"
            )));
        }
        Ok(Self { dims, bins })
    }

    pub fn dims(&self) -> HsvDims {
        self.dims
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// Raw per-bin pixel counts. Normalization is a separate step.
pub fn hsv_histogram(img: &PixelImage, dims: HsvDims) -> HsvHistogram {
    let mut bins = vec![0.0; dims.len()];
    for px in img.rgb() {
        let (h, s, v) = rgb_to_hsv(px);
        bins[dims.bin_of(h, s, v)] += 1.0;
    }
    HsvHistogram { dims, bins }
}

/// l1-normalizes, then raises every bin to `alpha` (square-root scaling at
/// alpha = 0.5).
pub fn normalize_histogram(h: &HsvHistogram, alpha: f64) -> Result<HsvHistogram> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0,1], got {alpha}")));
    }
    let mass: f64 = h.bins.iter().sum();
    if mass <= 0.0 {
        return Err(Error::ZeroVector);
    }
    let bins = h
        .bins
        .iter()
        .map(|&b| {
            let l1 = b / mass;
            if alpha == 0.5 {
                l1.sqrt()
            } else {
                l1.abs().powf(alpha)
            }
        })
        .collect();
    Ok(HsvHistogram { dims: h.dims, bins })
}

/// Cosine similarity between two histograms.
pub fn cosine_score(q: &HsvHistogram, d: &HsvHistogram) -> Result<f64> {
    if q.bins.len() != d.bins.len() {
        return Err(Error::DimensionMismatch {
            expected: q.bins.len(),
            actual: d.bins.len(),
        });
    }
    let mut dot = 0.0;
    let mut qq = 0.0;
    let mut dd = 0.0;
    for (&a, &b) in q.bins.iter().zip(&d.bins) {
        dot += a * b;
        qq += a * a;
        dd += b * b;
    }
    if qq == 0.0 || dd == 0.0 {
        return Err(Error::ZeroVector);
    }
    // Multiplying the norms keeps the expression symmetric in (q, d).
    Ok((dot / (qq.sqrt() * dd.sqrt())).min(1.0))
}

/// Descending order by score, ascending image id on ties.
pub(crate) fn by_score_desc(a: &(ImageId, f64), b: &(ImageId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Holistic scores of every database image against one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct HolisticScoreList {
    entries: Vec<(ImageId, f64)>,
}

impl HolisticScoreList {
    /// Builds a list from unsorted entries, applying the canonical order.
    pub fn from_unsorted(mut entries: Vec<(ImageId, f64)>) -> Self {
        entries.sort_by(by_score_desc);
        Self { entries }
    }

    pub fn entries(&self) -> &[(ImageId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Keeps the best `k` entries; `k` larger than the list is clamped.
    pub fn filter_top_k(&self, k: usize) -> Result<HolisticScoreList> {
        if k == 0 {
            return Err(Error::Parameter("candidate count K must be >= 1".into()));
        }
        let n = k.min(self.entries.len());
        Ok(HolisticScoreList {
            entries: self.entries[..n].to_vec(),
        })
    }
}

/// Scores the whole database against `q`. Image ids are database positions.
pub fn rank_database(q: &HsvHistogram, db: &[HsvHistogram]) -> Result<HolisticScoreList> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let entries = db
        .par_iter()
        .enumerate()
        .map(|(i, d)| Ok((i as ImageId, cosine_score(q, d)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HolisticScoreList::from_unsorted(entries))
}

/// See [`HolisticScoreList::filter_top_k`].
pub fn filter_top_k(scores: &HolisticScoreList, k: usize) -> Result<HolisticScoreList> {
    scores.filter_top_k(k)
}

const HIST_MAGIC: &[u8; 4] = b"C2FH";

/// Writes histograms as `C2FH`, u32 P, u32 count, count×P f32.
pub fn write_histograms<W: Write>(out: W, hists: &[HsvHistogram]) -> Result<()> {
    let p = hists.first().map_or(0, |h| h.len());
    let mut w = Writer::new(out);
    w.magic(HIST_MAGIC)?;
    w.u32(usize_to_u32(p, "P")?)?;
    w.u32(usize_to_u32(hists.len(), "count")?)?;
    for h in hists {
        if h.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: h.len(),
            });
        }
        for &b in &h.bins {
            w.f32(b as f32)?;
        }
    }
    w.finish()
}

/// Reads a `C2FH` file; `dims` must multiply out to the stored P.
pub fn read_histograms<R: Read>(input: R, dims: HsvDims) -> Result<Vec<HsvHistogram>> {
    let mut r = Reader::new(input, "histogram file");
    r.magic(HIST_MAGIC)?;
    let p = r.u32("P")? as usize;
    let count = r.u32("count")? as usize;
    if count > 0 && p != dims.len() {
        return Err(Error::ConfigMismatch(format!(
            "histogram file has P = {p} but configured dims give {}",
            dims.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let bins = r.f32_vec(p, "bins")?;
        out.push(HsvHistogram::from_bins(
            dims,
            bins.into_iter().map(f64::from).collect(),
        )?);
    }
    r.finish()?;
    Ok(out)
}

/// Sidecar listing one image path per line, in image-id order.
pub fn write_image_list<W: Write>(mut out: W, paths: &[String]) -> Result<()> {
    for p in paths {
        if p.contains('\n') {
            return Err(Error::Parameter(format!("image path {p:?} contains a newline")));
        }
        writeln!(out, "{p}")?;
    }
    Ok(())
}

pub fn read_image_list(text: &str) -> Vec<String> {
    text.lines().map(str::to_owned).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(header: &str, data: &[u8]) -> Vec<u8> {
        let mut v = header.as_bytes().to_vec();
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn decodes_single_red_pixel() {
        let img = decode_ppm(&ppm("P6\n1 1\n255\n", &[255, 0, 0])).unwrap();
        assert_eq!(img, PixelImage::new(1, 1, vec![255, 0, 0]).unwrap());
    }

    #[test]
    fn decodes_black_white_pair_with_comment() {
        let img = decode_ppm(&ppm("P6 # c\n2 1\n255\n", &[0, 0, 0, 255, 255, 255])).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.pixels(), &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn rejects_ascii_ppm() {
        let err = decode_ppm(b"P3\n1 1\n255\n255 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Decode { offset: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_bad_maxval_and_truncation() {
        let err = decode_ppm(&ppm("P6\n1 1\n65535\n", &[0; 6])).unwrap_err();
        assert!(matches!(err, Error::Decode { offset: 7, .. }), "{err}");
        let err = decode_ppm(&ppm("P6\n2 2\n255\n", &[0; 5])).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }));
        assert!(err.to_string().contains("truncated"));
        assert!(decode_ppm(b"P6\n").is_err());
    }

    #[test]
    fn encode_decode_identity() {
        let img = PixelImage::new(2, 2, (0..12).collect()).unwrap();
        assert_eq!(decode_ppm(&img.encode_ppm()).unwrap(), img);
    }

    #[test]
    fn black_image_fills_first_bin() {
        let img = PixelImage::new(2, 2, vec![0; 12]).unwrap();
        let h = hsv_histogram(&img, HsvDims::default());
        assert_eq!(h.bins()[0], 4.0);
        assert_eq!(h.bins().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn white_image_hits_top_value_bin() {
        let img = PixelImage::new(1, 1, vec![255; 3]).unwrap();
        let h = hsv_histogram(&img, HsvDims::default());
        // H = 0, S = 0, V clamped to bin 4.
        assert_eq!(h.bins()[4], 1.0);
    }

    #[test]
    fn red_pixel_bin() {
        let img = PixelImage::new(1, 1, vec![255, 0, 0]).unwrap();
        let dims = HsvDims::default();
        let h = hsv_histogram(&img, dims);
        let expected = 9 * 5 + 4;
        assert_eq!(h.bins()[expected], 1.0);
        assert_eq!(rgb_to_hsv([255, 0, 0]), (0.0, 1.0, 1.0));
    }

    #[test]
    fn hsv_roundtrip_primaries() {
        assert_eq!(rgb_to_hsv([0, 255, 0]), (120.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0, 0, 255]), (240.0, 1.0, 1.0));
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv_to_rgb(0.0, 0.0, 0.5), [128, 128, 128]);
    }

    fn hist(bins: &[f64]) -> HsvHistogram {
        HsvHistogram::from_bins(HsvDims::new(bins.len() as u32, 1, 1).unwrap(), bins.to_vec())
            .unwrap()
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_histogram(&hist(&[1.0, 0.0, 0.0]), 0.5).unwrap();
        assert_eq!(n.bins(), &[1.0, 0.0, 0.0]);
        let n = normalize_histogram(&hist(&[4.0; 4]), 0.5).unwrap();
        assert_eq!(n.bins(), &[0.5; 4]);
        let n = normalize_histogram(&hist(&[9.0, 16.0]), 0.5).unwrap();
        assert!((n.bins()[0] - 0.6).abs() < 1e-12 && (n.bins()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalization_errors() {
        assert!(matches!(
            normalize_histogram(&hist(&[0.0, 0.0]), 0.5),
            Err(Error::ZeroVector)
        ));
        assert!(normalize_histogram(&hist(&[1.0]), 0.0).is_err());
        assert!(normalize_histogram(&hist(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = hist(&[0.6, 0.8]);
        let b = hist(&[0.8, 0.6]);
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_score(&a, &b).unwrap() - 0.96).abs() < 1e-12);
        assert_eq!(cosine_score(&hist(&[1.0, 0.0]), &hist(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine_score(&a, &hist(&[0.0, 0.0])),
            Err(Error::ZeroVector)
        ));
        assert!(cosine_score(&a, &hist(&[1.0])).is_err());
    }

    #[test]
    fn ranking_examples() {
        let q = hist(&[0.6, 0.8, 0.0]);
        let db = vec![
            hist(&[0.8, 0.6, 0.0]),
            hist(&[0.6, 0.8, 0.0]),
            hist(&[0.0, 0.0, 1.0]),
        ];
        let r = rank_database(&q, &db).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_eq!(r.entries()[2], (2, 0.0));
        assert!(rank_database(&q, &[]).is_err());

        let tied = vec![hist(&[1.0, 0.0]), hist(&[0.0, 1.0]), hist(&[0.0, 1.0])];
        let r = rank_database(&hist(&[0.0, 1.0]), &tied).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn top_k_clamps_and_rejects_zero() {
        let r = HolisticScoreList::from_unsorted(vec![(0, 0.5), (1, 0.9), (2, 0.1)]);
        assert_eq!(r.filter_top_k(1).unwrap().entries(), &[(1, 0.9)]);
        assert_eq!(r.filter_top_k(5).unwrap(), r);
        assert!(r.filter_top_k(0).is_err());
    }

    #[test]
    fn histogram_file_roundtrip_and_errors() {
        let dims = HsvDims::new(2, 1, 1).unwrap();
        let hs = vec![
            HsvHistogram::from_bins(dims, vec![0.5, 0.25]).unwrap(),
            HsvHistogram::from_bins(dims, vec![1.0, 0.0]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_histograms(&mut buf, &hs).unwrap();
        assert_eq!(&buf[..4], b"C2FH");
        assert_eq!(buf.len(), 12 + 2 * 2 * 4);
        assert_eq!(read_histograms(&buf[..], dims).unwrap(), hs);
        assert!(read_histograms(&buf[..buf.len() - 1], dims).is_err());
        assert!(read_histograms(&buf[..], HsvDims::default()).is_err());
    }
}
