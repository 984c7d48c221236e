//! Seeded synthetic corpora with planted groups.
//!
//! Every group shares a color palette (so the holistic filter can find it)
//! and a set of base descriptors, each a cluster center plus a group-specific
//! offset inside the cluster's cell (so Hamming signatures can tell groups
//! apart). Distractors get their own palettes and may copy some base
//! descriptors from a random group, which makes them locally confusable.
//!
//! Each image draws from its own random stream, so a corpus with more
//! distractors contains the smaller corpus as a prefix.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codebook::{write_descriptors, LocalDescriptor};
use crate::error::{Error, Result};
use crate::eval::{GroundTruth, Protocol};
use crate::fusion::PipelineConfig;
use crate::holistic::{hsv_to_rgb, write_image_list, HsvDims, PixelImage};
use crate::ImageId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_groups: usize,
    pub group_size: usize,
    pub n_distractors: usize,
    pub seed: u64,
    /// Probability in [0,1] that a pixel comes from the image's palette
    /// rather than a uniformly random color.
    pub separation: f64,
    /// Standard deviation of per-image descriptor noise.
    pub noise: f64,
    /// Fraction of each distractor's descriptors copied from a random group.
    pub confusion: f64,
    /// Number of distinct group palettes; 0 gives every group its own.
    pub palette_pool: usize,
    /// Probability that a distractor borrows a group palette.
    pub distractor_palette_share: f64,
    pub image_side: u32,
    pub descriptors_per_image: usize,
    pub descriptor_dim: usize,
    pub n_clusters: usize,
    /// Spread of group offsets inside a cluster cell.
    pub cell_spread: f64,
    pub hsv_dims: HsvDims,
    pub protocol: Protocol,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_groups: 8,
            group_size: 4,
            n_distractors: 0,
            seed: 7,
            separation: 0.8,
            noise: 0.01,
            confusion: 0.3,
            palette_pool: 0,
            distractor_palette_share: 0.0,
            image_side: 16,
            descriptors_per_image: 24,
            descriptor_dim: 128,
            n_clusters: 32,
            cell_spread: 0.08,
            hsv_dims: HsvDims::default(),
            protocol: Protocol::HolidaysLike,
        }
    }
}

/// Seed of the reference fixture.
pub const REFERENCE_SEED: u64 = 7;

/// Planted groups in the reference fixture; every four of them share a palette.
pub const REFERENCE_GROUPS: usize = 32;

/// The reference fixture with `distractor_multiple` distractors per planted
/// image. Groups of four share palettes, a third of the distractors borrow a
/// group palette, and most distractor descriptors are copied from a group.
pub fn reference_spec(distractor_multiple: usize) -> SynthSpec {
    let planted = REFERENCE_GROUPS * 4;
    SynthSpec {
        n_groups: REFERENCE_GROUPS,
        group_size: 4,
        n_distractors: distractor_multiple * planted,
        seed: REFERENCE_SEED,
        separation: 0.5,
        noise: 0.03,
        confusion: 0.8,
        palette_pool: REFERENCE_GROUPS / 4,
        distractor_palette_share: 0.3,
        cell_spread: 0.3,
        ..SynthSpec::default()
    }
}

/// Pipeline settings for the reference fixture: defaults with a 64-word
/// vocabulary.
pub fn reference_config() -> PipelineConfig {
    PipelineConfig {
        vocab_size: 64,
        ..PipelineConfig::default()
    }
}

const PALETTE_COLORS: usize = 3;

// Stream ids keep entities independent of each other's draw counts.
const STREAM_GLOBAL: u64 = 0;
const STREAM_GROUP: u64 = 1 << 40;
const STREAM_IMAGE: u64 = 2 << 40;
const STREAM_DISTRACTOR: u64 = 3 << 40;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Parameter("group_size must be >= 2".into()));
        }
        if self.n_groups == 0 {
            return Err(Error::Parameter("need at least one group".into()));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("confusion", self.confusion),
            ("distractor_palette_share", self.distractor_palette_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if !(self.noise >= 0.0 && self.cell_spread >= 0.0) {
            return Err(Error::Parameter("noise and cell_spread must be >= 0".into()));
        }
        if self.image_side == 0 || self.descriptors_per_image == 0 || self.descriptor_dim == 0 || self.n_clusters == 0 {
            return Err(Error::Parameter("image_side, descriptors_per_image, descriptor_dim and n_clusters must be >= 1".into()));
        }
        if self.protocol == Protocol::UkbenchLike && self.group_size != 4 {
            return Err(Error::Protocol("groups-of-4 protocol needs group_size = 4".into()));
        }
        let needed = (self.group_palettes() + 1) * PALETTE_COLORS;
        let available = palette_cells(self.hsv_dims).len();
        if needed > available {
            return Err(Error::Parameter(format!(
                "{} group palettes need {needed} color cells, only {available} available",
                self.group_palettes()
            )));
        }
        Ok(())
    }

    fn group_palettes(&self) -> usize {
        if self.palette_pool == 0 {
            self.n_groups
        } else {
            self.palette_pool.min(self.n_groups)
        }
    }

    pub fn n_images(&self) -> usize {
        self.n_groups * self.group_size + self.n_distractors
    }
}

/// Generated corpus. Group images come first, group by group; distractors
/// follow.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub images: Vec<PixelImage>,
    pub descriptors: Vec<LocalDescriptor>,
    pub ground_truth: GroundTruth,
    pub protocol: Protocol,
    /// Group of every image; `None` for distractors.
    pub group_of: Vec<Option<usize>>,
}

impl SynthCorpus {
    pub fn image_names(&self) -> Vec<String> {
        (0..self.images.len()).map(|i| format!("img_{i:06}.ppm")).collect()
    }

    /// Writes `images/*.ppm`, `descriptors.c2fd`, `ground_truth.txt` and
    /// `images.txt` under `dir`.
    pub fn write_to_dir(&self, dir: &Path, descriptor_dim: usize) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir)?;
        let names = self.image_names();
        for (img, name) in self.images.iter().zip(&names) {
            let path = images_dir.join(name);
            fs::write(&path, img.encode_ppm()).map_err(|e| Error::from(e).at(&path))?;
        }
        let mut buf = Vec::new();
        write_descriptors(&mut buf, descriptor_dim, &self.descriptors)?;
        fs::write(dir.join("descriptors.c2fd"), buf)?;
        fs::write(dir.join("ground_truth.txt"), self.ground_truth.to_text())?;
        let mut list = Vec::new();
        let rel: Vec<String> = names.iter().map(|n| format!("images/{n}")).collect();
        write_image_list(&mut list, &rel)?;
        fs::write(dir.join("images.txt"), list)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Cell {
    h: u32,
    s: u32,
    v: u32,
}

/// Color cells whose saturation and value are high enough for the hue to
/// survive 8-bit rounding.
fn palette_cells(dims: HsvDims) -> Vec<Cell> {
    let floor = |n: u32| (n / 4).max(u32::from(n > 1));
    let mut out = Vec::new();
    for h in 0..dims.h {
        for s in floor(dims.s)..dims.s {
            for v in floor(dims.v)..dims.v {
                out.push(Cell { h, s, v });
            }
        }
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn cell_color(cell: Cell, dims: HsvDims, rng: &mut ChaCha8Rng) -> [u8; 3] {
    // Stay in the middle of the cell so rounding cannot move the pixel out.
    let mut jitter = || rng.random_range(0.3..0.7);
    let h = (cell.h as f64 + jitter()) / dims.h as f64 * 360.0;
    let s = (cell.s as f64 + jitter()) / dims.s as f64;
    let v = (cell.v as f64 + jitter()) / dims.v as f64;
    hsv_to_rgb(h, s.min(1.0), v.min(1.0))
}

struct Palette {
    cells: [Cell; PALETTE_COLORS],
    weights: [f64; PALETTE_COLORS],
}

fn draw_palette(cells: [Cell; PALETTE_COLORS], rng: &mut ChaCha8Rng) -> Palette {
    Palette {
        cells,
        weights: [0; PALETTE_COLORS].map(|_| rng.random_range(0.5..1.5)),
    }
}

fn draw_image(
    palette: &Palette,
    spec: &SynthSpec,
    all_cells: &[Cell],
    rng: &mut ChaCha8Rng,
) -> Result<PixelImage> {
    let weights: Vec<f64> = palette
        .weights
        .iter()
        .map(|w| w * rng.random_range(0.7..1.3))
        .collect();
    let total: f64 = weights.iter().sum();
    let n = (spec.image_side * spec.image_side) as usize;
    let mut pixels = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let cell = if rng.random::<f64>() < spec.separation {
            let mut t = rng.random::<f64>() * total;
            let mut pick = PALETTE_COLORS - 1;
            for (i, w) in weights.iter().enumerate() {
                if t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            palette.cells[pick]
        } else {
            all_cells[rng.random_range(0..all_cells.len())]
        };
        pixels.extend_from_slice(&cell_color(cell, spec.hsv_dims, rng));
    }
    PixelImage::new(spec.image_side, spec.image_side, pixels)
}

fn perturb(base: &[f32], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    base.iter()
        .map(|&b| {
            let n = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            ((b as f64 + n).max(0.0)) as f32
        })
        .collect()
}

fn descriptor(image_id: ImageId, values: Vec<f32>, side: u32, rng: &mut ChaCha8Rng) -> LocalDescriptor {
    LocalDescriptor {
        image_id,
        keypoint: [
            rng.random_range(0.0..side as f32),
            rng.random_range(0.0..side as f32),
            1.0,
        ],
        values,
    }
}

/// Generates a corpus. Identical specs give bit-identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let dims = spec.hsv_dims;
    let mut global = rng_for(spec.seed, STREAM_GLOBAL);

    let mut cells = palette_cells(dims);
    // Fisher-Yates with the global stream.
    for i in (1..cells.len()).rev() {
        let j = global.random_range(0..=i);
        cells.swap(i, j);
    }
    let n_palettes = spec.group_palettes();
    let (group_cells, spare_cells) = cells.split_at(n_palettes * PALETTE_COLORS);
    let all_cells = palette_cells(dims);

    let centers: Vec<Vec<f32>> = (0..spec.n_clusters)
        .map(|_| {
            (0..spec.descriptor_dim)
                .map(|_| {
                    if global.random::<f64>() < 0.125 {
                        global.random_range(0.5..1.0)
                    } else {
                        global.random_range(0.0..0.05)
                    }
                })
                .collect()
        })
        .collect();

    let offset = Normal::new(0.0, spec.cell_spread.max(f64::MIN_POSITIVE)).expect("valid spread");
    let mut palettes = Vec::with_capacity(spec.n_groups);
    let mut bases: Vec<Vec<Vec<f32>>> = Vec::with_capacity(spec.n_groups);
    for g in 0..spec.n_groups {
        let mut rng = rng_for(spec.seed, STREAM_GROUP + g as u64);
        let p = g % n_palettes;
        let chosen = [0, 1, 2].map(|i| group_cells[p * PALETTE_COLORS + i]);
        palettes.push(draw_palette(chosen, &mut rng));
        let base = (0..spec.descriptors_per_image)
            .map(|_| {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter()
                    .map(|&v| {
                        let o = if spec.cell_spread > 0.0 { offset.sample(&mut rng) } else { 0.0 };
                        (v as f64 + o).max(0.0) as f32
                    })
                    .collect()
            })
            .collect();
        bases.push(base);
    }

    let mut images = Vec::with_capacity(spec.n_images());
    let mut descriptors = Vec::with_capacity(spec.n_images() * spec.descriptors_per_image);
    let mut group_of = Vec::with_capacity(spec.n_images());
    let mut gt = GroundTruth::new();

    for g in 0..spec.n_groups {
        let first = (g * spec.group_size) as ImageId;
        let members: Vec<ImageId> = (first..first + spec.group_size as ImageId).collect();
        match spec.protocol {
            Protocol::HolidaysLike => gt.insert(first, members[1..].iter().copied()),
            Protocol::UkbenchLike => {
                for &m in &members {
                    gt.insert(m, members.iter().copied());
                }
            }
        }
        for &id in &members {
            let mut rng = rng_for(spec.seed, STREAM_IMAGE + id as u64);
            images.push(draw_image(&palettes[g], spec, &all_cells, &mut rng)?);
            for b in &bases[g] {
                let values = perturb(b, spec.noise, &mut rng);
                descriptors.push(descriptor(id, values, spec.image_side, &mut rng));
            }
            group_of.push(Some(g));
        }
    }

    let first_distractor = spec.n_groups * spec.group_size;
    for i in 0..spec.n_distractors {
        let id = (first_distractor + i) as ImageId;
        let mut rng = rng_for(spec.seed, STREAM_DISTRACTOR + i as u64);
        let palette = if rng.random::<f64>() < spec.distractor_palette_share {
            let g = rng.random_range(0..spec.n_groups);
            draw_palette(palettes[g].cells, &mut rng)
        } else {
            let own = [0; PALETTE_COLORS].map(|_| spare_cells[rng.random_range(0..spare_cells.len())]);
            draw_palette(own, &mut rng)
        };
        images.push(draw_image(&palette, spec, &all_cells, &mut rng)?);
        let mimic = rng.random_range(0..spec.n_groups);
        for _ in 0..spec.descriptors_per_image {
            let base: Vec<f32> = if rng.random::<f64>() < spec.confusion {
                bases[mimic][rng.random_range(0..spec.descriptors_per_image)].clone()
            } else {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter()
                    .map(|&v| {
                        let o = if spec.cell_spread > 0.0 { offset.sample(&mut rng) } else { 0.0 };
                        (v as f64 + o).max(0.0) as f32
                    })
                    .collect()
            };
            let values = perturb(&base, spec.noise, &mut rng);
            descriptors.push(descriptor(id, values, spec.image_side, &mut rng));
        }
        group_of.push(None);
    }

    Ok(SynthCorpus {
        images,
        descriptors,
        ground_truth: gt,
        protocol: spec.protocol,
        group_of,
    })
}
