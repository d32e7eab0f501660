//! Procedural manipulation corpus, PNM I/O and robustness degradations.

mod degrade;
mod manifest;
mod pnm;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;

pub use degrade::{
    add_gaussian_noise, gaussian_blur, gaussian_taps, jpeg_like_compress, quant_table, resize_degrade,
    DegradationSpec,
};
pub use manifest::{format_manifest, parse_manifest, read_manifest, write_manifest, ManifestEntry};
pub use pnm::{
    encode_pnm, image_to_pnm, parse_pnm, pnm_to_image, quantize, read_image, read_mask, read_pnm, write_image,
    write_mask, write_pnm, Pnm, PnmKind,
};

/// Smallest canvas side accepted by the generator.
pub const MIN_CANVAS: usize = 32;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    Authentic,
    Splice,
    CopyMove,
    Removal,
}

impl ManipulationKind {
    pub const ALL: [ManipulationKind; 4] = [
        ManipulationKind::Authentic,
        ManipulationKind::Splice,
        ManipulationKind::CopyMove,
        ManipulationKind::Removal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ManipulationKind::Authentic => "authentic",
            ManipulationKind::Splice => "splice",
            ManipulationKind::CopyMove => "copy_move",
            ManipulationKind::Removal => "removal",
        }
    }

    pub fn is_manipulated(self) -> bool {
        self != ManipulationKind::Authentic
    }
}

impl fmt::Display for ManipulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManipulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown manipulation type `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub kind: ManipulationKind,
    pub height: usize,
    pub width: usize,
}

impl SynthSpec {
    pub fn new(kind: ManipulationKind, height: usize, width: usize) -> Self {
        Self { kind, height, width }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMeta {
    pub kind: ManipulationKind,
    pub seed: u64,
    /// Canvas seed, then the donor canvas seed for splices.
    pub source_ids: Vec<u64>,
    pub degradations: Vec<DegradationSpec>,
    /// Region draws used, 1 when the first region was accepted.
    pub attempts: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub meta: SampleMeta,
}

impl Sample {
    /// Applies a degradation to the image; the mask is unchanged.
    pub fn degraded(&self, spec: DegradationSpec, seed: u64) -> Result<Sample> {
        let mut meta = self.meta.clone();
        meta.degradations.push(spec);
        Ok(Sample {
            image: spec.apply(&self.image, seed)?,
            mask: self.mask.clone(),
            meta,
        })
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Seed of item `index` in a corpus rooted at `base`.
pub fn item_seed(base: u64, index: u64) -> u64 {
    stream(base, 1 << 32 | index).next_u64()
}

fn add_grain(img: &mut Tensor, std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std).expect("positive std");
    for v in img.data_mut() {
        *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Optical softening applied to rendered content before grain.
const LENS_SIGMA: f64 = 0.8;

/// Smooth gradient, a few flat shapes and low-frequency waves, softened by
/// a small lens blur.
fn content(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut img = Tensor::zeros([1, 3, h, w]);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let span = (h as f64).hypot(w as f64);
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + ((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / span;
            for c in 0..3 {
                img.set(0, c, y, x, c0[c] + (c1[c] - c0[c]) * t);
            }
        }
    }
    let side = h.min(w) as f64;
    for _ in 0..rng.gen_range(3..=6) {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.08..0.3) * side;
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
        let round = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 - cy, x as f64 - cx);
                let inside = if round { py.hypot(px) <= r } else { py.abs() <= r && px.abs() <= r * 0.7 };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        img.set(0, c, y, x, v);
                    }
                }
            }
        }
    }
    for c in 0..3 {
        let amp = rng.gen_range(0.02..0.05);
        let (fy, fx) = (rng.gen_range(-1.0..1.0) / 16.0, rng.gen_range(-1.0..1.0) / 16.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let v = img.at(0, c, y, x) + amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    gaussian_blur(&img, LENS_SIGMA).expect("positive sigma")
}

/// The untouched procedural image every sample of `seed` starts from.
pub fn canvas(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = stream(seed, 0);
    let mut img = content(&mut rng, height, width);
    let grain = rng.gen_range(0.004..0.012);
    add_grain(&mut img, grain, &mut rng);
    img
}

/// Noise level of inserted content, well above the canvas grain.
fn foreign_grain(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.035..0.06)
}

/// Ellipse or rectangle, possibly clipped by the frame.
fn draw_region(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let side = h.min(w) as f64;
    let (a, b) = (rng.gen_range(0.1..0.25) * side, rng.gen_range(0.1..0.25) * side);
    let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    let phi = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = phi.sin_cos();
    let ellipse = rng.gen_bool(0.6);
    Mask::from_fn(h, w, |y, x| {
        let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        if ellipse {
            let (u, v) = (px * c + py * s, -px * s + py * c);
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        } else {
            px.abs() <= a && py.abs() <= b
        }
    })
}

fn region_ok(m: &Mask) -> bool {
    m.bounding_box().is_some_and(|b| b.height >= 4 && b.width >= 4)
}

/// Copy source offset keeping every source pixel in frame and at least half
/// a region away.
fn copy_offset(rng: &mut ChaCha8Rng, m: &Mask) -> Option<(isize, isize)> {
    let b = m.bounding_box()?;
    let (h, w) = (m.height() as isize, m.width() as isize);
    let (by, bx, bh, bw) = (b.y as isize, b.x as isize, b.height as isize, b.width as isize);
    let valid: Vec<(isize, isize)> = (-by..=h - by - bh)
        .flat_map(|dy| (-bx..=w - bx - bw).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy.abs() * 2 >= bh || dx.abs() * 2 >= bw)
        .collect();
    if valid.is_empty() {
        None
    } else {
        Some(valid[rng.gen_range(0..valid.len())])
    }
}

/// Deterministic sample for `(seed, spec)`.
///
/// Splice pastes a mirrored region of a second, noisier canvas. Copy-move
/// duplicates a region of the same canvas elsewhere. Removal fills the region
/// with a heavily smoothed copy of its surroundings and synthetic grain.
/// Only pixels inside the returned mask differ from [`canvas`].
pub fn synth_sample(seed: u64, spec: SynthSpec) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    if h < MIN_CANVAS || w < MIN_CANVAS {
        return Err(Error::param(format!("canvas {h}x{w} is below {MIN_CANVAS}x{MIN_CANVAS}")));
    }
    let base = canvas(seed, h, w);
    let mut meta = SampleMeta {
        kind: spec.kind,
        seed,
        source_ids: vec![seed],
        degradations: Vec::new(),
        attempts: 0,
    };
    if spec.kind == ManipulationKind::Authentic {
        return Ok(Sample {
            image: base,
            mask: Mask::new(h, w),
            meta,
        });
    }
    for attempt in 1..=MAX_ATTEMPTS {
        let mut rng = stream(seed, attempt);
        let mask = draw_region(&mut rng, h, w);
        if !region_ok(&mask) {
            continue;
        }
        let mut image = base.clone();
        match spec.kind {
            ManipulationKind::Splice => {
                let donor_seed = rng.next_u64();
                let mut donor_rng = stream(donor_seed, 0);
                let mut donor = content(&mut donor_rng, h, w);
                let g = foreign_grain(&mut rng);
                add_grain(&mut donor, g, &mut rng);
                for y in 0..h {
                    for x in 0..w {
                        if mask.get(y, x) {
                            for c in 0..3 {
                                image.set(0, c, y, x, donor.at(0, c, y, w - 1 - x));
                            }
                        }
                    }
                }
                meta.source_ids.push(donor_seed);
            }
            ManipulationKind::CopyMove => {
                let Some((dy, dx)) = copy_offset(&mut rng, &mask) else {
                    continue;
                };
                for y in 0..h {
                    for x in 0..w {
                        if mask.get(y, x) {
                            let (sy, sx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                            for c in 0..3 {
                                image.set(0, c, y, x, base.at(0, c, sy, sx));
                            }
                        }
                    }
                }
            }
            ManipulationKind::Removal => {
                let sigma = h.max(w) as f64 / 16.0;
                let mut fill = gaussian_blur(&base, sigma)?;
                let g = foreign_grain(&mut rng);
                add_grain(&mut fill, g, &mut rng);
                for y in 0..h {
                    for x in 0..w {
                        if mask.get(y, x) {
                            for c in 0..3 {
                                image.set(0, c, y, x, fill.at(0, c, y, x));
                            }
                        }
                    }
                }
            }
            ManipulationKind::Authentic => unreachable!(),
        }
        meta.attempts = attempt;
        return Ok(Sample { image, mask, meta });
    }
    Err(Error::Generation(format!(
        "no usable region for seed {seed} after {MAX_ATTEMPTS} attempts"
    )))
}

/// `count` samples cycling through `kinds`, item `i` seeded by [`item_seed`].
pub fn synth_corpus(base_seed: u64, count: usize, kinds: &[ManipulationKind], height: usize, width: usize) -> Result<Vec<Sample>> {
    if kinds.is_empty() {
        return Err(Error::param("corpus needs at least one manipulation type"));
    }
    (0..count)
        .map(|i| {
            let spec = SynthSpec::new(kinds[i % kinds.len()], height, width);
            synth_sample(item_seed(base_seed, i as u64), spec)
        })
        .collect()
}

/// Writes `images/<id>.ppm` and `masks/<id>.pgm` under `dir`; the entry
/// holds paths relative to `dir`.
pub fn write_sample(dir: &Path, id: &str, sample: &Sample) -> Result<ManifestEntry> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let entry = ManifestEntry {
        id: id.to_string(),
        image_path: Path::new("images").join(format!("{id}.ppm")),
        mask_path: Path::new("masks").join(format!("{id}.pgm")),
        kind: sample.meta.kind,
        seed: sample.meta.seed,
    };
    write_image(&dir.join(&entry.image_path), &sample.image)?;
    write_mask(&dir.join(&entry.mask_path), &sample.mask)?;
    Ok(entry)
}

/// Loads the files of a manifest entry whose paths are already resolved.
pub fn load_entry(entry: &ManifestEntry) -> Result<Sample> {
    let image = read_image(&entry.image_path)?;
    let mask = read_mask(&entry.mask_path)?;
    if image.c() != 3 || image.h() != mask.height() || image.w() != mask.width() {
        return Err(Error::dim(format!(
            "{}: image {:?} does not match mask {}x{}",
            entry.id,
            image.shape(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(Sample {
        image,
        mask,
        meta: SampleMeta {
            kind: entry.kind,
            seed: entry.seed,
            source_ids: vec![entry.seed],
            degradations: Vec::new(),
            attempts: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [ManipulationKind; 3] = [
        ManipulationKind::Splice,
        ManipulationKind::CopyMove,
        ManipulationKind::Removal,
    ];

    #[test]
    fn determinism_and_authentic() {
        for kind in ManipulationKind::ALL {
            let spec = SynthSpec::new(kind, 48, 40);
            assert_eq!(synth_sample(5, spec).unwrap(), synth_sample(5, spec).unwrap());
        }
        let a = synth_sample(8, SynthSpec::new(ManipulationKind::Authentic, 32, 32)).unwrap();
        assert!(a.mask.is_empty());
        assert_eq!(a.image, canvas(8, 32, 32));
        assert_ne!(canvas(8, 32, 32), canvas(9, 32, 32));
        assert!(synth_sample(1, SynthSpec::new(ManipulationKind::Splice, 31, 64)).is_err());
    }

    #[test]
    fn changes_stay_inside_mask() {
        for seed in 0..30u64 {
            for kind in KINDS {
                let s = synth_sample(seed, SynthSpec::new(kind, 64, 64)).unwrap();
                let base = canvas(seed, 64, 64);
                assert!(!s.mask.is_empty());
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let b = s.mask.bounding_box().unwrap();
                assert!(b.height >= 4 && b.width >= 4);
                let mut changed = 0;
                for y in 0..64 {
                    for x in 0..64 {
                        let diff = (0..3).any(|c| s.image.at(0, c, y, x) != base.at(0, c, y, x));
                        if !s.mask.get(y, x) {
                            assert!(!diff, "{kind} seed {seed} changed ({y},{x})");
                        }
                        changed += usize::from(diff);
                    }
                }
                // nearly every masked pixel is actually altered
                assert!(changed * 10 >= s.mask.count() * 9, "{kind} {seed}: {changed}/{}", s.mask.count());
            }
        }
    }

    #[test]
    fn splice_records_donor() {
        let s = synth_sample(3, SynthSpec::new(ManipulationKind::Splice, 64, 64)).unwrap();
        assert_eq!(s.meta.source_ids.len(), 2);
        assert!(s.meta.attempts >= 1);
    }

    #[test]
    fn corpus_and_files() {
        let corpus = synth_corpus(11, 6, &KINDS, 32, 32).unwrap();
        assert_eq!(corpus[4].meta.kind, ManipulationKind::CopyMove);
        assert_eq!(corpus[4], synth_sample(item_seed(11, 4), SynthSpec::new(ManipulationKind::CopyMove, 32, 32)).unwrap());
        assert!(synth_corpus(1, 2, &[], 32, 32).is_err());

        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = corpus
            .iter()
            .enumerate()
            .map(|(i, s)| write_sample(dir.path(), &format!("s{i}"), s).unwrap())
            .collect();
        let mpath = dir.path().join("manifest.tsv");
        write_manifest(&mpath, &entries).unwrap();
        let loaded = read_manifest(&mpath).unwrap();
        let s = load_entry(&loaded[2]).unwrap();
        assert_eq!(s.mask, corpus[2].mask);
        assert_eq!(s.image, corpus[2].image.map(|v| f64::from(quantize(v)) / 255.0));
        assert_eq!(s.meta.kind, ManipulationKind::Removal);
    }

    #[test]
    fn degraded_keeps_mask() {
        let s = synth_sample(2, SynthSpec::new(ManipulationKind::Removal, 32, 32)).unwrap();
        let d = s.degraded(DegradationSpec::JpegLike(30), 0).unwrap();
        assert_eq!(d.mask, s.mask);
        assert_eq!(d.meta.degradations, vec![DegradationSpec::JpegLike(30)]);
        assert!(s.degraded(DegradationSpec::JpegLike(0), 0).is_err());
    }

    #[test]
    fn kind_names() {
        for k in ManipulationKind::ALL {
            assert_eq!(k.as_str().parse::<ManipulationKind>().unwrap(), k);
        }
        assert!("blend".parse::<ManipulationKind>().is_err());
    }
}
