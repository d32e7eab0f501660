//! Post-processing operations used for robustness sweeps.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::ops::reflect_index;
use crate::numerics::Tensor;

/// Normalized Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with mirror padding (edge sample not repeated).
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("blur sigma must be > 0, got {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let [n, c, h, w] = image.shape();
    let mut tmp = Tensor::zeros(image.shape());
    let mut out = Tensor::zeros(image.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = taps
                        .iter()
                        .enumerate()
                        .map(|(k, t)| t * image.at(b, ch, y, reflect_index(x as isize + k as isize - r, w)))
                        .sum();
                    tmp.set(b, ch, y, x, v);
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let v = taps
                        .iter()
                        .enumerate()
                        .map(|(k, t)| t * tmp.at(b, ch, reflect_index(y as isize + k as isize - r, h), x))
                        .sum();
                    out.set(b, ch, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// I.i.d. normal noise from `seed`, then clipping to `[0, 1]`.
pub fn add_gaussian_noise(image: &Tensor, std: f64, seed: u64) -> Result<Tensor> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::param(format!("noise std must be > 0, got {std}")));
    }
    let dist = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Bilinear down (or up) to `round(factor * dim)` and back to the original size.
pub fn resize_degrade(image: &Tensor, factor: f64) -> Result<Tensor> {
    if !(0.25..=2.0).contains(&factor) {
        return Err(Error::param(format!("resize factor {factor} outside [0.25, 2]")));
    }
    let [_, _, h, w] = image.shape();
    let (sh, sw) = ((factor * h as f64).round() as usize, (factor * w as f64).round() as usize);
    if sh < 8 || sw < 8 {
        return Err(Error::param(format!("resize to {sh}x{sw} is below 8 pixels")));
    }
    let small = kernels::bilinear_resize(image, sh, sw)?;
    kernels::bilinear_resize(&small, h, w)
}

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Base table scaled by the libjpeg quality law and clamped to `[1, 255]`.
pub fn quant_table(base: &[u16; 64], quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::param(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let q = u32::from(quality);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

/// Quantizes one level-shifted 8x8 block in place.
fn code_block(block: &mut [f64; 64], table: &[f64; 64], d: &[[f64; 8]; 8]) {
    let mut tmp = [0.0; 64];
    // forward: D * B * D^T
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| d[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            coef[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * d[v][x]).sum();
        }
    }
    for (c, q) in coef.iter_mut().zip(table) {
        *c = (*c / q).round() * q;
    }
    // inverse: D^T * C * D
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| d[u][y] * coef[u * 8 + v]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * d[v][x]).sum();
        }
    }
}

/// JPEG distortion without the byte stream: full-range YCbCr, 8x8 DCT,
/// quantization with the standard tables at `quality`, reconstruction.
/// Chroma is not subsampled and edge blocks are completed by replication.
/// Accepts 1-channel (luma only) or 3-channel images.
pub fn jpeg_like_compress(image: &Tensor, quality: u8) -> Result<Tensor> {
    let luma = quant_table(&LUMA_Q, quality)?;
    let chroma = quant_table(&CHROMA_Q, quality)?;
    let [n, c, h, w] = image.shape();
    if c != 1 && c != 3 {
        return Err(Error::dim(format!("jpeg_like_compress needs 1 or 3 channels, got {c}")));
    }
    let d = dct_matrix();
    let mut out = Tensor::zeros(image.shape());
    for b in 0..n {
        // planes on the 0..255 scale, shifted by 128
        let mut planes: Vec<Vec<f64>> = vec![vec![0.0; h * w]; c];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if c == 1 {
                    planes[0][i] = image.at(b, 0, y, x) * 255.0 - 128.0;
                } else {
                    let (r, g, bl) = (
                        image.at(b, 0, y, x) * 255.0,
                        image.at(b, 1, y, x) * 255.0,
                        image.at(b, 2, y, x) * 255.0,
                    );
                    planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * bl - 128.0;
                    planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * bl;
                    planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * bl;
                }
            }
        }
        for (pi, plane) in planes.iter_mut().enumerate() {
            let table = if pi == 0 { &luma } else { &chroma };
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut block = [0.0; 64];
                    for y in 0..8 {
                        for x in 0..8 {
                            block[y * 8 + x] = plane[(by + y).min(h - 1) * w + (bx + x).min(w - 1)];
                        }
                    }
                    code_block(&mut block, table, &d);
                    for y in 0..8.min(h - by) {
                        for x in 0..8.min(w - bx) {
                            plane[(by + y) * w + bx + x] = block[y * 8 + x];
                        }
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if c == 1 {
                    out.set(b, 0, y, x, ((planes[0][i] + 128.0) / 255.0).clamp(0.0, 1.0));
                } else {
                    let (yy, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
                    let rgb = [
                        yy + 1.402 * cr,
                        yy - 0.344_136 * cb - 0.714_136 * cr,
                        yy + 1.772 * cb,
                    ];
                    for (ch, v) in rgb.iter().enumerate() {
                        out.set(b, ch, y, x, (v / 255.0).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One robustness operation and its strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum DegradationSpec {
    /// sigma in (0, 5]
    GaussianBlur(f64),
    /// std in (0, 0.3]
    GaussianNoise(f64),
    /// factor in [0.25, 2]
    Resize(f64),
    /// quality in [1, 100]
    JpegLike(u8),
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DegradationSpec::GaussianBlur(s) => s > 0.0 && s <= 5.0,
            DegradationSpec::GaussianNoise(s) => s > 0.0 && s <= 0.3,
            DegradationSpec::Resize(f) => (0.25..=2.0).contains(&f),
            DegradationSpec::JpegLike(q) => (1..=100).contains(&q),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("degradation {self} outside its range")))
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DegradationSpec::GaussianBlur(_) => "gaussian_blur",
            DegradationSpec::GaussianNoise(_) => "gaussian_noise",
            DegradationSpec::Resize(_) => "resize",
            DegradationSpec::JpegLike(_) => "jpeg_like",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            DegradationSpec::GaussianBlur(v)
            | DegradationSpec::GaussianNoise(v)
            | DegradationSpec::Resize(v) => v,
            DegradationSpec::JpegLike(q) => f64::from(q),
        }
    }

    /// Larger is stronger within one kind.
    pub fn severity(&self) -> f64 {
        match *self {
            DegradationSpec::GaussianBlur(v) | DegradationSpec::GaussianNoise(v) => v,
            DegradationSpec::Resize(f) => f.ln().abs(),
            DegradationSpec::JpegLike(q) => 100.0 - f64::from(q),
        }
    }

    /// `seed` only matters for noise.
    pub fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        self.validate()?;
        match *self {
            DegradationSpec::GaussianBlur(s) => gaussian_blur(image, s),
            DegradationSpec::GaussianNoise(s) => add_gaussian_noise(image, s, seed),
            DegradationSpec::Resize(f) => resize_degrade(image, f),
            DegradationSpec::JpegLike(q) => jpeg_like_compress(image, q),
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind(), self.param())
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    /// `kind:param`, for example `jpeg_like:50`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("degradation `{s}` is not kind:param")))?;
        let num = |p: &str| -> Result<f64> {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad degradation parameter `{p}`")))
        };
        let spec = match kind.trim() {
            "gaussian_blur" => DegradationSpec::GaussianBlur(num(param)?),
            "gaussian_noise" => DegradationSpec::GaussianNoise(num(param)?),
            "resize" => DegradationSpec::Resize(num(param)?),
            "jpeg_like" => DegradationSpec::JpegLike(
                param
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad jpeg quality `{param}`")))?,
            ),
            other => return Err(Error::Config(format!("unknown degradation `{other}`"))),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::subband_energy;
    use proptest::prelude::*;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor {
        Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn blur_cases() {
        let flat = Tensor::full([1, 3, 9, 11], 0.3);
        assert!(gaussian_blur(&flat, 2.0).unwrap().max_abs_diff(&flat) < 1e-15);
        let img = rand_img(1, 10, 10);
        assert!(gaussian_blur(&img, 0.01).unwrap().max_abs_diff(&img) < 1e-6);
        assert!(gaussian_blur(&img, 0.0).is_err());

        let sigma = 1.3;
        let mut imp = Tensor::zeros([1, 1, 21, 21]);
        imp.set(0, 0, 10, 10, 1.0);
        let out = gaussian_blur(&imp, sigma).unwrap();
        let r = (3.0f64 * sigma).ceil() as i64;
        let z: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        for dy in -6i64..=6 {
            for dx in -6i64..=6 {
                let want = if dy.abs() <= r && dx.abs() <= r {
                    (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / (z * z)
                } else {
                    0.0
                };
                let got = out.at(0, 0, (10 + dy) as usize, (10 + dx) as usize);
                assert!((got - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn noise_cases() {
        let img = rand_img(2, 8, 8);
        assert!(add_gaussian_noise(&img, 1e-9, 5).unwrap().max_abs_diff(&img) < 1e-8);
        assert_eq!(add_gaussian_noise(&img, 0.1, 5).unwrap(), add_gaussian_noise(&img, 0.1, 5).unwrap());
        assert_ne!(add_gaussian_noise(&img, 0.1, 5).unwrap(), add_gaussian_noise(&img, 0.1, 6).unwrap());

        // mid-grey keeps clipping negligible at std 0.05 (10 sigma margin)
        let std = 0.05;
        let grey = Tensor::full([1, 1, 1000, 1000], 0.5);
        let out = add_gaussian_noise(&grey, std, 11).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().map(|v| v - 0.5).sum::<f64>() / n;
        let var = out.data().iter().map(|v| (v - 0.5 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01 * std);
        assert!((var / (std * std) - 1.0).abs() < 0.01);
    }

    #[test]
    fn resize_cases() {
        let img = rand_img(3, 32, 24);
        assert_eq!(resize_degrade(&img, 1.0).unwrap(), img);
        let flat = Tensor::full([1, 3, 32, 32], 0.7);
        assert!(resize_degrade(&flat, 0.37).unwrap().max_abs_diff(&flat) < 1e-12);
        assert!(resize_degrade(&img, 0.25).is_err());
        assert!(resize_degrade(&img, 2.5).is_err());

        let checker = Tensor::new(
            [1, 1, 32, 32],
            (0..1024).map(|i| f64::from(u8::from((i / 32 + i % 32) % 2 == 0))).collect(),
        )
        .unwrap();
        let before = subband_energy(&checker).unwrap().high();
        let after = subband_energy(&resize_degrade(&checker, 0.5).unwrap()).unwrap().high();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn quality_law() {
        assert_eq!(quant_table(&LUMA_Q, 50).unwrap()[0], 16.0);
        assert!(quant_table(&LUMA_Q, 100).unwrap().iter().all(|&q| q == 1.0));
        assert_eq!(quant_table(&LUMA_Q, 1).unwrap()[0], 255.0);
        assert_eq!(quant_table(&CHROMA_Q, 25).unwrap()[0], 34.0);
        assert!(quant_table(&LUMA_Q, 0).is_err());
        assert!(quant_table(&LUMA_Q, 101).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|k| d[a][k] * d[b][k]).sum();
                assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jpeg_cases() {
        let img = rand_img(4, 20, 19);
        let q100 = jpeg_like_compress(&img, 100).unwrap();
        assert!(q100.max_abs_diff(&img) < 2.0 / 255.0);
        let twice = jpeg_like_compress(&q100, 100).unwrap();
        assert!(twice.max_abs_diff(&q100) < 2.0 / 255.0);
        let flat = Tensor::full([1, 3, 16, 16], 100.0 / 255.0);
        for q in [1, 10, 50, 90] {
            let out = jpeg_like_compress(&flat, q).unwrap();
            let v0 = out.at(0, 0, 0, 0);
            assert!(out.data().iter().take(256).all(|v| (v - v0).abs() < 1e-12));
        }
        let mse = |o: &Tensor| o.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!(mse(&jpeg_like_compress(&img, 10).unwrap()) > mse(&jpeg_like_compress(&img, 90).unwrap()));
        assert!(jpeg_like_compress(&img, 0).is_err());
        let grey = Tensor::uniform([1, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(jpeg_like_compress(&grey, 100).unwrap().max_abs_diff(&grey) < 2.0 / 255.0);
    }

    #[test]
    fn spec_parsing() {
        let s: DegradationSpec = "jpeg_like:50".parse().unwrap();
        assert_eq!(s, DegradationSpec::JpegLike(50));
        assert_eq!(s.to_string(), "jpeg_like:50");
        assert_eq!("gaussian_blur:1.5".parse::<DegradationSpec>().unwrap(), DegradationSpec::GaussianBlur(1.5));
        for bad in ["gaussian_blur:0", "gaussian_noise:0.5", "resize:3", "jpeg_like:0", "sharpen:1", "blur"] {
            assert!(bad.parse::<DegradationSpec>().is_err(), "{bad}");
        }
        assert_eq!(
            serde_json::to_string(&DegradationSpec::Resize(0.5)).unwrap(),
            r#"{"kind":"resize","param":0.5}"#
        );
    }

    proptest! {
        #[test]
        fn degradations_stay_in_unit_range(
            seed in any::<u64>(),
            pick in 0usize..4,
            t in 0.0f64..1.0,
        ) {
            let img = rand_img(seed, 16, 16);
            let spec = match pick {
                0 => DegradationSpec::GaussianBlur(0.05 + 4.95 * t),
                1 => DegradationSpec::GaussianNoise(0.001 + 0.299 * t),
                2 => DegradationSpec::Resize(0.5 + 1.5 * t),
                _ => DegradationSpec::JpegLike(1 + (99.0 * t) as u8),
            };
            let out = spec.apply(&img, seed).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
