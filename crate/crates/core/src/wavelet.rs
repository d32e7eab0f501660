//! One-level orthonormal 2-D Haar transform and sub-band statistics.
//!
//! Sub-bands are stacked along channels in the order LL, LH, HL, HH. The
//! first letter names the filter applied along the height axis and the
//! second the filter along the width axis, so for a 2x2 block
//! `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{BoundingBox, Mask};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    LL = 0,
    LH = 1,
    HL = 2,
    HH = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
}

/// Output of [`dwt2`]: `[N, 4C, H/2, W/2]` with sub-band blocks of `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandStack {
    tensor: Tensor,
}

impl SubbandStack {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.c() % 4 != 0 {
            return Err(Error::dim(format!(
                "sub-band stack needs a multiple of 4 channels, got {}",
                tensor.c()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Channels per sub-band.
    pub fn base_channels(&self) -> usize {
        self.tensor.c() / 4
    }

    pub fn band(&self, band: Band) -> Tensor {
        let c = self.base_channels();
        self.tensor
            .slice_channels(band as usize * c, c)
            .expect("band slice in range")
    }
}

fn dwt2_raw(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "dwt2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    let sub = hh * hw;
    let mut out = vec![0.0; n * 4 * c * sub];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            let src = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for i in 0..hh {
                for j in 0..hw {
                    let a = src[2 * i * w + 2 * j];
                    let bb = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * hw + j;
                    out[((b * 4) * c + ch) * sub + o] = 0.5 * (a + bb + cc + d);
                    out[((b * 4 + 1) * c + ch) * sub + o] = 0.5 * (a - bb + cc - d);
                    out[((b * 4 + 2) * c + ch) * sub + o] = 0.5 * (a + bb - cc - d);
                    out[((b * 4 + 3) * c + ch) * sub + o] = 0.5 * (a - bb - cc + d);
                }
            }
        }
    }
    Ok(Tensor::raw([n, 4 * c, hh, hw], out))
}

fn idwt2_raw(s: &Tensor) -> Result<Tensor> {
    let [n, c4, hh, hw] = s.shape();
    if c4 % 4 != 0 {
        return Err(Error::dim(format!(
            "idwt2 needs a multiple of 4 channels, got {c4}"
        )));
    }
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let sub = hh * hw;
    let sd = s.data();
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for i in 0..hh {
                for j in 0..hw {
                    let o = i * hw + j;
                    let ll = sd[((b * 4) * c + ch) * sub + o];
                    let lh = sd[((b * 4 + 1) * c + ch) * sub + o];
                    let hl = sd[((b * 4 + 2) * c + ch) * sub + o];
                    let hh_ = sd[((b * 4 + 3) * c + ch) * sub + o];
                    dst[2 * i * w + 2 * j] = 0.5 * (ll + lh + hl + hh_);
                    dst[2 * i * w + 2 * j + 1] = 0.5 * (ll - lh + hl - hh_);
                    dst[(2 * i + 1) * w + 2 * j] = 0.5 * (ll + lh - hl - hh_);
                    dst[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh_);
                }
            }
        }
    }
    Ok(Tensor::raw([n, c, h, w], out))
}

/// Forward transform; errors on odd spatial dims.
pub fn dwt2(x: &Tensor) -> Result<SubbandStack> {
    SubbandStack::new(dwt2_raw(x)?)
}

/// Inverse transform.
pub fn idwt2(s: &SubbandStack) -> Result<Tensor> {
    idwt2_raw(&s.tensor)
}

/// Inverse transform on a raw stacked tensor.
pub fn idwt2_tensor(s: &Tensor) -> Result<Tensor> {
    idwt2_raw(s)
}

/// Differentiable [`dwt2`]. The transform is orthonormal, so its adjoint is the inverse.
pub fn dwt2_var(x: Var<'_>) -> Result<Var<'_>> {
    let out = dwt2_raw(&x.value())?;
    let [n, c, h, w] = x.shape();
    x.tape().add_macs((2 * n * c * h * w) as u64);
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(|g, _| vec![Some(idwt2_raw(g).expect("adjoint shape"))]),
    ))
}

/// Differentiable inverse transform.
pub fn idwt2_var(s: Var<'_>) -> Result<Var<'_>> {
    let out = idwt2_raw(&s.value())?;
    let [n, c, h, w] = out.shape();
    s.tape().add_macs((2 * n * c * h * w) as u64);
    Ok(s.tape().op(
        out,
        &[s],
        Box::new(|g, _| vec![Some(dwt2_raw(g).expect("adjoint shape"))]),
    ))
}

/// Mean squared coefficient of each sub-band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SubbandEnergy {
    pub ll: f64,
    pub lh: f64,
    pub hl: f64,
    pub hh: f64,
}

impl SubbandEnergy {
    /// Sum of the three detail bands.
    pub fn high(&self) -> f64 {
        self.lh + self.hl + self.hh
    }
}

pub fn subband_energy(x: &Tensor) -> Result<SubbandEnergy> {
    let s = dwt2(x)?;
    let e = |b: Band| {
        let t = s.band(b);
        t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64
    };
    Ok(SubbandEnergy {
        ll: e(Band::LL),
        lh: e(Band::LH),
        hl: e(Band::HL),
        hh: e(Band::HH),
    })
}

/// Sub-band energies of one image region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionStats {
    pub region: BoundingBox,
    pub energy: SubbandEnergy,
    pub high_energy: f64,
    /// Detail energy over approximation energy.
    pub high_low_ratio: f64,
}

/// Manipulated-region statistics next to an authentic reference region.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionFrequencyStats {
    /// Name of the spectral statistic being reported.
    pub statistic: &'static str,
    pub manipulated: RegionStats,
    /// `None` when no equal-size box with authentic content fits.
    pub authentic: Option<RegionStats>,
}

impl RegionFrequencyStats {
    /// Manipulated detail energy strictly above the authentic one.
    pub fn manipulated_has_more_detail(&self) -> Option<bool> {
        self.authentic
            .map(|a| self.manipulated.high_energy > a.high_energy)
    }
}

fn region_stats(image: &Tensor, region: BoundingBox) -> Result<RegionStats> {
    let crop = image.crop(region.y, region.x, region.height, region.width)?;
    let energy = subband_energy(&crop)?;
    Ok(RegionStats {
        region,
        energy,
        high_energy: energy.high(),
        high_low_ratio: energy.high() / energy.ll.max(f64::MIN_POSITIVE),
    })
}

/// Compares sub-band energy inside the mask's tight bounding box with an
/// equal-size box elsewhere in the same image.
///
/// The reference box minimises the number of masked pixels it covers, then
/// the distance to the manipulated box, then raster order. If every
/// placement is fully masked the reference is reported as absent.
pub fn frequency_report(image: &Tensor, mask: &Mask) -> Result<RegionFrequencyStats> {
    let [n, _, h, w] = image.shape();
    if n != 1 || mask.height() != h || mask.width() != w {
        return Err(Error::dim(format!(
            "frequency_report: image {:?} vs mask {}x{}",
            image.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let bbox = mask
        .bounding_box()
        .ok_or_else(|| Error::EmptyRegion("frequency_report: mask is empty".into()))?;
    if bbox.height < 2 || bbox.width < 2 {
        return Err(Error::param(format!(
            "frequency_report: bounding box {}x{} smaller than 2x2",
            bbox.height, bbox.width
        )));
    }
    let region = BoundingBox {
        height: bbox.height & !1,
        width: bbox.width & !1,
        ..bbox
    };
    let manipulated = region_stats(image, region)?;

    // Summed-area table of mask pixels.
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = usize::from(mask.get(y, x))
                + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let masked_in = |y: usize, x: usize| {
        let (y1, x1) = (y + region.height, x + region.width);
        sat[y1 * (w + 1) + x1] + sat[y * (w + 1) + x] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x]
    };
    let (cy, cx) = (region.y as f64, region.x as f64);
    let mut best: Option<(usize, f64, usize, usize)> = None;
    for y in 0..=h - region.height {
        for x in 0..=w - region.width {
            let overlap = masked_in(y, x);
            let dist = (y as f64 - cy).hypot(x as f64 - cx);
            let better = match best {
                None => true,
                Some((o, d, _, _)) => overlap < o || (overlap == o && dist < d),
            };
            if better {
                best = Some((overlap, dist, y, x));
            }
        }
    }
    let authentic = match best {
        Some((overlap, _, y, x)) if overlap < region.area() => Some(region_stats(
            image,
            BoundingBox {
                y,
                x,
                height: region.height,
                width: region.width,
            },
        )?),
        _ => None,
    };
    Ok(RegionFrequencyStats {
        statistic: "haar sub-band mean energy",
        manipulated,
        authentic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Separable 1-D Haar applied along width, then along height.
    fn separable_oracle(x: &Tensor) -> [Tensor; 4] {
        let [n, c, h, w] = x.shape();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // width pass: low and high halves
        let mut lo_w = Tensor::zeros([n, c, h, w / 2]);
        let mut hi_w = Tensor::zeros([n, c, h, w / 2]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for j in 0..w / 2 {
                        let (a, d) = (x.at(b, ch, y, 2 * j), x.at(b, ch, y, 2 * j + 1));
                        lo_w.set(b, ch, y, j, s * (a + d));
                        hi_w.set(b, ch, y, j, s * (a - d));
                    }
                }
            }
        }
        let height_pass = |t: &Tensor, high: bool| {
            let mut o = Tensor::zeros([n, c, h / 2, w / 2]);
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            let (a, d) = (t.at(b, ch, 2 * i, j), t.at(b, ch, 2 * i + 1, j));
                            o.set(b, ch, i, j, if high { s * (a - d) } else { s * (a + d) });
                        }
                    }
                }
            }
            o
        };
        [
            height_pass(&lo_w, false), // LL
            height_pass(&hi_w, false), // LH: high along width
            height_pass(&lo_w, true),  // HL: high along height
            height_pass(&hi_w, true),  // HH
        ]
    }

    #[test]
    fn constant_block() {
        let s = dwt2(&Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(s.tensor().data(), &[2.0, 0.0, 0.0, 0.0]);
        let back = idwt2(&s).unwrap();
        assert_eq!(back, Tensor::full([1, 1, 2, 2], 1.0));
    }

    #[test]
    fn pinned_layout_on_ramp_block() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&x).unwrap();
        let got: Vec<f64> = Band::ALL.iter().map(|&b| s.band(b).data()[0]).collect();
        let want = [5.0, -1.0, -2.0, 0.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-14, "{got:?}");
        }
    }

    #[test]
    fn matches_separable_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform([2, 3, 6, 8], -1.0, 1.0, &mut rng);
        let s = dwt2(&x).unwrap();
        for (band, want) in Band::ALL.iter().zip(separable_oracle(&x)) {
            assert!(s.band(*band).max_abs_diff(&want) < 1e-14);
        }
    }

    #[test]
    fn energy_preserved_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let s = dwt2(&x).unwrap();
        let e_in: f64 = x.data().iter().map(|v| v * v).sum();
        let e_out: f64 = s.tensor().data().iter().map(|v| v * v).sum();
        assert!((e_in - e_out).abs() < 1e-9);
        assert!(idwt2(&s).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn horizontal_only_variation_has_no_height_detail() {
        // varies along width only
        let x = Tensor::new(
            [1, 1, 4, 4],
            (0..16).map(|i| ((i % 4) as f64).powi(2)).collect(),
        )
        .unwrap();
        let s = dwt2(&x).unwrap();
        assert!(s.band(Band::HL).data().iter().all(|&v| v == 0.0));
        assert!(s.band(Band::HH).data().iter().all(|&v| v == 0.0));
        assert!(s.band(Band::LH).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            dwt2(&Tensor::zeros([1, 1, 3, 4])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            idwt2_tensor(&Tensor::zeros([1, 3, 2, 2])),
            Err(Error::Dimension(_))
        ));
        assert_eq!(
            idwt2_tensor(&Tensor::zeros([1, 4, 2, 2])).unwrap(),
            Tensor::zeros([1, 1, 4, 4])
        );
    }

    #[test]
    fn linear_maps_have_exact_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let wts = Tensor::uniform([1, 8, 2, 2], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |_t: &Tape, v: &[Var]| {
                let s = dwt2_var(v[0])?;
                let p = crate::numerics::ops::mul(s, v[1])?;
                Ok(crate::numerics::ops::sum(p))
            },
            &[x.clone(), wts],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
        let s = dwt2(&x).unwrap().into_tensor();
        let wts = Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |_t: &Tape, v: &[Var]| {
                let r = idwt2_var(v[0])?;
                let p = crate::numerics::ops::mul(r, v[1])?;
                Ok(crate::numerics::ops::sum(p))
            },
            &[s, wts],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn energy_cases() {
        let e = subband_energy(&Tensor::full([1, 1, 4, 4], 0.3)).unwrap();
        assert_eq!((e.lh, e.hl, e.hh), (0.0, 0.0, 0.0));
        let step = Tensor::new(
            [1, 1, 4, 4],
            (0..16).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let e = subband_energy(&step).unwrap();
        assert!(e.high() > 0.0);
        assert!(e.lh > 0.0 && e.hl == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::uniform([1, 2, 6, 4], -1.0, 1.0, &mut rng);
        let e = subband_energy(&x).unwrap();
        let bands = separable_oracle(&x);
        let ms = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((e.ll - ms(&bands[0])).abs() <= 1e-12);
        assert!((e.lh - ms(&bands[1])).abs() <= 1e-12);
        assert!((e.hl - ms(&bands[2])).abs() <= 1e-12);
        assert!((e.hh - ms(&bands[3])).abs() <= 1e-12);
    }

    #[test]
    fn frequency_report_cases() {
        let flat = Tensor::full([1, 3, 16, 16], 0.4);
        let mask = Mask::from_fn(16, 16, |y, x| (4..8).contains(&y) && (4..8).contains(&x));
        let r = frequency_report(&flat, &mask).unwrap();
        assert_eq!(r.manipulated.high_energy, 0.0);
        let a = r.authentic.unwrap();
        assert_eq!(a.high_energy, 0.0);
        assert!(!a.region.intersects(&r.manipulated.region));

        let full = Mask::from_fn(16, 16, |_, _| true);
        assert!(frequency_report(&flat, &full).unwrap().authentic.is_none());

        assert!(matches!(
            frequency_report(&flat, &Mask::new(16, 16)),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn sharp_paste_raises_detail_energy() {
        // smooth gradient canvas with a pasted checker patch
        let mut img = Tensor::zeros([1, 1, 32, 32]);
        for y in 0..32 {
            for x in 0..32 {
                img.set(0, 0, y, x, 0.2 + 0.01 * x as f64);
            }
        }
        let mask = Mask::from_fn(32, 32, |y, x| (10..20).contains(&y) && (12..22).contains(&x));
        for y in 10..20 {
            for x in 12..22 {
                img.set(0, 0, y, x, if (x + y) % 2 == 0 { 0.9 } else { 0.1 });
            }
        }
        let r = frequency_report(&img, &mask).unwrap();
        assert_eq!(r.manipulated_has_more_detail(), Some(true));
    }
}
