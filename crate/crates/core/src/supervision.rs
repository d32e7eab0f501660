//! Training targets, losses and evaluation metrics.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::ops;
use crate::numerics::{Tensor, Var};

/// Dilation kernel applied to mask edges for the boundary target.
pub const BOUNDARY_DILATION: usize = 4;

const CANNY_SIGMA: f64 = 1.0;
const CANNY_LOW: f64 = 0.1;
const CANNY_HIGH: f64 = 0.2;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 3x3 erosion; pixels outside the frame count as background.
pub fn erode3(mask: &Mask) -> Mask {
    Mask::from_fn(mask.height(), mask.width(), |y, x| {
        (-1..=1).all(|dy| (-1..=1).all(|dx| mask.get_signed(y as isize + dy, x as isize + dx)))
    })
}

/// Mask pixels with at least one background pixel in their 8-neighbourhood.
pub fn inner_boundary(mask: &Mask) -> Mask {
    mask.xor(&erode3(mask))
}

/// Canny edges of a binary mask, with every edge placed on the foreground
/// side of the transition it marks.
///
/// The mask is embedded in an empty margin, smoothed with a sigma 1
/// Gaussian, differentiated with Sobel, thinned by non-maximum suppression
/// and linked by hysteresis at 0.1 / 0.2 of the peak magnitude. A step
/// between two pixels gives equal responses on both sides, so detected
/// pixels are then moved onto the adjacent mask boundary pixels.
pub fn canny_edges(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    if mask.is_empty() {
        return Mask::new(h, w);
    }
    let kern = gaussian_kernel(CANNY_SIGMA);
    let r = kern.len() / 2;
    let m = r + 2;
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let src: Vec<f64> = (0..ph * pw)
        .map(|i| {
            let (y, x) = (i / pw, i % pw);
            let inside = y >= m && y < m + h && x >= m && x < m + w && mask.get(y - m, x - m);
            f64::from(u8::from(inside))
        })
        .collect();
    let at = |buf: &[f64], y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= ph as isize || x >= pw as isize {
            0.0
        } else {
            buf[y as usize * pw + x as usize]
        }
    };
    let mut tmp = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            tmp[y * pw + x] = kern
                .iter()
                .enumerate()
                .map(|(k, g)| g * at(&src, y as isize, x as isize + k as isize - r as isize))
                .sum();
        }
    }
    let mut smooth = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            smooth[y * pw + x] = kern
                .iter()
                .enumerate()
                .map(|(k, g)| g * at(&tmp, y as isize + k as isize - r as isize, x as isize))
                .sum();
        }
    }
    let mut mag = vec![0.0; ph * pw];
    let mut dir = vec![0u8; ph * pw];
    for y in 0..ph as isize {
        for x in 0..pw as isize {
            let s = |dy, dx| at(&smooth, y + dy, x + dx);
            let gx = (s(-1, 1) + 2.0 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2.0 * s(0, -1) + s(1, -1));
            let gy = (s(1, -1) + 2.0 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2.0 * s(-1, 0) + s(-1, 1));
            let i = y as usize * pw + x as usize;
            mag[i] = gx.hypot(gy);
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Mask::new(h, w);
    }
    // ties across a symmetric step must survive suppression on both sides
    let tol = peak * 1e-9;
    let mut thin = vec![0.0; ph * pw];
    for y in 0..ph as isize {
        for x in 0..pw as isize {
            let i = y as usize * pw + x as usize;
            let (dy, dx) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let a = at(&mag, y + dy, x + dx);
            let b = at(&mag, y - dy, x - dx);
            if mag[i] + tol >= a && mag[i] + tol >= b {
                thin[i] = mag[i];
            }
        }
    }
    let (lo, hi) = (CANNY_LOW * peak, CANNY_HIGH * peak);
    let mut edge = vec![false; ph * pw];
    let mut queue: VecDeque<usize> = (0..ph * pw).filter(|&i| thin[i] >= hi).collect();
    for &i in &queue {
        edge[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / pw) as isize, (i % pw) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= ph as isize || nx >= pw as isize {
                    continue;
                }
                let j = ny as usize * pw + nx as usize;
                if !edge[j] && thin[j] >= lo {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    // snap onto the foreground side
    let ring = inner_boundary(mask);
    let mut out = Mask::new(h, w);
    for py in 0..ph {
        for px in 0..pw {
            if !edge[py * pw + px] {
                continue;
            }
            let (y, x) = (py as isize - m as isize, px as isize - m as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && ring.get(ny as usize, nx as usize) {
                        out.set(ny as usize, nx as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Dilation by a `k x k` square anchored at `floor((k - 1) / 2)`.
pub fn dilate(mask: &Mask, k: usize) -> Result<Mask> {
    if k == 0 {
        return Err(Error::param("dilation kernel must be at least 1"));
    }
    let a = ((k - 1) / 2) as isize;
    let lo = -a;
    let hi = k as isize - 1 - a;
    Ok(Mask::from_fn(mask.height(), mask.width(), |y, x| {
        (lo..=hi).any(|dy| (lo..=hi).any(|dx| mask.get_signed(y as isize + dy, x as isize + dx)))
    }))
}

/// 8-connected components.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// Row-major labels; 0 is background, components are numbered from 1 in
    /// raster order of their first pixel.
    pub labels: Vec<usize>,
    /// `(cx, cy)` per component.
    pub centroids: Vec<(f64, f64)>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.centroids.len()
    }
}

pub fn connected_components(mask: &Mask) -> Components {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0usize; h * w];
    let mut centroids = Vec::new();
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        let label = centroids.len() + 1;
        labels[start] = label;
        queue.push_back(start);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            sx += x as f64;
            sy += y as f64;
            n += 1;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if mask.get_signed(ny, nx) {
                        let j = ny as usize * w + nx as usize;
                        if labels[j] == 0 {
                            labels[j] = label;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        centroids.push((sx / n as f64, sy / n as f64));
        sizes.push(n);
    }
    Components {
        labels,
        centroids,
        sizes,
    }
}

/// Per-pixel offsets to the centroid of the pixel's component.
///
/// Returns `[1, 2, H, W]` with channel 0 = `x - cx`, channel 1 = `y - cy`,
/// in pixels and zero outside the mask, and the valid set (the mask itself).
pub fn position_targets(mask: &Mask) -> (Tensor, Mask) {
    let (h, w) = (mask.height(), mask.width());
    let comps = connected_components(mask);
    let mut t = Tensor::zeros([1, 2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let l = comps.labels[y * w + x];
            if l > 0 {
                let (cx, cy) = comps.centroids[l - 1];
                t.set(0, 0, y, x, x as f64 - cx);
                t.set(0, 1, y, x, y as f64 - cy);
            }
        }
    }
    (t, mask.clone())
}

/// All supervision derived from one ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mask: Mask,
    pub boundary: Mask,
    /// `[1, 2, H, W]` in pixels.
    pub offset_targets: Tensor,
    pub valid: Mask,
}

impl GroundTruth {
    pub fn new(mask: &Mask) -> Self {
        let boundary = dilate(&canny_edges(mask), BOUNDARY_DILATION).expect("positive kernel");
        let (offset_targets, valid) = position_targets(mask);
        Self {
            mask: mask.clone(),
            boundary,
            offset_targets,
            valid,
        }
    }

    /// Offsets divided by image width (x) and height (y), the unit the
    /// model predicts in.
    pub fn normalized_offsets(&self) -> Tensor {
        let [_, _, h, w] = self.offset_targets.shape();
        let mut t = self.offset_targets.clone();
        let p = h * w;
        t.data_mut()[..p].iter_mut().for_each(|v| *v /= w as f64);
        t.data_mut()[p..].iter_mut().for_each(|v| *v /= h as f64);
        t
    }
}

/// Stacks per-image class maps into `[N, 1, H, W]`.
pub fn class_targets(masks: &[&Mask]) -> Result<Tensor> {
    let items: Vec<Tensor> = masks.iter().map(|m| m.to_tensor()).collect();
    Tensor::stack(&items)
}

/// Mean pixel cross-entropy of two-class logits against a 0/1 class map.
pub fn loss_ce<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if logits.shape()[1] != 2 {
        return Err(Error::dim(format!(
            "loss_ce expects 2-class logits, got {:?}",
            logits.shape()
        )));
    }
    ops::softmax_cross_entropy(logits, target)
}

/// Cross-entropy against the boundary map; the same function as [`loss_ce`].
pub fn loss_boundary<'t>(logits: Var<'t>, boundary: &Tensor) -> Result<Var<'t>> {
    loss_ce(logits, boundary)
}

/// Mean over valid pixels of `|dx| + |dy|`; zero when nothing is valid.
pub fn loss_position<'t>(pred: Var<'t>, targets: &Tensor, valid: &Tensor) -> Result<Var<'t>> {
    if pred.shape()[1] != 2 {
        return Err(Error::dim(format!(
            "loss_position expects 2 offset channels, got {:?}",
            pred.shape()
        )));
    }
    ops::masked_l1(pred, targets, valid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub ce: f64,
    pub boundary: f64,
    pub position: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            boundary: 2.0,
            position: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("ce", self.ce), ("boundary", self.boundary), ("position", self.position)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("loss weight {n} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub boundary: f64,
    pub position: f64,
    pub total: f64,
}

/// `ce * w.ce + boundary * w.boundary + position * w.position`.
pub fn total_loss<'t>(
    ce: Var<'t>,
    boundary: Var<'t>,
    position: Var<'t>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    weights.validate()?;
    let parts = [ce, boundary, position].map(|v| v.value().data()[0]);
    if let Some(bad) = parts.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss component {bad}")));
    }
    let total = ops::add(
        ops::add(ops::scale(ce, weights.ce), ops::scale(boundary, weights.boundary))?,
        ops::scale(position, weights.position),
    )?;
    let breakdown = LossBreakdown {
        ce: parts[0],
        boundary: parts[1],
        position: parts[2],
        total: total.value().data()[0],
    };
    Ok((total, breakdown))
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: {a} scores for {b} labels")));
    }
    Ok(())
}

/// Pixel F1 with `score > threshold` as the positive prediction; 0 when
/// precision and recall are both 0.
pub fn pixel_f1(scores: &[f64], truth: &[bool], threshold: f64) -> Result<f64> {
    check_len(scores.len(), truth.len(), "pixel_f1")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s > threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * p * r / (p + r))
}

/// ROC AUC as `P(pos > neg) + P(tie) / 2`, via tie-averaged ranks.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_len(scores.len(), truth.len(), "auc")?;
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("auc: non-finite score {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| truth[k]).count();
        rank_sum += mean_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
