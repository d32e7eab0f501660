//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvSpec};
use super::{Tape, Tensor, Var};

fn same_shape(a: Var<'_>, b: Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(a, b, "add")?;
    let out = a.value().zip_map(&b.value(), |x, y| x + y)?;
    Ok(a.tape()
        .op(out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(a, b, "sub")?;
    let out = a.value().zip_map(&b.value(), |x, y| x - y)?;
    Ok(a.tape().op(
        out,
        &[a, b],
        Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
    ))
}

/// Elementwise product.
pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(a, b, "mul")?;
    let (av, bv) = (a.value(), b.value());
    let out = av.zip_map(&bv, |x, y| x * y)?;
    Ok(a.tape().op(
        out,
        &[a, b],
        Box::new(move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y).expect("shape")),
                need[1].then(|| g.zip_map(&av, |x, y| x * y).expect("shape")),
            ]
        }),
    ))
}

pub fn scale<'t>(a: Var<'t>, s: f64) -> Var<'t> {
    let out = a.value().map(|v| v * s);
    a.tape()
        .op(out, &[a], Box::new(move |g, _| vec![Some(g.map(|v| v * s))]))
}

/// Scales every `(n, c)` plane of `x: [N,C,H,W]` by `gain: [N,C,1,1]`.
pub fn mul_channel<'t>(x: Var<'t>, gain: Var<'t>) -> Result<Var<'t>> {
    let [n, c, h, w] = x.shape();
    if gain.shape() != [n, c, 1, 1] {
        return Err(Error::dim(format!(
            "mul_channel: gain {:?} does not broadcast over {:?}",
            gain.shape(),
            x.shape()
        )));
    }
    let (xv, gv) = (x.value(), gain.value());
    let p = h * w;
    let mut out = xv.data().to_vec();
    for (plane, &s) in out.chunks_mut(p).zip(gv.data()) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    let shape = x.shape();
    Ok(x.tape().op(
        Tensor::raw(shape, out),
        &[x, gain],
        Box::new(move |g, need| {
            let gx = need[0].then(|| {
                let mut d = g.data().to_vec();
                for (plane, &s) in d.chunks_mut(p).zip(gv.data()) {
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                Tensor::raw(shape, d)
            });
            let gg = need[1].then(|| {
                let d = g
                    .data()
                    .chunks(p)
                    .zip(xv.data().chunks(p))
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
                    .collect();
                Tensor::raw([n, c, 1, 1], d)
            });
            vec![gx, gg]
        }),
    ))
}

/// 2-D convolution; `w: [Cout, Cin/groups, kh, kw]`, `b: [1, Cout, 1, 1]`.
pub fn conv2d<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), w.value());
    let bv = b.map(|b| b.value());
    if let Some(bv) = &bv {
        if bv.shape() != [1, wv.shape()[0], 1, 1] {
            return Err(Error::dim(format!(
                "conv2d: bias shape {:?} for {} output channels",
                bv.shape(),
                wv.shape()[0]
            )));
        }
    }
    let out = kernels::conv2d(&xv, &wv, bv.as_ref().map(|b| b.data()), spec)?;
    let [cout, cin_g, kh, kw] = wv.shape();
    let [n, _, oh, ow] = out.shape();
    x.tape()
        .add_macs((n * cout * cin_g * kh * kw * oh * ow) as u64);
    let mut parents = vec![x, w];
    parents.extend(b);
    let in_shape = xv.shape();
    let w_shape = wv.shape();
    Ok(x.tape().op(
        out,
        &parents,
        Box::new(move |g, need| {
            let gx = need[0].then(|| kernels::conv2d_grad_input(g, &wv, in_shape, spec));
            let mut res = vec![gx];
            if need[1] || need.get(2).copied().unwrap_or(false) {
                let (gw, gb) = kernels::conv2d_grad_params(g, &xv, w_shape, spec);
                res.push(Some(gw));
                if need.len() > 2 {
                    res.push(Some(Tensor::raw([1, cout, 1, 1], gb)));
                }
            } else {
                res.push(None);
                if need.len() > 2 {
                    res.push(None);
                }
            }
            res
        }),
    ))
}

/// Channelwise layer norm; `gamma`, `beta`: `[1, C, 1, 1]`.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let gv = gamma.value();
    let bv = beta.value();
    let (out, cache) = kernels::layer_norm(&x.value(), gv.data(), bv.data(), eps)?;
    let c = gv.len();
    Ok(x.tape().op(
        out,
        &[x, gamma, beta],
        Box::new(move |g, _| {
            let (gx, gg, gb) = kernels::layer_norm_backward(g, gv.data(), &cache);
            vec![
                Some(gx),
                Some(Tensor::raw([1, c, 1, 1], gg)),
                Some(Tensor::raw([1, c, 1, 1], gb)),
            ]
        }),
    ))
}

pub fn relu(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let out = xv.map(|v| v.max(0.0));
    x.tape().op(
        out,
        &[x],
        Box::new(move |g, _| {
            vec![Some(
                g.zip_map(&xv, |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("shape"),
            )]
        }),
    )
}

pub fn gelu(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let out = xv.map(kernels::gelu);
    x.tape().op(
        out,
        &[x],
        Box::new(move |g, _| {
            vec![Some(
                g.zip_map(&xv, |g, x| g * kernels::gelu_grad(x))
                    .expect("shape"),
            )]
        }),
    )
}

/// Softmax along the last axis.
pub fn softmax_last(x: Var<'_>) -> Result<Var<'_>> {
    let y = Rc::new(kernels::softmax_last(&x.value())?);
    let yc = Rc::clone(&y);
    Ok(x.tape().op(
        (*y).clone(),
        &[x],
        Box::new(move |g, _| vec![Some(kernels::softmax_last_backward(g, &yc))]),
    ))
}

/// Scaled dot-product attention on token tensors (see [`kernels::attention`]).
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (out, probs) = kernels::attention(&qv, &kv, &vv)?;
    let [n, _, tq, dk] = qv.shape();
    let [_, _, tk, dv] = vv.shape();
    q.tape().add_macs((n * tq * tk * (dk + dv)) as u64);
    Ok(q.tape().op(
        out,
        &[q, k, v],
        Box::new(move |g, _| {
            let (gq, gk, gv) = kernels::attention_backward(g, &qv, &kv, &vv, &probs);
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    ))
}

/// Attention weights of [`attention`] without recording a node.
pub fn attention_weights(q: Var<'_>, k: Var<'_>, v: Var<'_>) -> Result<Tensor> {
    Ok(kernels::attention(&q.value(), &k.value(), &v.value())?.1)
}

pub fn bilinear_resize(x: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let in_shape = x.shape();
    let out = kernels::bilinear_resize(&x.value(), out_h, out_w)?;
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(move |g, _| vec![Some(kernels::bilinear_resize_backward(g, in_shape))]),
    ))
}

pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let out = kernels::global_avg_pool(&x.value())?;
    let p = shape[2] * shape[3];
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(move |g, _| {
            let inv = 1.0 / p as f64;
            let mut d = Vec::with_capacity(shape.iter().product());
            for &gv in g.data() {
                d.extend(std::iter::repeat(gv * inv).take(p));
            }
            vec![Some(Tensor::raw(shape, d))]
        }),
    ))
}

pub fn slice_channels(x: Var<'_>, start: usize, len: usize) -> Result<Var<'_>> {
    let shape = x.shape();
    let out = x.value().slice_channels(start, len)?;
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(move |g, _| {
            let [n, c, h, w] = shape;
            let p = h * w;
            let mut d = vec![0.0; n * c * p];
            for b in 0..n {
                let dst = (b * c + start) * p;
                d[dst..dst + len * p].copy_from_slice(&g.data()[b * len * p..(b + 1) * len * p]);
            }
            vec![Some(Tensor::raw(shape, d))]
        }),
    ))
}

pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat_channels(&refs)?;
    let widths: Vec<usize> = values.iter().map(|v| v.c()).collect();
    Ok(first.tape().op(
        out,
        parts,
        Box::new(move |g, _| {
            let mut start = 0;
            widths
                .iter()
                .map(|&c| {
                    let s = g.slice_channels(start, c).expect("concat backward");
                    start += c;
                    Some(s)
                })
                .collect()
        }),
    ))
}

fn transpose_tokens(src: &[f64], n: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

/// `[N,C,H,W] -> [N,1,H*W,C]` (one token per spatial position).
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let [n, c, h, w] = x.shape();
    let out = transpose_tokens(x.value().data(), n, c, h * w);
    x.tape().op(
        Tensor::raw([n, 1, h * w, c], out),
        &[x],
        Box::new(move |g, _| {
            let d = transpose_tokens(g.data(), n, h * w, c);
            vec![Some(Tensor::raw([n, c, h, w], d))]
        }),
    )
}

/// `[N,1,H*W,C] -> [N,C,H,W]`.
pub fn from_tokens(t: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let [n, one, tokens, c] = t.shape();
    if one != 1 || tokens != h * w {
        return Err(Error::dim(format!(
            "from_tokens: {:?} is not a token tensor for {h}x{w}",
            t.shape()
        )));
    }
    let out = transpose_tokens(t.value().data(), n, tokens, c);
    Ok(t.tape().op(
        Tensor::raw([n, c, h, w], out),
        &[t],
        Box::new(move |g, _| {
            let d = transpose_tokens(g.data(), n, c, tokens);
            vec![Some(Tensor::raw([n, 1, tokens, c], d))]
        }),
    ))
}

/// Spatial gather: `out[y][x] = in[rows[y]][cols[x]]`, zero where either map is `None`.
pub fn remap<'t>(x: Var<'t>, rows: Vec<Option<usize>>, cols: Vec<Option<usize>>) -> Result<Var<'t>> {
    let [n, c, h, w] = x.shape();
    if rows.iter().flatten().any(|&r| r >= h) || cols.iter().flatten().any(|&c| c >= w) {
        return Err(Error::dim("remap: source index out of range"));
    }
    let (oh, ow) = (rows.len(), cols.len());
    let xv = x.value();
    let mut out = vec![0.0; n * c * oh * ow];
    for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (y, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            for (xx, cc) in cols.iter().enumerate() {
                if let Some(cc) = cc {
                    dst[y * ow + xx] = src[r * w + cc];
                }
            }
        }
    }
    Ok(x.tape().op(
        Tensor::raw([n, c, oh, ow], out),
        &[x],
        Box::new(move |g, _| {
            let mut d = vec![0.0; n * c * h * w];
            for (src, dst) in g.data().chunks(oh * ow).zip(d.chunks_mut(h * w)) {
                for (y, r) in rows.iter().enumerate() {
                    let Some(r) = r else { continue };
                    for (xx, cc) in cols.iter().enumerate() {
                        if let Some(cc) = cc {
                            dst[r * w + cc] += src[y * ow + xx];
                        }
                    }
                }
            }
            vec![Some(Tensor::raw([n, c, h, w], d))]
        }),
    ))
}

pub fn crop(x: Var<'_>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'_>> {
    remap(
        x,
        (y0..y0 + h).map(Some).collect(),
        (x0..x0 + w).map(Some).collect(),
    )
}

/// Zero padding on the bottom and right edges.
pub fn pad_zero(x: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let [_, _, h, w] = x.shape();
    if out_h < h || out_w < w {
        return Err(Error::dim("pad_zero: output smaller than input"));
    }
    remap(
        x,
        (0..out_h).map(|y| (y < h).then_some(y)).collect(),
        (0..out_w).map(|c| (c < w).then_some(c)).collect(),
    )
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `len -> len-2`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect padding on the bottom and right edges.
pub fn pad_reflect(x: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let [_, _, h, w] = x.shape();
    if out_h < h || out_w < w {
        return Err(Error::dim("pad_reflect: output smaller than input"));
    }
    remap(
        x,
        (0..out_h).map(|y| Some(reflect_index(y as isize, h))).collect(),
        (0..out_w).map(|c| Some(reflect_index(c as isize, w))).collect(),
    )
}

pub fn sum(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let s = x.value().sum();
    x.tape().op(
        Tensor::scalar(s),
        &[x],
        Box::new(move |g, _| vec![Some(Tensor::full(shape, g.data()[0]))]),
    )
}

pub fn mean(x: Var<'_>) -> Var<'_> {
    let count = x.value().len() as f64;
    scale(sum(x), 1.0 / count)
}

/// Mean over pixels of `-log softmax(logits)[target]`.
///
/// `logits: [N,K,H,W]`; `target: [N,1,H,W]` holding class indices.
pub fn softmax_cross_entropy<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let [n, k, h, w] = logits.shape();
    target.expect_shape([n, 1, h, w], "cross entropy target")?;
    let lv = logits.value();
    lv.check_finite("cross entropy logits")?;
    let p = h * w;
    let mut probs = vec![0.0; lv.len()];
    let mut loss = 0.0;
    let mut classes = Vec::with_capacity(n * p);
    for b in 0..n {
        for i in 0..p {
            let t = target.data()[b * p + i];
            let cls = t as usize;
            if t < 0.0 || t.fract() != 0.0 || cls >= k {
                return Err(Error::param(format!("cross entropy: bad class label {t}")));
            }
            classes.push(cls);
            let mut row: Vec<f64> = (0..k).map(|c| lv.data()[(b * k + c) * p + i]).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[cls];
            kernels::softmax_row(&mut row);
            for (c, pr) in row.into_iter().enumerate() {
                probs[(b * k + c) * p + i] = pr;
            }
        }
    }
    let count = (n * p) as f64;
    let shape = lv.shape();
    Ok(logits.tape().op(
        Tensor::scalar(loss / count),
        &[logits],
        Box::new(move |g, _| {
            let s = g.data()[0] / count;
            let mut d = probs.clone();
            for b in 0..n {
                for i in 0..p {
                    d[(b * k + classes[b * p + i]) * p + i] -= 1.0;
                }
            }
            d.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::raw(shape, d))]
        }),
    ))
}

/// `sum_valid sum_channels |pred - target| / |valid|`, zero when nothing is valid.
///
/// `valid: [N,1,H,W]` with entries 0/1, broadcast over the channels of `pred`.
pub fn masked_l1<'t>(pred: Var<'t>, target: &Tensor, valid: &Tensor) -> Result<Var<'t>> {
    let [n, c, h, w] = pred.shape();
    target.expect_shape([n, c, h, w], "masked_l1 target")?;
    valid.expect_shape([n, 1, h, w], "masked_l1 valid")?;
    let pv = pred.value();
    let p = h * w;
    let count = valid.data().iter().filter(|&&v| v > 0.0).count();
    let mut total = 0.0;
    let mut signs = vec![0.0; pv.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..p {
                if valid.data()[b * p + i] > 0.0 {
                    let j = (b * c + ch) * p + i;
                    let d = pv.data()[j] - target.data()[j];
                    total += d.abs();
                    signs[j] = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    let denom = count.max(1) as f64;
    let value = if count == 0 { 0.0 } else { total / denom };
    let shape = pv.shape();
    Ok(pred.tape().op(
        Tensor::scalar(value),
        &[pred],
        Box::new(move |g, _| {
            let s = g.data()[0] / denom;
            vec![Some(Tensor::raw(shape, signs.iter().map(|v| v * s).collect()))]
        }),
    ))
}

/// Convenience: leaf on `tape` for each tensor.
pub fn leaves<'t>(tape: &'t Tape, values: &[Tensor]) -> Vec<Var<'t>> {
    values.iter().map(|v| tape.leaf(v.clone())).collect()
}
