//! Efficient wavelet-guided transformer block.
//!
//! The block input is split into `heads` channel pieces. One query map is
//! computed from the whole input and shared by every head; each head takes
//! keys and values from the Haar sub-bands of its piece, so attention runs
//! from full-resolution queries onto half-resolution keys. A refined copy of
//! the sub-bands is mapped back through the inverse transform and added to
//! the head output, and each head output is fed forward into the next piece.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::{ConvSpec, Tensor, Var};
use crate::params::{Init, ParamSet, ParamSpec, Scope, SpecBuilder};
use crate::wavelet::{dwt2_var, idwt2_var};

const LN_EPS: f64 = 1e-6;
const ONE: ConvSpec = ConvSpec::new(1, 0, 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EwtbConfig {
    /// Block channels `C`.
    pub dim: usize,
    pub heads: usize,
    /// Value width per head.
    pub v_dim: usize,
    /// Query/key width, half of `v_dim`.
    pub qk_dim: usize,
    pub ffn_ratio: usize,
    /// Kernel size of the sub-band refinement conv.
    pub sigma_kernel: usize,
    /// Channels of the support feature; 0 disables the support path.
    pub support_dim: usize,
}

impl EwtbConfig {
    /// `v_dim` equal to the piece width.
    pub fn new(dim: usize, heads: usize, ffn_ratio: usize, support_dim: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::dim(format!(
                "{dim} channels do not split into {heads} heads"
            )));
        }
        Self::with_v_dim(dim, heads, dim / heads, ffn_ratio, support_dim)
    }

    pub fn with_v_dim(
        dim: usize,
        heads: usize,
        v_dim: usize,
        ffn_ratio: usize,
        support_dim: usize,
    ) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            v_dim,
            qk_dim: v_dim / 2,
            ffn_ratio,
            sigma_kernel: 1,
            support_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::dim(format!(
                "{} channels do not split into {} heads",
                self.dim, self.heads
            )));
        }
        if self.v_dim < 2 || self.v_dim % 2 != 0 || self.qk_dim * 2 != self.v_dim {
            return Err(Error::Config(format!(
                "qk_dim {} must be exactly half of an even v_dim {}",
                self.qk_dim, self.v_dim
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        if self.sigma_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "sigma kernel {} must be odd",
                self.sigma_kernel
            )));
        }
        Ok(())
    }

    pub fn piece_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn sigma_spec(&self) -> ConvSpec {
        ConvSpec::new(1, self.sigma_kernel / 2, 4)
    }
}

/// Learnable weights of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct EwtbParams {
    pub config: EwtbConfig,
    pub values: ParamSet,
}

impl EwtbParams {
    pub fn specs(cfg: &EwtbConfig) -> Vec<ParamSpec> {
        let (c, p, v, qk) = (cfg.dim, cfg.piece_dim(), cfg.v_dim, cfg.qk_dim);
        let mut b = SpecBuilder::new();
        b.layer_norm("ln1", c);
        b.conv("q", c, qk, 1, 1, 1.0);
        for i in 0..cfg.heads {
            let h = format!("head{i}");
            b.conv(&format!("{h}.k"), 4 * p, qk, 1, 1, 1.0);
            b.conv(&format!("{h}.v"), 4 * p, v, 1, 1, 1.0);
            // grouped by sub-band; no bias, so flat input keeps empty detail bands
            let k = cfg.sigma_kernel;
            b.push(
                format!("{h}.sigma.w"),
                [4 * v, p, k, k],
                Init::Normal(0.5 / ((p * k * k) as f64).sqrt()),
            );
            if i + 1 < cfg.heads {
                b.conv(&format!("{h}.cascade"), v, p, 1, 1, 0.5);
            }
        }
        if cfg.support_dim > 0 {
            b.push(
                "psi.w",
                [cfg.heads * v, cfg.support_dim, 1, 1],
                Init::Normal(0.1 / (cfg.support_dim as f64).sqrt()),
            );
            b.push("psi.b", [1, cfg.heads * v, 1, 1], Init::Constant(1.0));
        }
        b.conv("o", cfg.heads * v, c, 1, 1, 0.5);
        b.layer_norm("ln2", c);
        b.conv("ffn.1", c, cfg.ffn_ratio * c, 1, 1, 1.0);
        b.conv("ffn.2", cfg.ffn_ratio * c, c, 1, 1, 0.5);
        b.finish()
    }

    pub fn init<R: Rng + ?Sized>(cfg: EwtbConfig, rng: &mut R) -> Self {
        Self {
            values: ParamSet::init(&Self::specs(&cfg), rng),
            config: cfg,
        }
    }

    pub fn zeros(cfg: EwtbConfig) -> Self {
        Self {
            values: ParamSet::zeros(&Self::specs(&cfg)),
            config: cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.values.validate(&Self::specs(&self.config))
    }
}

fn conv<'t>(x: Var<'t>, p: &Scope<'_, 't>, name: &str, spec: ConvSpec) -> Result<Var<'t>> {
    let s = p.sub(name);
    let b = if s.has("b") { Some(s.get("b")?) } else { None };
    ops::conv2d(x, s.get("w")?, b, spec)
}

/// Contiguous channel pieces, in order.
pub fn decompose(x: Var<'_>, heads: usize) -> Result<Vec<Var<'_>>> {
    let c = x.shape()[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(format!(
            "decompose: {c} channels into {heads} pieces"
        )));
    }
    let p = c / heads;
    (0..heads).map(|i| ops::slice_channels(x, i * p, p)).collect()
}

/// Query tokens `[N, 1, H*W, qk_dim]` from the undecomposed input.
pub fn shared_query<'t>(x: Var<'t>, p: &Scope<'_, 't>) -> Result<Var<'t>> {
    Ok(ops::to_tokens(conv(x, p, "q", ONE)?))
}

/// Per-head value gains `[N, v_dim, 1, 1]` from a support feature.
///
/// The projection is a 1x1 conv, which commutes with spatial averaging, so
/// the feature is pooled first and the conv runs on a single position.
pub fn support_value<'t>(y: Var<'t>, p: &Scope<'_, 't>, cfg: &EwtbConfig) -> Result<Vec<Var<'t>>> {
    if y.shape()[1] != cfg.support_dim {
        return Err(Error::dim(format!(
            "support feature has {} channels, block expects {}",
            y.shape()[1],
            cfg.support_dim
        )));
    }
    let pooled = ops::global_avg_pool(y)?;
    let gains = conv(pooled, p, "psi", ONE)?;
    decompose(gains, cfg.heads)
}

/// Attention maps of one [`iwsa`] call, one `[N, 1, H*W, H*W/4]` tensor per head.
#[derive(Clone, Debug, Default)]
pub struct IwsaTrace {
    pub attention: Vec<Tensor>,
}

/// Interactive wavelet-guided self-attention. `y` is the support feature;
/// `None` skips the value gating.
pub fn iwsa<'t>(x: Var<'t>, y: Option<Var<'t>>, p: &Scope<'_, 't>, cfg: &EwtbConfig) -> Result<Var<'t>> {
    iwsa_impl(x, y, p, cfg, None)
}

pub fn iwsa_traced<'t>(
    x: Var<'t>,
    y: Option<Var<'t>>,
    p: &Scope<'_, 't>,
    cfg: &EwtbConfig,
) -> Result<(Var<'t>, IwsaTrace)> {
    let mut trace = IwsaTrace::default();
    let out = iwsa_impl(x, y, p, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

fn iwsa_impl<'t>(
    x: Var<'t>,
    y: Option<Var<'t>>,
    p: &Scope<'_, 't>,
    cfg: &EwtbConfig,
    mut trace: Option<&mut IwsaTrace>,
) -> Result<Var<'t>> {
    let [_, c, h, w] = x.shape();
    if c != cfg.dim {
        return Err(Error::dim(format!(
            "iwsa: input has {c} channels, block expects {}",
            cfg.dim
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("iwsa needs even spatial dims, got {h}x{w}")));
    }
    let q = shared_query(x, p)?;
    let gains = match (y, cfg.support_dim) {
        (Some(y), d) if d > 0 => Some(support_value(y, p, cfg)?),
        (Some(_), _) => {
            return Err(Error::Config("support feature given to a block without support".into()))
        }
        (None, _) => None,
    };
    let mut outs: Vec<Var<'t>> = Vec::with_capacity(cfg.heads);
    for (i, mut piece) in decompose(x, cfg.heads)?.into_iter().enumerate() {
        let hp = p.sub(&format!("head{i}"));
        if let Some(&prev) = outs.last() {
            let refine = conv(prev, &p.sub(&format!("head{}", i - 1)), "cascade", ONE)?;
            piece = ops::add(piece, refine)?;
        }
        let bands = dwt2_var(piece)?;
        let k = ops::to_tokens(conv(bands, &hp, "k", ONE)?);
        let mut v = conv(bands, &hp, "v", ONE)?;
        if let Some(g) = &gains {
            v = ops::mul_channel(v, g[i])?;
        }
        let v = ops::to_tokens(v);
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(ops::attention_weights(q, k, v)?);
        }
        let attended = ops::from_tokens(ops::attention(q, k, v)?, h, w)?;
        let skip = idwt2_var(conv(bands, &hp, "sigma", cfg.sigma_spec())?)?;
        outs.push(ops::add(attended, skip)?);
    }
    conv(ops::concat_channels(&outs)?, p, "o", ONE)
}

/// `X + iwsa(LN(X), Y)` followed by `+ FFN(LN(.))`.
pub fn ewtb_forward<'t>(
    x: Var<'t>,
    y: Option<Var<'t>>,
    p: &Scope<'_, 't>,
    cfg: &EwtbConfig,
) -> Result<Var<'t>> {
    let ln1 = p.sub("ln1");
    let n1 = ops::layer_norm(x, ln1.get("g")?, ln1.get("b")?, LN_EPS)?;
    let x = ops::add(x, iwsa(n1, y, p, cfg)?)?;
    let ln2 = p.sub("ln2");
    let n2 = ops::layer_norm(x, ln2.get("g")?, ln2.get("b")?, LN_EPS)?;
    let hidden = ops::gelu(conv(n2, p, "ffn.1", ONE)?);
    ops::add(x, conv(hidden, p, "ffn.2", ONE)?)
}

/// Parameters of a plain multi-head self-attention with `heads` heads of width `C/heads`.
pub fn vanilla_msa_specs(dim: usize) -> Vec<ParamSpec> {
    let mut b = SpecBuilder::new();
    for name in ["q", "k", "v", "o"] {
        b.conv(name, dim, dim, 1, 1, 1.0);
    }
    b.finish()
}

/// Plain multi-head self-attention on full-resolution tokens, for comparison.
pub fn vanilla_msa<'t>(x: Var<'t>, p: &Scope<'_, 't>, heads: usize) -> Result<Var<'t>> {
    let [_, c, h, w] = x.shape();
    let q = decompose(conv(x, p, "q", ONE)?, heads)?;
    let k = decompose(conv(x, p, "k", ONE)?, heads)?;
    let v = decompose(conv(x, p, "v", ONE)?, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let a = ops::attention(ops::to_tokens(q[i]), ops::to_tokens(k[i]), ops::to_tokens(v[i]))?;
        outs.push(ops::from_tokens(a, h, w)?);
    }
    debug_assert_eq!(outs.len() * outs[0].shape()[1], c);
    conv(ops::concat_channels(&outs)?, p, "o", ONE)
}

/// Multiply-accumulate counts of one block on a single `H x W` sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EwtbMacs {
    pub query: u64,
    pub cascade: u64,
    pub wavelet: u64,
    pub key_value: u64,
    pub sigma: u64,
    pub attention: u64,
    pub support: u64,
    pub output: u64,
    pub ffn: u64,
}

impl EwtbMacs {
    /// Everything except the feed-forward part.
    pub fn iwsa(&self) -> u64 {
        self.query
            + self.cascade
            + self.wavelet
            + self.key_value
            + self.sigma
            + self.attention
            + self.support
            + self.output
    }

    pub fn total(&self) -> u64 {
        self.iwsa() + self.ffn
    }
}

/// Analytic cost of [`ewtb_forward`] at spatial size `h x w` (even).
pub fn count_ewtb_macs(cfg: &EwtbConfig, h: usize, w: usize) -> EwtbMacs {
    let t = (h * w) as u64;
    let tk = t / 4;
    let (c, n, p, v, qk) = (
        cfg.dim as u64,
        cfg.heads as u64,
        cfg.piece_dim() as u64,
        cfg.v_dim as u64,
        cfg.qk_dim as u64,
    );
    let k2 = (cfg.sigma_kernel * cfg.sigma_kernel) as u64;
    EwtbMacs {
        query: qk * c * t,
        cascade: (n - 1) * p * v * t,
        wavelet: n * (2 * p * t + 2 * v * t),
        key_value: n * (qk + v) * 4 * p * tk,
        sigma: n * 4 * v * p * k2 * tk,
        attention: n * t * tk * (qk + v),
        support: cfg.support_dim as u64 * n * v,
        output: c * n * v * t,
        ffn: 2 * cfg.ffn_ratio as u64 * c * c * t,
    }
}

/// Analytic cost of [`vanilla_msa`]: `4 C^2 T + 2 T^2 C`.
pub fn count_vanilla_msa_macs(dim: usize, h: usize, w: usize) -> u64 {
    let (c, t) = (dim as u64, (h * w) as u64);
    4 * c * c * t + 2 * t * t * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, kernels, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomized(cfg: EwtbConfig, seed: u64) -> EwtbParams {
        let mut r = rng(seed);
        let mut p = EwtbParams::init(cfg, &mut r);
        // perturb zero-initialised biases and affine terms too
        for t in p.values.tensors_mut() {
            let noise = Tensor::uniform(t.shape(), -0.2, 0.2, &mut r);
            t.add_assign(&noise);
        }
        p
    }

    #[test]
    fn config_rules() {
        assert!(EwtbConfig::new(6, 4, 4, 0).is_err());
        assert!(EwtbConfig::new(6, 2, 4, 0).is_err()); // odd v_dim
        let c = EwtbConfig::new(128, 4, 4, 128).unwrap();
        assert_eq!((c.piece_dim(), c.v_dim, c.qk_dim), (32, 32, 16));
    }

    #[test]
    fn decompose_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform([2, 4, 3, 2], -1.0, 1.0, &mut rng(1)));
        let one = decompose(x, 1).unwrap();
        assert_eq!(*one[0].value(), *x.value());
        let two = decompose(x, 2).unwrap();
        assert_eq!(*two[1].value(), x.value().slice_channels(2, 2).unwrap());
        let four = decompose(x, 4).unwrap();
        assert_eq!(*ops::concat_channels(&four).unwrap().value(), *x.value());
        assert!(matches!(decompose(x, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn shared_query_cases() {
        // qk = C = 4 needs v_dim 8
        let cfg = EwtbConfig::with_v_dim(4, 1, 8, 4, 0).unwrap();
        let mut p = EwtbParams::zeros(cfg);
        let mut eye = Tensor::zeros([4, 4, 1, 1]);
        for i in 0..4 {
            eye.set(i, i, 0, 0, 1.0);
        }
        p.values.set("q.w", eye).unwrap();
        let tape = Tape::new();
        let xv = Tensor::uniform([1, 4, 2, 4], -1.0, 1.0, &mut rng(2));
        let x = tape.constant(xv.clone());
        let b = p.values.bind(&tape, false);
        let q = shared_query(x, &b.scope("")).unwrap();
        assert_eq!(q.shape(), [1, 1, 8, 4]);
        for t in 0..8 {
            for ch in 0..4 {
                assert_eq!(q.value().at(0, 0, t, ch), xv.at(0, ch, t / 4, t % 4));
            }
        }

        let cfg = EwtbConfig::new(8, 4, 4, 0).unwrap();
        let p = randomized(cfg, 3);
        let b = p.values.bind(&tape, false);
        let xv = Tensor::uniform([1, 8, 4, 6], -1.0, 1.0, &mut rng(4));
        let q = shared_query(tape.constant(xv.clone()), &b.scope("")).unwrap();
        assert_eq!(q.shape()[2], 24);
        let want = kernels::conv2d(
            &xv,
            p.values.get("q.w").unwrap(),
            Some(p.values.get("q.b").unwrap().data()),
            ONE,
        )
        .unwrap();
        for t in 0..24 {
            for ch in 0..cfg.qk_dim {
                let d = q.value().at(0, 0, t, ch) - want.at(0, ch, t / 6, t % 6);
                assert!(d.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn support_value_cases() {
        let cfg = EwtbConfig::new(8, 2, 4, 6).unwrap();
        let tape = Tape::new();
        let yv = Tensor::uniform([2, 6, 5, 3], -1.0, 1.0, &mut rng(5));
        let y = tape.constant(yv.clone());

        let mut p = randomized(cfg, 6);
        p.values.set("psi.w", Tensor::zeros([8, 6, 1, 1])).unwrap();
        p.values.set("psi.b", Tensor::full([1, 8, 1, 1], 1.0)).unwrap();
        let b = p.values.bind(&tape, false);
        let g = support_value(y, &b.scope(""), &cfg).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|g| g.value().data().iter().all(|&v| v == 1.0)));
        let x = tape.constant(Tensor::uniform([2, 8, 4, 4], -1.0, 1.0, &mut rng(7)));
        let with = iwsa(x, Some(y), &b.scope(""), &cfg).unwrap();
        let without = iwsa(x, None, &b.scope(""), &cfg).unwrap();
        assert_eq!(*with.value(), *without.value());

        p.values.set("psi.b", Tensor::zeros([1, 8, 1, 1])).unwrap();
        let b = p.values.bind(&tape, false);
        let g = support_value(y, &b.scope(""), &cfg).unwrap();
        assert!(g.iter().all(|g| g.value().data().iter().all(|&v| v == 0.0)));

        let p = randomized(cfg, 8);
        let b = p.values.bind(&tape, false);
        let g = support_value(y, &b.scope(""), &cfg).unwrap();
        // conv at full resolution, then pool
        let full = kernels::conv2d(
            &yv,
            p.values.get("psi.w").unwrap(),
            Some(p.values.get("psi.b").unwrap().data()),
            ONE,
        )
        .unwrap();
        let want = kernels::global_avg_pool(&full).unwrap();
        for n in 0..2 {
            for head in 0..2 {
                for ch in 0..4 {
                    let d = g[head].value().at(n, ch, 0, 0) - want.at(n, head * 4 + ch, 0, 0);
                    assert!(d.abs() <= 1e-12);
                }
            }
        }
    }

    /// Plain-loop evaluation of a single-head block without the support path.
    fn straight_line_single_head(x: &Tensor, p: &ParamSet, cfg: &EwtbConfig) -> Tensor {
        let [_, c, h, w] = x.shape();
        let (hh, hw) = (h / 2, w / 2);
        let (qk, v) = (cfg.qk_dim, cfg.v_dim);
        let g = |name: &str| p.get(name).unwrap();
        let lin = |wname: &str, bname: &str, input: &[f64], out: usize| -> Vec<f64> {
            let (wt, bt) = (g(wname), g(bname));
            (0..out)
                .map(|o| {
                    bt.data()[o]
                        + input
                            .iter()
                            .enumerate()
                            .map(|(i, xv)| wt.data()[o * input.len() + i] * xv)
                            .sum::<f64>()
                })
                .collect()
        };
        let px = |ch: usize, y: usize, xx: usize| x.at(0, ch, y, xx);
        // queries per pixel
        let queries: Vec<Vec<f64>> = (0..h * w)
            .map(|t| {
                let col: Vec<f64> = (0..c).map(|ch| px(ch, t / w, t % w)).collect();
                lin("q.w", "q.b", &col, qk)
            })
            .collect();
        // sub-band column per half-res position: [LL(c), LH(c), HL(c), HH(c)]
        let bands: Vec<Vec<f64>> = (0..hh * hw)
            .map(|s| {
                let (i, j) = (s / hw, s % hw);
                let mut col = vec![0.0; 4 * c];
                for ch in 0..c {
                    let a = px(ch, 2 * i, 2 * j);
                    let b = px(ch, 2 * i, 2 * j + 1);
                    let cc = px(ch, 2 * i + 1, 2 * j);
                    let d = px(ch, 2 * i + 1, 2 * j + 1);
                    col[ch] = (a + b + cc + d) / 2.0;
                    col[c + ch] = (a - b + cc - d) / 2.0;
                    col[2 * c + ch] = (a + b - cc - d) / 2.0;
                    col[3 * c + ch] = (a - b - cc + d) / 2.0;
                }
                col
            })
            .collect();
        let keys: Vec<Vec<f64>> = bands.iter().map(|b| lin("head0.k.w", "head0.k.b", b, qk)).collect();
        let vals: Vec<Vec<f64>> = bands.iter().map(|b| lin("head0.v.w", "head0.v.b", b, v)).collect();
        // grouped 1x1 sigma: band g of the output reads band g of the input
        let sig: Vec<Vec<f64>> = bands
            .iter()
            .map(|b| {
                let wt = g("head0.sigma.w");
                (0..4 * v)
                    .map(|o| {
                        let grp = o / v;
                        (0..c)
                                .map(|i| wt.data()[o * c + i] * b[grp * c + i])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let mut head = vec![vec![0.0; v]; h * w];
        for (t, q) in queries.iter().enumerate() {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (qk as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (s, es) in e.iter().enumerate() {
                for ch in 0..v {
                    head[t][ch] += es / z * vals[s][ch];
                }
            }
            // inverse transform of the refined bands at this pixel
            let (y, xx) = (t / w, t % w);
            let s = (y / 2) * hw + xx / 2;
            for ch in 0..v {
                let (ll, lh, hl, hh_) = (sig[s][ch], sig[s][v + ch], sig[s][2 * v + ch], sig[s][3 * v + ch]);
                head[t][ch] += match (y % 2, xx % 2) {
                    (0, 0) => (ll + lh + hl + hh_) / 2.0,
                    (0, 1) => (ll - lh + hl - hh_) / 2.0,
                    (1, 0) => (ll + lh - hl - hh_) / 2.0,
                    _ => (ll - lh - hl + hh_) / 2.0,
                };
            }
        }
        let mut out = Tensor::zeros([1, c, h, w]);
        for t in 0..h * w {
            let o = lin("o.w", "o.b", &head[t], c);
            for ch in 0..c {
                out.set(0, ch, t / w, t % w, o[ch]);
            }
        }
        out
    }

    #[test]
    fn single_head_matches_straight_line_oracle() {
        let cfg = EwtbConfig::new(4, 1, 4, 0).unwrap();
        let p = randomized(cfg, 9);
        let xv = Tensor::uniform([1, 4, 4, 4], -1.0, 1.0, &mut rng(10));
        let tape = Tape::new();
        let b = p.values.bind(&tape, false);
        let got = iwsa(tape.constant(xv.clone()), None, &b.scope(""), &cfg).unwrap();
        let want = straight_line_single_head(&xv, &p.values, &cfg);
        assert!(got.value().max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn shape_nullity_and_rows() {
        let cfg = EwtbConfig::new(8, 2, 4, 3).unwrap();
        let mut p = randomized(cfg, 11);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform([2, 8, 6, 4], -1.0, 1.0, &mut rng(12)));
        let y = tape.constant(Tensor::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rng(13)));
        let b = p.values.bind(&tape, false);
        let (out, trace) = iwsa_traced(x, Some(y), &b.scope(""), &cfg).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert_eq!(trace.attention.len(), 2);
        for a in &trace.attention {
            assert_eq!(a.shape(), [2, 1, 24, 6]);
            for row in a.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let e = ewtb_forward(x, Some(y), &b.scope(""), &cfg).unwrap();
        assert_eq!(e.shape(), x.shape());

        p.values.zero_prefix("o.");
        let b = p.values.bind(&tape, false);
        let out = iwsa(x, Some(y), &b.scope(""), &cfg).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        let odd = tape.constant(Tensor::zeros([1, 8, 3, 4]));
        assert!(matches!(iwsa(odd, None, &b.scope(""), &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_weights_give_identity() {
        let cfg = EwtbConfig::new(8, 2, 4, 3).unwrap();
        let p = EwtbParams::zeros(cfg);
        let tape = Tape::new();
        let xv = Tensor::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng(14));
        let y = tape.constant(Tensor::uniform([1, 3, 2, 2], -1.0, 1.0, &mut rng(15)));
        let b = p.values.bind(&tape, false);
        let out = ewtb_forward(tape.constant(xv.clone()), Some(y), &b.scope(""), &cfg).unwrap();
        assert_eq!(*out.value(), xv);
    }

    #[test]
    fn block_gradients() {
        let cfg = EwtbConfig::new(4, 2, 2, 3).unwrap();
        let p = randomized(cfg, 16);
        let mut inputs = vec![
            Tensor::uniform([1, 4, 4, 4], -1.0, 1.0, &mut rng(17)),
            Tensor::uniform([1, 3, 2, 2], -1.0, 1.0, &mut rng(18)),
        ];
        inputs.extend(p.values.tensors().iter().cloned());
        let set = p.values.clone();
        let probe = Tensor::uniform([1, 4, 4, 4], -1.0, 1.0, &mut rng(19));
        let err = grad_check(
            move |tape, v| {
                let bound = crate::params::Bound::from_vars(&set, v[2..].to_vec());
                let out = ewtb_forward(v[0], Some(v[1]), &bound.scope(""), &cfg)?;
                let w = tape.constant(probe.clone());
                Ok(ops::sum(ops::mul(out, w)?))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn tape_macs_match_analytic_count() {
        let cfg = EwtbConfig::new(8, 2, 4, 3).unwrap();
        let p = randomized(cfg, 20);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform([1, 8, 6, 4], -1.0, 1.0, &mut rng(21)));
        let y = tape.constant(Tensor::uniform([1, 3, 5, 5], -1.0, 1.0, &mut rng(22)));
        let b = p.values.bind(&tape, false);
        let before = tape.macs();
        ewtb_forward(x, Some(y), &b.scope(""), &cfg).unwrap();
        assert_eq!(tape.macs() - before, count_ewtb_macs(&cfg, 6, 4).total());

        let vp = ParamSet::init(&vanilla_msa_specs(8), &mut rng(23));
        let vb = vp.bind(&tape, false);
        let before = tape.macs();
        let out = vanilla_msa(x, &vb.scope(""), 2).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert_eq!(tape.macs() - before, count_vanilla_msa_macs(8, 6, 4));
    }

    #[test]
    fn iwsa_cheaper_than_vanilla() {
        for (c, hw) in [(128, 16), (256, 8), (384, 4), (32, 4), (64, 2), (96, 2)] {
            let cfg = EwtbConfig::new(c, 4, 4, 128).unwrap();
            assert!(count_ewtb_macs(&cfg, hw, hw).iwsa() < count_vanilla_msa_macs(c, hw, hw));
        }
    }
}
