//! The two-stream detector: stem, cognitive and inspective branches,
//! detection heads, and analytic cost accounting.
//!
//! Data flow for `S` stages, with `z_0 = f8` and `c_0 = f16`:
//!
//! ```text
//! r_i     = inspective_block_i(z_i)
//! cog_i   = ewtb_i(c_i, support = r_i)
//! z_{i+1} = r_i + up(fuse_i(cog_i))
//! c_{i+1} = down_i(cog_i)                  (i < S - 1)
//! heads(z_S)
//! ```
//!
//! Inputs are reflect-padded on the bottom/right to a multiple of
//! `2^(S+3)` and every output is cropped back to the input size.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ewtb::{self, count_ewtb_macs, count_vanilla_msa_macs, EwtbConfig, EwtbParams};
use crate::numerics::ops;
use crate::numerics::{ConvSpec, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet, ParamSpec, Scope, SpecBuilder};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    /// Nominal input size `(H, W)`; other sizes are accepted at run time.
    pub input_size: (usize, usize),
    /// Widths at 1/4, 1/8 and 1/16.
    pub stem_channels: [usize; 3],
    /// One width per cognitive stage; the stage count is its length.
    pub cognitive_channels: Vec<usize>,
    pub inspective_channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub sigma_kernel: usize,
    /// Hidden width of each detection head.
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Full-width model at 224x224.
    pub fn paper() -> Self {
        Self {
            input_size: (224, 224),
            stem_channels: [64, 128, 128],
            cognitive_channels: vec![128, 256, 384],
            inspective_channels: 128,
            heads: 4,
            ffn_ratio: 8,
            sigma_kernel: 1,
            head_hidden: 128,
        }
    }

    /// Half widths at 64x64.
    pub fn desk() -> Self {
        Self::paper().scaled(2, (64, 64))
    }

    /// Quarter widths at 64x64.
    pub fn tiny() -> Self {
        Self::paper().scaled(4, (64, 64))
    }

    /// Divides every width by `div`.
    pub fn scaled(&self, div: usize, input_size: (usize, usize)) -> Self {
        Self {
            input_size,
            stem_channels: self.stem_channels.map(|c| c / div),
            cognitive_channels: self.cognitive_channels.iter().map(|c| c / div).collect(),
            inspective_channels: self.inspective_channels / div,
            head_hidden: self.head_hidden / div,
            ..self.clone()
        }
    }

    /// Multiplies every width by `mul`.
    pub fn widened(&self, mul: usize) -> Self {
        Self {
            stem_channels: self.stem_channels.map(|c| c * mul),
            cognitive_channels: self.cognitive_channels.iter().map(|c| c * mul).collect(),
            inspective_channels: self.inspective_channels * mul,
            head_hidden: self.head_hidden * mul,
            ..self.clone()
        }
    }

    pub fn stages(&self) -> usize {
        self.cognitive_channels.len()
    }

    /// Side multiple every input is padded to.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.stages() + 3)
    }

    pub fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.pad_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    pub fn ewtb_config(&self, stage: usize) -> Result<EwtbConfig> {
        let mut cfg = EwtbConfig::new(
            self.cognitive_channels[stage],
            self.heads,
            self.ffn_ratio,
            self.inspective_channels,
        )?;
        cfg.sigma_kernel = self.sigma_kernel;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() < 2 {
            return Err(Error::Config(format!(
                "at least 2 stages required, got {}",
                self.stages()
            )));
        }
        let [_, c8, c16] = self.stem_channels;
        if c8 != self.inspective_channels {
            return Err(Error::Config(format!(
                "stem 1/8 width {c8} must equal the inspective width {}",
                self.inspective_channels
            )));
        }
        if c16 != self.cognitive_channels[0] {
            return Err(Error::Config(format!(
                "stem 1/16 width {c16} must equal the first cognitive width {}",
                self.cognitive_channels[0]
            )));
        }
        let widths = self
            .stem_channels
            .iter()
            .chain(&self.cognitive_channels)
            .chain([&self.inspective_channels, &self.head_hidden]);
        if widths.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        for s in 0..self.stages() {
            self.ewtb_config(s)
                .map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
        }
        Ok(())
    }
}

/// Per-pixel predictions at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `[N, 2, H, W]`, channel 1 = manipulated.
    pub mask_logits: Tensor,
    /// `[N, 2, H, W]`, channel 1 = boundary.
    pub boundary_logits: Tensor,
    /// `[N, 2, H, W]`: predicted `(x - cx) / W` and `(y - cy) / H`.
    pub offsets: Tensor,
}

impl ModelOutput {
    /// Softmax probability of the manipulated class, `[N, 1, H, W]`.
    pub fn mask_probability(&self) -> Tensor {
        let [n, _, h, w] = self.mask_logits.shape();
        let p = h * w;
        let d = self.mask_logits.data();
        let mut out = Vec::with_capacity(n * p);
        for b in 0..n {
            for i in 0..p {
                let (l0, l1) = (d[b * 2 * p + i], d[(b * 2 + 1) * p + i]);
                out.push(1.0 / (1.0 + (l0 - l1).exp()));
            }
        }
        Tensor::from_raw([n, 1, h, w], out).expect("shape")
    }
}

/// Recorded outputs of [`model_forward`].
#[derive(Clone, Copy, Debug)]
pub struct OutputVars<'t> {
    pub mask_logits: Var<'t>,
    pub boundary_logits: Var<'t>,
    pub offsets: Var<'t>,
}

impl OutputVars<'_> {
    pub fn to_output(&self) -> ModelOutput {
        ModelOutput {
            mask_logits: (*self.mask_logits.value()).clone(),
            boundary_logits: (*self.boundary_logits.value()).clone(),
            offsets: (*self.offsets.value()).clone(),
        }
    }
}

/// Switches for the cross-branch paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Inspective features gate cognitive values.
    pub support: bool,
    /// Cognitive features are added into the inspective stream.
    pub fusion: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            support: true,
            fusion: true,
        }
    }
}

pub const HEADS: [&str; 3] = ["mask", "boundary", "offset"];

fn stem_specs(cfg: &ModelConfig, b: &mut SpecBuilder) {
    let [c4, c8, c16] = cfg.stem_channels;
    b.conv("stem.conv1", 3, c4, 3, 1, RELU_GAIN);
    b.conv("stem.conv2", c4, c4, 3, 1, RELU_GAIN);
    for (i, (cin, cout, stride)) in [(c4, c4, 1), (c4, c8, 2), (c8, c16, 2)].into_iter().enumerate() {
        let p = format!("stem.block{i}");
        b.conv(&format!("{p}.a"), cin, cout, 3, 1, RELU_GAIN);
        b.conv(&format!("{p}.b"), cout, cout, 3, 1, 1.0);
        if stride != 1 || cin != cout {
            b.conv(&format!("{p}.proj"), cin, cout, 1, 1, 1.0);
        }
    }
}

/// Every learnable tensor of the model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let ci = cfg.inspective_channels;
    let mut b = SpecBuilder::new();
    stem_specs(cfg, &mut b);
    for i in 0..cfg.stages() {
        let p = format!("insp.block{i}");
        b.conv(&format!("{p}.dw1"), ci, ci, 3, ci, RELU_GAIN);
        b.conv(&format!("{p}.pw1"), ci, ci, 1, 1, RELU_GAIN);
        b.conv(&format!("{p}.dw2"), ci, ci, 3, ci, 1.0);
        b.conv(&format!("{p}.pw2"), ci, ci, 1, 1, 0.5);
    }
    for (i, &c) in cfg.cognitive_channels.iter().enumerate() {
        b.nest(&format!("cog.stage{i}"), EwtbParams::specs(&cfg.ewtb_config(i)?));
        if let Some(&next) = cfg.cognitive_channels.get(i + 1) {
            b.conv(&format!("cog.down{i}"), c, next, 3, 1, 1.0);
        }
        b.conv(&format!("fuse{i}"), c, ci, 1, 1, 0.5);
    }
    for h in HEADS {
        b.conv(&format!("head.{h}.c1"), ci, cfg.head_hidden, 3, 1, RELU_GAIN);
        b.conv(&format!("head.{h}.c2"), cfg.head_hidden, 2, 1, 1, 0.5);
    }
    Ok(b.finish())
}

/// Model weights together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub values: ParamSet,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let values = ParamSet::init(&param_specs(&config)?, rng);
        Ok(Self { config, values })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let values = ParamSet::zeros(&param_specs(&config)?);
        Ok(Self { config, values })
    }

    pub fn validate(&self) -> Result<()> {
        self.values.validate(&param_specs(&self.config)?)
    }
}

fn conv<'t>(x: Var<'t>, p: &Scope<'_, 't>, name: &str, spec: ConvSpec) -> Result<Var<'t>> {
    let s = p.sub(name);
    ops::conv2d(x, s.get("w")?, Some(s.get("b")?), spec)
}

fn basic_block<'t>(x: Var<'t>, p: &Scope<'_, 't>, stride: usize) -> Result<Var<'t>> {
    let a = ops::relu(conv(x, p, "a", ConvSpec::new(stride, 1, 1))?);
    let b = conv(a, p, "b", ConvSpec::new(1, 1, 1))?;
    let skip = if p.has("proj.w") {
        conv(x, p, "proj", ConvSpec::new(stride, 0, 1))?
    } else {
        x
    };
    Ok(ops::relu(ops::add(b, skip)?))
}

/// Features at 1/4, 1/8 and 1/16 of a padded image.
pub fn stem_forward<'t>(img: Var<'t>, p: &Scope<'_, 't>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let [_, c, h, w] = img.shape();
    if c != 3 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::dim(format!(
            "stem needs [N,3,H,W] with H, W multiples of 16, got {:?}",
            img.shape()
        )));
    }
    let s = p.sub("stem");
    let x = ops::relu(conv(img, &s, "conv1", ConvSpec::new(2, 1, 1))?);
    let x = ops::relu(conv(x, &s, "conv2", ConvSpec::new(2, 1, 1))?);
    let f4 = basic_block(x, &s.sub("block0"), 1)?;
    let f8 = basic_block(f4, &s.sub("block1"), 2)?;
    let f16 = basic_block(f8, &s.sub("block2"), 2)?;
    Ok((f4, f8, f16))
}

/// Depthwise-separable residual block of the inspective branch.
pub fn inspective_block<'t>(x: Var<'t>, p: &Scope<'_, 't>) -> Result<Var<'t>> {
    let c = x.shape()[1];
    let dw = ConvSpec::new(1, 1, c);
    let one = ConvSpec::new(1, 0, 1);
    let a = ops::relu(conv(conv(x, p, "dw1", dw)?, p, "pw1", one)?);
    let b = conv(conv(a, p, "dw2", dw)?, p, "pw2", one)?;
    Ok(ops::relu(ops::add(x, b)?))
}

/// 1x1 projection of a cognitive feature, resized to the inspective grid.
pub fn fuse<'t>(cog: Var<'t>, p: &Scope<'_, 't>, stage: usize, h: usize, w: usize) -> Result<Var<'t>> {
    let f = conv(cog, p, &format!("fuse{stage}"), ConvSpec::new(1, 0, 1))?;
    ops::bilinear_resize(f, h, w)
}

/// One transformer block, zero-padding odd spatial dims to even around it.
pub fn cognitive_stage<'t>(
    x: Var<'t>,
    support: Option<Var<'t>>,
    p: &Scope<'_, 't>,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<Var<'t>> {
    let ecfg = cfg.ewtb_config(stage)?;
    let [_, _, h, w] = x.shape();
    let (eh, ew) = (h + h % 2, w + w % 2);
    let padded = if (eh, ew) == (h, w) { x } else { ops::pad_zero(x, eh, ew)? };
    let out = ewtb::ewtb_forward(padded, support, &p.sub(&format!("cog.stage{stage}")), &ecfg)?;
    if (eh, ew) == (h, w) {
        Ok(out)
    } else {
        ops::crop(out, 0, 0, h, w)
    }
}

fn downsample<'t>(x: Var<'t>, p: &Scope<'_, 't>, stage: usize) -> Result<Var<'t>> {
    conv(x, p, &format!("cog.down{stage}"), ConvSpec::new(2, 1, 1))
}

/// Cognitive branch given the support feature of each stage.
pub fn cognitive_forward<'t>(
    f16: Var<'t>,
    supports: &[Option<Var<'t>>],
    p: &Scope<'_, 't>,
    cfg: &ModelConfig,
) -> Result<Vec<Var<'t>>> {
    if supports.len() != cfg.stages() {
        return Err(Error::Config(format!(
            "{} support features for {} stages",
            supports.len(),
            cfg.stages()
        )));
    }
    let mut x = f16;
    let mut outs = Vec::with_capacity(cfg.stages());
    for (i, y) in supports.iter().enumerate() {
        let cog = cognitive_stage(x, *y, p, cfg, i)?;
        outs.push(cog);
        if i + 1 < cfg.stages() {
            x = downsample(cog, p, i)?;
        }
    }
    Ok(outs)
}

/// Inspective branch given the cognitive output of each stage (`None` = no fusion).
pub fn inspective_forward<'t>(
    f8: Var<'t>,
    cognitive: &[Option<Var<'t>>],
    p: &Scope<'_, 't>,
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    if cognitive.len() != cfg.stages() {
        return Err(Error::Config(format!(
            "{} cognitive features for {} stages",
            cognitive.len(),
            cfg.stages()
        )));
    }
    let [_, _, h, w] = f8.shape();
    let mut z = f8;
    for (i, cog) in cognitive.iter().enumerate() {
        z = inspective_block(z, &p.sub(&format!("insp.block{i}")))?;
        if let Some(cog) = cog {
            z = ops::add(z, fuse(*cog, p, i, h, w)?)?;
        }
    }
    Ok(z)
}

fn head<'t>(z: Var<'t>, p: &Scope<'_, 't>, name: &str, h: usize, w: usize) -> Result<Var<'t>> {
    let s = p.sub(&format!("head.{name}"));
    let x = ops::relu(conv(z, &s, "c1", ConvSpec::new(1, 1, 1))?);
    let x = conv(x, &s, "c2", ConvSpec::new(1, 0, 1))?;
    ops::bilinear_resize(x, h, w)
}

/// Full forward pass on `img: [N,3,H,W]`.
pub fn model_forward<'t>(
    img: Var<'t>,
    params: &Bound<'t>,
    cfg: &ModelConfig,
    opts: ForwardOptions,
) -> Result<OutputVars<'t>> {
    let [_, c, h, w] = img.shape();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::dim(format!("model input must be [N,3,H,W], got {:?}", img.shape())));
    }
    let (ph, pw) = cfg.padded_size(h, w);
    let x = if (ph, pw) == (h, w) { img } else { ops::pad_reflect(img, ph, pw)? };
    let p = params.scope("");
    let (_, f8, f16) = stem_forward(x, &p)?;
    let [_, _, h8, w8] = f8.shape();
    let mut z = f8;
    let mut feat = f16;
    for i in 0..cfg.stages() {
        let r = inspective_block(z, &p.sub(&format!("insp.block{i}")))?;
        let cog = cognitive_stage(feat, opts.support.then_some(r), &p, cfg, i)?;
        z = if opts.fusion { ops::add(r, fuse(cog, &p, i, h8, w8)?)? } else { r };
        if i + 1 < cfg.stages() {
            feat = downsample(cog, &p, i)?;
        }
    }
    let mut outs = Vec::with_capacity(3);
    for name in HEADS {
        let o = head(z, &p, name, ph, pw)?;
        outs.push(if (ph, pw) == (h, w) { o } else { ops::crop(o, 0, 0, h, w)? });
    }
    Ok(OutputVars {
        mask_logits: outs[0],
        boundary_logits: outs[1],
        offsets: outs[2],
    })
}

/// Inference without gradient bookkeeping.
pub fn predict(params: &ModelParams, img: &Tensor) -> Result<ModelOutput> {
    let tape = Tape::new();
    let bound = params.values.bind(&tape, false);
    let x = tape.constant(img.clone());
    let out = model_forward(x, &bound, &params.config, ForwardOptions::default())?;
    Ok(out.to_output())
}

/// Exact number of learnable scalars.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRow {
    pub module: String,
    pub macs: u64,
    pub flops: u64,
    pub params: usize,
}

/// Attention cost of one stage next to a plain multi-head attention at the same size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageAttentionCost {
    pub stage: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub iwsa_flops: u64,
    pub vanilla_msa_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub input: (usize, usize),
    /// Size actually processed after padding.
    pub padded: (usize, usize),
    /// Multiply-accumulates at the padded size.
    pub macs: u64,
    pub flops: u64,
    /// `flops` rescaled by the input-to-padded area ratio.
    pub flops_at_input: f64,
    pub params: usize,
    pub rows: Vec<FlopRow>,
    pub stages: Vec<StageAttentionCost>,
}

impl FlopReport {
    pub fn row(&self, module: &str) -> Option<&FlopRow> {
        self.rows.iter().find(|r| r.module == module)
    }
}

fn params_with_prefix(specs: &[ParamSpec], prefixes: &[&str]) -> usize {
    specs
        .iter()
        .filter(|s| prefixes.iter().any(|p| s.name.starts_with(p)))
        .map(ParamSpec::numel)
        .sum()
}

fn conv_macs(cout: usize, cin_per_group: usize, k: usize, h: usize, w: usize) -> u64 {
    (cout * cin_per_group * k * k * h * w) as u64
}

/// Analytic multiply-accumulate and parameter breakdown for one `h x w` image.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    let specs = param_specs(cfg)?;
    if h == 0 || w == 0 {
        return Err(Error::dim("count_flops: empty input"));
    }
    let (ph, pw) = cfg.padded_size(h, w);
    let [c4, c8, c16] = cfg.stem_channels;
    let ci = cfg.inspective_channels;
    let (h4, w4, h8, w8) = (ph / 4, pw / 4, ph / 8, pw / 8);

    let mut stem = conv_macs(c4, 3, 3, ph / 2, pw / 2) + conv_macs(c4, c4, 3, h4, w4);
    stem += 2 * conv_macs(c4, c4, 3, h4, w4);
    stem += conv_macs(c8, c4, 3, h8, w8) + conv_macs(c8, c8, 3, h8, w8) + conv_macs(c8, c4, 1, h8, w8);
    let (h16, w16) = (ph / 16, pw / 16);
    stem += conv_macs(c16, c8, 3, h16, w16)
        + conv_macs(c16, c16, 3, h16, w16)
        + conv_macs(c16, c8, 1, h16, w16);

    let insp_block = 2 * (conv_macs(ci, 1, 3, h8, w8) + conv_macs(ci, ci, 1, h8, w8));
    let mut rows = vec![
        FlopRow {
            module: "stem".into(),
            macs: stem,
            flops: 0,
            params: params_with_prefix(&specs, &["stem."]),
        },
        FlopRow {
            module: "inspective".into(),
            macs: insp_block * cfg.stages() as u64,
            flops: 0,
            params: params_with_prefix(&specs, &["insp."]),
        },
    ];

    let mut fusion = 0;
    let mut down = 0;
    let mut stages = Vec::new();
    let (mut sh, mut sw) = (h16, w16);
    for (i, &c) in cfg.cognitive_channels.iter().enumerate() {
        let ecfg = cfg.ewtb_config(i)?;
        let (eh, ew) = (sh + sh % 2, sw + sw % 2);
        let m = count_ewtb_macs(&ecfg, eh, ew);
        rows.push(FlopRow {
            module: format!("cognitive.stage{i}"),
            macs: m.total(),
            flops: 0,
            params: params_with_prefix(&specs, &[&format!("cog.stage{i}.")]),
        });
        stages.push(StageAttentionCost {
            stage: i,
            channels: c,
            height: eh,
            width: ew,
            iwsa_flops: 2 * m.iwsa(),
            vanilla_msa_flops: 2 * count_vanilla_msa_macs(c, eh, ew),
        });
        fusion += conv_macs(ci, c, 1, sh, sw);
        if let Some(&next) = cfg.cognitive_channels.get(i + 1) {
            let (nh, nw) = (sh.div_ceil(2), sw.div_ceil(2));
            down += conv_macs(next, c, 3, nh, nw);
            (sh, sw) = (nh, nw);
        }
    }
    rows.push(FlopRow {
        module: "cognitive.downsample".into(),
        macs: down,
        flops: 0,
        params: params_with_prefix(&specs, &["cog.down"]),
    });
    rows.push(FlopRow {
        module: "fusion".into(),
        macs: fusion,
        flops: 0,
        params: params_with_prefix(&specs, &["fuse"]),
    });
    let head = conv_macs(cfg.head_hidden, ci, 3, h8, w8) + conv_macs(2, cfg.head_hidden, 1, h8, w8);
    rows.push(FlopRow {
        module: "heads".into(),
        macs: 3 * head,
        flops: 0,
        params: params_with_prefix(&specs, &["head."]),
    });
    for r in &mut rows {
        r.flops = 2 * r.macs;
    }
    let macs: u64 = rows.iter().map(|r| r.macs).sum();
    let params: usize = rows.iter().map(|r| r.params).sum();
    debug_assert_eq!(params, specs.iter().map(ParamSpec::numel).sum::<usize>());
    Ok(FlopReport {
        input: (h, w),
        padded: (ph, pw),
        macs,
        flops: 2 * macs,
        flops_at_input: (2 * macs) as f64 * (h * w) as f64 / (ph * pw) as f64,
        params,
        rows,
        stages,
    })
}
