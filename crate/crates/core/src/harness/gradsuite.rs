//! Finite-difference checks of every differentiable primitive, one attention
//! block and a sampled pass through the whole training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synth_sample, ManipulationKind, SynthSpec};
use crate::error::Result;
use crate::ewtb::{ewtb_forward, EwtbConfig, EwtbParams};
use crate::network::{ModelConfig, ModelParams};
use crate::numerics::ops::*;
use crate::numerics::{grad_check, grad_check_sampled, ConvSpec, ScalarFn, Tape, Tensor, Var};
use crate::params::Bound;
use crate::supervision::LossWeights;
use crate::wavelet::{dwt2_var, idwt2_var};

use super::train::{batch_loss, Batch, TrainItem};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    /// Max of `|analytic - numeric| / max(1, |analytic|)` over probed coordinates.
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckResult {
    fn new(name: &str, rel_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            rel_error,
            tolerance,
            passed: rel_error < tolerance,
        }
    }
}

fn rand(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Contracts an arbitrary output with a fixed random tensor.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sum(mul(y, y.tape().constant(w))?))
}

fn primitive(name: &str, f: impl ScalarFn, inputs: &[Tensor]) -> Result<GradCheckResult> {
    Ok(GradCheckResult::new(name, grad_check(f, inputs, EPS)?, PRIMITIVE_TOLERANCE))
}

/// One check per differentiable operation.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = rand([2, 3, 2, 2], &mut r);
    let b = rand([2, 3, 2, 2], &mut r);
    let gain = rand([2, 3, 1, 1], &mut r);
    // relu is probed away from its kink
    let away = a.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let img = rand([1, 2, 4, 6], &mut r);
    let x = rand([2, 4, 5, 6], &mut r);
    let w_dense = rand([3, 4, 3, 3], &mut r);
    let w_group = rand([6, 2, 3, 3], &mut r);
    let b3 = rand([1, 3, 1, 1], &mut r);
    let b6 = rand([1, 6, 1, 1], &mut r);
    let ln = [rand([2, 5, 2, 3], &mut r), rand([1, 5, 1, 1], &mut r), rand([1, 5, 1, 1], &mut r)];
    let qkv = [rand([2, 1, 5, 3], &mut r), rand([2, 1, 4, 3], &mut r), rand([2, 1, 4, 2], &mut r)];
    let logits = rand([2, 3, 2, 2], &mut r);
    let classes = Tensor::new([2, 1, 2, 2], vec![0., 1., 2., 1., 2., 2., 0., 1.])?;
    let offsets = rand([1, 2, 3, 3], &mut r);
    let target = rand([1, 2, 3, 3], &mut r);
    let valid = Tensor::new([1, 1, 3, 3], vec![1., 0., 1., 1., 1., 0., 0., 1., 1.])?;

    let mut out = vec![
        primitive("add", |_, v| probe(add(v[0], v[1])?, 1), &[a.clone(), b.clone()])?,
        primitive("sub", |_, v| probe(sub(v[0], v[1])?, 2), &[a.clone(), b.clone()])?,
        primitive("mul", |_, v| probe(mul(v[0], v[1])?, 3), &[a.clone(), b.clone()])?,
        primitive("scale", |_, v| probe(scale(v[0], -2.5), 4), &[a.clone()])?,
        primitive("mul_channel", |_, v| probe(mul_channel(v[0], v[1])?, 5), &[a.clone(), gain])?,
        primitive("relu", |_, v| probe(relu(v[0]), 6), &[away])?,
        primitive("gelu", |_, v| probe(gelu(v[0]), 7), &[a.clone()])?,
        primitive(
            "conv2d",
            |_, v| probe(conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 1))?, 8),
            &[x.clone(), w_dense.clone(), b3.clone()],
        )?,
        primitive(
            "conv2d_strided",
            |_, v| probe(conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1, 1))?, 9),
            &[x.clone(), w_dense, b3],
        )?,
        primitive(
            "conv2d_grouped",
            |_, v| probe(conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 2))?, 10),
            &[x, w_group, b6],
        )?,
        primitive("layer_norm", |_, v| probe(layer_norm(v[0], v[1], v[2], 1e-5)?, 11), &ln)?,
        primitive("softmax_last", |_, v| probe(softmax_last(v[0])?, 12), &[logits.clone()])?,
        primitive("attention", |_, v| probe(attention(v[0], v[1], v[2])?, 13), &qkv)?,
        primitive("bilinear_resize", |_, v| probe(bilinear_resize(v[0], 7, 4)?, 14), &[img.clone()])?,
        primitive("global_avg_pool", |_, v| probe(global_avg_pool(v[0])?, 15), &[img.clone()])?,
        primitive("pad_reflect", |_, v| probe(pad_reflect(v[0], 7, 9)?, 16), &[img.clone()])?,
        primitive("pad_zero", |_, v| probe(pad_zero(v[0], 5, 8)?, 17), &[img.clone()])?,
        primitive("crop", |_, v| probe(crop(v[0], 1, 2, 2, 3)?, 18), &[img.clone()])?,
        primitive(
            "remap",
            |_, v| probe(remap(v[0], vec![Some(3), None, Some(0)], vec![Some(5), Some(5), Some(1), None])?, 19),
            &[img.clone()],
        )?,
        primitive(
            "tokens",
            |_, v| probe(from_tokens(scale(to_tokens(v[0]), 2.0), 4, 6)?, 20),
            &[img.clone()],
        )?,
        primitive(
            "slice_concat_channels",
            |_, v| {
                let p = slice_channels(v[0], 1, 1)?;
                let q = slice_channels(v[0], 0, 1)?;
                probe(concat_channels(&[p, q, p])?, 21)
            },
            &[img.clone()],
        )?,
        primitive("mean", |_, v| Ok(mean(mul(v[0], v[0])?)), &[img.clone()])?,
        primitive("dwt2", |_, v| probe(dwt2_var(v[0])?, 22), &[img.clone()])?,
        primitive("idwt2", |_, v| probe(idwt2_var(v[0])?, 23), &[rand([1, 8, 2, 3], &mut r)])?,
    ];
    out.push(primitive(
        "softmax_cross_entropy",
        move |_, v| softmax_cross_entropy(v[0], &classes),
        &[logits],
    )?);
    out.push(primitive(
        "masked_l1",
        move |_, v| masked_l1(v[0], &target, &valid),
        &[offsets],
    )?);
    Ok(out)
}

/// One attention block with support values, all parameters perturbed off their init.
pub fn ewtb_check(seed: u64) -> Result<GradCheckResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EwtbConfig::new(4, 2, 2, 3)?;
    let mut p = EwtbParams::init(cfg, &mut r);
    for t in p.values.tensors_mut() {
        let noise = Tensor::uniform(t.shape(), -0.2, 0.2, &mut r);
        t.add_assign(&noise);
    }
    let mut inputs = vec![rand([1, 4, 4, 4], &mut r), rand([1, 3, 2, 2], &mut r)];
    inputs.extend(p.values.tensors().iter().cloned());
    let set = p.values;
    let err = grad_check(
        move |_, v| {
            let bound = Bound::from_vars(&set, v[2..].to_vec());
            probe(ewtb_forward(v[0], Some(v[1]), &bound.scope(""), &cfg)?, 24)
        },
        &inputs,
        EPS,
    )?;
    Ok(GradCheckResult::new("ewtb_block", err, PRIMITIVE_TOLERANCE))
}

/// Training loss of `config` on one synthetic 64x64 splice, probing
/// `per_tensor` random coordinates of every parameter tensor.
pub fn model_check(config: &ModelConfig, seed: u64, per_tensor: usize) -> Result<GradCheckResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::init(config.clone(), &mut r)?;
    // zero-initialised heads would make most gradients vanish
    for t in model.values.tensors_mut() {
        let noise = Tensor::uniform(t.shape(), -0.05, 0.05, &mut r);
        t.add_assign(&noise);
    }
    let sample = synth_sample(seed, SynthSpec::new(ManipulationKind::Splice, 64, 64))?;
    let item = TrainItem::from_sample(&sample)?;
    let batch = Batch::new(&[&item])?;
    let weights = LossWeights::default();
    let set = model.values.clone();
    let cfg = config.clone();
    let err = grad_check_sampled(
        move |_: &Tape, v: &[Var<'_>]| {
            let bound = Bound::from_vars(&set, v.to_vec());
            Ok(batch_loss(&bound, &cfg, &batch, &weights)?.0)
        },
        model.values.tensors(),
        EPS,
        per_tensor,
        &mut r,
    )?;
    Ok(GradCheckResult::new("full_model_loss", err, MODEL_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let res = primitive_suite(0).unwrap();
        assert!(res.len() >= 25);
        for r in &res {
            assert!(r.passed, "{} {}", r.name, r.rel_error);
        }
        assert!(ewtb_check(1).unwrap().passed);
    }

    #[test]
    fn broken_backward_is_caught() {
        // gradient of x*x reported as x instead of 2x
        let err = grad_check(
            |tape, v| {
                let x = v[0];
                let xv = (*x.value()).clone();
                let val = xv.map(|a| a * a);
                let y = tape.op(val, &[x], Box::new(move |g, _| vec![Some(g.zip_map(&xv, |g, a| g * a).unwrap())]));
                Ok(sum(y))
            },
            &[Tensor::full([1, 1, 1, 2], 1.5)],
            EPS,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn tiny_model_loss() {
        let r = model_check(&ModelConfig::tiny(), 3, 1).unwrap();
        assert!(r.passed, "{}", r.rel_error);
    }
}
