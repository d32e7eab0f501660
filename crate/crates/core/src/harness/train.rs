//! Deterministic single-threaded training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::network::{model_forward, ForwardOptions, ModelConfig, ModelParams};
use crate::numerics::{AdamWState, Tape, Tensor, Var};
use crate::params::Bound;
use crate::supervision::{
    loss_boundary, loss_ce, loss_position, total_loss, GroundTruth, LossBreakdown, LossWeights,
};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

/// One image with all of its training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    /// `[1, 3, H, W]`
    pub image: Tensor,
    /// `[1, 1, H, W]` class indices.
    pub mask: Tensor,
    pub boundary: Tensor,
    /// `[1, 2, H, W]`, normalized by width and height.
    pub offsets: Tensor,
    pub valid: Tensor,
}

/// Training-time augmentation of the stored items.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Random left-right mirror.
    Flip,
    /// Random dihedral transform, colour channel order and circular shift.
    Full,
}

impl Augment {
    pub fn as_str(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Flip => "flip",
            Augment::Full => "full",
        }
    }
}

impl std::str::FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "flip" => Ok(Augment::Flip),
            "full" => Ok(Augment::Full),
            _ => Err(Error::Config(format!("unknown augmentation `{s}` (none, flip, full)"))),
        }
    }
}

/// Geometric and photometric rearrangement applied identically to image and mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct View {
    /// bit 0 mirrors x, bit 1 mirrors y, bit 2 transposes (square inputs only).
    dihedral: u8,
    /// Index into the six orderings of three channels.
    channels: u8,
    shift: (usize, usize),
}

const CHANNEL_ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl View {
    const MIRROR: View = View {
        dihedral: 1,
        channels: 0,
        shift: (0, 0),
    };

    fn apply(&self, t: &Tensor) -> Tensor {
        let [n, c, h, w] = t.shape();
        let order = CHANNEL_ORDERS[self.channels as usize];
        let mut out = Tensor::zeros(t.shape());
        for b in 0..n {
            for ch in 0..c {
                let src_c = if c == 3 { order[ch] } else { ch };
                for y in 0..h {
                    for x in 0..w {
                        let (mut sy, mut sx) = ((y + self.shift.0) % h, (x + self.shift.1) % w);
                        if self.dihedral & 4 != 0 {
                            (sy, sx) = (sx, sy);
                        }
                        if self.dihedral & 1 != 0 {
                            sx = w - 1 - sx;
                        }
                        if self.dihedral & 2 != 0 {
                            sy = h - 1 - sy;
                        }
                        out.set(b, ch, y, x, t.at(b, src_c, sy, sx));
                    }
                }
            }
        }
        out
    }
}

impl TrainItem {
    pub fn new(image: &Tensor, mask: &Mask) -> Result<Self> {
        let [n, c, h, w] = image.shape();
        if n != 1 || c != 3 || mask.height() != h || mask.width() != w {
            return Err(Error::dim(format!(
                "training image {:?} does not match mask {}x{}",
                image.shape(),
                mask.height(),
                mask.width()
            )));
        }
        let gt = GroundTruth::new(mask);
        Ok(Self {
            image: image.clone(),
            mask: mask.to_tensor(),
            boundary: gt.boundary.to_tensor(),
            offsets: gt.normalized_offsets(),
            valid: gt.valid.to_tensor(),
        })
    }

    pub fn from_sample(s: &Sample) -> Result<Self> {
        Self::new(&s.image, &s.mask)
    }

    /// Left-right mirror image with targets recomputed from the mirrored mask.
    pub fn mirrored(&self) -> Result<Self> {
        self.viewed(View::MIRROR)
    }

    fn viewed(&self, v: View) -> Result<Self> {
        let mask = Mask::from_tensor(&v.apply(&self.mask))?;
        Self::new(&v.apply(&self.image), &mask)
    }
}

/// Items stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image: Tensor,
    pub mask: Tensor,
    pub boundary: Tensor,
    pub offsets: Tensor,
    pub valid: Tensor,
}

impl Batch {
    pub fn new(items: &[&TrainItem]) -> Result<Self> {
        let stack = |f: fn(&TrainItem) -> &Tensor| -> Result<Tensor> {
            Tensor::stack(&items.iter().map(|i| f(i).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            image: stack(|i| &i.image)?,
            mask: stack(|i| &i.mask)?,
            boundary: stack(|i| &i.boundary)?,
            offsets: stack(|i| &i.offsets)?,
            valid: stack(|i| &i.valid)?,
        })
    }
}

/// Weighted training loss of `batch` recorded on `params`' tape.
pub fn batch_loss<'t>(
    params: &Bound<'t>,
    config: &ModelConfig,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = params
        .vars()
        .first()
        .ok_or_else(|| Error::param("empty parameter set"))?
        .tape();
    let x = tape.constant(batch.image.clone());
    let out = model_forward(x, params, config, ForwardOptions::default())?;
    let ce = loss_ce(out.mask_logits, &batch.mask)?;
    let bry = loss_boundary(out.boundary_logits, &batch.boundary)?;
    let pos = loss_position(out.offsets, &batch.offsets, &batch.valid)?;
    total_loss(ce, bry, pos, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub boundary: f64,
    pub position: f64,
    pub total: f64,
}

pub struct Trainer {
    state: Checkpoint,
    items: Vec<TrainItem>,
    mirrored: Vec<TrainItem>,
}

impl Trainer {
    /// Fresh run: weights and batch order both derive from `config.seed`.
    pub fn new(config: RunConfig, items: Vec<TrainItem>) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(INIT_STREAM);
        let params = ModelParams::init(config.model.clone(), &mut init_rng)?.values;
        let optim = AdamWState::new(config.optimizer.adamw(), params.shapes());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(BATCH_STREAM);
        Self::resume(
            Checkpoint {
                config,
                step: 0,
                params,
                optim,
                rng,
            },
            items,
        )
    }

    pub fn resume(state: Checkpoint, items: Vec<TrainItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::param("training needs at least one item"));
        }
        let mirrored = if state.config.train.augment == Augment::Flip {
            items.iter().map(TrainItem::mirrored).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            state,
            items,
            mirrored,
        })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn model(&self) -> ModelParams {
        ModelParams {
            config: self.state.config.model.clone(),
            values: self.state.params.clone(),
        }
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.state.config.train.steps
    }

    /// One optimizer update. On failure the trainer keeps its previous state.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.state.config;
        let mut rng = self.state.rng.clone();
        let mut views = Vec::new();
        let mut picks: Vec<&TrainItem> = Vec::with_capacity(cfg.train.batch_size);
        for _ in 0..cfg.train.batch_size {
            let i = rng.gen_range(0..self.items.len());
            let item = &self.items[i];
            match cfg.train.augment {
                Augment::None => picks.push(item),
                Augment::Flip => picks.push(if rng.gen_bool(0.5) { &self.mirrored[i] } else { item }),
                Augment::Full => {
                    let [_, _, h, w] = item.image.shape();
                    let v = View {
                        dihedral: rng.gen_range(0..if h == w { 8 } else { 4 }),
                        channels: rng.gen_range(0..6),
                        shift: (rng.gen_range(0..h), rng.gen_range(0..w)),
                    };
                    views.push(item.viewed(v)?);
                }
            }
        }
        picks.extend(views.iter());
        let batch = Batch::new(&picks)?;
        let lr = cfg.optimizer.lr_at(self.state.step, cfg.train.steps);
        let tape = Tape::new();
        let bound = self.state.params.bind(&tape, true);
        let (total, parts) = batch_loss(&bound, &cfg.model, &batch, &cfg.loss)?;
        let grads = tape.backward(total)?;
        let g: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        let mut params = self.state.params.clone();
        let mut optim = self.state.optim.clone();
        optim.step_with_lr(params.tensors_mut(), &g, lr)?;
        if let Some((i, _)) = params
            .tensors()
            .iter()
            .enumerate()
            .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric(format!(
                "parameter {} became non-finite at step {}",
                params.names()[i],
                self.state.step + 1
            )));
        }
        self.state.params = params;
        self.state.optim = optim;
        self.state.rng = rng;
        self.state.step += 1;
        Ok(StepLog {
            step: self.state.step,
            lr,
            ce: parts.ce,
            boundary: parts.boundary,
            position: parts.position,
            total: parts.total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, ManipulationKind};

    fn small_config(steps: u64) -> RunConfig {
        RunConfig::parse(&format!(
            "model.preset = tiny\ntrain.batch_size = 2\ntrain.steps = {steps}\noptimizer.lr = 1e-3"
        ))
        .unwrap()
    }

    fn items() -> Vec<TrainItem> {
        synth_corpus(5, 3, &[ManipulationKind::Splice], 64, 64)
            .unwrap()
            .iter()
            .map(|s| TrainItem::from_sample(s).unwrap())
            .collect()
    }

    #[test]
    fn views_move_targets_with_pixels() {
        let it = &items()[1];
        let v = View {
            dihedral: 7,
            channels: 3,
            shift: (5, 9),
        };
        let t = it.viewed(v).unwrap();
        let order = CHANNEL_ORDERS[3];
        for (y, x) in [(0, 0), (10, 40), (63, 1)] {
            let (mut sy, mut sx) = ((y + 5) % 64, (x + 9) % 64);
            (sy, sx) = (63 - sx, 63 - sy);
            assert_eq!(t.mask.at(0, 0, y, x), it.mask.at(0, 0, sy, sx));
            assert_eq!(t.image.at(0, 1, y, x), it.image.at(0, order[1], sy, sx));
        }
        assert_eq!(t.mask.sum(), it.mask.sum());
    }

    #[test]
    fn mirrored_targets() {
        let it = &items()[0];
        let m = it.mirrored().unwrap();
        assert_eq!(m.image.at(0, 1, 3, 0), it.image.at(0, 1, 3, 63));
        assert_eq!(m.mirrored().unwrap(), *it);
        // x offsets change sign under the mirror
        let sx: f64 = it.offsets.data()[..4096].iter().zip(&it.mask.data()[..]).map(|(o, k)| o * k).sum();
        assert!(sx.abs() < 1e-9);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut c = small_config(2);
        c.optimizer.lr = 0.0;
        c.optimizer.lr_final = 0.0;
        let mut t = Trainer::new(c, items()).unwrap();
        let before = t.state().params.clone();
        t.step().unwrap();
        t.step().unwrap();
        assert_eq!(t.state().params, before);
        assert!(t.done());
    }

    #[test]
    fn logged_total_is_weighted_sum() {
        let mut t = Trainer::new(small_config(1), items()).unwrap();
        let l = t.step().unwrap();
        assert!((l.total - (l.ce + 2.0 * l.boundary + 5.0 * l.position)).abs() <= 1e-12);
        assert_eq!(l.lr, 1e-3);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut a = Trainer::new(small_config(4), items()).unwrap();
        let full: Vec<StepLog> = (0..4).map(|_| a.step().unwrap()).collect();
        let mut b = Trainer::new(small_config(4), items()).unwrap();
        let mut logs: Vec<StepLog> = (0..2).map(|_| b.step().unwrap()).collect();
        let bytes = b.state().encode();
        let mut c = Trainer::resume(Checkpoint::decode(&bytes).unwrap(), items()).unwrap();
        logs.extend((0..2).map(|_| c.step().unwrap()));
        assert_eq!(logs, full);
        assert_eq!(c.state().encode(), a.state().encode());
    }
}
