//! `key = value` run configuration with dotted sections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DegradationSpec, ManipulationKind};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::numerics::AdamWConfig;
use crate::supervision::LossWeights;

use super::train::Augment;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate reached at the last step; the decay is linear.
    pub lr_final: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_final: 1e-5,
            weight_decay: 0.025,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Rate used at `step` (0-based) of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
        self.lr + (self.lr_final - self.lr) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: u64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            eval_every: 0,
            augment: Augment::Flip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
    pub height: usize,
    pub width: usize,
    pub kinds: Vec<ManipulationKind>,
    pub train_seed: u64,
    pub eval_seed: u64,
    /// Training manifest; synthesized data is used when absent.
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 32,
            eval_count: 64,
            height: 64,
            width: 64,
            kinds: vec![ManipulationKind::Splice, ManipulationKind::Removal],
            train_seed: 1,
            eval_seed: 2,
            train_manifest: None,
            eval_manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub sweep: Vec<DegradationSpec>,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        use DegradationSpec::*;
        Self {
            threshold: 0.5,
            sweep: vec![
                GaussianBlur(0.5),
                GaussianBlur(1.0),
                GaussianBlur(2.0),
                GaussianNoise(0.02),
                GaussianNoise(0.05),
                GaussianNoise(0.1),
                Resize(0.75),
                Resize(0.5),
                Resize(0.25),
                JpegLike(90),
                JpegLike(70),
                JpegLike(50),
            ],
            noise_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeConfig {
    pub count: usize,
    pub kinds: Vec<ManipulationKind>,
    pub seed: u64,
    /// Fraction of samples that must show more detail in the manipulated box.
    pub min_fraction: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            count: 200,
            kinds: vec![ManipulationKind::Splice, ManipulationKind::Removal],
            seed: 3,
            min_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Square input sides.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128],
            repeats: 5,
            warmup: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Name of the preset the model section started from.
    pub preset: String,
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: "desk".into(),
            model: ModelConfig::desk(),
            optimizer: OptimConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "paper" => Ok(ModelConfig::paper()),
        "desk" => Ok(ModelConfig::desk()),
        "tiny" => Ok(ModelConfig::tiny()),
        other => Err(Error::Config(format!("unknown model preset `{other}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_kinds(key: &str, v: &str) -> Result<Vec<ManipulationKind>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|e: Error| Error::Config(format!("{key}: {e}"))))
        .collect()
}

fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((parse_num(key, h.trim())?, parse_num(key, w.trim())?)),
        None => {
            let s = parse_num(key, v)?;
            Ok((s, s))
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses config text. `model.preset` is applied before the other model
    /// keys regardless of order; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        let mut c = RunConfig::default();
        if let Some((_, name)) = entries.remove("model.preset") {
            c.model = preset(&name)?;
            c.preset = name;
        }
        for (key, (line, v)) in &entries {
            c.set(key, v)
                .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("configuration error: "))))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "model.input_size" => m.input_size = parse_size(key, v)?,
            "model.stem_channels" => {
                let l: Vec<usize> = parse_list(key, v)?;
                m.stem_channels = l
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected 3 widths")))?;
            }
            "model.cognitive_channels" => m.cognitive_channels = parse_list(key, v)?,
            "model.inspective_channels" => m.inspective_channels = parse_num(key, v)?,
            "model.heads" => m.heads = parse_num(key, v)?,
            "model.ffn_ratio" => m.ffn_ratio = parse_num(key, v)?,
            "model.sigma_kernel" => m.sigma_kernel = parse_num(key, v)?,
            "model.head_hidden" => m.head_hidden = parse_num(key, v)?,
            "optimizer.lr" => self.optimizer.lr = parse_num(key, v)?,
            "optimizer.lr_final" => self.optimizer.lr_final = parse_num(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse_num(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "optimizer.eps" => self.optimizer.eps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_num(key, v)?,
            "train.augment" => self.train.augment = v.parse()?,
            "loss.ce" => self.loss.ce = parse_num(key, v)?,
            "loss.boundary" => self.loss.boundary = parse_num(key, v)?,
            "loss.position" => self.loss.position = parse_num(key, v)?,
            "data.train_count" => self.data.train_count = parse_num(key, v)?,
            "data.eval_count" => self.data.eval_count = parse_num(key, v)?,
            "data.size" => (self.data.height, self.data.width) = parse_size(key, v)?,
            "data.kinds" => self.data.kinds = parse_kinds(key, v)?,
            "data.train_seed" => self.data.train_seed = parse_num(key, v)?,
            "data.eval_seed" => self.data.eval_seed = parse_num(key, v)?,
            "data.train_manifest" => self.data.train_manifest = (!v.is_empty()).then(|| v.into()),
            "data.eval_manifest" => self.data.eval_manifest = (!v.is_empty()).then(|| v.into()),
            "eval.threshold" => self.eval.threshold = parse_num(key, v)?,
            "eval.sweep" => self.eval.sweep = parse_list(key, v)?,
            "eval.noise_seed" => self.eval.noise_seed = parse_num(key, v)?,
            "analyze.count" => self.analyze.count = parse_num(key, v)?,
            "analyze.kinds" => self.analyze.kinds = parse_kinds(key, v)?,
            "analyze.seed" => self.analyze.seed = parse_num(key, v)?,
            "analyze.min_fraction" => self.analyze.min_fraction = parse_num(key, v)?,
            "bench.sizes" => self.bench.sizes = parse_list(key, v)?,
            "bench.repeats" => self.bench.repeats = parse_num(key, v)?,
            "bench.warmup" => self.bench.warmup = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("optimizer.lr", o.lr)?;
        finite_nonneg("optimizer.lr_final", o.lr_final)?;
        finite_nonneg("optimizer.weight_decay", o.weight_decay)?;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) {
            return Err(Error::Config("optimizer.eps must be > 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.loss
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.data;
        if d.kinds.is_empty() || self.analyze.kinds.is_empty() {
            return Err(Error::Config("manipulation type lists must not be empty".into()));
        }
        if d.train_manifest.is_none() && (d.height < crate::data::MIN_CANVAS || d.width < crate::data::MIN_CANVAS) {
            return Err(Error::Config(format!("data.size {}x{} below the generator minimum", d.height, d.width)));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) || !(0.0..=1.0).contains(&self.analyze.min_fraction) {
            return Err(Error::Config("thresholds and fractions must lie in [0, 1]".into()));
        }
        if self.bench.repeats == 0 || self.bench.sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("bench needs repeats >= 1 and positive sizes".into()));
        }
        Ok(())
    }

    /// Every key in a fixed order; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.preset", self.preset.clone());
        kv("model.input_size", format!("{}x{}", m.input_size.0, m.input_size.1));
        kv("model.stem_channels", join(&m.stem_channels));
        kv("model.cognitive_channels", join(&m.cognitive_channels));
        kv("model.inspective_channels", m.inspective_channels.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.ffn_ratio", m.ffn_ratio.to_string());
        kv("model.sigma_kernel", m.sigma_kernel.to_string());
        kv("model.head_hidden", m.head_hidden.to_string());
        kv("optimizer.lr", format!("{:e}", o.lr));
        kv("optimizer.lr_final", format!("{:e}", o.lr_final));
        kv("optimizer.weight_decay", format!("{:e}", o.weight_decay));
        kv("optimizer.beta1", format!("{:e}", o.beta1));
        kv("optimizer.beta2", format!("{:e}", o.beta2));
        kv("optimizer.eps", format!("{:e}", o.eps));
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.eval_every", self.train.eval_every.to_string());
        kv("train.augment", self.train.augment.as_str().to_string());
        kv("loss.ce", format!("{:e}", self.loss.ce));
        kv("loss.boundary", format!("{:e}", self.loss.boundary));
        kv("loss.position", format!("{:e}", self.loss.position));
        kv("data.train_count", d.train_count.to_string());
        kv("data.eval_count", d.eval_count.to_string());
        kv("data.size", format!("{}x{}", d.height, d.width));
        kv("data.kinds", join(&d.kinds));
        kv("data.train_seed", d.train_seed.to_string());
        kv("data.eval_seed", d.eval_seed.to_string());
        kv("data.train_manifest", path_text(&d.train_manifest));
        kv("data.eval_manifest", path_text(&d.eval_manifest));
        kv("eval.threshold", format!("{:e}", self.eval.threshold));
        kv("eval.sweep", join(&self.eval.sweep));
        kv("eval.noise_seed", self.eval.noise_seed.to_string());
        kv("analyze.count", self.analyze.count.to_string());
        kv("analyze.kinds", join(&self.analyze.kinds));
        kv("analyze.seed", self.analyze.seed.to_string());
        kv("analyze.min_fraction", format!("{:e}", self.analyze.min_fraction));
        kv("bench.sizes", join(&self.bench.sizes));
        kv("bench.repeats", self.bench.repeats.to_string());
        kv("bench.warmup", self.bench.warmup.to_string());
        s
    }
}
