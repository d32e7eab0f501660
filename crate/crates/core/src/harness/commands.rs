//! The command implementations behind the `ffrt` binary.
//!
//! Every command writes a JSON report under the output directory and returns
//! an [`Outcome`]. Errors map to process exit codes through [`exit_code`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synth_corpus, write_manifest, write_sample, DegradationSpec, ManipulationKind, Sample};
use crate::error::{Error, Result};
use crate::network::{count_flops, count_params, predict, FlopReport, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::wavelet::frequency_report;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::eval::{
    evaluate, evaluate_degraded, load_manifest_items, robustness_sweep, EvalItem, EvalSummary, ItemError,
    SweepCurve,
};
use super::gradsuite::{ewtb_check, model_check, primitive_suite, GradCheckResult};
use super::report::{write_report, Report};
use super::train::{StepLog, TrainItem, Trainer};

/// Reference efficiency figures of the full-size detector.
pub const REFERENCE_PARAMS: f64 = 8.36e6;
pub const REFERENCE_FLOPS: f64 = 2.16e9;
pub const REFERENCE_SIZE: usize = 224;
pub const PARAMS_BAND: f64 = 0.20;
pub const FLOPS_BAND: f64 = 0.30;

pub const CHECKPOINT_FILE: &str = "checkpoint.ffrt";

/// Inputs shared by every command.
#[derive(Clone, Debug)]
pub struct CommandOptions {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Checkpoint to resume from (train) or to evaluate (eval).
    pub checkpoint: Option<PathBuf>,
    /// Manifest overriding the configured or synthesized data.
    pub manifest: Option<PathBuf>,
    /// Stop training once this many steps are done; the schedule still spans `train.steps`.
    pub until: Option<u64>,
}

impl CommandOptions {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            checkpoint: None,
            manifest: None,
            until: None,
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub report: PathBuf,
    /// False when a check the command asserts did not hold.
    pub passed: bool,
}

/// 1 usage/config, 3 numeric failure, 2 everything data-related.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn corpus(seed: u64, count: usize, kinds: &[ManipulationKind], cfg: &RunConfig) -> Result<Vec<Sample>> {
    synth_corpus(seed, count, kinds, cfg.data.height, cfg.data.width)
}

fn manifest_items(path: &Path) -> Result<Vec<EvalItem>> {
    let (items, errors) = load_manifest_items(path)?;
    match errors.first() {
        Some(e) => Err(Error::Parse {
            offset: 0,
            message: format!("{}: entry {}: {} ({} failing entries)", path.display(), e.id, e.message, errors.len()),
        }),
        None => Ok(items),
    }
}

fn train_items(opts: &CommandOptions) -> Result<Vec<EvalItem>> {
    let c = &opts.config;
    match opts.manifest.as_ref().or(c.data.train_manifest.as_ref()) {
        Some(p) => manifest_items(p),
        None => Ok(EvalItem::from_samples(
            "train",
            corpus(c.data.train_seed, c.data.train_count, &c.data.kinds, c)?,
        )),
    }
}

fn synthetic_eval_items(c: &RunConfig) -> Result<Vec<EvalItem>> {
    Ok(EvalItem::from_samples(
        "eval",
        corpus(c.data.eval_seed, c.data.eval_count, &c.data.kinds, c)?,
    ))
}

// ---------------------------------------------------------------- synth

#[derive(Serialize)]
struct SynthReport {
    sets: Vec<SynthSet>,
}

#[derive(Serialize)]
struct SynthSet {
    name: &'static str,
    manifest: String,
    seed: u64,
    count: usize,
    kinds: Vec<ManipulationKind>,
    attempts: Vec<u64>,
}

/// Writes the training and held-out corpora as PNM files plus manifests.
pub fn cmd_synth(opts: &CommandOptions) -> Result<Outcome> {
    let c = &opts.config;
    let mut sets = Vec::new();
    for (name, seed, count) in [
        ("train", c.data.train_seed, c.data.train_count),
        ("eval", c.data.eval_seed, c.data.eval_count),
    ] {
        let dir = opts.out.join(name);
        let samples = corpus(seed, count, &c.data.kinds, c)?;
        let entries = samples
            .iter()
            .enumerate()
            .map(|(i, s)| write_sample(&dir, &format!("{name}{i:05}"), s))
            .collect::<Result<Vec<_>>>()?;
        let manifest = dir.join("manifest.tsv");
        write_manifest(&manifest, &entries)?;
        sets.push(SynthSet {
            name,
            manifest: manifest.display().to_string(),
            seed,
            count,
            kinds: samples.iter().map(|s| s.meta.kind).collect(),
            attempts: samples.iter().map(|s| s.meta.attempts).collect(),
        });
    }
    let report = opts.out_file("synth.json")?;
    write_report(&report, &Report::new("synth", SynthReport { sets }))?;
    Ok(Outcome { report, passed: true })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodicEval {
    pub step: u64,
    pub mean_f1: Option<f64>,
    pub mean_auc: Option<f64>,
}

#[derive(Serialize)]
struct TrainReport {
    config: String,
    start_step: u64,
    end_step: u64,
    items: usize,
    /// Set when the run stopped on a numeric failure.
    aborted: Option<String>,
    /// File name of the checkpoint, relative to the report.
    checkpoint: String,
    losses: Vec<StepLog>,
    evals: Vec<PeriodicEval>,
    train_eval: Option<EvalSummaryBrief>,
}

#[derive(Serialize)]
struct EvalSummaryBrief {
    images: usize,
    mean_f1: Option<f64>,
    mean_auc: Option<f64>,
}

impl From<&EvalSummary> for EvalSummaryBrief {
    fn from(s: &EvalSummary) -> Self {
        Self {
            images: s.images,
            mean_f1: s.mean_f1,
            mean_auc: s.mean_auc,
        }
    }
}

/// Runs (or resumes) training and writes `checkpoint.ffrt` and `train.json`.
///
/// Progress lines go to `log`. A non-finite loss or parameter stops the run:
/// the last good state is still saved and the error is returned.
pub fn cmd_train(opts: &CommandOptions, log: &mut dyn Write) -> Result<Outcome> {
    let data = train_items(opts)?;
    let items = data
        .iter()
        .map(|it| TrainItem::from_sample(&it.sample))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = match &opts.checkpoint {
        Some(p) => Trainer::resume(load_checkpoint(p)?, items)?,
        None => Trainer::new(opts.config.clone(), items)?,
    };
    let cfg = trainer.state().config.clone();
    let held = if cfg.train.eval_every > 0 {
        match &cfg.data.eval_manifest {
            Some(p) => manifest_items(p)?,
            None => synthetic_eval_items(&cfg)?,
        }
    } else {
        Vec::new()
    };
    let start = trainer.step_count();
    let stop = opts.until.map_or(cfg.train.steps, |u| u.min(cfg.train.steps));
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    let mut aborted = None;
    let io = |e| Error::io("<log>", e);
    writeln!(log, "training {} items from step {start} to {stop}", data.len()).map_err(io)?;
    while trainer.step_count() < stop {
        match trainer.step() {
            Ok(l) => {
                writeln!(
                    log,
                    "step {} lr {:.3e} ce {:.6} bry {:.6} pos {:.6} total {:.6}",
                    l.step, l.lr, l.ce, l.boundary, l.position, l.total
                )
                .map_err(io)?;
                losses.push(l);
                if cfg.train.eval_every > 0 && l.step % cfg.train.eval_every == 0 {
                    let s = evaluate(&trainer.model(), &held, cfg.eval.threshold)?;
                    writeln!(log, "eval step {} f1 {:?} auc {:?}", l.step, s.mean_f1, s.mean_auc).map_err(io)?;
                    evals.push(PeriodicEval {
                        step: l.step,
                        mean_f1: s.mean_f1,
                        mean_auc: s.mean_auc,
                    });
                }
            }
            Err(Error::Numeric(msg)) => {
                writeln!(log, "numeric failure: {msg}; saving step {}", trainer.step_count()).map_err(io)?;
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let ck_path = opts.out_file(CHECKPOINT_FILE)?;
    save_checkpoint(&ck_path, trainer.state())?;
    let train_eval = if aborted.is_none() {
        Some(EvalSummaryBrief::from(&evaluate(&trainer.model(), &data, cfg.eval.threshold)?))
    } else {
        None
    };
    let report = opts.out_file("train.json")?;
    write_report(
        &report,
        &Report::new(
            "train",
            TrainReport {
                config: cfg.to_text(),
                start_step: start,
                end_step: trainer.step_count(),
                items: data.len(),
                aborted: aborted.clone(),
                checkpoint: CHECKPOINT_FILE.to_string(),
                losses,
                evals,
                train_eval,
            },
        ),
    )?;
    match aborted {
        Some(msg) => Err(Error::Numeric(format!(
            "{msg}; last good state saved to {}",
            ck_path.display()
        ))),
        None => Ok(Outcome { report, passed: true }),
    }
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub spec: DegradationSpec,
    pub f1_delta: f64,
    pub auc_delta: f64,
}

/// Degradations whose parameter makes them (nearly) the identity.
pub const IDENTITY_SPECS: [DegradationSpec; 3] = [
    DegradationSpec::GaussianBlur(0.01),
    DegradationSpec::Resize(1.0),
    DegradationSpec::GaussianNoise(1e-9),
];

fn delta(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

pub fn identity_checks(model: &ModelParams, items: &[EvalItem], clean: &EvalSummary, threshold: f64) -> Result<Vec<IdentityCheck>> {
    IDENTITY_SPECS
        .iter()
        .map(|&spec| {
            let s = evaluate_degraded(model, items, spec, threshold, 0)?;
            Ok(IdentityCheck {
                spec,
                f1_delta: delta(s.mean_f1, clean.mean_f1),
                auc_delta: delta(s.mean_auc, clean.mean_auc),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    step: u64,
    source: String,
    skipped: Vec<ItemError>,
    clean: EvalSummary,
    /// The sweep parameters are this tool's own choice.
    sweep_ranges: &'static str,
    sweep: Vec<SweepCurve>,
    identity: Vec<IdentityCheck>,
}

/// Scores a checkpoint on a manifest (or the synthesized held-out set) and
/// re-scores it under every configured degradation.
pub fn cmd_eval(opts: &CommandOptions) -> Result<Outcome> {
    let ck_path = opts.checkpoint.clone().unwrap_or_else(|| opts.out.join(CHECKPOINT_FILE));
    let ck: Checkpoint = load_checkpoint(&ck_path)?;
    let model = ModelParams {
        config: ck.config.model.clone(),
        values: ck.params,
    };
    let c = &opts.config;
    let (items, skipped, source) = match opts.manifest.as_ref().or(c.data.eval_manifest.as_ref()) {
        Some(p) => {
            let (items, errors) = load_manifest_items(p)?;
            (items, errors, p.display().to_string())
        }
        None => (synthetic_eval_items(c)?, Vec::new(), format!("synthetic:seed={}", c.data.eval_seed)),
    };
    if items.is_empty() {
        return Err(Error::EmptyRegion("no evaluable items".into()));
    }
    let clean = evaluate(&model, &items, c.eval.threshold)?;
    let sweep = robustness_sweep(&model, &items, &clean, &c.eval.sweep, c.eval.threshold, c.eval.noise_seed)?;
    let identity = identity_checks(&model, &items, &clean, c.eval.threshold)?;
    let report = opts.out_file("eval.json")?;
    write_report(
        &report,
        &Report::new(
            "eval",
            EvalReport {
                checkpoint: ck_path.display().to_string(),
                step: ck.step,
                source,
                skipped,
                clean,
                sweep_ranges: "tool-defined",
                sweep,
                identity,
            },
        ),
    )?;
    Ok(Outcome { report, passed: true })
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub median_ms: f64,
    pub images_per_s: f64,
    pub flops: u64,
    /// Same network with every attention replaced by plain multi-head attention.
    pub vanilla_flops: u64,
}

#[derive(Serialize)]
struct BenchReport {
    preset: String,
    /// Timings depend on this machine only.
    timing: &'static str,
    repeats: usize,
    warmup: usize,
    rows: Vec<BenchRow>,
}

/// FLOPs of the network if every attention were the vanilla ablation.
pub fn vanilla_flops(r: &FlopReport) -> u64 {
    let iwsa: u64 = r.stages.iter().map(|s| s.iwsa_flops).sum();
    let vanilla: u64 = r.stages.iter().map(|s| s.vanilla_msa_flops).sum();
    r.flops - iwsa + vanilla
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn cmd_bench(opts: &CommandOptions) -> Result<Outcome> {
    let c = &opts.config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let model = ModelParams::init(c.model.clone(), &mut rng)?;
    let mut rows = Vec::new();
    for &size in &c.bench.sizes {
        let img = Tensor::uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        for _ in 0..c.bench.warmup {
            predict(&model, &img)?;
        }
        let times = (0..c.bench.repeats)
            .map(|_| {
                let t = Instant::now();
                predict(&model, &img)?;
                Ok(t.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Result<Vec<_>>>()?;
        let median_ms = median(times);
        let fr = count_flops(&c.model, size, size)?;
        rows.push(BenchRow {
            size,
            median_ms,
            images_per_s: 1e3 / median_ms,
            flops: fr.flops,
            vanilla_flops: vanilla_flops(&fr),
        });
    }
    let report = opts.out_file("bench.json")?;
    write_report(
        &report,
        &Report::new(
            "bench",
            BenchReport {
                preset: c.preset.clone(),
                timing: "machine-relative wall clock, single thread",
                repeats: c.bench.repeats,
                warmup: c.bench.warmup,
                rows,
            },
        ),
    )?;
    Ok(Outcome { report, passed: true })
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyEntry {
    pub id: String,
    pub kind: ManipulationKind,
    pub manipulated_high: f64,
    pub authentic_high: Option<f64>,
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencySummary {
    pub samples: usize,
    pub manipulated: usize,
    pub compared: usize,
    pub holding: usize,
    /// `None` when nothing could be compared.
    pub fraction: Option<f64>,
    pub min_fraction: f64,
    pub passed: bool,
    pub note: Option<String>,
    pub entries: Vec<FrequencyEntry>,
}

/// High-frequency energy of each manipulated box against an authentic box.
pub fn frequency_summary(items: &[EvalItem], min_fraction: f64) -> Result<FrequencySummary> {
    if items.is_empty() {
        return Err(Error::EmptyRegion("analyze: empty sample set".into()));
    }
    let mut entries = Vec::new();
    for it in items {
        let s = &it.sample;
        if !s.meta.kind.is_manipulated() || s.mask.is_empty() {
            continue;
        }
        let f = frequency_report(&s.image, &s.mask)?;
        entries.push(FrequencyEntry {
            id: it.id.clone(),
            kind: s.meta.kind,
            manipulated_high: f.manipulated.high_energy,
            authentic_high: f.authentic.map(|a| a.high_energy),
            holds: f.manipulated_has_more_detail(),
        });
    }
    let compared = entries.iter().filter(|e| e.holds.is_some()).count();
    let holding = entries.iter().filter(|e| e.holds == Some(true)).count();
    let fraction = (compared > 0).then(|| holding as f64 / compared as f64);
    let note = (entries.is_empty()).then(|| "zero manipulated samples; comparison skipped".to_string());
    Ok(FrequencySummary {
        samples: items.len(),
        manipulated: entries.len(),
        compared,
        holding,
        fraction,
        min_fraction,
        passed: fraction.map_or(true, |f| f >= min_fraction),
        note,
        entries,
    })
}

pub fn cmd_analyze(opts: &CommandOptions) -> Result<Outcome> {
    let c = &opts.config;
    let items = match &opts.manifest {
        Some(p) => manifest_items(p)?,
        None => EvalItem::from_samples("analyze", corpus(c.analyze.seed, c.analyze.count, &c.analyze.kinds, c)?),
    };
    let summary = frequency_summary(&items, c.analyze.min_fraction)?;
    let passed = summary.passed;
    let report = opts.out_file("analyze.json")?;
    write_report(&report, &Report::new("analyze", summary))?;
    Ok(Outcome { report, passed })
}

// ---------------------------------------------------------------- flops

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleShare {
    pub module: String,
    pub flops: u64,
    pub flops_share: f64,
    pub params: usize,
    pub params_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceComparison {
    pub size: usize,
    pub params: usize,
    pub reference_params: f64,
    pub params_deviation: f64,
    pub params_within_band: bool,
    /// Count at the padded size, rescaled by the input-to-padded area ratio.
    pub flops: f64,
    pub padded: (usize, usize),
    pub padded_flops: u64,
    pub reference_flops: f64,
    pub flops_deviation: f64,
    pub flops_within_band: bool,
    /// Per-module contribution to the totals being compared.
    pub modules: Vec<ModuleShare>,
    pub stages_cheaper_than_vanilla: bool,
}

pub fn reference_comparison(cfg: &ModelConfig) -> Result<ReferenceComparison> {
    let r = count_flops(cfg, REFERENCE_SIZE, REFERENCE_SIZE)?;
    let params = count_params(cfg)?;
    let pd = params as f64 / REFERENCE_PARAMS - 1.0;
    let fd = r.flops_at_input / REFERENCE_FLOPS - 1.0;
    Ok(ReferenceComparison {
        size: REFERENCE_SIZE,
        params,
        reference_params: REFERENCE_PARAMS,
        params_deviation: pd,
        params_within_band: pd.abs() <= PARAMS_BAND,
        flops: r.flops_at_input,
        padded: r.padded,
        padded_flops: r.flops,
        reference_flops: REFERENCE_FLOPS,
        flops_deviation: fd,
        flops_within_band: fd.abs() <= FLOPS_BAND,
        modules: r
            .rows
            .iter()
            .map(|m| ModuleShare {
                module: m.module.clone(),
                flops: m.flops,
                flops_share: m.flops as f64 / r.flops as f64,
                params: m.params,
                params_share: m.params as f64 / params as f64,
            })
            .collect(),
        stages_cheaper_than_vanilla: r.stages.iter().all(|s| s.iwsa_flops < s.vanilla_msa_flops),
    })
}

#[derive(Serialize)]
struct FlopsReport {
    preset: String,
    configured: FlopReport,
    vanilla_flops: u64,
    reference: ReferenceComparison,
}

/// Counts the configured model at its input size and compares the full-size
/// preset against the reference figures.
pub fn cmd_flops(opts: &CommandOptions) -> Result<Outcome> {
    let c = &opts.config;
    let (h, w) = c.model.input_size;
    let configured = count_flops(&c.model, h, w)?;
    let reference = reference_comparison(&ModelConfig::paper())?;
    let passed = reference.params_within_band && reference.flops_within_band && reference.stages_cheaper_than_vanilla;
    let report = opts.out_file("flops.json")?;
    write_report(
        &report,
        &Report::new(
            "flops",
            FlopsReport {
                preset: c.preset.clone(),
                vanilla_flops: vanilla_flops(&configured),
                configured,
                reference,
            },
        ),
    )?;
    Ok(Outcome { report, passed })
}

// ---------------------------------------------------------------- gradcheck

#[derive(Serialize)]
struct GradReport {
    passed: bool,
    checks: Vec<GradCheckResult>,
}

/// Coordinates probed per parameter tensor in the whole-model check.
pub const MODEL_PROBES: usize = 2;

pub fn gradient_checks(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut checks = primitive_suite(seed)?;
    checks.push(ewtb_check(seed)?);
    checks.push(model_check(&ModelConfig::tiny(), seed, MODEL_PROBES)?);
    Ok(checks)
}

pub fn cmd_gradcheck(opts: &CommandOptions) -> Result<Outcome> {
    let checks = gradient_checks(opts.config.seed)?;
    let passed = checks.iter().all(|c| c.passed);
    let report = opts.out_file("gradcheck.json")?;
    write_report(&report, &Report::new("gradcheck", GradReport { passed, checks }))?;
    Ok(Outcome { report, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(dir: &Path, extra: &str) -> CommandOptions {
        let text = format!("model.preset = tiny\ndata.train_count = 2\ndata.eval_count = 2\ntrain.batch_size = 2\n{extra}");
        CommandOptions::new(RunConfig::parse(&text).unwrap(), dir)
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(exit_code(&Error::Parse { offset: 0, message: "x".into() }), 2);
    }

    #[test]
    fn synth_then_train_on_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let o = opts(dir.path(), "train.steps = 2");
        cmd_synth(&o).unwrap();
        let mut o2 = o.clone();
        o2.manifest = Some(dir.path().join("train/manifest.tsv"));
        o2.out = dir.path().join("run");
        let mut log = Vec::new();
        cmd_train(&o2, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert!(text.contains("step 2 lr"));
        let ck = load_checkpoint(&o2.out.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.step, 2);
    }

    #[test]
    fn non_finite_run_saves_last_good_state() {
        let dir = tempfile::tempdir().unwrap();
        let o = opts(dir.path(), "train.steps = 3\noptimizer.lr = 1e300\noptimizer.lr_final = 1e300");
        let err = cmd_train(&o, &mut std::io::sink()).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        let ck = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert!(ck.step < 3);
        let report = fs::read_to_string(dir.path().join("train.json")).unwrap();
        assert!(report.contains("\"aborted\": \""));
    }

    #[test]
    fn analyze_edge_cases() {
        let kinds = [ManipulationKind::Authentic];
        let auth = EvalItem::from_samples("a", synth_corpus(1, 2, &kinds, 32, 32).unwrap());
        let s = frequency_summary(&auth, 0.8).unwrap();
        assert_eq!(s.manipulated, 0);
        assert!(s.note.is_some() && s.passed);
        let one = EvalItem::from_samples("s", synth_corpus(1, 1, &[ManipulationKind::Splice], 64, 64).unwrap());
        assert_eq!(frequency_summary(&one, 0.8).unwrap().entries.len(), 1);
        assert!(frequency_summary(&[], 0.8).is_err());
    }

    #[test]
    fn vanilla_column_and_reference() {
        let r = count_flops(&ModelConfig::tiny(), 64, 64).unwrap();
        assert!(vanilla_flops(&r) > r.flops);
        let cmp = reference_comparison(&ModelConfig::paper()).unwrap();
        assert!(cmp.params_within_band && cmp.flops_within_band);
        let share: f64 = cmp.modules.iter().map(|m| m.flops_share).sum();
        assert!((share - 1.0).abs() < 1e-12);
    }
}
