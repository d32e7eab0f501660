//! Per-image metrics, aggregation and degradation sweeps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::data::{item_seed, load_entry, read_manifest, DegradationSpec, ManipulationKind, Sample};
use crate::error::{Error, Result};
use crate::network::{predict, ModelParams};
use crate::supervision::{auc, pixel_f1};

/// One image to score.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub sample: Sample,
}

impl EvalItem {
    pub fn from_samples(prefix: &str, samples: Vec<Sample>) -> Vec<EvalItem> {
        samples
            .into_iter()
            .enumerate()
            .map(|(i, sample)| EvalItem {
                id: format!("{prefix}{i:05}"),
                sample,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub kind: ManipulationKind,
    pub manipulated_pixels: usize,
    /// `None` for images without manipulated pixels.
    pub f1: Option<f64>,
    /// `None` for single-class images.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub images: usize,
    pub f1_images: usize,
    pub auc_images: usize,
    pub mean_f1: Option<f64>,
    pub mean_auc: Option<f64>,
    pub per_kind: BTreeMap<String, KindSummary>,
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindSummary {
    pub images: usize,
    pub mean_f1: Option<f64>,
    pub mean_auc: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalSummary {
    pub fn from_metrics(per_image: Vec<ImageMetrics>) -> Self {
        let mut per_kind = BTreeMap::new();
        for kind in ManipulationKind::ALL {
            let rows: Vec<&ImageMetrics> = per_image.iter().filter(|m| m.kind == kind).collect();
            if rows.is_empty() {
                continue;
            }
            per_kind.insert(
                kind.as_str().to_string(),
                KindSummary {
                    images: rows.len(),
                    mean_f1: mean(rows.iter().filter_map(|m| m.f1)),
                    mean_auc: mean(rows.iter().filter_map(|m| m.auc)),
                },
            );
        }
        Self {
            images: per_image.len(),
            f1_images: per_image.iter().filter(|m| m.f1.is_some()).count(),
            auc_images: per_image.iter().filter(|m| m.auc.is_some()).count(),
            mean_f1: mean(per_image.iter().filter_map(|m| m.f1)),
            mean_auc: mean(per_image.iter().filter_map(|m| m.auc)),
            per_kind,
            per_image,
        }
    }
}

pub fn score_image(model: &ModelParams, id: &str, sample: &Sample, threshold: f64) -> Result<ImageMetrics> {
    let prob = predict(model, &sample.image)?.mask_probability();
    let truth = sample.mask.bits();
    let positives = sample.mask.count();
    let f1 = if positives > 0 {
        Some(pixel_f1(prob.data(), truth, threshold)?)
    } else {
        None
    };
    let auc = match auc(prob.data(), truth) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        id: id.to_string(),
        kind: sample.meta.kind,
        manipulated_pixels: positives,
        f1,
        auc,
    })
}

pub fn evaluate(model: &ModelParams, items: &[EvalItem], threshold: f64) -> Result<EvalSummary> {
    let per_image = items
        .iter()
        .map(|it| score_image(model, &it.id, &it.sample, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_metrics(per_image))
}

/// Manifest entry that could not be loaded.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemError {
    pub id: String,
    pub message: String,
}

/// Loads every entry it can; failures are listed instead of aborting.
pub fn load_manifest_items(path: &Path) -> Result<(Vec<EvalItem>, Vec<ItemError>)> {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for entry in read_manifest(path)? {
        match load_entry(&entry) {
            Ok(sample) => items.push(EvalItem {
                id: entry.id,
                sample,
            }),
            Err(e) => errors.push(ItemError {
                id: entry.id,
                message: e.to_string(),
            }),
        }
    }
    Ok((items, errors))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub spec: DegradationSpec,
    pub severity: f64,
    pub mean_f1: Option<f64>,
    pub mean_auc: Option<f64>,
}

/// Metric-versus-strength curve for one degradation kind, clean run first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCurve {
    pub kind: String,
    pub clean_f1: Option<f64>,
    pub clean_auc: Option<f64>,
    pub points: Vec<SweepPoint>,
    /// Mean F1 never rises as severity grows, starting from the clean value.
    pub f1_non_increasing: bool,
}

/// Noise seed of image `index` under sweep point `point`.
fn degradation_seed(base: u64, point: usize, index: usize) -> u64 {
    item_seed(base ^ ((point as u64 + 1) << 40), index as u64)
}

pub fn evaluate_degraded(
    model: &ModelParams,
    items: &[EvalItem],
    spec: DegradationSpec,
    threshold: f64,
    seed: u64,
) -> Result<EvalSummary> {
    let degraded = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            Ok(EvalItem {
                id: it.id.clone(),
                sample: it.sample.degraded(spec, degradation_seed(seed, 0, i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(model, &degraded, threshold)
}

/// Groups `specs` by kind, orders each group by severity and evaluates every point.
pub fn robustness_sweep(
    model: &ModelParams,
    items: &[EvalItem],
    clean: &EvalSummary,
    specs: &[DegradationSpec],
    threshold: f64,
    seed: u64,
) -> Result<Vec<SweepCurve>> {
    let mut kinds: Vec<&'static str> = Vec::new();
    for s in specs {
        if !kinds.contains(&s.kind()) {
            kinds.push(s.kind());
        }
    }
    let mut curves = Vec::new();
    for kind in kinds {
        let mut group: Vec<DegradationSpec> = specs.iter().copied().filter(|s| s.kind() == kind).collect();
        group.sort_by(|a, b| a.severity().total_cmp(&b.severity()));
        let mut points = Vec::new();
        for (j, spec) in group.into_iter().enumerate() {
            let point_seed = degradation_seed(seed, j + 1, 0);
            let s = evaluate_degraded(model, items, spec, threshold, point_seed)?;
            points.push(SweepPoint {
                spec,
                severity: spec.severity(),
                mean_f1: s.mean_f1,
                mean_auc: s.mean_auc,
            });
        }
        let f1s: Vec<f64> = std::iter::once(clean.mean_f1)
            .chain(points.iter().map(|p| p.mean_f1))
            .flatten()
            .collect();
        curves.push(SweepCurve {
            kind: kind.to_string(),
            clean_f1: clean.mean_f1,
            clean_auc: clean.mean_auc,
            f1_non_increasing: f1s.windows(2).all(|w| w[1] <= w[0]),
            points,
        });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, write_manifest, write_sample};
    use crate::network::ModelConfig;

    fn items(n: usize) -> Vec<EvalItem> {
        let kinds = [ManipulationKind::Splice, ManipulationKind::Authentic];
        EvalItem::from_samples("t", synth_corpus(9, n, &kinds, 64, 64).unwrap())
    }

    #[test]
    fn mean_is_mean_of_entries() {
        let model = ModelParams::init(ModelConfig::tiny(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1)).unwrap();
        let s = evaluate(&model, &items(4), 0.5).unwrap();
        assert_eq!(s.images, 4);
        assert_eq!(s.f1_images, 2);
        let f1: Vec<f64> = s.per_image.iter().filter_map(|m| m.f1).collect();
        assert!((s.mean_f1.unwrap() - f1.iter().sum::<f64>() / 2.0).abs() < 1e-15);
        assert!(s.per_image[1].auc.is_none());
        assert_eq!(s.per_kind["splice"].images, 2);
    }

    #[test]
    fn zero_model_is_uninformative() {
        let model = ModelParams::zeros(ModelConfig::tiny()).unwrap();
        let s = evaluate(&model, &items(4), 0.5).unwrap();
        assert_eq!(s.mean_auc, Some(0.5));
        assert_eq!(s.mean_f1, Some(0.0));
    }

    #[test]
    fn identity_points_reproduce_clean_run() {
        let model = ModelParams::init(ModelConfig::tiny(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2)).unwrap();
        let it = items(2);
        let clean = evaluate(&model, &it, 0.5).unwrap();
        for spec in [DegradationSpec::Resize(1.0), DegradationSpec::GaussianBlur(0.01)] {
            let d = evaluate_degraded(&model, &it, spec, 0.5, 0).unwrap();
            assert!((d.mean_auc.unwrap() - clean.mean_auc.unwrap()).abs() < 1e-6, "{spec}");
        }
    }

    #[test]
    fn bad_entries_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries: Vec<_> = items(2)
            .iter()
            .map(|it| write_sample(dir.path(), &it.id, &it.sample).unwrap())
            .collect();
        let mut missing = entries[0].clone();
        missing.id = "gone".into();
        missing.image_path = "images/gone.ppm".into();
        entries.push(missing);
        let path = dir.path().join("m.tsv");
        write_manifest(&path, &entries).unwrap();
        let (ok, bad) = load_manifest_items(&path).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].id, "gone");
    }
}
