//! Deployment-oriented robustness measures.
//!
//! - Translation consistency: four corner crops of an `S x S` input are
//!   predicted independently and compared on their common overlap.
//! - Input-order, preprocessing, brightness and scale sensitivity: the
//!   per-sample absolute change of a metric under a perturbation, averaged
//!   over the dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{connected_components, Connectivity};
use crate::metrics::{instances_from_ids, object_prf, pixel_metrics, ScoredInstance};
use crate::raster::{
    apply_normalization, argmax_labels, resize_bilinear_plane, softmax, BandStack, ClassGrid, LabelMask,
    LogitMap, NormalizationSpec, Window, INTERIOR,
};
use crate::report::csv_cells;
use crate::tiler::{gaussian_kernel, predict_stack, run_tiled, ModelBackend, TilingSpec};

/// Patch size `S` and crop size `p`, with `S/2 < p < S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencySpec {
    pub patch_size: usize,
    pub crop_size: usize,
}

impl Default for ConsistencySpec {
    fn default() -> Self {
        ConsistencySpec {
            patch_size: 256,
            crop_size: 192,
        }
    }
}

impl ConsistencySpec {
    pub fn new(patch_size: usize, crop_size: usize) -> Result<Self> {
        let spec = ConsistencySpec { patch_size, crop_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, p) = (self.patch_size, self.crop_size);
        if !(2 * p > s && p < s) {
            return Err(Error::invalid(format!("crop size {p} must satisfy {s}/2 < p < {s}")));
        }
        Ok(())
    }

    /// Side of the overlap region `2p - S`.
    pub fn overlap_side(&self) -> usize {
        2 * self.crop_size - self.patch_size
    }
}

/// Fraction of overlap pixels whose label agrees across all four corner crops.
pub fn consistency(model: &dyn ModelBackend, x: &BandStack, spec: &ConsistencySpec) -> Result<f64> {
    spec.validate()?;
    let (s, p) = (spec.patch_size, spec.crop_size);
    if x.height() != s || x.width() != s {
        return Err(Error::shape(format!(
            "consistency needs a {s}x{s} input, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    let shift = s - p;
    let mut labels = Vec::with_capacity(4);
    for (r0, c0) in [(0, 0), (0, shift), (shift, 0), (shift, shift)] {
        let crop = x.crop(&Window::new(r0, c0, p, p)?)?;
        let lab = argmax_labels(&predict_stack(model, &crop)?);
        labels.push((r0, c0, lab));
    }
    let mut agree = 0usize;
    for r in shift..p {
        for c in shift..p {
            let first = labels[0].2.get(r - labels[0].0, c - labels[0].1);
            if labels.iter().all(|(r0, c0, l)| l.get(r - r0, c - c0) == first) {
                agree += 1;
            }
        }
    }
    let side = spec.overlap_side();
    Ok(agree as f64 / (side * side) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub crop_size: usize,
    pub overlap_side: usize,
    pub mean_consistency: f64,
}

/// Mean consistency over `inputs` for each crop size.
pub fn consistency_sweep(
    model: &dyn ModelBackend,
    inputs: &[BandStack],
    patch_size: usize,
    crop_sizes: &[usize],
) -> Result<Vec<SweepPoint>> {
    if inputs.is_empty() {
        return Err(Error::invalid("consistency sweep needs at least one input"));
    }
    crop_sizes
        .iter()
        .map(|&p| {
            let spec = ConsistencySpec::new(patch_size, p)?;
            let scores = inputs
                .iter()
                .map(|x| consistency(model, x, &spec))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint {
                crop_size: p,
                overlap_side: spec.overlap_side(),
                mean_consistency: scores.iter().sum::<f64>() / scores.len() as f64,
            })
        })
        .collect()
}

/// Raw band stack and its reference labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: BandStack,
    pub gt: LabelMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Interior-class pixel IoU.
    #[default]
    PixelIou,
    /// Object F1 at confidence 0.5 and IoU 0.5.
    ObjectF1,
}

/// Shared evaluation settings for the sensitivity measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: Metric,
    /// Reference normalization `g_ref` applied to raw inputs.
    pub reference: NormalizationSpec,
    /// Tiled inference for inputs larger than one patch; `None` predicts whole inputs.
    pub tiling: Option<TilingSpec>,
    pub connectivity: Connectivity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric: Metric::PixelIou,
            reference: NormalizationSpec::ScaleOffset {
                scale: 3000.0,
                offset: 0.0,
            },
            tiling: None,
            connectivity: Connectivity::Four,
        }
    }
}

impl EvalConfig {
    pub fn with_metric(metric: Metric) -> Self {
        EvalConfig {
            metric,
            ..Default::default()
        }
    }

    /// Logits for an already-normalized input.
    pub fn predict(&self, model: &dyn ModelBackend, x: &BandStack) -> Result<LogitMap> {
        match &self.tiling {
            Some(spec) if x.height() > spec.patch_size || x.width() > spec.patch_size => {
                let kernel = gaussian_kernel(spec.patch_size, spec.default_sigma())?;
                Ok(run_tiled(model, x, spec, &kernel, 1)?.logits)
            }
            _ => predict_stack(model, x),
        }
    }

    /// Metric of `logits` against `gt`; `None` when undefined (e.g. no
    /// interior pixels in either map).
    pub fn score(&self, logits: &LogitMap, gt: &LabelMask) -> Result<Option<f64>> {
        let pred = argmax_labels(logits);
        match self.metric {
            Metric::PixelIou => Ok(pixel_metrics(&pred, gt)?.interior.iou),
            Metric::ObjectF1 => {
                let prob = softmax(logits)?;
                let interior = prob.plane(INTERIOR as usize);
                let ids = connected_components(&pred, INTERIOR, self.connectivity);
                let preds = instances_from_ids(&ids, None)
                    .into_iter()
                    .map(|mut inst| {
                        let s: f64 = inst.pixels.iter().map(|&px| interior[px as usize] as f64).sum();
                        inst.confidence = s / inst.pixels.len() as f64;
                        inst
                    })
                    .collect::<Vec<ScoredInstance>>();
                let gts = instances_from_ids(&connected_components(gt, INTERIOR, self.connectivity), None);
                Ok(Some(object_prf(&preds, &gts, 0.5, 0.5)?.f1))
            }
        }
    }

    fn normalize(&self, x: &BandStack) -> Result<BandStack> {
        Ok(apply_normalization(x, &self.reference)?.stack)
    }

    /// Metric of the model on one raw sample under the reference normalization.
    pub fn evaluate(&self, model: &dyn ModelBackend, sample: &Sample) -> Result<Option<f64>> {
        let logits = self.predict(model, &self.normalize(&sample.x)?)?;
        self.score(&logits, &sample.gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSensitivity {
    pub index: usize,
    pub m_ref: Option<f64>,
    /// One value per perturbation variant.
    pub m_variants: Vec<Option<f64>>,
    /// Mean `|m_ref - m_j|` over the variants where both are defined.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub metric: Metric,
    pub m_ref: Option<f64>,
    /// Mean over samples and variants of the perturbed metric.
    pub m_perturbed: Option<f64>,
    /// Mean per-sample delta over samples where it is defined.
    pub delta: Option<f64>,
    pub per_sample: Vec<SampleSensitivity>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Evaluates every sample under the reference and each perturbation in parallel;
/// `variant(sample, j)` returns the logits and the label grid to score against.
fn sensitivity<F>(
    model: &dyn ModelBackend,
    samples: &[Sample],
    config: &EvalConfig,
    variants: usize,
    variant: F,
) -> Result<SensitivityReport>
where
    F: Fn(&Sample, usize) -> Result<LogitMap> + Sync,
{
    if samples.is_empty() {
        return Err(Error::invalid("sensitivity needs at least one sample"));
    }
    if variants == 0 {
        return Err(Error::invalid("sensitivity needs at least one variant"));
    }
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let m_ref = config.evaluate(model, sample)?;
            let m_variants = (0..variants)
                .map(|j| config.score(&variant(sample, j)?, &sample.gt))
                .collect::<Result<Vec<_>>>()?;
            let delta = m_ref.and_then(|r| mean(m_variants.iter().flatten().map(|m| (r - m).abs())));
            Ok(SampleSensitivity {
                index,
                m_ref,
                m_variants,
                delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport {
        metric: config.metric,
        m_ref: mean(per_sample.iter().filter_map(|s| s.m_ref)),
        m_perturbed: mean(per_sample.iter().flat_map(|s| s.m_variants.iter().flatten().copied())),
        delta: mean(per_sample.iter().filter_map(|s| s.delta)),
        per_sample,
    })
}

/// Sensitivity to presenting the temporal frames in `order` instead of canonical order.
pub fn input_order_sensitivity_with(
    model: &dyn ModelBackend,
    samples: &[Sample],
    config: &EvalConfig,
    order: &[usize],
) -> Result<SensitivityReport> {
    sensitivity(model, samples, config, 1, |s, _| {
        let permuted = s.x.permute_frames(order)?;
        config.predict(model, &config.normalize(&permuted)?)
    })
}

/// Sensitivity to reversing the frame order.
pub fn input_order_sensitivity(
    model: &dyn ModelBackend,
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<SensitivityReport> {
    let frames = samples.first().map_or(0, |s| s.x.frames());
    if frames < 2 {
        return Err(Error::invalid("input-order sensitivity needs at least two frames"));
    }
    let order: Vec<usize> = (0..frames).rev().collect();
    input_order_sensitivity_with(model, samples, config, &order)
}

/// The four default alternative normalizations.
pub fn default_preprocessing_variants() -> Vec<NormalizationSpec> {
    vec![
        NormalizationSpec::ScaleOffset {
            scale: 10000.0,
            offset: -1000.0,
        },
        NormalizationSpec::ScaleOffset {
            scale: 10000.0,
            offset: 0.0,
        },
        NormalizationSpec::ScaleOffset {
            scale: 3000.0,
            offset: 0.0,
        },
        NormalizationSpec::PercentileMinMax {
            p_low: 1.0,
            p_high: 99.0,
        },
    ]
}

/// Sensitivity to replacing the reference normalization with each of `variants`.
pub fn preprocessing_sensitivity(
    model: &dyn ModelBackend,
    samples: &[Sample],
    config: &EvalConfig,
    variants: &[NormalizationSpec],
) -> Result<SensitivityReport> {
    for v in variants {
        v.validate()?;
    }
    sensitivity(model, samples, config, variants.len(), |s, j| {
        config.predict(model, &apply_normalization(&s.x, &variants[j])?.stack)
    })
}

/// Sensitivity to multiplying raw valid pixel values by each factor.
pub fn brightness_sensitivity(
    model: &dyn ModelBackend,
    samples: &[Sample],
    config: &EvalConfig,
    factors: &[f64],
) -> Result<SensitivityReport> {
    if factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::invalid("brightness factors must be positive"));
    }
    sensitivity(model, samples, config, factors.len(), |s, j| {
        let f = factors[j];
        let bright = s.x.map_valid(|_, _, v| (v as f64 * f) as f32);
        config.predict(model, &config.normalize(&bright)?)
    })
}

pub const DEFAULT_SCALE_FACTORS: [f64; 2] = [0.5, 2.0];
pub const MIN_RESIZED_SIDE: usize = 8;

/// Sensitivity to running the model at a different resolution: the normalized
/// input is resized bilinearly, and the logits resized bilinearly back to the
/// label grid before scoring.
pub fn scale_sensitivity(
    model: &dyn ModelBackend,
    samples: &[Sample],
    config: &EvalConfig,
    factors: &[f64],
) -> Result<SensitivityReport> {
    for &f in factors {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::invalid(format!("scale factor must be positive, got {f}")));
        }
        for s in samples {
            let (h, w) = scaled_size(s.x.height(), s.x.width(), f);
            if h < MIN_RESIZED_SIDE || w < MIN_RESIZED_SIDE {
                return Err(Error::invalid(format!(
                    "factor {f} resizes a {}x{} sample to {h}x{w}, below {MIN_RESIZED_SIDE} px",
                    s.x.height(),
                    s.x.width()
                )));
            }
        }
    }
    sensitivity(model, samples, config, factors.len(), |s, j| {
        let (h, w) = (s.x.height(), s.x.width());
        let (nh, nw) = scaled_size(h, w, factors[j]);
        let x = config.normalize(&s.x)?.resize_bilinear(nh, nw)?;
        let logits = config.predict(model, &x)?;
        resize_logits(&logits, h, w)
    })
}

fn scaled_size(h: usize, w: usize, f: f64) -> (usize, usize) {
    ((h as f64 * f).round() as usize, (w as f64 * f).round() as usize)
}

fn resize_logits(logits: &LogitMap, height: usize, width: usize) -> Result<LogitMap> {
    let (h, w) = (logits.height(), logits.width());
    if (h, w) == (height, width) {
        return Ok(logits.clone());
    }
    let data = (0..logits.classes())
        .flat_map(|c| resize_bilinear_plane(logits.plane(c), h, w, height, width))
        .collect();
    let gt = logits
        .geotransform()
        .scaled(width as f64 / w as f64, height as f64 / h as f64);
    LogitMap::new(logits.classes(), height, width, data, gt)
}

/// Robustness block in the column order Object F1, Pixel IoU, then the F1 and
/// IoU deltas for input order, brightness, preprocessing and scale, then
/// agreement at the configured crop size and averaged over the sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub object_f1: Option<f64>,
    pub pixel_iou: Option<f64>,
    pub order_f1_delta: Option<f64>,
    pub order_iou_delta: Option<f64>,
    pub brightness_f1_delta: Option<f64>,
    pub brightness_iou_delta: Option<f64>,
    pub preprocessing_f1_delta: Option<f64>,
    pub preprocessing_iou_delta: Option<f64>,
    pub scale_f1_delta: Option<f64>,
    pub scale_iou_delta: Option<f64>,
    pub agreement: Option<f64>,
    pub agreement_sweep_mean: Option<f64>,
}

impl RobustnessSummary {
    pub const CSV_HEADER: &'static str = "object_f1,pixel_iou,order_f1_delta,order_iou_delta,\
brightness_f1_delta,brightness_iou_delta,preprocessing_f1_delta,preprocessing_iou_delta,\
scale_f1_delta,scale_iou_delta,agreement,agreement_sweep_mean";

    pub fn csv_row(&self) -> String {
        csv_cells(&[
            self.object_f1,
            self.pixel_iou,
            self.order_f1_delta,
            self.order_iou_delta,
            self.brightness_f1_delta,
            self.brightness_iou_delta,
            self.preprocessing_f1_delta,
            self.preprocessing_iou_delta,
            self.scale_f1_delta,
            self.scale_iou_delta,
            self.agreement,
            self.agreement_sweep_mean,
        ])
    }
}
