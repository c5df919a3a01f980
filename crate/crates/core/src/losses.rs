//! Segmentation losses with analytic gradients through the softmax.
//!
//! Every loss is computed in `f64` from logits and a label mask; pixels
//! labelled [`UNKNOWN`] are excluded from all sums and receive zero gradient.
//! Overlap losses are evaluated per class and combined as a class-weighted
//! mean, with smoothing `eps` guarding empty classes:
//!
//! - Dice: `1 - (2I + eps) / (P + T + eps)`
//! - log-cosh Dice: `ln cosh(dice)`
//! - Jaccard: `1 - (I + eps) / (P + T - I + eps)`
//! - Tversky: `1 - (I + eps/2) / (I + a·FP + b·FN + eps/2)`
//! - fractal Tanimoto of depth `d`: `1 - ½[F(p,t) + F(1-p,1-t)]` with
//!   `F = (1/d) Σ_{i<d} (I + eps) / (2^i (Σp² + Σt²) - (2^{i+1} - 1) I + eps)`
//!
//! where `I = Σpt`, `P = Σp`, `T = Σt`, `FP = Σp(1-t)`, `FN = Σ(1-p)t`.
//! Halving the Tversky smoothing makes `a = b = ½` coincide exactly with Dice.
//! Cross-entropy and focal loss are per-pixel terms weighted by the class
//! weight of the target and divided by the evaluated pixel count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassGrid, LabelMask, LogitMap, UNKNOWN};
use crate::rng::Rng;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_FTNMT_DEPTH: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

/// Background / interior / boundary weights `[0.05, 0.95 - ω, ω]`.
pub fn class_weights(omega: f64) -> Result<ClassWeights> {
    if !(0.0..=0.95).contains(&omega) {
        return Err(Error::invalid(format!("boundary weight must be in [0, 0.95], got {omega}")));
    }
    // Snap to a 1e-12 decimal grid so that e.g. ω = 0.75 gives exactly 0.20.
    let interior = ((0.95 - omega) * 1e12).round() / 1e12;
    Ok(ClassWeights {
        w: vec![0.05, interior, omega],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Dice,
    LogcoshDice,
    Jaccard,
    Focal { gamma: f64 },
    Tversky { alpha: f64, beta: f64 },
    Ftnmt { depth: u32 },
}

impl LossKind {
    /// One representative of each family, as exercised by `loss-check`.
    pub fn all_defaults() -> Vec<LossKind> {
        vec![
            LossKind::Ce,
            LossKind::Dice,
            LossKind::LogcoshDice,
            LossKind::Jaccard,
            LossKind::Focal { gamma: 2.0 },
            LossKind::Tversky { alpha: 0.3, beta: 0.7 },
            LossKind::Ftnmt {
                depth: DEFAULT_FTNMT_DEPTH,
            },
        ]
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Ce => write!(f, "ce"),
            LossKind::Dice => write!(f, "dice"),
            LossKind::LogcoshDice => write!(f, "logcosh_dice"),
            LossKind::Jaccard => write!(f, "jaccard"),
            LossKind::Focal { gamma } => write!(f, "focal:{gamma}"),
            LossKind::Tversky { alpha, beta } => write!(f, "tversky:{alpha}:{beta}"),
            LossKind::Ftnmt { depth } => write!(f, "ftnmt:{depth}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Parses `ce`, `dice`, `logcosh_dice`, `jaccard`, `focal[:γ]`,
    /// `tversky[:α:β]` and `ftnmt[:d]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize, default: f64| -> Result<f64> {
            parts.get(i).map_or(Ok(default), |v| {
                v.parse::<f64>().map_err(|_| Error::invalid(format!("bad number '{v}' in loss '{s}'")))
            })
        };
        let kind = match parts[0].to_ascii_lowercase().as_str() {
            "ce" => LossKind::Ce,
            "dice" => LossKind::Dice,
            "logcosh_dice" | "logcosh-dice" => LossKind::LogcoshDice,
            "jaccard" => LossKind::Jaccard,
            "focal" => LossKind::Focal { gamma: num(1, 2.0)? },
            "tversky" => LossKind::Tversky {
                alpha: num(1, 0.3)?,
                beta: num(2, 0.7)?,
            },
            "ftnmt" => {
                let d = num(1, DEFAULT_FTNMT_DEPTH as f64)?;
                if d < 0.0 || d.fract() != 0.0 {
                    return Err(Error::invalid("fractal depth must be a non-negative integer"));
                }
                LossKind::Ftnmt { depth: d as u32 }
            }
            other => return Err(Error::invalid(format!("unknown loss '{other}'"))),
        };
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub class_weights: Option<ClassWeights>,
    pub eps: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            class_weights: None,
            eps: DEFAULT_EPS,
        }
    }

    pub fn weighted(kind: LossKind, weights: ClassWeights) -> Self {
        LossSpec {
            class_weights: Some(weights),
            ..LossSpec::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Focal { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return Err(Error::invalid("focal gamma must be >= 0"))
            }
            LossKind::Tversky { alpha, beta } if !(alpha >= 0.0 && beta >= 0.0) => {
                return Err(Error::invalid("tversky alpha and beta must be >= 0"))
            }
            _ => {}
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("smoothing eps must be positive"));
        }
        if let Some(cw) = &self.class_weights {
            if cw.w.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::invalid("class weights must be finite and >= 0"));
            }
            if cw.w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("class weights must not all be zero"));
            }
        }
        Ok(())
    }
}

/// A differentiable function of `C x H x W` logits against a label mask.
pub trait Objective {
    /// Loss value and gradient with respect to the logits.
    fn value_and_grad(&self, logits: &[f64], classes: usize, target: &LabelMask) -> Result<(f64, Vec<f64>)>;

    fn name(&self) -> String;
}

impl Objective for LossSpec {
    fn value_and_grad(&self, logits: &[f64], classes: usize, target: &LabelMask) -> Result<(f64, Vec<f64>)> {
        self.validate()?;
        let prep = Prepared::new(logits, classes, target, self.class_weights.as_ref())?;
        let (value, dp) = match self.kind {
            LossKind::Ce => prep.focal(0.0),
            LossKind::Focal { gamma } => prep.focal(gamma),
            LossKind::Dice => prep.overlap(|s| dice(s, self.eps)),
            LossKind::LogcoshDice => {
                let (d, mut g) = prep.overlap(|s| dice(s, self.eps));
                let scale = d.tanh();
                g.iter_mut().for_each(|v| *v *= scale);
                (d.cosh().ln(), g)
            }
            LossKind::Jaccard => prep.overlap(|s| jaccard(s, self.eps)),
            LossKind::Tversky { alpha, beta } => prep.overlap(|s| tversky(s, alpha, beta, self.eps)),
            LossKind::Ftnmt { depth } => prep.overlap(|s| ftnmt(s, depth.max(1), self.eps)),
        };
        Ok((value, prep.through_softmax(&dp)))
    }

    fn name(&self) -> String {
        match &self.class_weights {
            Some(_) => format!("weighted {}", self.kind),
            None => self.kind.to_string(),
        }
    }
}

/// Weighted sum of losses, e.g. `CE + Dice`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeLoss {
    pub terms: Vec<(f64, LossSpec)>,
}

impl CompositeLoss {
    /// Equal unit weights.
    pub fn sum(specs: Vec<LossSpec>) -> Self {
        CompositeLoss {
            terms: specs.into_iter().map(|s| (1.0, s)).collect(),
        }
    }
}

impl Objective for CompositeLoss {
    fn value_and_grad(&self, logits: &[f64], classes: usize, target: &LabelMask) -> Result<(f64, Vec<f64>)> {
        if self.terms.is_empty() {
            return Err(Error::invalid("composite loss has no terms"));
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; logits.len()];
        for (w, spec) in &self.terms {
            let (v, g) = spec.value_and_grad(logits, classes, target)?;
            total += w * v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
        }
        Ok((total, grad))
    }

    fn name(&self) -> String {
        self.terms
            .iter()
            .map(|(w, s)| if *w == 1.0 { s.name() } else { format!("{w}·{}", s.name()) })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

fn logits_f64(logits: &LogitMap, target: &LabelMask) -> Result<Vec<f64>> {
    if logits.height() != target.height() || logits.width() != target.width() {
        return Err(Error::shape(format!(
            "logits are {}x{}, target is {}x{}",
            logits.height(),
            logits.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(logits.values().iter().map(|&v| v as f64).collect())
}

pub fn loss_forward(spec: &dyn Objective, logits: &LogitMap, target: &LabelMask) -> Result<f64> {
    let z = logits_f64(logits, target)?;
    Ok(spec.value_and_grad(&z, logits.classes(), target)?.0)
}

/// Analytic gradient with respect to the logits, `C x H x W`.
pub fn loss_grad(spec: &dyn Objective, logits: &LogitMap, target: &LabelMask) -> Result<Vec<f64>> {
    let z = logits_f64(logits, target)?;
    Ok(spec.value_and_grad(&z, logits.classes(), target)?.1)
}

/// Maximum relative error between central differences and the analytic
/// gradient, over all coordinates (or a seeded sample of 512 when larger).
pub fn finite_diff_check(spec: &dyn Objective, logits: &LogitMap, target: &LabelMask, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let classes = logits.classes();
    let z = logits_f64(logits, target)?;
    let (_, grad) = spec.value_and_grad(&z, classes, target)?;
    let coords: Vec<usize> = if z.len() <= 512 {
        (0..z.len()).collect()
    } else {
        let mut all: Vec<usize> = (0..z.len()).collect();
        Rng::new(0x0fd_c4ec).shuffle(&mut all);
        all.truncate(512);
        all.sort_unstable();
        all
    };
    let mut worst: f64 = 0.0;
    let mut probe = z.clone();
    for i in coords {
        probe[i] = z[i] + h;
        let up = spec.value_and_grad(&probe, classes, target)?.0;
        probe[i] = z[i] - h;
        let down = spec.value_and_grad(&probe, classes, target)?.0;
        probe[i] = z[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1e-8));
    }
    Ok(worst)
}

/// Seeded test problem: standard-normal logits and uniform labels with
/// roughly one pixel in eight marked unknown.
pub fn random_problem(seed: u64, classes: usize, height: usize, width: usize) -> Result<(LogitMap, LabelMask)> {
    let mut rng = Rng::new(seed);
    let n = height * width;
    let z: Vec<f32> = (0..classes * n).map(|_| rng.normal() as f32).collect();
    let t: Vec<u8> = (0..n)
        .map(|_| {
            if rng.below(8) == 0 {
                UNKNOWN
            } else {
                rng.below(classes as u64) as u8
            }
        })
        .collect();
    let gt = crate::raster::GeoTransform::default();
    Ok((
        LogitMap::new(classes, height, width, z, gt.clone())?,
        LabelMask::new(height, width, t, gt)?,
    ))
}

/// Softmax probabilities, one-hot targets and weights over evaluated pixels.
struct Prepared {
    classes: usize,
    n: usize,
    p: Vec<f64>,
    /// Target class per pixel, `None` when masked.
    target: Vec<Option<usize>>,
    n_eval: usize,
    weights: Vec<f64>,
}

/// Per-class sufficient statistics handed to overlap losses.
struct ClassSums<'a> {
    p: &'a [f64],
    t: &'a [f64],
    mask: &'a [bool],
}

impl Prepared {
    fn new(logits: &[f64], classes: usize, target: &LabelMask, weights: Option<&ClassWeights>) -> Result<Self> {
        let n = target.height() * target.width();
        if classes < 2 || logits.len() != classes * n {
            return Err(Error::shape(format!(
                "expected {classes}x{}x{} logits, got {} values",
                target.height(),
                target.width(),
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let weights = match weights {
            Some(cw) if cw.w.len() != classes => {
                return Err(Error::invalid(format!(
                    "{} class weights for {classes} classes",
                    cw.w.len()
                )))
            }
            Some(cw) => cw.w.clone(),
            None => vec![1.0; classes],
        };
        let mut tgt = Vec::with_capacity(n);
        for &v in target.data() {
            if v == UNKNOWN {
                tgt.push(None);
            } else if (v as usize) < classes {
                tgt.push(Some(v as usize));
            } else {
                return Err(Error::invalid(format!("target label {v} outside 0..{classes}")));
            }
        }
        let n_eval = tgt.iter().filter(|t| t.is_some()).count();
        if n_eval == 0 {
            return Err(Error::invalid("every target pixel is masked"));
        }
        let mut p = vec![0.0; classes * n];
        for px in 0..n {
            let m = (0..classes).map(|c| logits[c * n + px]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..classes {
                let e = (logits[c * n + px] - m).exp();
                p[c * n + px] = e;
                s += e;
            }
            for c in 0..classes {
                p[c * n + px] /= s;
            }
        }
        Ok(Prepared {
            classes,
            n,
            p,
            target: tgt,
            n_eval,
            weights,
        })
    }

    /// Focal loss (cross-entropy when `gamma == 0`) and its gradient in p.
    fn focal(&self, gamma: f64) -> (f64, Vec<f64>) {
        let n = self.n;
        let mut total = 0.0;
        let mut dp = vec![0.0; self.classes * n];
        let inv = 1.0 / self.n_eval as f64;
        for px in 0..n {
            let Some(c) = self.target[px] else { continue };
            let w = self.weights[c];
            let pt = self.p[c * n + px];
            let lp = pt.ln();
            let q = 1.0 - pt;
            if gamma == 0.0 {
                total -= w * lp;
                dp[c * n + px] = -w / pt * inv;
            } else {
                total -= w * q.powf(gamma) * lp;
                dp[c * n + px] = -w * (q.powf(gamma) / pt - gamma * q.powf(gamma - 1.0) * lp) * inv;
            }
        }
        (total * inv, dp)
    }

    /// Class-weighted mean of a per-class overlap loss; `f` returns the
    /// class loss and its gradient with respect to that class's p.
    fn overlap(&self, f: impl Fn(&ClassSums) -> (f64, Vec<f64>)) -> (f64, Vec<f64>) {
        let n = self.n;
        let mask: Vec<bool> = self.target.iter().map(Option::is_some).collect();
        let wsum: f64 = self.weights.iter().sum();
        let mut total = 0.0;
        let mut dp = vec![0.0; self.classes * n];
        for c in 0..self.classes {
            let w = self.weights[c] / wsum;
            if w == 0.0 {
                continue;
            }
            let t: Vec<f64> = self
                .target
                .iter()
                .map(|&tc| if tc == Some(c) { 1.0 } else { 0.0 })
                .collect();
            let sums = ClassSums {
                p: &self.p[c * n..(c + 1) * n],
                t: &t,
                mask: &mask,
            };
            let (l, g) = f(&sums);
            total += w * l;
            for px in 0..n {
                dp[c * n + px] = w * g[px];
            }
        }
        (total, dp)
    }

    /// Chains dL/dp into dL/dz: `dz_c = p_c (g_c - Σ_k p_k g_k)`.
    fn through_softmax(&self, dp: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut dz = vec![0.0; self.classes * n];
        for px in 0..n {
            if self.target[px].is_none() {
                continue;
            }
            let dot: f64 = (0..self.classes).map(|k| self.p[k * n + px] * dp[k * n + px]).sum();
            for c in 0..self.classes {
                dz[c * n + px] = self.p[c * n + px] * (dp[c * n + px] - dot);
            }
        }
        dz
    }
}

fn masked_sum(s: &ClassSums, f: impl Fn(f64, f64) -> f64) -> f64 {
    s.p.iter()
        .zip(s.t)
        .zip(s.mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| f(p, t))
        .sum()
}

/// Loss `1 - num/den` for affine num/den in p: `∂num/∂p = a_num(t)`, `∂den/∂p = a_den(p, t)`.
fn ratio_loss(s: &ClassSums, num: f64, den: f64, dnum: impl Fn(f64) -> f64, dden: impl Fn(f64, f64) -> f64) -> (f64, Vec<f64>) {
    let g = s
        .p
        .iter()
        .zip(s.t)
        .zip(s.mask)
        .map(|((&p, &t), &m)| {
            if m {
                -(dnum(t) * den - num * dden(p, t)) / (den * den)
            } else {
                0.0
            }
        })
        .collect();
    (1.0 - num / den, g)
}

fn dice(s: &ClassSums, eps: f64) -> (f64, Vec<f64>) {
    let i = masked_sum(s, |p, t| p * t);
    let ps = masked_sum(s, |p, _| p);
    let ts = masked_sum(s, |_, t| t);
    ratio_loss(s, 2.0 * i + eps, ps + ts + eps, |t| 2.0 * t, |_, _| 1.0)
}

fn jaccard(s: &ClassSums, eps: f64) -> (f64, Vec<f64>) {
    let i = masked_sum(s, |p, t| p * t);
    let ps = masked_sum(s, |p, _| p);
    let ts = masked_sum(s, |_, t| t);
    ratio_loss(s, i + eps, ps + ts - i + eps, |t| t, |_, t| 1.0 - t)
}

fn tversky(s: &ClassSums, alpha: f64, beta: f64, eps: f64) -> (f64, Vec<f64>) {
    let i = masked_sum(s, |p, t| p * t);
    let fp = masked_sum(s, |p, t| p * (1.0 - t));
    let fn_ = masked_sum(s, |p, t| (1.0 - p) * t);
    let e = eps / 2.0;
    ratio_loss(s, i + e, i + alpha * fp + beta * fn_ + e, |t| t, |_, t| t + alpha * (1.0 - t) - beta * t)
}

/// Mean fractal Tanimoto similarity of depth `d` and its gradient in p.
fn fractal_tanimoto(p: &[f64], t: &[f64], mask: &[bool], depth: u32, eps: f64) -> (f64, Vec<f64>) {
    let s = ClassSums { p, t, mask };
    let i = masked_sum(&s, |p, t| p * t);
    let sq = masked_sum(&s, |p, t| p * p + t * t);
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for level in 0..depth {
        let a = 2f64.powi(level as i32);
        let k = 2.0 * a - 1.0;
        let num = i + eps;
        let den = a * sq - k * i + eps;
        value += num / den;
        for px in 0..p.len() {
            if mask[px] {
                let dden = 2.0 * a * p[px] - k * t[px];
                grad[px] += (t[px] * den - num * dden) / (den * den);
            }
        }
    }
    let d = depth as f64;
    grad.iter_mut().for_each(|g| *g /= d);
    (value / d, grad)
}

fn ftnmt(s: &ClassSums, depth: u32, eps: f64) -> (f64, Vec<f64>) {
    let (f1, g1) = fractal_tanimoto(s.p, s.t, s.mask, depth, eps);
    let q: Vec<f64> = s.p.iter().map(|p| 1.0 - p).collect();
    let u: Vec<f64> = s.t.iter().map(|t| 1.0 - t).collect();
    let (f2, g2) = fractal_tanimoto(&q, &u, s.mask, depth, eps);
    let grad = g1.iter().zip(&g2).map(|(a, b)| -0.5 * (a - b)).collect();
    (1.0 - 0.5 * (f1 + f2), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn random_case(seed: u64, h: usize, w: usize, unknown: bool) -> (LogitMap, LabelMask) {
        let mut rng = Rng::new(seed);
        let z: Vec<f32> = (0..3 * h * w).map(|_| rng.normal() as f32).collect();
        let t: Vec<u8> = (0..h * w)
            .map(|_| {
                if unknown && rng.below(5) == 0 {
                    UNKNOWN
                } else {
                    rng.below(3) as u8
                }
            })
            .collect();
        (
            LogitMap::new(3, h, w, z, GeoTransform::default()).unwrap(),
            LabelMask::new(h, w, t, GeoTransform::default()).unwrap(),
        )
    }

    fn saturated(target: &LabelMask) -> LogitMap {
        let n = target.data().len();
        let mut z = vec![-30.0f32; 3 * n];
        for (px, &c) in target.data().iter().enumerate().filter(|(_, &c)| c != UNKNOWN) {
            z[c as usize * n + px] = 30.0;
        }
        LogitMap::new(3, target.height(), target.width(), z, GeoTransform::default()).unwrap()
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(0.75).unwrap().w;
        assert_eq!(w, vec![0.05, 0.20, 0.75]);
        let w = class_weights(0.60).unwrap().w;
        assert_eq!(w, vec![0.05, 0.35, 0.60]);
        for k in 0..=19 {
            let s: f64 = class_weights((k * 5) as f64 / 100.0).unwrap().w.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(class_weights(0.96).is_err());
        assert!(class_weights(-0.01).is_err());
    }

    #[test]
    fn uniform_ce_is_ln3() {
        let (_, t) = random_case(1, 4, 4, false);
        let z = LogitMap::new(3, 4, 4, vec![0.0; 48], GeoTransform::default()).unwrap();
        let v = loss_forward(&LossSpec::new(LossKind::Ce), &z, &t).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let (_, t) = random_case(2, 6, 6, true);
        let z = saturated(&t);
        for kind in LossKind::all_defaults() {
            let v = loss_forward(&LossSpec::new(kind), &z, &t).unwrap();
            assert!((0.0..1e-5).contains(&v), "{kind}: {v}");
        }
    }

    #[test]
    fn tversky_half_equals_dice() {
        for seed in 0..5 {
            let (z, t) = random_case(seed, 5, 7, true);
            let a = loss_forward(&LossSpec::new(LossKind::Dice), &z, &t).unwrap();
            let b = loss_forward(&LossSpec::new(LossKind::Tversky { alpha: 0.5, beta: 0.5 }), &z, &t).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_zero_equals_ce() {
        let (z, t) = random_case(3, 6, 6, true);
        let cw = class_weights(0.75).unwrap();
        let ce = LossSpec::weighted(LossKind::Ce, cw.clone());
        let fo = LossSpec::weighted(LossKind::Focal { gamma: 0.0 }, cw);
        assert!((loss_forward(&ce, &z, &t).unwrap() - loss_forward(&fo, &z, &t).unwrap()).abs() < 1e-12);
        let (ga, gb) = (loss_grad(&ce, &z, &t).unwrap(), loss_grad(&fo, &z, &t).unwrap());
        assert!(ga.iter().zip(&gb).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn ce_gradient_closed_form() {
        let (z, t) = random_case(4, 3, 3, false);
        let cw = class_weights(0.7).unwrap();
        let g = loss_grad(&LossSpec::weighted(LossKind::Ce, cw.clone()), &z, &t).unwrap();
        let p = crate::raster::softmax(&z).unwrap();
        for px in 0..9 {
            let c = t.data()[px] as usize;
            for k in 0..3 {
                let onehot = if k == c { 1.0 } else { 0.0 };
                let want = cw.w[c] * (p.values()[k * 9 + px] as f64 - onehot) / 9.0;
                assert!((g[k * 9 + px] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn finite_differences_agree() {
        let (z, t) = random_case(1, 8, 8, true);
        for kind in LossKind::all_defaults() {
            for spec in [LossSpec::new(kind), LossSpec::weighted(kind, class_weights(0.75).unwrap())] {
                let err = finite_diff_check(&spec, &z, &t, 1e-3).unwrap();
                assert!(err <= 1e-4, "{}: {err}", spec.name());
            }
        }
        let combo = CompositeLoss::sum(vec![LossSpec::new(LossKind::Ce), LossSpec::new(LossKind::Dice)]);
        assert!(finite_diff_check(&combo, &z, &t, 1e-3).unwrap() <= 1e-4);
    }

    #[test]
    fn masked_pixels_do_not_matter() {
        let (z, t) = random_case(5, 6, 6, true);
        let mut data = z.clone().into_data();
        for (px, &c) in t.data().iter().enumerate() {
            if c == UNKNOWN {
                data[px] += 5.0;
                data[36 + px] -= 3.0;
            }
        }
        let z2 = LogitMap::new(3, 6, 6, data, GeoTransform::default()).unwrap();
        for kind in LossKind::all_defaults() {
            let s = LossSpec::new(kind);
            assert_eq!(loss_forward(&s, &z, &t).unwrap(), loss_forward(&s, &z2, &t).unwrap());
            let g = loss_grad(&s, &z, &t).unwrap();
            assert_eq!(g, loss_grad(&s, &z2, &t).unwrap());
            for (px, &c) in t.data().iter().enumerate() {
                if c == UNKNOWN {
                    assert!((0..3).all(|k| g[k * 36 + px] == 0.0));
                }
            }
        }
    }

    #[test]
    fn all_masked_is_error() {
        let z = LogitMap::new(3, 2, 2, vec![0.0; 12], GeoTransform::default()).unwrap();
        let t = LabelMask::filled(2, 2, UNKNOWN, GeoTransform::default()).unwrap();
        assert!(loss_forward(&LossSpec::new(LossKind::Ce), &z, &t).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for kind in LossKind::all_defaults() {
            assert_eq!(kind.to_string().parse::<LossKind>().unwrap(), kind);
        }
        assert!("hinge".parse::<LossKind>().is_err());
        assert!("ftnmt:1.5".parse::<LossKind>().is_err());
    }
}
