//! Stub model backends with known invariance properties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BACKGROUND, INTERIOR};
use crate::rng::{mix, Rng};
use crate::synth::{SynthWorld, BANDS, FRAMES, NIR};
use crate::tiler::{ModelBackend, Patch};

const CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StubMode {
    /// One-hot of the class decoded from each pixel's own content.
    Oracle,
    /// Class `(local row mod k) mod 3`, ignoring content.
    PositionModK { k: usize },
    /// Oracle when frame 0 looks like the planting frame, background and
    /// interior swapped otherwise.
    Frame0Only,
    /// Oracle plus Gaussian noise keyed by seed, patch-local position and class.
    Noisy { sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubModelSpec {
    #[serde(flatten)]
    pub mode: StubMode,
    pub logit_gain: f64,
}

impl StubModelSpec {
    pub fn new(mode: StubMode, logit_gain: f64) -> Result<Self> {
        let spec = StubModelSpec { mode, logit_gain };
        spec.validate()?;
        Ok(spec)
    }

    pub fn oracle() -> Self {
        StubModelSpec {
            mode: StubMode::Oracle,
            logit_gain: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_gain > 0.0 && self.logit_gain.is_finite()) {
            return Err(Error::invalid("logit gain must be positive"));
        }
        match self.mode {
            StubMode::PositionModK { k } if k < 2 => Err(Error::invalid("position stub needs k >= 2")),
            StubMode::Noisy { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::invalid("noise sigma must be >= 0"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubModel {
    spec: StubModelSpec,
    frames: usize,
    bands: usize,
}

/// Stub backend sized for `world`'s band stack.
pub fn make_stub_model(world: &SynthWorld, spec: StubModelSpec) -> Result<StubModel> {
    StubModel::new(spec, world.bands.frames(), world.bands.bands())
}

impl StubModel {
    pub fn new(spec: StubModelSpec, frames: usize, bands: usize) -> Result<Self> {
        spec.validate()?;
        if bands < CLASSES {
            return Err(Error::invalid("stub models decode classes from the first three bands"));
        }
        if matches!(spec.mode, StubMode::Frame0Only) && (frames < 2 || bands <= NIR) {
            return Err(Error::invalid("frame-order stub needs two frames with a NIR band"));
        }
        Ok(StubModel { spec, frames, bands })
    }

    /// Stub for the default bi-temporal RGBN layout.
    pub fn rgbn(spec: StubModelSpec) -> Result<Self> {
        Self::new(spec, FRAMES, BANDS)
    }

    pub fn spec(&self) -> &StubModelSpec {
        &self.spec
    }

    fn decode(patch: &Patch, px: usize) -> usize {
        let n = patch.height * patch.width;
        let mut best = 0;
        for b in 1..CLASSES {
            if patch.data[b * n + px] > patch.data[best * n + px] {
                best = b;
            }
        }
        best
    }
}

impl ModelBackend for StubModel {
    fn channels_in(&self) -> usize {
        self.frames * self.bands
    }

    fn classes_out(&self) -> usize {
        CLASSES
    }

    fn predict(&self, patch: &Patch) -> Result<Patch> {
        let (h, w) = (patch.height, patch.width);
        let n = h * w;
        let gain = self.spec.logit_gain as f32;
        let mut out = vec![0f32; CLASSES * n];
        for px in 0..n {
            let class = match self.spec.mode {
                StubMode::Oracle | StubMode::Noisy { .. } => Self::decode(patch, px),
                StubMode::PositionModK { k } => ((px / w) % k) % CLASSES,
                StubMode::Frame0Only => {
                    let planting_nir = patch.data[NIR * n + px];
                    let harvest_nir = patch.data[(self.bands + NIR) * n + px];
                    let class = Self::decode(patch, px);
                    if planting_nir <= harvest_nir {
                        class
                    } else if class == BACKGROUND as usize {
                        INTERIOR as usize
                    } else if class == INTERIOR as usize {
                        BACKGROUND as usize
                    } else {
                        class
                    }
                }
            };
            out[class * n + px] = gain;
            if let StubMode::Noisy { sigma, seed } = self.spec.mode {
                if sigma > 0.0 {
                    for c in 0..CLASSES {
                        let mut rng = Rng::new(mix(seed, &[(px / w) as u64, (px % w) as u64, c as u64]));
                        out[c * n + px] += (sigma * rng.normal()) as f32;
                    }
                }
            }
        }
        Patch::new(CLASSES, h, w, out)
    }
}

/// Emits the same logit vector at every pixel.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    pub logits: Vec<f32>,
    pub channels_in: usize,
}

impl ConstantModel {
    pub fn new(logits: Vec<f32>, channels_in: usize) -> Self {
        ConstantModel { logits, channels_in }
    }
}

impl ModelBackend for ConstantModel {
    fn channels_in(&self) -> usize {
        self.channels_in
    }

    fn classes_out(&self) -> usize {
        self.logits.len()
    }

    fn predict(&self, patch: &Patch) -> Result<Patch> {
        let n = patch.height * patch.width;
        let data = self.logits.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        Patch::new(self.logits.len(), patch.height, patch.width, data)
    }
}

/// Averages the temporal frames and feeds the mean to every frame slot of
/// the wrapped model, making its output independent of frame order.
#[derive(Debug, Clone)]
pub struct FrameMeanModel<M> {
    pub inner: M,
    pub frames: usize,
    pub bands: usize,
}

impl<M: ModelBackend> FrameMeanModel<M> {
    pub fn new(inner: M, frames: usize, bands: usize) -> Result<Self> {
        if inner.channels_in() != frames * bands {
            return Err(Error::invalid("inner model channel count must equal frames x bands"));
        }
        Ok(FrameMeanModel { inner, frames, bands })
    }
}

impl<M: ModelBackend> ModelBackend for FrameMeanModel<M> {
    fn channels_in(&self) -> usize {
        self.frames * self.bands
    }

    fn classes_out(&self) -> usize {
        self.inner.classes_out()
    }

    fn predict(&self, patch: &Patch) -> Result<Patch> {
        let n = patch.height * patch.width;
        let mut mean = vec![0f32; self.bands * n];
        for b in 0..self.bands {
            for px in 0..n {
                // Summing in a fixed order keeps the mean exactly symmetric.
                let mut vals: Vec<f32> = (0..self.frames).map(|t| patch.data[(t * self.bands + b) * n + px]).collect();
                vals.sort_by(|a, b| a.total_cmp(b));
                let s: f64 = vals.iter().map(|&v| v as f64).sum();
                mean[b * n + px] = (s / self.frames as f64) as f32;
            }
        }
        let data = (0..self.frames).flat_map(|_| mean.iter().copied()).collect();
        self.inner.predict(&Patch::new(self.frames * self.bands, patch.height, patch.width, data)?)
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }

    fn concurrent(&self) -> bool {
        self.inner.concurrent()
    }
}

/// Zero-bias per-pixel linear classifier: `logit_c = Σ_i weights[c][i] · x_i`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub weights: Vec<Vec<f32>>,
}

impl LinearModel {
    pub fn new(weights: Vec<Vec<f32>>) -> Result<Self> {
        let width = weights.first().map(Vec::len).unwrap_or(0);
        if weights.len() < 2 || width == 0 || weights.iter().any(|w| w.len() != width) {
            return Err(Error::invalid("linear model needs >= 2 rows of equal, non-zero length"));
        }
        Ok(LinearModel { weights })
    }
}

impl ModelBackend for LinearModel {
    fn channels_in(&self) -> usize {
        self.weights[0].len()
    }

    fn classes_out(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, patch: &Patch) -> Result<Patch> {
        let n = patch.height * patch.width;
        let mut out = vec![0f32; self.weights.len() * n];
        for (c, row) in self.weights.iter().enumerate() {
            for px in 0..n {
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| w as f64 * patch.data[i * n + px] as f64)
                    .sum();
                out[c * n + px] = s as f32;
            }
        }
        Patch::new(self.weights.len(), patch.height, patch.width, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{argmax_labels, Window};
    use crate::synth::generate_world;
    use crate::tiler::predict_stack;

    #[test]
    fn oracle_recovers_ground_truth() {
        let w = generate_world(4, 64, 64, 8, 0.2).unwrap();
        let m = make_stub_model(&w, StubModelSpec::oracle()).unwrap();
        let logits = predict_stack(&m, &w.bands).unwrap();
        assert_eq!(argmax_labels(&logits), w.gt_mask);
    }

    #[test]
    fn zero_noise_equals_oracle() {
        let w = generate_world(4, 48, 48, 5, 0.1).unwrap();
        let oracle = make_stub_model(&w, StubModelSpec::oracle()).unwrap();
        let noisy = make_stub_model(
            &w,
            StubModelSpec::new(StubMode::Noisy { sigma: 0.0, seed: 9 }, 10.0).unwrap(),
        )
        .unwrap();
        assert_eq!(predict_stack(&oracle, &w.bands).unwrap(), predict_stack(&noisy, &w.bands).unwrap());
    }

    #[test]
    fn position_stub_ignores_content() {
        let m = StubModel::rgbn(StubModelSpec::new(StubMode::PositionModK { k: 3 }, 1.0).unwrap()).unwrap();
        let p = Patch::new(8, 5, 2, vec![0.0; 80]).unwrap();
        let out = m.predict(&p).unwrap().into_logit_map(Default::default()).unwrap();
        let labels = argmax_labels(&out);
        assert_eq!(labels.data(), &[0, 0, 1, 1, 2, 2, 0, 0, 1, 1]);
    }

    #[test]
    fn frame0_only_inverts_swapped_input() {
        let w = generate_world(2, 32, 32, 4, 0.2).unwrap();
        let m = make_stub_model(&w, StubModelSpec { mode: StubMode::Frame0Only, logit_gain: 5.0 }).unwrap();
        let canonical = argmax_labels(&predict_stack(&m, &w.bands).unwrap());
        assert_eq!(canonical, w.gt_mask);
        let swapped = argmax_labels(&predict_stack(&m, &w.bands.permute_frames(&[1, 0]).unwrap()).unwrap());
        for (p, g) in swapped.data().iter().zip(w.gt_mask.data()) {
            assert_eq!(*p == INTERIOR, *g == BACKGROUND);
        }
    }

    #[test]
    fn frame_mean_is_order_invariant() {
        let w = generate_world(6, 32, 32, 4, 0.1).unwrap();
        let m = FrameMeanModel::new(
            make_stub_model(&w, StubModelSpec { mode: StubMode::Frame0Only, logit_gain: 5.0 }).unwrap(),
            2,
            4,
        )
        .unwrap();
        let a = predict_stack(&m, &w.bands).unwrap();
        let b = predict_stack(&m, &w.bands.permute_frames(&[1, 0]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_model_is_positively_homogeneous() {
        let m = LinearModel::new(vec![vec![1.0, -1.0], vec![-0.5, 2.0], vec![0.0, 0.3]]).unwrap();
        let p = Patch::new(2, 1, 2, vec![1.0, 2.0, 3.0, 0.5]).unwrap();
        let scaled = Patch::new(2, 1, 2, p.data.iter().map(|v| v * 7.0).collect()).unwrap();
        let a = argmax_labels(&m.predict(&p).unwrap().into_logit_map(Default::default()).unwrap());
        let b = argmax_labels(&m.predict(&scaled).unwrap().into_logit_map(Default::default()).unwrap());
        assert_eq!(a, b);
        let _ = Window::full(1, 1);
    }

    #[test]
    fn spec_validation() {
        assert!(StubModelSpec::new(StubMode::PositionModK { k: 1 }, 1.0).is_err());
        assert!(StubModelSpec::new(StubMode::Noisy { sigma: -1.0, seed: 0 }, 1.0).is_err());
        assert!(StubModelSpec::new(StubMode::Oracle, 0.0).is_err());
    }
}
