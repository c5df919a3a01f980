//! Overlapping patch enumeration, Gaussian apodization and seam-free stitching.
//!
//! Scenes larger than a model's patch size are covered by a row-major grid of
//! `S x S` windows spaced `round(S * (1 - overlap))` apart, with the last row
//! and column shifted flush against the raster edge. Each patch prediction is
//! weighted by a centre-peaked Gaussian and the weighted logits are averaged
//! per pixel. Accumulation always happens in patch-index order, so the result
//! does not depend on how many workers computed the patch logits.

pub mod exec;
pub mod protocol;

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BandStack, ClassGrid, GeoTransform, LogitMap, Window};
use crate::report::{Clock, SystemClock, Throughput};

/// Channel-major `C x H x W` block of values exchanged with a model backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::shape(format!(
                "patch {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Patch {
            channels,
            height,
            width,
            data,
        })
    }

    /// Model input for `window` of `x`: channel `t * B + b` holds band `b` of frame `t`.
    pub fn from_stack(x: &BandStack, window: &Window) -> Result<Self> {
        if !window.fits_within(x.height(), x.width()) {
            return Err(Error::OutOfBounds(*window, x.height(), x.width()));
        }
        let mut data = Vec::with_capacity(x.channels() * window.height * window.width);
        for t in 0..x.frames() {
            for b in 0..x.bands() {
                let plane = x.plane(t, b);
                for r in window.row_off..window.row_end() {
                    let start = r * x.width() + window.col_off;
                    data.extend_from_slice(&plane[start..start + window.width]);
                }
            }
        }
        Patch::new(x.channels(), window.height, window.width, data)
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn into_logit_map(self, geotransform: GeoTransform) -> Result<LogitMap> {
        LogitMap::new(self.channels, self.height, self.width, self.data, geotransform)
    }
}

/// A segmentation model mapping `T*B`-channel patches to per-pixel class logits.
///
/// Implementations must return logits with the same spatial shape as the
/// input. Backends that cannot be called from several threads at once report
/// `concurrent() == false` and the engine serializes their calls.
pub trait ModelBackend: Send + Sync {
    fn channels_in(&self) -> usize;
    fn classes_out(&self) -> usize;
    fn predict(&self, patch: &Patch) -> Result<Patch>;

    fn deterministic(&self) -> bool {
        true
    }

    fn concurrent(&self) -> bool {
        true
    }
}

impl<M: ModelBackend + ?Sized> ModelBackend for Box<M> {
    fn channels_in(&self) -> usize {
        (**self).channels_in()
    }
    fn classes_out(&self) -> usize {
        (**self).classes_out()
    }
    fn predict(&self, patch: &Patch) -> Result<Patch> {
        (**self).predict(patch)
    }
    fn deterministic(&self) -> bool {
        (**self).deterministic()
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

/// Runs `model` on `patch` and checks the output contract.
pub fn predict_checked(model: &dyn ModelBackend, patch: &Patch) -> Result<Patch> {
    if patch.channels != model.channels_in() {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {}",
            model.channels_in(),
            patch.channels
        )));
    }
    let out = model.predict(patch)?;
    if out.height != patch.height || out.width != patch.width || out.channels != model.classes_out() {
        return Err(Error::shape(format!(
            "model returned {}x{}x{} for a {}x{} patch with {} classes",
            out.channels,
            out.height,
            out.width,
            patch.height,
            patch.width,
            model.classes_out()
        )));
    }
    if out.data.len() != out.channels * out.height * out.width {
        return Err(Error::shape("model output length does not match its shape"));
    }
    Ok(out)
}

/// Predicts the whole stack as a single patch.
pub fn predict_stack(model: &dyn ModelBackend, x: &BandStack) -> Result<LogitMap> {
    let patch = Patch::from_stack(x, &Window::full(x.height(), x.width()))?;
    predict_checked(model, &patch)?.into_logit_map(x.geotransform().clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingSpec {
    pub patch_size: usize,
    pub overlap_fraction: f64,
}

impl Default for TilingSpec {
    fn default() -> Self {
        TilingSpec {
            patch_size: 256,
            overlap_fraction: 0.25,
        }
    }
}

impl TilingSpec {
    pub fn new(patch_size: usize, overlap_fraction: f64) -> Result<Self> {
        let spec = TilingSpec {
            patch_size,
            overlap_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.overlap_fraction) {
            return Err(Error::invalid(format!(
                "overlap fraction must be in [0, 0.5), got {}",
                self.overlap_fraction
            )));
        }
        if self.stride() < 1 {
            return Err(Error::invalid("stride rounds to zero"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        (self.patch_size as f64 * (1.0 - self.overlap_fraction)).round() as usize
    }

    /// Default apodization width, a quarter of the patch size.
    pub fn default_sigma(&self) -> f64 {
        self.patch_size as f64 / 4.0
    }
}

fn axis_offsets(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let mut offsets = vec![0];
    let mut off = 0;
    while off + size < len {
        off = (off + stride).min(len - size);
        offsets.push(off);
    }
    offsets
}

/// Row-major list of patch windows covering a `height x width` raster.
///
/// Rasters smaller than the patch size along an axis get a single window
/// clamped to the raster extent.
pub fn enumerate_patches(height: usize, width: usize, spec: &TilingSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("raster dimensions must be >= 1"));
    }
    let ph = spec.patch_size.min(height);
    let pw = spec.patch_size.min(width);
    let rows = axis_offsets(height, spec.patch_size, spec.stride());
    let cols = axis_offsets(width, spec.patch_size, spec.stride());
    Ok(rows
        .iter()
        .flat_map(|&r| {
            cols.iter().map(move |&c| Window {
                row_off: r,
                col_off: c,
                height: ph,
                width: pw,
            })
        })
        .collect())
}

/// Unnormalized, strictly positive Gaussian weights peaking at the patch centre.
#[derive(Debug, Clone, PartialEq)]
pub struct ApodizationKernel {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl ApodizationKernel {
    pub fn new(height: usize, width: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("kernel size must be >= 1"));
        }
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let denom = 2.0 * sigma * sigma;
        let mut weights = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                // Clamp keeps far corners of huge patches strictly positive.
                weights.push((-d2 / denom).exp().max(f64::MIN_POSITIVE));
            }
        }
        Ok(ApodizationKernel {
            height,
            width,
            sigma,
            weights,
        })
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    /// This kernel if it already matches `height x width`, else one with the same sigma.
    pub fn for_size(&self, height: usize, width: usize) -> Result<Cow<'_, ApodizationKernel>> {
        if height == self.height && width == self.width {
            Ok(Cow::Borrowed(self))
        } else {
            Ok(Cow::Owned(ApodizationKernel::new(height, width, self.sigma)?))
        }
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<ApodizationKernel> {
    ApodizationKernel::new(size, size, sigma)
}

/// Weighted logit and weight-sum accumulators for a scene.
#[derive(Debug, Clone)]
pub struct Accumulator {
    classes: usize,
    height: usize,
    width: usize,
    sums: Vec<f64>,
    weights: Vec<f64>,
}

impl Accumulator {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        Accumulator {
            classes,
            height,
            width,
            sums: vec![0.0; classes * height * width],
            weights: vec![0.0; height * width],
        }
    }

    pub fn add(&mut self, window: &Window, logits: &Patch, kernel: &ApodizationKernel) -> Result<()> {
        if !window.fits_within(self.height, self.width) {
            return Err(Error::OutOfBounds(*window, self.height, self.width));
        }
        if logits.channels != self.classes {
            return Err(Error::shape(format!(
                "patch has {} classes, expected {}",
                logits.channels, self.classes
            )));
        }
        if logits.height != window.height || logits.width != window.width {
            return Err(Error::shape(format!(
                "patch is {}x{} but its window is {}x{}",
                logits.height, logits.width, window.height, window.width
            )));
        }
        let kernel = kernel.for_size(window.height, window.width)?;
        let n = self.height * self.width;
        let pn = window.height * window.width;
        for i in 0..window.height {
            for j in 0..window.width {
                let w = kernel.weight(i, j);
                let px = (window.row_off + i) * self.width + window.col_off + j;
                self.weights[px] += w;
                for c in 0..self.classes {
                    self.sums[c * n + px] += w * logits.data[c * pn + i * window.width + j] as f64;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self, geotransform: GeoTransform) -> Result<LogitMap> {
        let n = self.height * self.width;
        if let Some(px) = self.weights.iter().position(|&w| w <= 0.0) {
            return Err(Error::CoverageGap {
                row: px / self.width,
                col: px % self.width,
            });
        }
        let data = self
            .sums
            .iter()
            .enumerate()
            .map(|(i, s)| (s / self.weights[i % n]) as f32)
            .collect();
        LogitMap::new(self.classes, self.height, self.width, data, geotransform)
    }
}

/// Blends patch logits into a scene-sized map, applying patches in list order.
pub fn stitch(
    patch_logits: &[(Window, Patch)],
    kernel: &ApodizationKernel,
    height: usize,
    width: usize,
    geotransform: GeoTransform,
) -> Result<LogitMap> {
    let classes = match patch_logits.first() {
        Some((_, p)) => p.channels,
        None => return Err(Error::CoverageGap { row: 0, col: 0 }),
    };
    let mut acc = Accumulator::new(classes, height, width);
    for (window, logits) in patch_logits {
        acc.add(window, logits, kernel)?;
    }
    acc.finish(geotransform)
}

/// Stitched scene logits plus timing.
#[derive(Debug, Clone)]
pub struct TiledOutput {
    pub logits: LogitMap,
    pub patches: usize,
    pub throughput: Throughput,
}

/// Tiled inference over a whole scene.
///
/// Patches are predicted in parallel batches on a pool of `workers` threads
/// (or serially for non-concurrent backends) and accumulated in enumeration
/// order, so the output is bit-identical for any worker count.
pub fn run_tiled(
    model: &dyn ModelBackend,
    x: &BandStack,
    spec: &TilingSpec,
    kernel: &ApodizationKernel,
    workers: usize,
) -> Result<TiledOutput> {
    run_tiled_with_clock(model, x, spec, kernel, workers, &SystemClock)
}

pub fn run_tiled_with_clock(
    model: &dyn ModelBackend,
    x: &BandStack,
    spec: &TilingSpec,
    kernel: &ApodizationKernel,
    workers: usize,
    clock: &dyn Clock,
) -> Result<TiledOutput> {
    if model.channels_in() != x.channels() {
        return Err(Error::shape(format!(
            "model expects {} channels but the stack has {} frames x {} bands",
            model.channels_in(),
            x.frames(),
            x.bands()
        )));
    }
    let windows = enumerate_patches(x.height(), x.width(), spec)?;
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Model(format!("failed to build worker pool: {e}")))?;

    let start = clock.now();
    let mut acc = Accumulator::new(model.classes_out(), x.height(), x.width());
    let batch = workers * 4;
    for chunk in windows.chunks(batch) {
        let predictions: Vec<Result<Patch>> = if workers > 1 && model.concurrent() {
            pool.install(|| {
                chunk
                    .par_iter()
                    .map(|w| predict_checked(model, &Patch::from_stack(x, w)?))
                    .collect()
            })
        } else {
            chunk
                .iter()
                .map(|w| predict_checked(model, &Patch::from_stack(x, w)?))
                .collect()
        };
        for (w, logits) in chunk.iter().zip(predictions) {
            acc.add(w, &logits?, kernel)?;
        }
    }
    let logits = acc.finish(x.geotransform().clone())?;
    let elapsed = clock.now() - start;
    let throughput = Throughput::for_grid(logits.height() * logits.width(), x.geotransform(), elapsed);
    Ok(TiledOutput {
        logits,
        patches: windows.len(),
        throughput,
    })
}
