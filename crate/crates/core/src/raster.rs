//! Raster data model shared by every stage: geotransforms, class-score grids,
//! label masks, temporal band stacks, crop windows and radiometric normalization.
//!
//! All grids are row-major with the origin at the top-left pixel. Multi-plane
//! grids are stored plane-major (`C,H,W` for class grids, `T,B,H,W` for band
//! stacks), matching the `.fsr` container layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const INTERIOR: u8 = 1;
pub const BOUNDARY: u8 = 2;
/// Ground-truth sentinel for pixels whose label is unknown (presence-only data).
pub const UNKNOWN: u8 = 255;

/// Affine pixel-to-map transform without rotation terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    /// Negative for north-up rasters.
    pub pixel_size_y: f64,
    pub crs_id: String,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size_x: f64,
        pixel_size_y: f64,
        crs_id: impl Into<String>,
    ) -> Result<Self> {
        let gt = GeoTransform {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
            crs_id: crs_id.into(),
        };
        gt.validate()?;
        Ok(gt)
    }

    /// North-up transform with square pixels of `size` map units.
    pub fn north_up(origin_x: f64, origin_y: f64, size: f64, crs_id: impl Into<String>) -> Result<Self> {
        Self::new(origin_x, origin_y, size, -size, crs_id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_x > 0.0 && self.pixel_size_x.is_finite()) {
            return Err(Error::invalid(format!(
                "pixel_size_x must be positive, got {}",
                self.pixel_size_x
            )));
        }
        if self.pixel_size_y == 0.0 || !self.pixel_size_y.is_finite() {
            return Err(Error::invalid("pixel_size_y must be non-zero"));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::invalid("origin must be finite"));
        }
        Ok(())
    }

    /// Map coordinates of the pixel-grid corner `(col, row)`.
    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size_x,
            self.origin_y + row * self.pixel_size_y,
        )
    }

    /// Inverse of [`GeoTransform::apply`].
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size_x,
            (y - self.origin_y) / self.pixel_size_y,
        )
    }

    pub fn pixel_area(&self) -> f64 {
        (self.pixel_size_x * self.pixel_size_y).abs()
    }

    /// Transform of the sub-grid starting at `window`'s top-left pixel.
    pub fn for_window(&self, window: &Window) -> Self {
        let (x, y) = self.apply(window.col_off as f64, window.row_off as f64);
        GeoTransform {
            origin_x: x,
            origin_y: y,
            ..self.clone()
        }
    }

    /// Transform after resampling a grid by `factor` (pixels get `1/factor` as large).
    pub fn scaled(&self, factor_x: f64, factor_y: f64) -> Self {
        GeoTransform {
            pixel_size_x: self.pixel_size_x / factor_x,
            pixel_size_y: self.pixel_size_y / factor_y,
            ..self.clone()
        }
    }
}

impl Default for GeoTransform {
    /// 10 m north-up UTM-style grid at the origin.
    fn default() -> Self {
        GeoTransform {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_size_x: 10.0,
            pixel_size_y: -10.0,
            crs_id: "EPSG:32631".to_string(),
        }
    }
}

/// Rectangular pixel window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub row_off: usize,
    pub col_off: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn new(row_off: usize, col_off: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("window height and width must be >= 1"));
        }
        Ok(Window {
            row_off,
            col_off,
            height,
            width,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Window {
            row_off: 0,
            col_off: 0,
            height,
            width,
        }
    }

    pub fn row_end(&self) -> usize {
        self.row_off + self.height
    }

    pub fn col_end(&self) -> usize {
        self.col_off + self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row_off && row < self.row_end() && col >= self.col_off && col < self.col_end()
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.row_end() <= height && self.col_end() <= width
    }
}

/// Intersects `w` with a `height x width` raster.
pub fn window_clamp(w: Window, height: usize, width: usize) -> Result<Window> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("raster dimensions must be >= 1"));
    }
    let row_end = w.row_end().min(height);
    let col_end = w.col_end().min(width);
    if w.row_off >= row_end || w.col_off >= col_end {
        return Err(Error::OutOfBounds(w, height, width));
    }
    Ok(Window {
        row_off: w.row_off,
        col_off: w.col_off,
        height: row_end - w.row_off,
        width: col_end - w.col_off,
    })
}

/// Read access shared by [`LogitMap`] and [`ProbMap`].
pub trait ClassGrid {
    fn classes(&self) -> usize;
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    /// Plane-major values, `C x H x W`.
    fn values(&self) -> &[f32];
    fn geotransform(&self) -> &GeoTransform;

    fn value(&self, class: usize, row: usize, col: usize) -> f32 {
        self.values()[(class * self.height() + row) * self.width() + col]
    }

    fn plane(&self, class: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.values()[class * n..(class + 1) * n]
    }
}

fn check_class_shape(classes: usize, height: usize, width: usize, len: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    if classes > UNKNOWN as usize {
        return Err(Error::invalid("too many classes for a u8 label mask"));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("grid dimensions must be >= 1"));
    }
    if classes * height * width != len {
        return Err(Error::shape(format!(
            "expected {classes}x{height}x{width} = {} values, got {len}",
            classes * height * width
        )));
    }
    Ok(())
}

/// Unbounded per-pixel class scores produced by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    geotransform: GeoTransform,
}

impl LogitMap {
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        geotransform: GeoTransform,
    ) -> Result<Self> {
        check_class_shape(classes, height, width, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(LogitMap {
            classes,
            height,
            width,
            data,
            geotransform,
        })
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Copy of the `window` region with an adjusted geotransform.
    pub fn crop(&self, window: &Window) -> Result<LogitMap> {
        if !window.fits_within(self.height, self.width) {
            return Err(Error::OutOfBounds(*window, self.height, self.width));
        }
        let data = crop_planes(&self.data, self.classes, self.height, self.width, window);
        LogitMap::new(
            self.classes,
            window.height,
            window.width,
            data,
            self.geotransform.for_window(window),
        )
    }
}

impl ClassGrid for LogitMap {
    fn classes(&self) -> usize {
        self.classes
    }
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn values(&self) -> &[f32] {
        &self.data
    }
    fn geotransform(&self) -> &GeoTransform {
        &self.geotransform
    }
}

/// Per-pixel class probabilities; every pixel sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    geotransform: GeoTransform,
}

impl ProbMap {
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        geotransform: GeoTransform,
    ) -> Result<Self> {
        check_class_shape(classes, height, width, data.len())?;
        let n = height * width;
        for px in 0..n {
            let mut sum = 0.0f64;
            for c in 0..classes {
                let v = data[c * n + px];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("probability {v} outside [0,1]")));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("pixel {px} sums to {sum}")));
            }
        }
        Ok(ProbMap {
            classes,
            height,
            width,
            data,
            geotransform,
        })
    }
}

impl ClassGrid for ProbMap {
    fn classes(&self) -> usize {
        self.classes
    }
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn values(&self) -> &[f32] {
        &self.data
    }
    fn geotransform(&self) -> &GeoTransform {
        &self.geotransform
    }
}

/// Per-pixel softmax over classes, computed in f64 with max subtraction.
pub fn softmax(logits: &LogitMap) -> Result<ProbMap> {
    let (c, n) = (logits.classes, logits.height * logits.width);
    if let Some(i) = logits.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut out = vec![0f32; c * n];
    let mut scratch = vec![0f64; c];
    for px in 0..n {
        let max = (0..c)
            .map(|k| logits.data[k * n + px] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (logits.data[k * n + px] as f64 - max).exp();
            scratch[k] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * n + px] = (scratch[k] / sum) as f32;
        }
    }
    Ok(ProbMap {
        classes: c,
        height: logits.height,
        width: logits.width,
        data: out,
        geotransform: logits.geotransform.clone(),
    })
}

/// Index of the largest class score per pixel; ties go to the lowest index.
pub fn argmax_labels<G: ClassGrid + ?Sized>(grid: &G) -> LabelMask {
    let (c, n) = (grid.classes(), grid.height() * grid.width());
    let values = grid.values();
    let data = (0..n)
        .map(|px| {
            let mut best = 0usize;
            let mut best_v = values[px];
            for k in 1..c {
                let v = values[k * n + px];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMask {
        height: grid.height(),
        width: grid.width(),
        data,
        geotransform: grid.geotransform().clone(),
    }
}

/// Three-class ground truth or prediction; `255` marks unknown pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    geotransform: GeoTransform,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, geotransform: GeoTransform) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be >= 1"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|&&v| !matches!(v, BACKGROUND | INTERIOR | BOUNDARY | UNKNOWN))
        {
            return Err(Error::invalid(format!("label value {v} not in {{0,1,2,255}}")));
        }
        Ok(LabelMask {
            height,
            width,
            data,
            geotransform,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8, geotransform: GeoTransform) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], geotransform)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn geotransform(&self) -> &GeoTransform {
        &self.geotransform
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn crop(&self, window: &Window) -> Result<LabelMask> {
        if !window.fits_within(self.height, self.width) {
            return Err(Error::OutOfBounds(*window, self.height, self.width));
        }
        let data = crop_planes(&self.data, 1, self.height, self.width, window);
        Ok(LabelMask {
            height: window.height,
            width: window.width,
            data,
            geotransform: self.geotransform.for_window(window),
        })
    }

    /// Nearest-neighbour resample to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMask {
        let data = resize_nearest_plane(&self.data, self.height, self.width, height, width);
        LabelMask {
            height,
            width,
            data,
            geotransform: self.geotransform.scaled(
                width as f64 / self.width as f64,
                height as f64 / self.height as f64,
            ),
        }
    }
}

/// Temporal stack of multi-band reflectance frames with per-frame validity.
///
/// Frame 0 is the planting observation and frame 1 the harvest observation in
/// the canonical ordering. Invalid pixels hold `fill` in every band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    frames: usize,
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
    fill: f32,
    geotransform: GeoTransform,
}

impl BandStack {
    /// Builds a stack; `data` is `T x B x H x W` and `valid` is `T x H x W`.
    /// Invalid pixels are overwritten with `fill`.
    pub fn new(
        frames: usize,
        bands: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
        valid: Vec<bool>,
        fill: f32,
        geotransform: GeoTransform,
    ) -> Result<Self> {
        if frames == 0 || bands == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("band stack dimensions must be >= 1"));
        }
        let n = height * width;
        if data.len() != frames * bands * n {
            return Err(Error::shape(format!(
                "expected {}x{}x{}x{} values, got {}",
                frames,
                bands,
                height,
                width,
                data.len()
            )));
        }
        if valid.len() != frames * n {
            return Err(Error::shape(format!(
                "validity needs {} entries, got {}",
                frames * n,
                valid.len()
            )));
        }
        for t in 0..frames {
            for px in 0..n {
                if !valid[t * n + px] {
                    for b in 0..bands {
                        data[(t * bands + b) * n + px] = fill;
                    }
                }
            }
        }
        Ok(BandStack {
            frames,
            bands,
            height,
            width,
            data,
            valid,
            fill,
            geotransform,
        })
    }

    /// All pixels valid.
    pub fn from_data(
        frames: usize,
        bands: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        geotransform: GeoTransform,
    ) -> Result<Self> {
        let valid = vec![true; frames * height * width];
        Self::new(frames, bands, height, width, data, valid, 0.0, geotransform)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
    pub fn fill(&self) -> f32 {
        self.fill
    }
    pub fn geotransform(&self) -> &GeoTransform {
        &self.geotransform
    }

    /// Number of model input channels, `T * B`.
    pub fn channels(&self) -> usize {
        self.frames * self.bands
    }

    pub fn value(&self, frame: usize, band: usize, row: usize, col: usize) -> f32 {
        self.data[((frame * self.bands + band) * self.height + row) * self.width + col]
    }

    pub fn plane(&self, frame: usize, band: usize) -> &[f32] {
        let n = self.height * self.width;
        let start = (frame * self.bands + band) * n;
        &self.data[start..start + n]
    }

    pub fn is_valid(&self, frame: usize, row: usize, col: usize) -> bool {
        self.valid[(frame * self.height + row) * self.width + col]
    }

    /// Reorders frames; `order[i]` is the source frame placed at position `i`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<BandStack> {
        let mut seen = vec![false; self.frames];
        if order.len() != self.frames {
            return Err(Error::invalid("permutation length must equal frame count"));
        }
        for &o in order {
            if o >= self.frames || seen[o] {
                return Err(Error::invalid(format!("{order:?} is not a permutation")));
            }
            seen[o] = true;
        }
        let n = self.height * self.width;
        let fb = self.bands * n;
        let mut data = Vec::with_capacity(self.data.len());
        let mut valid = Vec::with_capacity(self.valid.len());
        for &src in order {
            data.extend_from_slice(&self.data[src * fb..(src + 1) * fb]);
            valid.extend_from_slice(&self.valid[src * n..(src + 1) * n]);
        }
        Ok(BandStack {
            data,
            valid,
            ..self.clone()
        })
    }

    pub fn crop(&self, window: &Window) -> Result<BandStack> {
        if !window.fits_within(self.height, self.width) {
            return Err(Error::OutOfBounds(*window, self.height, self.width));
        }
        Ok(BandStack {
            frames: self.frames,
            bands: self.bands,
            height: window.height,
            width: window.width,
            data: crop_planes(&self.data, self.frames * self.bands, self.height, self.width, window),
            valid: crop_planes(&self.valid, self.frames, self.height, self.width, window),
            fill: self.fill,
            geotransform: self.geotransform.for_window(window),
        })
    }

    /// Bilinear resample of every band plane; validity is resampled nearest.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<BandStack> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be >= 1 pixel"));
        }
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(self.frames * self.bands * height * width);
        for p in 0..self.frames * self.bands {
            data.extend(resize_bilinear_plane(
                &self.data[p * n..(p + 1) * n],
                self.height,
                self.width,
                height,
                width,
            ));
        }
        let mut valid = Vec::with_capacity(self.frames * height * width);
        for t in 0..self.frames {
            valid.extend(resize_nearest_plane(
                &self.valid[t * n..(t + 1) * n],
                self.height,
                self.width,
                height,
                width,
            ));
        }
        BandStack::new(
            self.frames,
            self.bands,
            height,
            width,
            data,
            valid,
            self.fill,
            self.geotransform.scaled(
                width as f64 / self.width as f64,
                height as f64 / self.height as f64,
            ),
        )
    }

    /// Applies `f` to every valid value; invalid pixels keep the fill value.
    pub fn map_valid(&self, mut f: impl FnMut(usize, usize, f32) -> f32) -> BandStack {
        let n = self.height * self.width;
        let mut data = self.data.clone();
        for t in 0..self.frames {
            for b in 0..self.bands {
                let base = (t * self.bands + b) * n;
                for px in 0..n {
                    if self.valid[t * n + px] {
                        data[base + px] = f(t, b, data[base + px]);
                    }
                }
            }
        }
        BandStack {
            data,
            ..self.clone()
        }
    }
}

fn crop_planes<T: Copy>(src: &[T], planes: usize, height: usize, width: usize, w: &Window) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * w.height * w.width);
    for p in 0..planes {
        let base = p * height * width;
        for r in w.row_off..w.row_end() {
            let start = base + r * width + w.col_off;
            out.extend_from_slice(&src[start..start + w.width]);
        }
    }
    out
}

/// Half-pixel-centre bilinear resampling with edge clamping.
pub fn resize_bilinear_plane(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    if nh == h && nw == w {
        return src.to_vec();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let axis = |i: usize, scale: f64, len: usize| {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..nw).map(|c| axis(c, sx, w)).collect();
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let (r0, r1, fy) = axis(r, sy, h);
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * w + c0] as f64 * (1.0 - fx) + src[r0 * w + c1] as f64 * fx;
            let bot = src[r1 * w + c0] as f64 * (1.0 - fx) + src[r1 * w + c1] as f64 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

pub fn resize_nearest_plane<T: Copy>(src: &[T], h: usize, w: usize, nh: usize, nw: usize) -> Vec<T> {
    let pick = |i: usize, len: usize, new_len: usize| {
        (((i as f64 + 0.5) * len as f64 / new_len as f64).floor() as usize).min(len - 1)
    };
    let cols: Vec<usize> = (0..nw).map(|c| pick(c, w, nw)).collect();
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let sr = pick(r, h, nh);
        out.extend(cols.iter().map(|&sc| src[sr * w + sc]));
    }
    out
}

/// Radiometric normalization applied before a model sees reflectance values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum NormalizationSpec {
    /// `(v + offset) / scale`.
    ScaleOffset { scale: f64, offset: f64 },
    /// Per frame and band, map the `[p_low, p_high]` percentile span onto `[0, 1]`, clamped.
    PercentileMinMax { p_low: f64, p_high: f64 },
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormalizationSpec::ScaleOffset { scale, offset } => {
                if !(scale > 0.0 && scale.is_finite()) || !offset.is_finite() {
                    return Err(Error::invalid(format!(
                        "scale must be positive and finite (scale={scale}, offset={offset})"
                    )));
                }
            }
            NormalizationSpec::PercentileMinMax { p_low, p_high } => {
                if !(0.0 <= p_low && p_low < p_high && p_high <= 100.0) {
                    return Err(Error::invalid(format!(
                        "need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn identity() -> Self {
        NormalizationSpec::ScaleOffset {
            scale: 1.0,
            offset: 0.0,
        }
    }
}

/// Result of [`apply_normalization`]: the normalized stack and the
/// `(frame, band)` planes whose percentile span was degenerate (set to 0).
#[derive(Debug, Clone)]
pub struct Normalized {
    pub stack: BandStack,
    pub degenerate: Vec<(usize, usize)>,
}

pub fn apply_normalization(x: &BandStack, spec: &NormalizationSpec) -> Result<Normalized> {
    spec.validate()?;
    match *spec {
        NormalizationSpec::ScaleOffset { scale, offset } => Ok(Normalized {
            stack: x.map_valid(|_, _, v| ((v as f64 + offset) / scale) as f32),
            degenerate: Vec::new(),
        }),
        NormalizationSpec::PercentileMinMax { p_low, p_high } => {
            let n = x.height * x.width;
            let mut spans = Vec::with_capacity(x.frames * x.bands);
            let mut degenerate = Vec::new();
            for t in 0..x.frames {
                for b in 0..x.bands {
                    let plane = x.plane(t, b);
                    let mut vals: Vec<f64> = (0..n)
                        .filter(|&px| x.valid[t * n + px])
                        .map(|px| plane[px] as f64)
                        .collect();
                    vals.sort_by(|a, b| a.total_cmp(b));
                    let span = match (percentile(&vals, p_low), percentile(&vals, p_high)) {
                        (Some(lo), Some(hi)) if hi > lo => Some((lo, hi)),
                        _ => {
                            degenerate.push((t, b));
                            None
                        }
                    };
                    spans.push(span);
                }
            }
            let stack = x.map_valid(|t, b, v| match spans[t * x.bands + b] {
                Some((lo, hi)) => ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32,
                None => 0.0,
            });
            Ok(Normalized { stack, degenerate })
        }
    }
}

/// Linear-interpolated percentile of sorted values (`q` in percent).
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> GeoTransform {
        GeoTransform::default()
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let logits = LogitMap::new(3, 1, 2, vec![0.0, 2f32.ln(), 0.0, 0.0, 0.0, 0.0], gt()).unwrap();
        let p = softmax(&logits).unwrap();
        for c in 0..3 {
            assert!((p.value(c, 0, 0) - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((p.value(0, 0, 1) - 0.5).abs() < 1e-7);
        assert!((p.value(1, 0, 1) - 0.25).abs() < 1e-7);
        assert!((p.value(2, 0, 1) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn logit_map_rejects_non_finite() {
        let err = LogitMap::new(2, 1, 1, vec![f32::NAN, 0.0], gt()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(0)));
    }

    #[test]
    fn argmax_tie_break_lowest_index() {
        let p = LogitMap::new(3, 1, 3, vec![0.1, 0.4, 0.0, 0.7, 0.4, 0.0, 0.2, 0.2, 0.0], gt()).unwrap();
        assert_eq!(argmax_labels(&p).data(), &[1, 0, 0]);
    }

    #[test]
    fn scale_offset_examples() {
        let x = BandStack::from_data(1, 2, 1, 1, vec![10000.0, 2000.0], gt()).unwrap();
        let a = apply_normalization(&x, &NormalizationSpec::ScaleOffset { scale: 10000.0, offset: 0.0 }).unwrap();
        assert_eq!(a.stack.data()[0], 1.0);
        let b = apply_normalization(&x, &NormalizationSpec::ScaleOffset { scale: 3000.0, offset: 0.0 }).unwrap();
        assert!((b.stack.data()[1] - 0.6667).abs() < 1e-4);
        let id = apply_normalization(&x, &NormalizationSpec::identity()).unwrap();
        assert_eq!(id.stack, x);
    }

    #[test]
    fn percentile_degenerate_band_is_zeroed() {
        let x = BandStack::from_data(1, 2, 2, 2, vec![5.0, 5.0, 5.0, 5.0, 0.0, 1.0, 2.0, 3.0], gt()).unwrap();
        let out = apply_normalization(&x, &NormalizationSpec::PercentileMinMax { p_low: 0.0, p_high: 100.0 }).unwrap();
        assert_eq!(out.degenerate, vec![(0, 0)]);
        assert_eq!(&out.stack.data()[..4], &[0.0; 4]);
        let second = &out.stack.data()[4..];
        assert!((second[0] - 0.0).abs() < 1e-7 && (second[3] - 1.0).abs() < 1e-7);
        assert!((second[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn normalization_keeps_validity_and_fill() {
        let x = BandStack::new(1, 1, 1, 2, vec![100.0, 200.0], vec![true, false], -1.0, gt()).unwrap();
        let out = apply_normalization(&x, &NormalizationSpec::ScaleOffset { scale: 10.0, offset: 0.0 }).unwrap();
        assert_eq!(out.stack.data(), &[10.0, -1.0]);
        assert_eq!(out.stack.valid(), x.valid());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NormalizationSpec::ScaleOffset { scale: 0.0, offset: 0.0 }.validate().is_err());
        assert!(NormalizationSpec::PercentileMinMax { p_low: 50.0, p_high: 50.0 }.validate().is_err());
        assert!(NormalizationSpec::PercentileMinMax { p_low: 2.0, p_high: 101.0 }.validate().is_err());
    }

    #[test]
    fn normalization_spec_json_shape() {
        let spec: NormalizationSpec =
            serde_json::from_str(r#"{"variant":"scale_offset","scale":10000,"offset":-1000}"#).unwrap();
        assert_eq!(spec, NormalizationSpec::ScaleOffset { scale: 10000.0, offset: -1000.0 });
        let json = serde_json::to_string(&NormalizationSpec::PercentileMinMax { p_low: 1.0, p_high: 99.0 }).unwrap();
        assert_eq!(json, r#"{"variant":"percentile_min_max","p_low":1.0,"p_high":99.0}"#);
    }

    #[test]
    fn window_clamp_cases() {
        let w = Window::new(0, 0, 256, 256).unwrap();
        assert_eq!(window_clamp(w, 256, 256).unwrap(), w);
        let w = Window::new(200, 200, 256, 256).unwrap();
        assert_eq!(window_clamp(w, 256, 256).unwrap(), Window::new(200, 200, 56, 56).unwrap());
        let w = Window::new(300, 0, 10, 10).unwrap();
        assert!(matches!(window_clamp(w, 256, 256), Err(Error::OutOfBounds(..))));
    }

    #[test]
    fn label_mask_rejects_bad_values() {
        assert!(LabelMask::new(1, 2, vec![0, 3], gt()).is_err());
        assert!(LabelMask::new(1, 2, vec![2, 255], gt()).is_ok());
    }

    #[test]
    fn permute_frames_swaps_data_and_validity() {
        let x = BandStack::new(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true, false, true, true], 0.0, gt()).unwrap();
        let y = x.permute_frames(&[1, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 1.0, 0.0]);
        assert_eq!(y.valid(), &[true, true, true, false]);
        assert!(x.permute_frames(&[0, 0]).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear_plane(&src, 3, 4, 3, 4), src);
        let c = vec![2.5f32; 16];
        assert!(resize_bilinear_plane(&c, 4, 4, 7, 3).iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn geotransform_validation() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0, -10.0, "x").is_err());
        assert!(GeoTransform::new(0.0, 0.0, 10.0, 0.0, "x").is_err());
        let g = GeoTransform::north_up(100.0, 200.0, 10.0, "x").unwrap();
        assert_eq!(g.apply(1.0, 2.0), (110.0, 180.0));
        assert_eq!(g.invert(110.0, 180.0), (1.0, 2.0));
        assert_eq!(g.pixel_area(), 100.0);
    }
}
