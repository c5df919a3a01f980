//! Multi-year change masks from semantic logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassGrid, GeoTransform, LabelMask, LogitMap, INTERIOR};

/// Min–max normalized `|y1[class] - y2[class]|`, all zeros when the
/// difference is constant. Normalization spans the whole extent.
pub fn change_magnitude(y1: &LogitMap, y2: &LogitMap, class: usize) -> Result<Vec<f64>> {
    if (y1.classes(), y1.height(), y1.width()) != (y2.classes(), y2.height(), y2.width()) {
        return Err(Error::shape(format!(
            "logit maps differ: {}x{}x{} vs {}x{}x{}",
            y1.classes(),
            y1.height(),
            y1.width(),
            y2.classes(),
            y2.height(),
            y2.width()
        )));
    }
    if y1.geotransform() != y2.geotransform() {
        return Err(Error::shape("logit maps are on different grids"));
    }
    if class >= y1.classes() {
        return Err(Error::invalid(format!("class {class} not in a {}-class map", y1.classes())));
    }
    let d: Vec<f64> = y1
        .plane(class)
        .iter()
        .zip(y2.plane(class))
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .collect();
    Ok(min_max(&d))
}

/// Affine map of `values` onto `[0, 1]`; constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeMask {
    pub height: usize,
    pub width: usize,
    pub changed: Vec<bool>,
    pub threshold: f64,
    pub years: Option<(String, String)>,
}

impl ChangeMask {
    pub fn count(&self) -> usize {
        self.changed.iter().filter(|&&c| c).count()
    }

    /// Changed pixels as interior class, unchanged as background, for polygonization.
    pub fn to_label_mask(&self, geotransform: GeoTransform) -> Result<LabelMask> {
        let data = self.changed.iter().map(|&c| if c { INTERIOR } else { 0 }).collect();
        LabelMask::new(self.height, self.width, data, geotransform)
    }
}

/// Pixels with `magnitude >= threshold`.
pub fn change_mask(magnitude: &[f64], height: usize, width: usize, threshold: f64) -> Result<ChangeMask> {
    if magnitude.len() != height * width {
        return Err(Error::shape(format!(
            "{} magnitudes for a {height}x{width} grid",
            magnitude.len()
        )));
    }
    if !threshold.is_finite() {
        return Err(Error::invalid("threshold must be finite"));
    }
    Ok(ChangeMask {
        height,
        width,
        changed: magnitude.iter().map(|&m| m >= threshold).collect(),
        threshold,
        years: None,
    })
}
