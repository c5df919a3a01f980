//! Season windows, scene prefiltering, greedy scene selection and median compositing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Day-of-year interval; `start > end` wraps through the year end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonWindow {
    pub start_doy: u16,
    pub end_doy: u16,
}

impl SeasonWindow {
    pub fn new(start_doy: u16, end_doy: u16) -> Result<Self> {
        if !(1..=365).contains(&start_doy) || !(1..=365).contains(&end_doy) {
            return Err(Error::invalid(format!("day of year outside 1..365: ({start_doy}, {end_doy})")));
        }
        Ok(SeasonWindow { start_doy, end_doy })
    }

    pub fn wraps(&self) -> bool {
        self.start_doy > self.end_doy
    }

    pub fn contains(&self, doy: u16) -> bool {
        if self.wraps() {
            doy >= self.start_doy || doy <= self.end_doy
        } else {
            (self.start_doy..=self.end_doy).contains(&doy)
        }
    }
}

fn check_latitude(lat: f64) -> Result<f64> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::invalid(format!("latitude {lat} outside [-90, 90]")));
    }
    Ok(lat.abs())
}

fn window(pair: (u16, u16)) -> SeasonWindow {
    SeasonWindow {
        start_doy: pair.0,
        end_doy: pair.1,
    }
}

/// Planting-season window by latitude band; the hemisphere test is `lat > 0`.
pub fn planting_doy(lat: f64) -> Result<SeasonWindow> {
    let a = check_latitude(lat)?;
    let north = lat > 0.0;
    let pair = if a > 45.0 {
        if north { (91, 151) } else { (274, 334) }
    } else if a > 20.0 {
        if north { (60, 120) } else { (244, 334) }
    } else if a > 5.0 {
        if north { (121, 212) } else { (305, 365) }
    } else {
        (60, 121)
    };
    Ok(window(pair))
}

/// Harvest-season window by latitude band; the hemisphere test is `lat > 0`.
pub fn harvest_doy(lat: f64) -> Result<SeasonWindow> {
    let a = check_latitude(lat)?;
    let north = lat > 0.0;
    let pair = if a > 45.0 {
        if north { (244, 304) } else { (60, 151) }
    } else if a > 20.0 {
        if north { (213, 304) } else { (32, 120) }
    } else if a > 5.0 {
        if north { (274, 365) } else { (91, 181) }
    } else {
        (182, 243)
    };
    Ok(window(pair))
}

/// Scene classification codes excluded by default (0 is nodata).
pub const DEFAULT_EXCLUDED_SCL: [u8; 7] = [0, 1, 3, 7, 8, 9, 10];
pub const DEFAULT_MAX_CLOUD: f64 = 75.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub timestamp: String,
    pub cloud_cover_pct: f64,
    /// `B x H x W`.
    pub bands: Vec<f32>,
    /// Scene classification code per pixel.
    pub scl: Vec<u8>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneStack {
    bands: usize,
    height: usize,
    width: usize,
    scenes: Vec<Scene>,
}

impl SceneStack {
    pub fn new(bands: usize, height: usize, width: usize, scenes: Vec<Scene>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("scene stack dimensions must be >= 1"));
        }
        let n = height * width;
        for s in &scenes {
            if s.bands.len() != bands * n || s.scl.len() != n || s.valid.len() != n {
                return Err(Error::shape(format!(
                    "scene {} does not match a {bands}x{height}x{width} stack",
                    s.timestamp
                )));
            }
            if let Some(&c) = s.scl.iter().find(|&&c| c > 11) {
                return Err(Error::invalid(format!("scene classification code {c} outside 0..11")));
            }
        }
        Ok(SceneStack {
            bands,
            height,
            width,
            scenes,
        })
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
    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    /// Validity masks stacked `T x H x W`.
    pub fn valid_masks(&self) -> Vec<Vec<bool>> {
        self.scenes.iter().map(|s| s.valid.clone()).collect()
    }
}

/// Drops scenes with cloud cover `>= max_cloud` and additionally invalidates
/// pixels whose classification code is excluded.
pub fn prefilter_scenes(stack: &SceneStack, max_cloud: f64, excluded_scl: &[u8]) -> SceneStack {
    let scenes = stack
        .scenes
        .iter()
        .filter(|s| s.cloud_cover_pct < max_cloud)
        .map(|s| Scene {
            valid: s
                .scl
                .iter()
                .zip(&s.valid)
                .map(|(c, &v)| v && !excluded_scl.contains(c))
                .collect(),
            ..s.clone()
        })
        .collect();
    SceneStack {
        bands: stack.bands,
        height: stack.height,
        width: stack.width,
        scenes,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Scene indices in selection order.
    pub selected: Vec<usize>,
    /// Winning gain of each iteration, including a final zero if the loop stopped on it.
    pub gains: Vec<usize>,
    pub coverage_depth: Vec<u32>,
}

/// Greedy coverage-maximizing selection. Each round picks the remaining scene
/// with the most valid pixels still below `target_coverage` (strictly
/// greater gain wins, so the lowest index wins ties) and stops at zero gain,
/// after `max_scenes` rounds, or when no scene remains.
pub fn select_scenes_greedy(valid: &[Vec<bool>], target_coverage: u32, max_scenes: usize) -> Result<Selection> {
    let Some(first) = valid.first() else {
        return Err(Error::invalid("scene selection needs at least one scene"));
    };
    let n = first.len();
    if valid.iter().any(|v| v.len() != n) {
        return Err(Error::shape("validity masks differ in size"));
    }
    let mut depth = vec![0u32; n];
    let mut remaining: Vec<usize> = (0..valid.len()).collect();
    let mut selected = Vec::new();
    let mut gains = Vec::new();
    for _ in 0..max_scenes {
        if remaining.is_empty() {
            break;
        }
        let mut best: Option<usize> = None;
        let mut best_gain: i64 = -1;
        for &idx in &remaining {
            let gain = valid[idx]
                .iter()
                .zip(&depth)
                .filter(|(&v, &d)| v && d < target_coverage)
                .count() as i64;
            if gain > best_gain {
                best_gain = gain;
                best = Some(idx);
            }
        }
        gains.push(best_gain as usize);
        if best_gain == 0 {
            break;
        }
        let idx = best.expect("non-empty remaining set yields a candidate");
        selected.push(idx);
        for (d, &v) in depth.iter_mut().zip(&valid[idx]) {
            *d += v as u32;
        }
        remaining.retain(|&r| r != idx);
    }
    Ok(Selection {
        selected,
        gains,
        coverage_depth: depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeResult {
    /// `B x H x W`; pixels without observations hold `nodata`.
    pub median: Vec<f32>,
    pub counts: Vec<u32>,
    pub selected_timestamps: Vec<String>,
    pub nodata: f32,
}

/// Per-pixel, per-band median over the selected scenes valid at that pixel.
/// Even counts average the two central values.
pub fn median_composite(stack: &SceneStack, selected: &[usize], nodata: f32) -> Result<CompositeResult> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= stack.scenes.len()) {
        return Err(Error::invalid(format!("selected scene {bad} not in stack")));
    }
    let n = stack.height * stack.width;
    let mut median = vec![nodata; stack.bands * n];
    let mut counts = vec![0u32; n];
    let mut vals = Vec::with_capacity(selected.len());
    for px in 0..n {
        let obs: Vec<&Scene> = selected.iter().map(|&i| &stack.scenes[i]).filter(|s| s.valid[px]).collect();
        counts[px] = obs.len() as u32;
        if obs.is_empty() {
            continue;
        }
        for b in 0..stack.bands {
            vals.clear();
            vals.extend(obs.iter().map(|s| s.bands[b * n + px] as f64));
            vals.sort_by(f64::total_cmp);
            let k = vals.len();
            let m = if k % 2 == 1 {
                vals[k / 2]
            } else {
                (vals[k / 2 - 1] + vals[k / 2]) / 2.0
            };
            median[b * n + px] = m as f32;
        }
    }
    Ok(CompositeResult {
        median,
        counts,
        selected_timestamps: selected.iter().map(|&i| stack.scenes[i].timestamp.clone()).collect(),
        nodata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planting_examples() {
        assert_eq!(planting_doy(48.0).unwrap(), SeasonWindow::new(91, 151).unwrap());
        assert_eq!(planting_doy(-10.0).unwrap(), SeasonWindow::new(305, 365).unwrap());
        assert_eq!(planting_doy(2.0).unwrap(), SeasonWindow::new(60, 121).unwrap());
        assert_eq!(planting_doy(-50.0).unwrap(), SeasonWindow::new(274, 334).unwrap());
        assert_eq!(planting_doy(30.0).unwrap(), SeasonWindow::new(60, 120).unwrap());
        assert_eq!(planting_doy(-30.0).unwrap(), SeasonWindow::new(244, 334).unwrap());
        assert_eq!(planting_doy(10.0).unwrap(), SeasonWindow::new(121, 212).unwrap());
        assert!(planting_doy(90.5).is_err());
    }

    #[test]
    fn harvest_examples() {
        assert_eq!(harvest_doy(48.0).unwrap(), SeasonWindow::new(244, 304).unwrap());
        assert_eq!(harvest_doy(-30.0).unwrap(), SeasonWindow::new(32, 120).unwrap());
        assert_eq!(harvest_doy(0.0).unwrap(), SeasonWindow::new(182, 243).unwrap());
        assert_eq!(harvest_doy(-60.0).unwrap(), SeasonWindow::new(60, 151).unwrap());
        assert_eq!(harvest_doy(30.0).unwrap(), SeasonWindow::new(213, 304).unwrap());
        assert_eq!(harvest_doy(15.0).unwrap(), SeasonWindow::new(274, 365).unwrap());
        assert_eq!(harvest_doy(-15.0).unwrap(), SeasonWindow::new(91, 181).unwrap());
        assert!(harvest_doy(-91.0).is_err());
    }

    #[test]
    fn band_edges_are_inclusive_below() {
        assert_eq!(planting_doy(45.0).unwrap(), planting_doy(30.0).unwrap());
        assert_eq!(planting_doy(20.0).unwrap(), planting_doy(10.0).unwrap());
        assert_eq!(planting_doy(5.0).unwrap(), planting_doy(0.0).unwrap());
    }

    #[test]
    fn window_wrap() {
        let w = SeasonWindow::new(330, 30).unwrap();
        assert!(w.contains(1) && w.contains(365) && !w.contains(100));
        assert!(SeasonWindow::new(0, 10).is_err());
    }

    fn masks() -> Vec<Vec<bool>> {
        vec![
            vec![true, true, false, false],
            vec![false, false, true, true],
            vec![true, true, true, true],
        ]
    }

    #[test]
    fn greedy_hand_traces() {
        assert_eq!(select_scenes_greedy(&masks(), 1, 10).unwrap().selected, vec![2]);
        assert_eq!(select_scenes_greedy(&masks(), 2, 10).unwrap().selected, vec![2, 0, 1]);
        let none = vec![vec![false; 4]; 3];
        assert!(select_scenes_greedy(&none, 5, 10).unwrap().selected.is_empty());
        assert_eq!(select_scenes_greedy(&masks(), 5, 2).unwrap().selected.len(), 2);
    }

    fn scene(ts: &str, cloud: f64, vals: [f32; 2], scl: [u8; 2]) -> Scene {
        Scene {
            timestamp: ts.into(),
            cloud_cover_pct: cloud,
            bands: vals.to_vec(),
            scl: scl.to_vec(),
            valid: vec![true, true],
        }
    }

    #[test]
    fn prefilter_drops_cloudy_and_excluded() {
        let stack = SceneStack::new(
            1,
            1,
            2,
            vec![scene("a", 80.0, [1.0, 1.0], [4, 4]), scene("b", 74.9, [1.0, 1.0], [4, 9])],
        )
        .unwrap();
        let f = prefilter_scenes(&stack, DEFAULT_MAX_CLOUD, &DEFAULT_EXCLUDED_SCL);
        assert_eq!(f.scenes().len(), 1);
        assert_eq!(f.scenes()[0].valid, vec![true, false]);
    }

    #[test]
    fn median_conventions() {
        let stack = SceneStack::new(
            1,
            1,
            2,
            vec![
                scene("a", 0.0, [1.0, 1.0], [4, 4]),
                scene("b", 0.0, [3.0, 3.0], [4, 4]),
                scene("c", 0.0, [2.0, 9.0], [4, 0]),
            ],
        )
        .unwrap();
        let f = prefilter_scenes(&stack, 75.0, &DEFAULT_EXCLUDED_SCL);
        let c = median_composite(&f, &[0, 1, 2], -1.0).unwrap();
        assert_eq!(c.median, vec![2.0, 2.0]);
        assert_eq!(c.counts, vec![3, 2]);
        let single = median_composite(&f, &[2], -1.0).unwrap();
        assert_eq!(single.median, vec![2.0, -1.0]);
        assert_eq!(single.counts, vec![1, 0]);
    }
}
