//! Seeded synthetic field worlds used as ground-truth oracles.
//!
//! A world is a tessellation of the raster into fields grown from random
//! seed pixels (multi-source breadth-first growth over 4-neighbours), with a
//! background margin peeled from the raster border. Field pixels that touch a
//! different field or background in their 8-neighbourhood become boundary
//! class; the rest are interior. Interior components therefore never touch
//! across fields, and boundary pixels are always one pixel wide.
//!
//! Worlds also carry a bi-temporal RGBN band stack whose content encodes the
//! class of every pixel (see [`encode_pixel`]), so stub models can recover
//! labels from image content alone.

pub mod stub;

use std::collections::{HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::instances::{connected_components, polygonize, Connectivity, FieldInstance, InstanceIdMap, PolygonizeOptions};
use crate::raster::{BandStack, GeoTransform, LabelMask, BACKGROUND, BOUNDARY, INTERIOR};
use crate::rng::{mix, Rng};

pub use stub::{make_stub_model, ConstantModel, FrameMeanModel, LinearModel, StubMode, StubModel, StubModelSpec};

/// Frames in a world band stack (planting, harvest).
pub const FRAMES: usize = 2;
/// Bands per frame (R, G, B, NIR).
pub const BANDS: usize = 4;
pub const NIR: usize = 3;

/// Digital-number levels used by the content encoding.
pub const SIGNAL_DN: f32 = 3000.0;
pub const BASE_DN: f32 = 1000.0;
pub const TEXTURE_DN: f32 = 200.0;
pub const PLANTING_NIR_DN: f32 = 1500.0;
pub const HARVEST_NIR_DN: f32 = 4500.0;

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_fields: usize,
    pub background_fraction: f64,
    /// Field id per pixel from the tessellation (0 = background margin).
    pub regions: Vec<u32>,
    pub gt_mask: LabelMask,
    pub gt_ids: InstanceIdMap,
    pub gt_instances: Vec<FieldInstance>,
    pub bands: BandStack,
}

impl SynthWorld {
    pub fn geotransform(&self) -> &GeoTransform {
        self.gt_mask.geotransform()
    }

    /// Fraction of pixels labeled background.
    pub fn observed_background_fraction(&self) -> f64 {
        let bg = self.gt_mask.data().iter().filter(|&&v| v == BACKGROUND).count();
        bg as f64 / (self.height * self.width) as f64
    }
}

/// Default world geotransform: 10 m north-up UTM grid.
pub fn world_geotransform() -> GeoTransform {
    GeoTransform {
        origin_x: 500_000.0,
        origin_y: 5_000_000.0,
        pixel_size_x: 10.0,
        pixel_size_y: -10.0,
        crs_id: "EPSG:32631".to_string(),
    }
}

/// Band values of one pixel: the band indexed by the class carries the
/// signal level in both frames, and NIR is low at planting and high at harvest.
/// `texture` holds one value in `[-1, 1)` per frame-band.
pub fn encode_pixel(class: u8, texture: &[f64; FRAMES * BANDS]) -> [f32; FRAMES * BANDS] {
    let mut out = [0f32; FRAMES * BANDS];
    for t in 0..FRAMES {
        for b in 0..BANDS {
            let base = if b == NIR {
                if t == 0 {
                    PLANTING_NIR_DN
                } else {
                    HARVEST_NIR_DN
                }
            } else if b == class as usize {
                SIGNAL_DN
            } else {
                BASE_DN
            };
            out[t * BANDS + b] = base + (texture[t * BANDS + b] * TEXTURE_DN as f64) as f32;
        }
    }
    out
}

/// Band stack whose content encodes `mask`; texture is seeded per pixel.
pub fn encode_mask(mask: &LabelMask, seed: u64) -> Result<BandStack> {
    let (h, w) = (mask.height(), mask.width());
    let n = h * w;
    let mut data = vec![0f32; FRAMES * BANDS * n];
    for px in 0..n {
        let mut rng = Rng::new(mix(seed, &[0x7e47_u64, px as u64]));
        let mut texture = [0f64; FRAMES * BANDS];
        for v in texture.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let class = match mask.data()[px] {
            c @ (BACKGROUND | INTERIOR | BOUNDARY) => c,
            _ => BACKGROUND,
        };
        let values = encode_pixel(class, &texture);
        for (k, v) in values.iter().enumerate() {
            data[k * n + px] = *v;
        }
    }
    BandStack::from_data(FRAMES, BANDS, h, w, data, mask.geotransform().clone())
}

/// Generates a deterministic field world.
pub fn generate_world(
    seed: u64,
    height: usize,
    width: usize,
    n_fields: usize,
    background_fraction: f64,
) -> Result<SynthWorld> {
    if height < 32 || width < 32 {
        return Err(Error::invalid(format!("world must be at least 32x32, got {height}x{width}")));
    }
    if n_fields < 1 {
        return Err(Error::invalid("need at least one field"));
    }
    if n_fields > height * width / 16 {
        return Err(Error::invalid(format!(
            "{n_fields} fields exceed the limit of {} for a {height}x{width} world",
            height * width / 16
        )));
    }
    if !(0.0..1.0).contains(&background_fraction) {
        return Err(Error::invalid("background fraction must be in [0, 1)"));
    }
    let n = height * width;
    let mut rng = Rng::new(seed);

    // Distinct seed pixels in draw order; field id = draw index + 1.
    let mut seeds = Vec::with_capacity(n_fields);
    let mut used = HashSet::with_capacity(n_fields);
    while seeds.len() < n_fields {
        let px = rng.below(n as u64) as usize;
        if used.insert(px) {
            seeds.push(px);
        }
    }

    let mut regions = vec![0u32; n];
    let mut queue = VecDeque::with_capacity(n);
    for (k, &px) in seeds.iter().enumerate() {
        regions[px] = k as u32 + 1;
        queue.push_back(px);
    }
    while let Some(px) = queue.pop_front() {
        let (r, c) = (px / width, px % width);
        let id = regions[px];
        let mut visit = |nb: usize| {
            if regions[nb] == 0 {
                regions[nb] = id;
                queue.push_back(nb);
            }
        };
        if r > 0 {
            visit(px - width);
        }
        if r + 1 < height {
            visit(px + width);
        }
        if c > 0 {
            visit(px - 1);
        }
        if c + 1 < width {
            visit(px + 1);
        }
    }

    // Background margin: nearest-to-border pixels first, random order within a ring.
    let target = (background_fraction * n as f64).round() as usize;
    if target > 0 {
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for px in 0..n {
            let (r, c) = (px / width, px % width);
            if r == 0 || c == 0 || r + 1 == height || c + 1 == width {
                dist[px] = 0;
                queue.push_back(px);
            }
        }
        while let Some(px) = queue.pop_front() {
            let (r, c) = (px / width, px % width);
            for (nr, nc) in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                if nr < height && nc < width {
                    let nb = nr * width + nc;
                    if dist[nb] == usize::MAX {
                        dist[nb] = dist[px] + 1;
                        queue.push_back(nb);
                    }
                }
            }
        }
        let mut order: Vec<(usize, u64, usize)> = (0..n).map(|px| (dist[px], rng.next_u64(), px)).collect();
        order.sort_unstable();
        for &(_, _, px) in order.iter().take(target) {
            regions[px] = 0;
        }
    }

    let mut labels = vec![BACKGROUND; n];
    for px in 0..n {
        let id = regions[px];
        if id == 0 {
            continue;
        }
        let (r, c) = (px / width, px % width);
        let mut boundary = false;
        'scan: for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                    continue;
                }
                if regions[nr as usize * width + nc as usize] != id {
                    boundary = true;
                    break 'scan;
                }
            }
        }
        labels[px] = if boundary { BOUNDARY } else { INTERIOR };
    }

    let gt_mask = LabelMask::new(height, width, labels, world_geotransform())?;
    let gt_ids = connected_components(&gt_mask, INTERIOR, Connectivity::Four);
    let gt_instances = polygonize(&gt_ids, &PolygonizeOptions::default())?;
    let bands = encode_mask(&gt_mask, seed)?;
    Ok(SynthWorld {
        seed,
        height,
        width,
        n_fields,
        background_fraction,
        regions,
        gt_mask,
        gt_ids,
        gt_instances,
        bands,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_field_single_component() {
        let w = generate_world(1, 64, 64, 1, 0.0).unwrap();
        assert_eq!(w.gt_instances.len(), 1);
        assert_eq!(w.gt_ids.count(), 1);
    }

    #[test]
    fn instance_count_matches_components() {
        let w = generate_world(7, 128, 128, 12, 0.2).unwrap();
        let cc = connected_components(&w.gt_mask, INTERIOR, Connectivity::Four);
        assert_eq!(w.gt_instances.len(), cc.count());
        assert!(w.gt_instances.len() >= 6, "{}", w.gt_instances.len());
    }

    #[test]
    fn deterministic() {
        let a = generate_world(11, 64, 80, 9, 0.3).unwrap();
        let b = generate_world(11, 64, 80, 9, 0.3).unwrap();
        assert_eq!(a.gt_mask, b.gt_mask);
        assert_eq!(a.bands, b.bands);
        let c = generate_world(12, 64, 80, 9, 0.3).unwrap();
        assert_ne!(a.gt_mask, c.gt_mask);
    }

    #[test]
    fn background_fraction_reached() {
        for &bg in &[0.0, 0.1, 0.35, 0.6] {
            let w = generate_world(3, 96, 64, 10, bg).unwrap();
            assert!((w.observed_background_fraction() - bg).abs() <= 0.05, "{bg}");
        }
    }

    #[test]
    fn interior_components_stay_within_one_field() {
        for seed in 0..10 {
            let w = generate_world(seed, 64, 64, 15, 0.15).unwrap();
            let mut owner = vec![0u32; w.gt_ids.count() + 1];
            for (px, &id) in w.gt_ids.ids().iter().enumerate() {
                if id == 0 {
                    continue;
                }
                let region = w.regions[px];
                assert_ne!(region, 0);
                if owner[id as usize] == 0 {
                    owner[id as usize] = region;
                }
                assert_eq!(owner[id as usize], region, "component {id} spans two fields");
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_world(1, 16, 64, 1, 0.0).is_err());
        assert!(generate_world(1, 64, 64, 0, 0.0).is_err());
        assert!(generate_world(1, 64, 64, 257, 0.0).is_err());
        assert!(generate_world(1, 64, 64, 256, 0.0).is_ok());
        assert!(generate_world(1, 64, 64, 4, 1.0).is_err());
    }

    #[test]
    fn content_encodes_class() {
        let w = generate_world(5, 48, 48, 6, 0.2).unwrap();
        for r in 0..48 {
            for c in 0..48 {
                let class = w.gt_mask.get(r, c) as usize;
                let best = (0..3)
                    .max_by(|&a, &b| w.bands.value(0, a, r, c).total_cmp(&w.bands.value(0, b, r, c)))
                    .unwrap();
                assert_eq!(best, class);
                assert!(w.bands.value(0, NIR, r, c) < w.bands.value(1, NIR, r, c));
            }
        }
    }
}
