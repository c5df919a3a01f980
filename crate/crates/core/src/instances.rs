//! Field instances from class masks.
//!
//! Interior-class pixels are grouped into connected components; each
//! component is traced along pixel edges into a polygon whose rasterization
//! reproduces the component exactly. Tracing runs block by block: every block
//! emits the directed boundary edges of the ids it contains, edges of the same
//! id coming from different blocks are merged, and rings are assembled from
//! the merged edge sets. The result does not depend on the block size.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassGrid, GeoTransform, LabelMask, ProbMap, INTERIOR};

/// Pixel adjacency used to group pixels into components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// Edge neighbours only; diagonal contact does not join pixels.
    #[default]
    Four,
    /// Edge and corner neighbours.
    Eight,
}

/// Per-pixel instance ids; 0 means no instance, ids are dense in `1..=count`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceIdMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    count: u32,
    geotransform: GeoTransform,
}

impl InstanceIdMap {
    /// Wraps an existing id raster; ids must be dense in `1..=max`.
    pub fn new(height: usize, width: usize, ids: Vec<u32>, geotransform: GeoTransform) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        let count = ids.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; count as usize + 1];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(missing) = (1..=count as usize).find(|&k| !seen[k]) {
            return Err(Error::invalid(format!("instance ids are not dense: {missing} missing")));
        }
        Ok(InstanceIdMap {
            height,
            width,
            ids,
            count,
            geotransform,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
    pub fn count(&self) -> usize {
        self.count as usize
    }
    pub fn geotransform(&self) -> &GeoTransform {
        &self.geotransform
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width + col]
    }

    /// Linear pixel indices of every instance, in row-major order; entry `k` holds id `k + 1`.
    pub fn pixel_lists(&self) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.count as usize];
        for (px, &id) in self.ids.iter().enumerate() {
            if id > 0 {
                lists[id as usize - 1].push(px as u32);
            }
        }
        lists
    }
}

/// Labels connected regions of pixels satisfying `member`, ids in first-encounter
/// row-major order.
pub fn label_components(
    height: usize,
    width: usize,
    connectivity: Connectivity,
    geotransform: GeoTransform,
    member: impl Fn(usize) -> bool,
) -> InstanceIdMap {
    let mut ids = vec![0u32; height * width];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..height * width {
        if ids[start] != 0 || !member(start) {
            continue;
        }
        next += 1;
        ids[start] = next;
        stack.push(start);
        while let Some(px) = stack.pop() {
            let (r, c) = ((px / width) as isize, (px % width) as isize);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let n = nr as usize * width + nc as usize;
                if ids[n] == 0 && member(n) {
                    ids[n] = next;
                    stack.push(n);
                }
            }
        }
    }
    InstanceIdMap {
        height,
        width,
        ids,
        count: next,
        geotransform,
    }
}

/// Connected components of `target_class` pixels.
pub fn connected_components(mask: &LabelMask, target_class: u8, connectivity: Connectivity) -> InstanceIdMap {
    let data = mask.data();
    label_components(
        mask.height(),
        mask.width(),
        connectivity,
        mask.geotransform().clone(),
        |px| data[px] == target_class,
    )
}

/// Closed ring of `[x, y]` vertices in pixel-corner coordinates (x = column,
/// y = row); the first vertex is repeated at the end.
pub type Ring = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldInstance {
    pub id: u32,
    /// Pixel-space exterior ring, counter-clockwise once mapped north-up.
    pub exterior: Ring,
    pub holes: Vec<Ring>,
    pub pixel_count: usize,
    pub area_ha: f64,
    pub confidence: Option<f64>,
}

impl FieldInstance {
    /// Polygon area in pixel units (exterior minus holes).
    pub fn pixel_area(&self) -> f64 {
        signed_area(&self.exterior).abs() - self.holes.iter().map(|h| signed_area(h).abs()).sum::<f64>()
    }

    /// Rings in map coordinates; exterior counter-clockwise, holes clockwise.
    pub fn map_rings(&self, geotransform: &GeoTransform) -> (Vec<[f64; 2]>, Vec<Vec<[f64; 2]>>) {
        let map = |ring: &Ring, ccw: bool| {
            let mut out: Vec<[f64; 2]> = ring
                .iter()
                .map(|&[x, y]| {
                    let (mx, my) = geotransform.apply(x, y);
                    [mx, my]
                })
                .collect();
            if (signed_area(&out) > 0.0) != ccw {
                out.reverse();
            }
            out
        };
        (
            map(&self.exterior, true),
            self.holes.iter().map(|h| map(h, false)).collect(),
        )
    }
}

/// Shoelace signed area of a closed ring.
pub fn signed_area(ring: &[[f64; 2]]) -> f64 {
    ring.windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
        / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolygonizeOptions {
    pub block_size: usize,
    pub connectivity: Connectivity,
    /// Instances with fewer pixels are dropped (0 keeps everything).
    pub min_area_px: usize,
    /// Douglas–Peucker tolerance in pixels (0 keeps the exact pixel-edge rings).
    pub simplify_tol: f64,
}

impl Default for PolygonizeOptions {
    fn default() -> Self {
        PolygonizeOptions {
            block_size: 4096,
            connectivity: Connectivity::Four,
            min_area_px: 0,
            simplify_tol: 0.0,
        }
    }
}

// Edge directions in pixel coordinates: +x, +y, -x, -y. Edges keep the
// region on their left when the axes are read as a right-handed frame, so
// exterior rings come out with positive shoelace area.
const DX: [i64; 4] = [1, 0, -1, 0];
const DY: [i64; 4] = [0, 1, 0, -1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Edge {
    y: i64,
    x: i64,
    dir: u8,
}

/// Boundary edges of every id inside `rows x cols`, judged against the full map.
fn block_edges(ids: &InstanceIdMap, rows: (usize, usize), cols: (usize, usize)) -> HashMap<u32, Vec<Edge>> {
    let (h, w) = (ids.height as i64, ids.width as i64);
    let at = |r: i64, c: i64| {
        if r < 0 || c < 0 || r >= h || c >= w {
            0
        } else {
            ids.ids[(r * w + c) as usize]
        }
    };
    let mut out: HashMap<u32, Vec<Edge>> = HashMap::new();
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            let (r, c) = (r as i64, c as i64);
            let id = at(r, c);
            if id == 0 {
                continue;
            }
            let mut push = |x, y, dir| out.entry(id).or_default().push(Edge { y, x, dir });
            if at(r - 1, c) != id {
                push(c, r, 0);
            }
            if at(r, c + 1) != id {
                push(c + 1, r, 1);
            }
            if at(r + 1, c) != id {
                push(c + 1, r + 1, 2);
            }
            if at(r, c - 1) != id {
                push(c, r + 1, 3);
            }
        }
    }
    out
}

/// Assembles closed rings from one id's directed edges.
///
/// At vertices where two same-id pixels touch only diagonally, four-connected
/// tracing turns left (keeping the pixels apart) and eight-connected tracing
/// turns right (joining them).
fn trace_rings(edges: &[Edge], connectivity: Connectivity) -> Result<Vec<Ring>> {
    let mut remaining: BTreeSet<Edge> = edges.iter().copied().collect();
    let preference = |d: u8| -> [u8; 3] {
        match connectivity {
            Connectivity::Four => [(d + 1) % 4, d, (d + 3) % 4],
            Connectivity::Eight => [(d + 3) % 4, d, (d + 1) % 4],
        }
    };
    let mut rings = Vec::new();
    while let Some(first) = remaining.pop_first() {
        let mut ring = vec![[first.x as f64, first.y as f64]];
        let mut cur = first;
        loop {
            let (vx, vy) = (cur.x + DX[cur.dir as usize], cur.y + DY[cur.dir as usize]);
            let mut next = None;
            for d in preference(cur.dir) {
                let cand = Edge { y: vy, x: vx, dir: d };
                if cand == first {
                    break;
                }
                if remaining.remove(&cand) {
                    next = Some(cand);
                    break;
                }
            }
            match next {
                Some(e) => {
                    if e.dir != cur.dir {
                        ring.push([vx as f64, vy as f64]);
                    }
                    cur = e;
                }
                None => {
                    if (vx, vy) != (first.x, first.y) {
                        return Err(Error::invalid("open boundary while tracing rings"));
                    }
                    // Drop the start vertex if it sits mid-way along a straight run.
                    if cur.dir == first.dir && ring.len() > 1 {
                        ring.remove(0);
                    }
                    let start = ring[0];
                    ring.push(start);
                    break;
                }
            }
        }
        rings.push(ring);
    }
    Ok(rings)
}

/// Perpendicular distance from `p` to the segment `a-b`.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn douglas_peucker(points: &[[f64; 2]], tol: f64, keep: &mut [bool], lo: usize, hi: usize) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = segment_distance(points[i], points[lo], points[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > tol {
        keep[best] = true;
        douglas_peucker(points, tol, keep, lo, best);
        douglas_peucker(points, tol, keep, best, hi);
    }
}

/// Douglas–Peucker simplification of a closed ring; rings never drop below a triangle.
pub fn simplify_ring(ring: &Ring, tol: f64) -> Ring {
    if tol <= 0.0 || ring.len() <= 5 {
        return ring.clone();
    }
    let open = &ring[..ring.len() - 1];
    let far = (1..open.len())
        .max_by(|&a, &b| {
            let da = segment_distance(open[a], open[0], open[0]);
            let db = segment_distance(open[b], open[0], open[0]);
            da.total_cmp(&db)
        })
        .unwrap_or(1);
    let mut keep = vec![false; ring.len()];
    keep[0] = true;
    keep[far] = true;
    keep[ring.len() - 1] = true;
    douglas_peucker(ring, tol, &mut keep, 0, far);
    douglas_peucker(ring, tol, &mut keep, far, ring.len() - 1);
    let out: Ring = ring.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    if out.len() < 4 {
        ring.clone()
    } else {
        out
    }
}

/// Traces every instance of `ids` into a polygon, one block at a time.
pub fn polygonize(ids: &InstanceIdMap, options: &PolygonizeOptions) -> Result<Vec<FieldInstance>> {
    if options.block_size == 0 {
        return Err(Error::invalid("block size must be >= 1"));
    }
    let bs = options.block_size;
    let blocks: Vec<(usize, usize)> = (0..ids.height)
        .step_by(bs)
        .flat_map(|r| (0..ids.width).step_by(bs).map(move |c| (r, c)))
        .collect();
    let per_block: Vec<HashMap<u32, Vec<Edge>>> = blocks
        .par_iter()
        .map(|&(r, c)| block_edges(ids, (r, (r + bs).min(ids.height)), (c, (c + bs).min(ids.width))))
        .collect();

    // Merge edge sets of ids that span several blocks.
    let mut merged: BTreeMap<u32, Vec<Edge>> = BTreeMap::new();
    for block in per_block {
        for (id, edges) in block {
            merged.entry(id).or_default().extend(edges);
        }
    }

    let counts = {
        let mut counts = vec![0usize; ids.count as usize + 1];
        for &id in &ids.ids {
            counts[id as usize] += 1;
        }
        counts
    };
    let pixel_area_m2 = ids.geotransform.pixel_area();
    let entries: Vec<(u32, Vec<Edge>)> = merged.into_iter().collect();
    let traced: Vec<Result<Option<FieldInstance>>> = entries
        .par_iter()
        .map(|(id, edges)| {
            let pixel_count = counts[*id as usize];
            if pixel_count < options.min_area_px {
                return Ok(None);
            }
            let rings = trace_rings(edges, options.connectivity)?;
            let (mut exteriors, holes): (Vec<Ring>, Vec<Ring>) =
                rings.into_iter().partition(|r| signed_area(r) > 0.0);
            if exteriors.len() != 1 {
                return Err(Error::invalid(format!(
                    "instance {id} has {} outer rings; ids must be connected under the chosen connectivity",
                    exteriors.len()
                )));
            }
            let mut exterior = exteriors.remove(0);
            let mut holes = holes;
            if options.simplify_tol > 0.0 {
                exterior = simplify_ring(&exterior, options.simplify_tol);
                holes = holes.iter().map(|h| simplify_ring(h, options.simplify_tol)).collect();
            }
            let mut inst = FieldInstance {
                id: *id,
                exterior,
                holes,
                pixel_count,
                area_ha: 0.0,
                confidence: None,
            };
            inst.area_ha = inst.pixel_area() * pixel_area_m2 / 1e4;
            Ok(Some(inst))
        })
        .collect();
    traced.into_iter().filter_map(|r| r.transpose()).collect()
}

/// Burns polygons back onto a grid using pixel-centre even-odd sampling.
pub fn rasterize(instances: &[FieldInstance], height: usize, width: usize) -> Vec<u32> {
    let mut out = vec![0u32; height * width];
    for inst in instances {
        let rings: Vec<&Ring> = std::iter::once(&inst.exterior).chain(inst.holes.iter()).collect();
        let (min_y, max_y) = inst
            .exterior
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let r0 = min_y.floor().max(0.0) as usize;
        let r1 = (max_y.ceil().max(0.0) as usize).min(height);
        let mut xs = Vec::new();
        for r in r0..r1 {
            let yc = r as f64 + 0.5;
            xs.clear();
            for ring in &rings {
                for seg in ring.windows(2) {
                    let ([x0, y0], [x1, y1]) = (seg[0], seg[1]);
                    if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                        xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
                    }
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                let c0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let c1 = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for c in c0..c1 {
                    out[r * width + c] = inst.id;
                }
            }
        }
    }
    out
}

/// Mean interior-class probability over an instance's pixels.
pub fn instance_confidence(prob: &ProbMap, pixels: &[u32]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::invalid("confidence of an empty instance"));
    }
    let plane = prob.plane(INTERIOR as usize);
    Ok(pixels.iter().map(|&px| plane[px as usize] as f64).sum::<f64>() / pixels.len() as f64)
}

/// Fills `confidence` on every instance from its pixels in `ids`.
pub fn assign_confidence(instances: &mut [FieldInstance], ids: &InstanceIdMap, prob: &ProbMap) -> Result<()> {
    if prob.height() != ids.height || prob.width() != ids.width {
        return Err(Error::shape("probability map and id map differ in size"));
    }
    let lists = ids.pixel_lists();
    for inst in instances {
        inst.confidence = Some(instance_confidence(prob, &lists[inst.id as usize - 1])?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub field_count: usize,
    /// Lower of the two middle values for even counts; `None` when empty.
    pub median_area_ha: Option<f64>,
    pub total_area_ha: f64,
}

pub fn field_stats(instances: &[FieldInstance], geotransform: &GeoTransform) -> FieldStats {
    let to_ha = geotransform.pixel_area() / 1e4;
    let mut areas: Vec<f64> = instances.iter().map(|i| i.pixel_area() * to_ha).collect();
    areas.sort_by(|a, b| a.total_cmp(b));
    FieldStats {
        field_count: areas.len(),
        median_area_ha: lower_median(&areas),
        total_area_ha: areas.iter().sum(),
    }
}

/// Stats directly from per-field areas in hectares.
pub fn field_stats_from_areas(areas_ha: &[f64]) -> FieldStats {
    let mut areas = areas_ha.to_vec();
    areas.sort_by(|a, b| a.total_cmp(b));
    FieldStats {
        field_count: areas.len(),
        median_area_ha: lower_median(&areas),
        total_area_ha: areas.iter().sum(),
    }
}

fn lower_median(sorted: &[f64]) -> Option<f64> {
    if sorted.is_empty() {
        None
    } else {
        Some(sorted[(sorted.len() - 1) / 2])
    }
}
