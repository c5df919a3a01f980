//! Pixel-level and object-level evaluation.
//!
//! Unknown ground-truth pixels (255) are excluded from every pixel count.
//! Object metrics match predicted instances to ground-truth instances by
//! pixel-support IoU, greedily in descending confidence order; average
//! precision follows the 101-point interpolated COCO definition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::InstanceIdMap;
use crate::raster::{LabelMask, INTERIOR, UNKNOWN};

const CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassScores {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        ClassScores {
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    /// Background, interior and boundary scores.
    pub per_class: Vec<ClassScores>,
    /// The field (interior) class; its IoU is the reported "pixel IoU".
    pub interior: ClassScores,
    /// Mean IoU over classes with a defined IoU.
    pub mean_iou: Option<f64>,
    pub evaluated_pixel_count: u64,
}

impl PixelMetrics {
    /// Flat `name -> value` view for macro averaging.
    pub fn summary(&self) -> BTreeMap<String, Option<f64>> {
        BTreeMap::from([
            ("pixel_iou".to_string(), self.interior.iou),
            ("pixel_precision".to_string(), self.interior.precision),
            ("pixel_recall".to_string(), self.interior.recall),
            ("pixel_f1".to_string(), self.interior.f1),
            ("mean_iou".to_string(), self.mean_iou),
        ])
    }
}

/// Confusion-based scores over pixels whose ground truth is known.
pub fn pixel_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<PixelMetrics> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut confusion = [[0u64; CLASSES + 1]; CLASSES];
    let mut evaluated = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == UNKNOWN {
            continue;
        }
        evaluated += 1;
        let p = if (p as usize) < CLASSES { p as usize } else { CLASSES };
        confusion[g as usize][p] += 1;
    }
    if evaluated == 0 {
        return Ok(PixelMetrics {
            per_class: vec![ClassScores::default(); CLASSES],
            interior: ClassScores::default(),
            mean_iou: None,
            evaluated_pixel_count: 0,
        });
    }
    let per_class: Vec<ClassScores> = (0..CLASSES)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<u64>() - tp;
            let fp = (0..CLASSES).map(|g| confusion[g][c]).sum::<u64>() - tp;
            ClassScores::from_counts(tp, fp, fn_)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|s| s.iou).collect();
    Ok(PixelMetrics {
        interior: per_class[INTERIOR as usize],
        mean_iou: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        per_class,
        evaluated_pixel_count: evaluated,
    })
}

/// Instance as a sorted set of linear pixel indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub id: u32,
    pub pixels: Vec<u32>,
    pub confidence: f64,
}

impl ScoredInstance {
    pub fn new(id: u32, mut pixels: Vec<u32>, confidence: f64) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        ScoredInstance {
            id,
            pixels,
            confidence,
        }
    }
}

/// Instances of an id map; `confidences[k]` belongs to id `k + 1` (1.0 when absent).
pub fn instances_from_ids(ids: &InstanceIdMap, confidences: Option<&[f64]>) -> Vec<ScoredInstance> {
    ids.pixel_lists()
        .into_iter()
        .enumerate()
        .map(|(k, pixels)| ScoredInstance {
            id: k as u32 + 1,
            pixels,
            confidence: confidences.map_or(1.0, |c| c[k]),
        })
        .collect()
}

/// `|a ∩ b| / |a ∪ b|` of two sorted pixel sets.
pub fn instance_iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn intersection_size(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Sparse IoU table: for each prediction, `(gt index, iou)` of overlapping gts.
#[derive(Debug, Clone, PartialEq)]
pub struct IouTable {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub gts: usize,
}

impl IouTable {
    pub fn compute(preds: &[ScoredInstance], gts: &[ScoredInstance]) -> Self {
        // (pixel, gt) pairs sorted by pixel, merged against each sorted prediction.
        let mut owner: Vec<(u32, usize)> = gts
            .iter()
            .enumerate()
            .flat_map(|(g, gt)| gt.pixels.iter().map(move |&px| (px, g)))
            .collect();
        owner.sort_unstable();
        let rows = preds
            .iter()
            .map(|p| {
                let mut overlap: BTreeMap<usize, usize> = BTreeMap::new();
                let (Some(&lo), Some(&hi)) = (p.pixels.first(), p.pixels.last()) else {
                    return Vec::new();
                };
                let mut j = owner.partition_point(|&(px, _)| px < lo);
                let mut i = 0;
                while i < p.pixels.len() && j < owner.len() && owner[j].0 <= hi {
                    match p.pixels[i].cmp(&owner[j].0) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            *overlap.entry(owner[j].1).or_default() += 1;
                            j += 1;
                        }
                    }
                }
                overlap
                    .into_iter()
                    .map(|(g, inter)| {
                        let union = p.pixels.len() + gts[g].pixels.len() - inter;
                        (g, inter as f64 / union as f64)
                    })
                    .collect()
            })
            .collect();
        IouTable { rows, gts: gts.len() }
    }

    /// Dense table, mainly for hand-written cases.
    pub fn from_dense(matrix: &[Vec<f64>], gts: usize) -> Self {
        IouTable {
            rows: matrix
                .iter()
                .map(|r| r.iter().copied().enumerate().filter(|&(_, v)| v > 0.0).collect())
                .collect(),
            gts,
        }
    }
}

/// Prediction indices by descending confidence, then larger area, then lower id.
pub fn confidence_order(preds: &[ScoredInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.confidence
            .total_cmp(&pa.confidence)
            .then(pb.pixels.len().cmp(&pa.pixels.len()))
            .then(pa.id.cmp(&pb.id))
    });
    order
}

/// Greedy one-to-one matching; returns the gt index assigned to each prediction.
pub fn greedy_assign(order: &[usize], table: &IouTable, iou_threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; table.gts];
    let mut assigned = vec![None; table.rows.len()];
    for &p in order {
        let mut best: Option<(usize, f64)> = None;
        for &(g, iou) in &table.rows[p] {
            if taken[g] || iou < iou_threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assigned[p] = Some(g);
        }
    }
    assigned
}

/// Maximum-cardinality, then maximum-total-IoU matching (Hungarian algorithm).
pub fn optimal_assign(table: &IouTable, iou_threshold: f64) -> Vec<Option<usize>> {
    let (np, ng) = (table.rows.len(), table.gts);
    let n = np.max(ng);
    if n == 0 {
        return Vec::new();
    }
    // Each eligible pair is worth one cardinality unit plus its IoU; a unit
    // outweighs any sum of IoUs.
    let unit = n as f64 + 1.0;
    let mut cost = vec![vec![0.0f64; n]; n];
    for (p, row) in table.rows.iter().enumerate() {
        for &(g, iou) in row {
            if iou >= iou_threshold {
                cost[p][g] = -(unit + iou);
            }
        }
    }
    let assignment = hungarian(&cost);
    (0..np)
        .map(|p| {
            let g = assignment[p];
            (g < ng && cost[p][g] < 0.0).then_some(g)
        })
        .collect()
}

/// Minimum-cost perfect assignment on a square matrix; returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    #[default]
    Greedy,
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred_id: u32,
    pub gt_id: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<u32>,
    pub unmatched_gts: Vec<u32>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.iou).sum()
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold must be in (0, 1], got {t}")));
    }
    Ok(())
}

pub fn match_instances(
    preds: &[ScoredInstance],
    gts: &[ScoredInstance],
    iou_threshold: f64,
    strategy: MatchStrategy,
) -> Result<MatchResult> {
    check_threshold(iou_threshold)?;
    let table = IouTable::compute(preds, gts);
    Ok(match_with_table(preds, gts, &table, iou_threshold, strategy))
}

pub fn match_with_table(
    preds: &[ScoredInstance],
    gts: &[ScoredInstance],
    table: &IouTable,
    iou_threshold: f64,
    strategy: MatchStrategy,
) -> MatchResult {
    let order = confidence_order(preds);
    let assigned = match strategy {
        MatchStrategy::Greedy => greedy_assign(&order, table, iou_threshold),
        MatchStrategy::Optimal => optimal_assign(table, iou_threshold),
    };
    let lookup = |p: usize, g: usize| {
        table.rows[p]
            .iter()
            .find(|&&(gg, _)| gg == g)
            .map_or(0.0, |&(_, iou)| iou)
    };
    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    for &p in &order {
        match assigned[p] {
            Some(g) => {
                gt_taken[g] = true;
                pairs.push(MatchPair {
                    pred_id: preds[p].id,
                    gt_id: gts[g].id,
                    iou: lookup(p, g),
                });
            }
            None => unmatched_preds.push(preds[p].id),
        }
    }
    let unmatched_gts = gts
        .iter()
        .zip(&gt_taken)
        .filter(|(_, &t)| !t)
        .map(|(g, _)| g.id)
        .collect();
    MatchResult {
        pairs,
        unmatched_preds,
        unmatched_gts,
        iou_threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
    pub kept_preds: usize,
    pub gts: usize,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl ObjectPrf {
    pub fn summary(&self) -> BTreeMap<String, Option<f64>> {
        BTreeMap::from([
            ("object_precision".to_string(), Some(self.precision)),
            ("object_recall".to_string(), Some(self.recall)),
            ("object_f1".to_string(), Some(self.f1)),
        ])
    }
}

/// P/R/F1 from match counts; every 0/0 ratio is reported as 0.
pub fn prf_from_counts(matches: usize, kept_preds: usize, gts: usize) -> (f64, f64, f64) {
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(matches, kept_preds);
    let r = div(matches, gts);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Object precision/recall/F1 keeping predictions with confidence `>= conf_threshold`.
pub fn object_prf(
    preds: &[ScoredInstance],
    gts: &[ScoredInstance],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<ObjectPrf> {
    let kept: Vec<ScoredInstance> = preds
        .iter()
        .filter(|p| p.confidence >= conf_threshold)
        .cloned()
        .collect();
    let m = match_instances(&kept, gts, iou_threshold, MatchStrategy::Greedy)?;
    let (precision, recall, f1) = prf_from_counts(m.pairs.len(), kept.len(), gts.len());
    Ok(ObjectPrf {
        precision,
        recall,
        f1,
        matches: m.pairs.len(),
        kept_preds: kept.len(),
        gts: gts.len(),
        conf_threshold,
        iou_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    /// `(iou_threshold, ap)` for 0.50, 0.55, ..., 0.95.
    pub per_threshold: Vec<(f64, f64)>,
}

/// The ten COCO IoU thresholds, computed from integers.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// 101-point interpolated AP from a ranked TP/FP sequence and the gt count.
pub fn interpolated_ap(is_tp: &[bool], n_gts: usize) -> f64 {
    if n_gts == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall_num = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall_num.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100usize {
        // First rank whose recall tp / n_gts reaches r / 100, compared exactly.
        while idx < recall_num.len() && recall_num[idx] * 100 < r * n_gts {
            idx += 1;
        }
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// COCO-style AP at each IoU threshold in 0.50:0.05:0.95.
pub fn average_precision(preds: &[ScoredInstance], gts: &[ScoredInstance]) -> APResult {
    if gts.is_empty() {
        return APResult {
            ap50: None,
            ap50_95: None,
            per_threshold: Vec::new(),
        };
    }
    let table = IouTable::compute(preds, gts);
    let order = confidence_order(preds);
    let per_threshold: Vec<(f64, f64)> = coco_iou_thresholds()
        .into_iter()
        .map(|t| {
            let assigned = greedy_assign(&order, &table, t);
            let ranked: Vec<bool> = order.iter().map(|&p| assigned[p].is_some()).collect();
            (t, interpolated_ap(&ranked, gts.len()))
        })
        .collect();
    APResult {
        ap50: Some(per_threshold[0].1),
        ap50_95: Some(per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64),
        per_threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroStat {
    pub mean: Option<f64>,
    /// Population standard deviation across contributing regions.
    pub std: Option<f64>,
    pub regions: usize,
}

/// Unweighted per-metric mean and spread across regions; regions with a
/// missing (`None`) value do not contribute to that metric.
pub fn macro_average(
    per_region: &BTreeMap<String, BTreeMap<String, Option<f64>>>,
) -> Result<BTreeMap<String, MacroStat>> {
    if per_region.is_empty() {
        return Err(Error::invalid("macro average needs at least one region"));
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for metrics in per_region.values() {
        for (name, v) in metrics {
            let slot = values.entry(name.clone()).or_default();
            if let Some(v) = v {
                slot.push(*v);
            }
        }
    }
    Ok(values
        .into_iter()
        .map(|(name, vs)| {
            let stat = if vs.is_empty() {
                MacroStat {
                    mean: None,
                    std: None,
                    regions: 0,
                }
            } else {
                let n = vs.len() as f64;
                let mean = vs.iter().sum::<f64>() / n;
                let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                MacroStat {
                    mean: Some(mean),
                    std: Some(var.sqrt()),
                    regions: vs.len(),
                }
            };
            (name, stat)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn lm(data: Vec<u8>, w: usize) -> LabelMask {
        LabelMask::new(data.len() / w, w, data, GeoTransform::default()).unwrap()
    }

    fn inst(id: u32, pixels: &[u32], conf: f64) -> ScoredInstance {
        ScoredInstance::new(id, pixels.to_vec(), conf)
    }

    #[test]
    fn perfect_prediction() {
        let gt = lm(vec![0, 1, 2, 1, 0, 2], 3);
        let m = pixel_metrics(&gt, &gt).unwrap();
        assert!(m.per_class.iter().all(|s| s.iou == Some(1.0)));
        assert_eq!(m.evaluated_pixel_count, 6);
    }

    #[test]
    fn interior_iou_hand_case() {
        // gt interior at 0..4, pred interior at 2..6: overlap 2, union 6.
        let gt = lm(vec![1, 1, 1, 1, 0, 0, 0, 0], 8);
        let pred = lm(vec![0, 0, 1, 1, 1, 1, 0, 0], 8);
        let m = pixel_metrics(&pred, &gt).unwrap();
        assert_eq!(m.interior.iou, Some(2.0 / 6.0));
    }

    #[test]
    fn fully_masked_is_null() {
        let gt = lm(vec![255; 4], 2);
        let pred = lm(vec![1; 4], 2);
        let m = pixel_metrics(&pred, &gt).unwrap();
        assert_eq!(m.evaluated_pixel_count, 0);
        assert_eq!(m.interior.iou, None);
        assert_eq!(m.mean_iou, None);
        assert!(pixel_metrics(&lm(vec![1; 6], 3), &gt).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(instance_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(instance_iou(&[1, 2], &[3, 4]), 0.0);
        // 2x2 block vs the same block shifted one column on a 4-wide grid.
        assert_eq!(instance_iou(&[0, 1, 4, 5], &[1, 2, 5, 6]), 2.0 / 6.0);
    }

    #[test]
    fn greedy_prefers_highest_iou() {
        let table = IouTable::from_dense(&[vec![0.7, 0.6]], 2);
        let assigned = greedy_assign(&[0], &table, 0.5);
        assert_eq!(assigned, vec![Some(0)]);
        let table = IouTable::from_dense(&[vec![0.6, 0.7]], 2);
        assert_eq!(greedy_assign(&[0], &table, 0.5), vec![Some(1)]);
    }

    #[test]
    fn match_examples() {
        let gts = vec![inst(1, &[0, 1, 2, 3, 4], 1.0), inst(2, &[10, 11, 12], 1.0)];
        let preds = vec![inst(7, &[0, 1, 2], 0.9)];
        let m = match_instances(&preds, &gts, 0.5, MatchStrategy::Greedy).unwrap();
        assert_eq!(m.pairs, vec![MatchPair { pred_id: 7, gt_id: 1, iou: 0.6 }]);
        assert_eq!(m.unmatched_gts, vec![2]);
        assert!(match_instances(&preds, &gts, 0.0, MatchStrategy::Greedy).is_err());
    }

    #[test]
    fn optimal_beats_greedy_on_crafted_table() {
        // Greedy takes pred0-gt0 and strands pred1; optimal pairs both.
        let table = IouTable::from_dense(&[vec![0.9, 0.6], vec![0.8, 0.0]], 2);
        let greedy = greedy_assign(&[0, 1], &table, 0.5);
        assert_eq!(greedy, vec![Some(0), None]);
        let optimal = optimal_assign(&table, 0.5);
        assert_eq!(optimal, vec![Some(1), Some(0)]);
    }

    #[test]
    fn prf_examples() {
        assert_eq!(prf_from_counts(3, 3, 3), (1.0, 1.0, 1.0));
        let (p, r, f) = prf_from_counts(1, 1, 2);
        assert_eq!((p, r), (1.0, 0.5));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(prf_from_counts(0, 0, 4), (0.0, 0.0, 0.0));
    }

    #[test]
    fn object_prf_filters_low_confidence() {
        let gts = vec![inst(1, &[0, 1], 1.0), inst(2, &[5, 6], 1.0)];
        let preds = vec![inst(1, &[0, 1], 0.9), inst(2, &[5, 6], 0.3)];
        let r = object_prf(&preds, &gts, 0.5, 0.5).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.5));
        assert_eq!(r.kept_preds, 1);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(interpolated_ap(&[true, false], 1), 1.0);
        let ap = interpolated_ap(&[true, false, true], 2);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert!((ap - 0.835).abs() < 1e-3);
        let gts = vec![inst(1, &[0, 1, 2], 1.0)];
        let r = average_precision(&[inst(1, &[0, 1, 2], 0.7)], &gts);
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.ap50_95, Some(1.0));
        assert_eq!(average_precision(&[], &[]).ap50, None);
        assert_eq!(average_precision(&[], &gts).ap50, Some(0.0));
    }

    #[test]
    fn macro_average_examples() {
        let region = |v: Option<f64>| BTreeMap::from([("pixel_iou".to_string(), v)]);
        let one = BTreeMap::from([("a".to_string(), region(Some(0.8)))]);
        assert_eq!(macro_average(&one).unwrap()["pixel_iou"].mean, Some(0.8));
        let two = BTreeMap::from([
            ("a".to_string(), region(Some(0.8))),
            ("b".to_string(), region(Some(0.6))),
            ("c".to_string(), region(None)),
        ]);
        let s = &macro_average(&two).unwrap()["pixel_iou"];
        assert!((s.mean.unwrap() - 0.7).abs() < 1e-12);
        assert!((s.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(s.regions, 2);
        assert!(macro_average(&BTreeMap::new()).is_err());
    }
}
