//! Independent reference implementations used as test oracles.
//!
//! These deliberately avoid the library's data structures: instances are
//! hash sets, matchings are enumerated exhaustively and AP is computed from
//! the textbook envelope definition.

#![allow(dead_code)]

use std::collections::HashSet;

use fieldscale::metrics::ScoredInstance;
use fieldscale::rng::Rng;

pub fn set(inst: &ScoredInstance) -> HashSet<u32> {
    inst.pixels.iter().copied().collect()
}

pub fn iou(a: &HashSet<u32>, b: &HashSet<u32>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Confidence desc, then area desc, then id asc.
pub fn ranked(preds: &[ScoredInstance]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(preds[b].pixels.len().cmp(&preds[a].pixels.len()))
            .then(preds[a].id.cmp(&preds[b].id))
    });
    idx
}

/// Greedy matching: `(pred id, gt id)` pairs in ranking order.
pub fn greedy_pairs(preds: &[ScoredInstance], gts: &[ScoredInstance], t: f64) -> Vec<(u32, u32)> {
    let gsets: Vec<HashSet<u32>> = gts.iter().map(set).collect();
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for p in ranked(preds) {
        let ps = set(&preds[p]);
        let mut best: Option<(usize, f64)> = None;
        for (g, gs) in gsets.iter().enumerate() {
            let v = iou(&ps, gs);
            if used[g] || v < t || v == 0.0 {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            out.push((preds[p].id, gts[g].id));
        }
    }
    out
}

/// Best `(cardinality, total IoU)` over every one-to-one matching with IoU >= t.
pub fn optimal_value(preds: &[ScoredInstance], gts: &[ScoredInstance], t: f64) -> (usize, f64) {
    let gsets: Vec<HashSet<u32>> = gts.iter().map(set).collect();
    let m: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| {
            let ps = set(p);
            gsets.iter().map(|g| iou(&ps, g)).collect()
        })
        .collect();
    fn rec(m: &[Vec<f64>], t: f64, p: usize, used: &mut Vec<bool>, card: usize, tot: f64, best: &mut (usize, f64)) {
        if p == m.len() {
            if card > best.0 || (card == best.0 && tot > best.1 + 1e-12) {
                *best = (card, tot);
            }
            return;
        }
        rec(m, t, p + 1, used, card, tot, best);
        for g in 0..used.len() {
            if !used[g] && m[p][g] >= t && m[p][g] > 0.0 {
                used[g] = true;
                rec(m, t, p + 1, used, card + 1, tot + m[p][g], best);
                used[g] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    rec(&m, t, 0, &mut vec![false; gts.len()], 0, 0.0, &mut best);
    best
}

/// 101-point interpolated AP: at each recall level r/100 take the best
/// precision among ranks whose recall reaches it.
pub fn ap_oracle(preds: &[ScoredInstance], gts: &[ScoredInstance], t: f64) -> f64 {
    let matched: HashSet<u32> = greedy_pairs(preds, gts, t).into_iter().map(|(p, _)| p).collect();
    let order = ranked(preds);
    let n = gts.len();
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &p) in order.iter().enumerate() {
        if matched.contains(&preds[p].id) {
            tp += 1;
        }
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100usize {
        let best = points
            .iter()
            .filter(|(tp, _)| tp * 100 >= r * n)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// Random axis-aligned rectangles on a `side x side` grid with confidences
/// drawn from a coarse set so that ties occur.
pub fn random_instances(rng: &mut Rng, count: usize, side: u32, first_id: u32) -> Vec<ScoredInstance> {
    (0..count)
        .map(|k| {
            let r0 = rng.below(side as u64) as u32;
            let c0 = rng.below(side as u64) as u32;
            let h = 1 + rng.below((side - r0) as u64) as u32;
            let w = 1 + rng.below((side - c0) as u64) as u32;
            let pixels = (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| r * side + c)).collect();
            let conf = (1 + rng.below(4)) as f64 / 4.0;
            ScoredInstance::new(first_id + k as u32, pixels, conf)
        })
        .collect()
}

/// Predictions that perturb some ground-truth rectangles, plus random extras.
pub fn perturbed_case(seed: u64, max_gts: u64, max_preds: u64) -> (Vec<ScoredInstance>, Vec<ScoredInstance>) {
    let mut rng = Rng::new(seed);
    let side = 10;
    let n_gts = rng.below(max_gts + 1) as usize;
    let gts = random_instances(&mut rng, n_gts, side, 1);
    let n_preds = rng.below(max_preds + 1) as usize;
    let mut preds = Vec::new();
    for k in 0..n_preds {
        let id = 100 + k as u32;
        if !gts.is_empty() && rng.below(3) != 0 {
            let g = &gts[rng.below(gts.len() as u64) as usize];
            let mut px: Vec<u32> = g.pixels.iter().copied().filter(|_| rng.below(5) != 0).collect();
            px.push(rng.below((side * side) as u64) as u32);
            let conf = (1 + rng.below(4)) as f64 / 4.0;
            preds.push(ScoredInstance::new(id, px, conf));
        } else {
            preds.extend(random_instances(&mut rng, 1, side, id));
        }
    }
    (preds, gts)
}
