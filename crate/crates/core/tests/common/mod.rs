//! Shared test machinery: finite-difference oracles, an independent
//! brute-force Panoptic Quality matcher, and random input generators.
//! Everything here is deliberately written straight-line, without reusing the
//! implementation paths it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use panocon_core::grid::{FeatureGrid, Provenance};
use panocon_core::panoptic::{class_of, encode_id, MatchOutcome, PanopticMap, SegmentMatch, VOID};
use panocon_core::viewgeom::CorrespondenceSet;

// ---------------------------------------------------------------------------
// finite differences

/// Central finite difference of a scalar function over every coordinate of a
/// flat vector, using the given probe step.
pub fn finite_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Worst per-coordinate relative error between analytic and numeric
/// gradients. A small absolute floor keeps vanishing coordinates from
/// producing meaningless ratios.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs());
        if denom < 1e-6 {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

// ---------------------------------------------------------------------------
// random inputs for the loss suite

pub fn random_grid(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    channels: usize,
    provenance: Provenance,
) -> FeatureGrid {
    let values = (0..rows * cols * channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FeatureGrid::new(rows, cols, channels, values, provenance).unwrap()
}

/// Random correspondence over two equal grids with at least one positive
/// pair; roughly a quarter of all pairs end up positive.
pub fn random_correspondence(
    rng: &mut ChaCha8Rng,
    grid_a: (usize, usize),
    grid_b: (usize, usize),
) -> CorrespondenceSet {
    let cells_a = grid_a.0 * grid_a.1;
    let cells_b = grid_b.0 * grid_b.1;
    loop {
        let mut positives = vec![Vec::new(); cells_a];
        let mut negatives = vec![Vec::new(); cells_a];
        for (i, (pos, neg)) in positives.iter_mut().zip(&mut negatives).enumerate() {
            let _ = i;
            for j in 0..cells_b as u32 {
                if rng.random_bool(0.25) {
                    pos.push(j);
                } else {
                    neg.push(j);
                }
            }
        }
        let set = CorrespondenceSet {
            grid_shape_a: grid_a,
            grid_shape_b: grid_b,
            positives,
            negatives,
            threshold_ratio: 0.7,
            threshold_px: 1.0,
        };
        if set.has_positives() {
            return set;
        }
    }
}

// ---------------------------------------------------------------------------
// brute-force panoptic matching oracle

/// Independent segment matcher: explicit pixel sets, quadratic pair scan,
/// same matching convention as the production matcher (symmetric void
/// exclusion in the union, IoU > 0.5, majority-void unmatched predictions
/// discarded).
pub fn brute_force_match(pred: &PanopticMap, gt: &PanopticMap) -> MatchOutcome {
    assert_eq!((pred.height, pred.width), (gt.height, gt.width));
    let segments = |map: &PanopticMap| -> Vec<(u16, Vec<usize>)> {
        let mut by_id: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
        for (px, &id) in map.ids.iter().enumerate() {
            if id != VOID {
                by_id.entry(id).or_default().push(px);
            }
        }
        by_id.into_iter().collect()
    };
    let pred_segments = segments(pred);
    let gt_segments = segments(gt);

    let mut matches: Vec<SegmentMatch> = Vec::new();
    let mut matched_pred: Vec<u16> = Vec::new();
    let mut matched_gt: Vec<u16> = Vec::new();
    for (p_id, p_px) in &pred_segments {
        for (g_id, g_px) in &gt_segments {
            if class_of(*p_id) != class_of(*g_id) {
                continue;
            }
            let intersection = p_px.iter().filter(|&&px| gt.ids[px] == *g_id).count() as u64;
            if intersection == 0 {
                continue;
            }
            let p_on_void = p_px.iter().filter(|&&px| gt.ids[px] == VOID).count() as u64;
            let g_on_void = g_px.iter().filter(|&&px| pred.ids[px] == VOID).count() as u64;
            let union =
                p_px.len() as u64 + g_px.len() as u64 - intersection - p_on_void - g_on_void;
            let iou = intersection as f64 / union as f64;
            if iou > 0.5 {
                assert!(
                    !matched_pred.contains(p_id) && !matched_gt.contains(g_id),
                    "brute force found a non-unique match"
                );
                matched_pred.push(*p_id);
                matched_gt.push(*g_id);
                matches.push(SegmentMatch {
                    pred_id: *p_id,
                    gt_id: *g_id,
                    intersection,
                    union,
                    iou,
                });
            }
        }
    }
    matches.sort_by_key(|m| (m.pred_id, m.gt_id));

    let mut unmatched_pred = Vec::new();
    for (p_id, p_px) in &pred_segments {
        if matched_pred.contains(p_id) {
            continue;
        }
        let void_overlap = p_px.iter().filter(|&&px| gt.ids[px] == VOID).count();
        if 2 * void_overlap <= p_px.len() {
            unmatched_pred.push((*p_id, p_px.len() as u64));
        }
    }
    let mut unmatched_gt = Vec::new();
    for (g_id, g_px) in &gt_segments {
        if !matched_gt.contains(g_id) {
            unmatched_gt.push((*g_id, g_px.len() as u64));
        }
    }
    unmatched_pred.sort_unstable();
    unmatched_gt.sort_unstable();
    MatchOutcome {
        matches,
        unmatched_pred,
        unmatched_gt,
    }
}

pub fn outcomes_equal(a: &MatchOutcome, b: &MatchOutcome) -> bool {
    a.matches.len() == b.matches.len()
        && a.matches.iter().zip(&b.matches).all(|(x, y)| {
            x.pred_id == y.pred_id
                && x.gt_id == y.gt_id
                && x.intersection == y.intersection
                && x.union == y.union
                && x.iou.to_bits() == y.iou.to_bits()
        })
        && a.unmatched_pred == b.unmatched_pred
        && a.unmatched_gt == b.unmatched_gt
}

// ---------------------------------------------------------------------------
// random panoptic maps

/// A random panoptic map: void or stuff background, then up to `max_segments`
/// rectangles of random street-scene classes. `allow_void` controls whether
/// void can appear at all.
pub fn random_panoptic_map(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    max_segments: usize,
    allow_void: bool,
) -> PanopticMap {
    let background = if allow_void && rng.random_bool(0.4) {
        VOID
    } else {
        encode_id(rng.random_range(1..=2), 0).unwrap()
    };
    let mut map = PanopticMap::filled(height, width, background);
    let n = rng.random_range(0..=max_segments);
    let mut next_instance = [1u16; 5];
    for _ in 0..n {
        let class = rng.random_range(1..=4u16);
        let id = if class <= 2 {
            encode_id(class, 0).unwrap()
        } else {
            let inst = next_instance[class as usize];
            next_instance[class as usize] += 1;
            encode_id(class, inst).unwrap()
        };
        let h = rng.random_range(2..=height / 2);
        let w = rng.random_range(2..=width / 2);
        let r0 = rng.random_range(0..height - h);
        let c0 = rng.random_range(0..width - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                map.set_id(r, c, id);
            }
        }
    }
    if allow_void && rng.random_bool(0.5) {
        // carve a void hole
        let h = rng.random_range(1..=height / 3);
        let w = rng.random_range(1..=width / 3);
        let r0 = rng.random_range(0..height - h);
        let c0 = rng.random_range(0..width - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                map.set_id(r, c, VOID);
            }
        }
    }
    map
}

/// Derive a plausible "prediction" from a ground truth map: jitter segment
/// boundaries by shifting blocks and occasionally relabel or drop segments.
pub fn perturb_map(rng: &mut ChaCha8Rng, gt: &PanopticMap) -> PanopticMap {
    let mut pred = gt.clone();
    // shift the whole raster slightly
    let dr = rng.random_range(-2i64..=2);
    let dc = rng.random_range(-3i64..=3);
    for r in 0..gt.height {
        for c in 0..gt.width {
            let sr = (r as i64 + dr).clamp(0, gt.height as i64 - 1) as usize;
            let sc = (c as i64 + dc).clamp(0, gt.width as i64 - 1) as usize;
            pred.set_id(r, c, gt.id(sr, sc));
        }
    }
    // randomly clobber a block
    if rng.random_bool(0.5) {
        let h = rng.random_range(1..=gt.height / 2);
        let w = rng.random_range(1..=gt.width / 2);
        let r0 = rng.random_range(0..gt.height - h);
        let c0 = rng.random_range(0..gt.width - w);
        let id = if rng.random_bool(0.3) {
            VOID
        } else {
            encode_id(rng.random_range(1..=4), rng.random_range(0..=3)).unwrap()
        };
        let id = match class_of(id) {
            1 | 2 => encode_id(class_of(id), 0).unwrap(),
            _ if panocon_core::panoptic::instance_of(id) == 0 => {
                encode_id(class_of(id), 1).unwrap()
            }
            _ => id,
        };
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                pred.set_id(r, c, id);
            }
        }
    }
    pred
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
