//! The fast joint-histogram matcher against an independent brute-force
//! enumeration, on random maps with and without void.

mod common;

use common::{brute_force_match, outcomes_equal, perturb_map, random_panoptic_map, seeded};
use panocon_core::panoptic::{
    class_of, compute_pq, instance_of, match_segments, ClassTable, PanopticMap, VOID,
};
use rand::Rng;

#[test]
fn matcher_agrees_with_brute_force_on_random_maps() {
    let mut rng = seeded(0xfeed);
    for case in 0..120 {
        let gt = random_panoptic_map(&mut rng, 32, 64, 6, true);
        let pred = if case % 2 == 0 {
            perturb_map(&mut rng, &gt)
        } else {
            random_panoptic_map(&mut rng, 32, 64, 6, true)
        };
        let fast = match_segments(&pred, &gt).unwrap();
        let brute = brute_force_match(&pred, &gt);
        assert!(
            outcomes_equal(&fast, &brute),
            "case {case}: fast {fast:?} vs brute {brute:?}"
        );
    }
}

#[test]
fn perfect_prediction_scores_exactly_one() {
    let mut rng = seeded(0xabc);
    let table = ClassTable::street_scene();
    for _ in 0..30 {
        let gt = random_panoptic_map(&mut rng, 24, 48, 6, true);
        let report = compute_pq(&gt, &gt, &table).unwrap();
        if let Some(pq) = report.pq_all {
            assert_eq!(pq, 1.0);
        }
        for class in &report.classes {
            assert_eq!(class.pq, 1.0);
            assert_eq!(class.stats.fp + class.stats.fn_count, 0);
        }
    }
}

#[test]
fn instance_relabeling_changes_nothing() {
    let mut rng = seeded(0x51);
    let table = ClassTable::street_scene();
    for _ in 0..25 {
        let gt = random_panoptic_map(&mut rng, 24, 48, 6, false);
        let pred = perturb_map(&mut rng, &gt);
        let before = compute_pq(&pred, &gt, &table).unwrap();

        // permute thing instance ids in the prediction
        let remap = |id: u16| -> u16 {
            if id == VOID || class_of(id) <= 2 {
                id
            } else {
                let inst = instance_of(id);
                let new_inst = 1 + ((inst as u32 * 7 + 3) % 900) as u16;
                class_of(id) * 1000 + new_inst
            }
        };
        let relabeled = PanopticMap {
            height: pred.height,
            width: pred.width,
            ids: pred.ids.iter().map(|&id| remap(id)).collect(),
        };
        let after = compute_pq(&relabeled, &gt, &table).unwrap();
        assert_eq!(before.pq_all, after.pq_all);
        for (a, b) in before.classes.iter().zip(&after.classes) {
            assert_eq!(a.stats.tp, b.stats.tp);
            assert_eq!(a.stats.fp, b.stats.fp);
            assert_eq!(a.stats.fn_count, b.stats.fn_count);
            assert_eq!(a.pq, b.pq);
        }
    }
}

#[test]
fn swapping_maps_swaps_fp_and_fn() {
    // symmetric accounting holds whenever the void-discard rule does not
    // fire; void-free predictions guarantee that
    let mut rng = seeded(0x77);
    for _ in 0..40 {
        let a = random_panoptic_map(&mut rng, 24, 48, 5, false);
        let b = random_panoptic_map(&mut rng, 24, 48, 5, false);
        let forward = match_segments(&a, &b).unwrap();
        let backward = match_segments(&b, &a).unwrap();
        assert_eq!(forward.matches.len(), backward.matches.len());
        let mut f_ious: Vec<u64> = forward.matches.iter().map(|m| m.iou.to_bits()).collect();
        let mut b_ious: Vec<u64> = backward.matches.iter().map(|m| m.iou.to_bits()).collect();
        f_ious.sort_unstable();
        b_ious.sort_unstable();
        assert_eq!(f_ious, b_ious, "matched IoU multiset preserved");
        assert_eq!(forward.unmatched_pred, backward.unmatched_gt);
        assert_eq!(forward.unmatched_gt, backward.unmatched_pred);
    }
}

#[test]
fn pq_is_one_only_for_relabelings() {
    let mut rng = seeded(0x99);
    let table = ClassTable::street_scene();
    for _ in 0..20 {
        let gt = random_panoptic_map(&mut rng, 16, 32, 4, false);
        let mut pred = gt.clone();
        // flip one pixel to a different class
        let r = rng.random_range(0..gt.height);
        let c = rng.random_range(0..gt.width);
        let old = gt.id(r, c);
        let new = if old == 1000 { 2000 } else { 1000 };
        pred.set_id(r, c, new);
        let report = compute_pq(&pred, &gt, &table).unwrap();
        if let Some(pq) = report.pq_all {
            assert!(pq < 1.0, "a corrupted map cannot reach pq 1, got {pq}");
        }
    }
}

#[test]
fn dataset_evaluation_matches_accumulated_brute_force() {
    use panocon_core::panoptic::{evaluate_dataset, PqAccumulator};

    let mut rng = seeded(0xd15c);
    let dir = tempfile::tempdir().unwrap();
    let pred_dir = dir.path().join("pred");
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();

    let table = ClassTable::street_scene();
    let mut acc = PqAccumulator::new();
    for i in 0..20 {
        let gt = random_panoptic_map(&mut rng, 32, 64, 6, true);
        let pred = perturb_map(&mut rng, &gt);
        gt.write_pgm(&gt_dir.join(format!("{i:02}.pgm"))).unwrap();
        pred.write_pgm(&pred_dir.join(format!("{i:02}.pgm"))).unwrap();
        acc.add(&brute_force_match(&pred, &gt));
    }
    let expected = acc.report(&table).unwrap();
    let single = evaluate_dataset(&pred_dir, &gt_dir, &table, 1).unwrap();
    assert_eq!(single.pq_all, expected.pq_all);
    assert_eq!(single.pq_stuff, expected.pq_stuff);
    assert_eq!(single.pq_things, expected.pq_things);
    for (a, b) in single.classes.iter().zip(&expected.classes) {
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.pq.to_bits(), b.pq.to_bits());
    }
    // worker count must not change anything
    let threaded = evaluate_dataset(&pred_dir, &gt_dir, &table, 3).unwrap();
    assert_eq!(threaded.to_json(), single.to_json());
}

#[test]
fn missing_counterpart_is_reported_with_its_path() {
    use panocon_core::panoptic::evaluate_dataset;
    let dir = tempfile::tempdir().unwrap();
    let pred_dir = dir.path().join("pred");
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();
    let map = PanopticMap::filled(4, 4, 1000);
    map.write_pgm(&gt_dir.join("a.pgm")).unwrap();
    let err = evaluate_dataset(&pred_dir, &gt_dir, &ClassTable::street_scene(), 1).unwrap_err();
    assert!(err.to_string().contains("a.pgm"), "{err}");
}
