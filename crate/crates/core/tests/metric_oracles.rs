use std::collections::BTreeMap;

use cellsynth::dataset::LineageRow;
use cellsynth::metrics::{
    embed, frechet_distance, seg_score, tra_score, AogmWeights, DownsampleFlatten, EmbeddingSet, TrackingGraph,
};
use cellsynth::raster::{ImagePlane, LabelMask, ValueDomain};
use proptest::prelude::*;

mod common;
use common::{blocky, brute_force_seg};

fn mask_strategy(max: usize, labels: u16) -> impl Strategy<Value = (usize, usize, Vec<u16>, Vec<u16>)> {
    (2..=max, 2..=max).prop_flat_map(move |(w, h)| {
        (
            Just(w),
            Just(h),
            prop::collection::vec(0..=labels, w * h),
            prop::collection::vec(0..=labels, w * h),
        )
    })
}

fn constant_frames(n: usize, value: f64) -> Vec<ImagePlane> {
    (0..n).map(|_| ImagePlane::filled(16, 16, ValueDomain::Normalized, value)).collect()
}

fn set(rows: &[&[f64]]) -> EmbeddingSet {
    EmbeddingSet::new(rows.iter().map(|r| r.to_vec()).collect(), "test", "manual").unwrap()
}

#[test]
fn brute_force_agrees_on_random_instances() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 100 {
        let (w, h) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let frames = rng.random_range(1..=3);
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..frames {
            let a: Vec<u16> = (0..w * h).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<u16> = (0..w * h).map(|_| rng.random_range(0..4)).collect();
            gt.push(blocky(w, h, &a));
            pred.push(blocky(w, h, &b));
        }
        let Some(want) = brute_force_seg(&gt, &pred) else {
            continue;
        };
        assert!((seg_score(&gt, &pred).unwrap() - want).abs() < 1e-12);
        checked += 1;
    }
}

#[test]
fn fewer_rows_example() {
    let mut gt = LabelMask::empty(8, 8);
    let mut pred = LabelMask::empty(8, 8);
    for y in 2..6 {
        for x in 2..6 {
            gt.set(x, y, 1);
            if y < 5 {
                pred.set(x, y, 7);
            }
        }
    }
    assert!((seg_score(&[gt.clone()], &[pred]).unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(seg_score(&[gt.clone()], &[gt.clone()]).unwrap(), 1.0);
    assert_eq!(seg_score(&[gt], &[LabelMask::empty(8, 8)]).unwrap(), 0.0);
}

fn single(w: usize, h: usize, x: usize, y: usize, label: u16) -> LabelMask {
    let mut m = LabelMask::empty(w, h);
    m.set(x, y, label);
    m
}

#[test]
fn missing_edge_costs_one_and_a_half() {
    let gt_masks = vec![single(4, 4, 1, 1, 1), single(4, 4, 1, 1, 1)];
    let gt = TrackingGraph::from_masks(gt_masks, &[]);
    // Same detections but two separate tracks: no temporal edge.
    let pred_masks = vec![single(4, 4, 1, 1, 1), single(4, 4, 1, 1, 2)];
    let pred = TrackingGraph::from_masks(pred_masks, &[]);
    let tra = tra_score(&gt, &pred, &AogmWeights::default()).unwrap();
    assert!((tra - (1.0 - 1.5 / 21.5)).abs() < 1e-12);
    assert!((tra - 0.9302).abs() < 1e-4);
}

#[test]
fn empty_prediction_scores_zero() {
    let gt = TrackingGraph::from_masks(vec![single(4, 4, 2, 2, 1)], &[]);
    let pred = TrackingGraph::from_masks(vec![LabelMask::empty(4, 4)], &[]);
    assert_eq!(tra_score(&gt, &pred, &AogmWeights::default()).unwrap(), 0.0);
}

#[test]
fn scalar_frechet_is_ten() {
    let a = set(&[&[-1.0], &[0.0], &[1.0]]);
    let b = set(&[&[1.0], &[3.0], &[5.0]]);
    assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn shifted_means_give_squared_distance() {
    let base: Vec<Vec<f64>> = vec![vec![0.0, 1.0, 0.5], vec![1.0, -1.0, 0.0], vec![0.3, 0.2, -0.7], vec![-0.4, 0.1, 0.9]];
    let d = [0.5, -2.0, 1.0];
    let shifted: Vec<Vec<f64>> = base.iter().map(|r| r.iter().zip(d).map(|(a, b)| a + b).collect()).collect();
    let a = EmbeddingSet::new(base, "a", "m").unwrap();
    let b = EmbeddingSet::new(shifted, "b", "m").unwrap();
    let want: f64 = d.iter().map(|v| v * v).sum();
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-6);
}

#[test]
fn constant_image_sets_differ_by_value_squared_times_dim() {
    let e = DownsampleFlatten;
    let a = embed(&constant_frames(4, 0.2), &e, "real").unwrap();
    let b = embed(&constant_frames(5, -0.3), &e, "synthetic").unwrap();
    assert_eq!(a.dim(), 64);
    assert_eq!(a.vectors.len(), 4);
    assert!(a.vectors.windows(2).all(|w| w[0] == w[1]));
    let want = 0.25 * 64.0;
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-6);
}

fn graph_from(frames: &[Vec<u16>], w: usize, h: usize) -> TrackingGraph {
    let masks: Vec<LabelMask> = frames.iter().map(|d| blocky(w, h, d)).collect();
    TrackingGraph::from_masks(masks, &[])
}

proptest! {
    #[test]
    fn seg_matches_brute_force((w, h, a, b) in mask_strategy(16, 4)) {
        let gt = [blocky(w, h, &a)];
        let pred = [blocky(w, h, &b)];
        match brute_force_seg(&gt, &pred) {
            Some(want) => prop_assert!((seg_score(&gt, &pred).unwrap() - want).abs() < 1e-12),
            None => prop_assert!(seg_score(&gt, &pred).is_err()),
        }
    }

    #[test]
    fn seg_ignores_prediction_labels((w, h, a, b) in mask_strategy(12, 4), perm in Just([0u16, 9, 3, 12, 5]).prop_shuffle()) {
        let gt = [blocky(w, h, &a)];
        let pred = [blocky(w, h, &b)];
        prop_assume!(!gt[0].labels().is_empty());
        let map: BTreeMap<u16, u16> = (1..=4).map(|l| (l, if perm[l as usize] == 0 { 40 + l } else { perm[l as usize] })).collect();
        let relabelled = [pred[0].map_labels(|l| if l == 0 { 0 } else { map[&l] })];
        prop_assert!((seg_score(&gt, &pred).unwrap() - seg_score(&gt, &relabelled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tra_bounds_and_identity(
        frames in prop::collection::vec(prop::collection::vec(0u16..4, 64), 1..4),
        other in prop::collection::vec(prop::collection::vec(0u16..4, 64), 1..4),
    ) {
        let gt = graph_from(&frames, 8, 8);
        prop_assume!(!gt.vertices.is_empty());
        prop_assert_eq!(tra_score(&gt, &gt, &AogmWeights::default()).unwrap(), 1.0);
        let n = frames.len().min(other.len());
        let gt = graph_from(&frames[..n], 8, 8);
        prop_assume!(!gt.vertices.is_empty());
        let pred = graph_from(&other[..n], 8, 8);
        let tra = tra_score(&gt, &pred, &AogmWeights::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&tra));
    }

    #[test]
    fn spurious_detections_never_help(
        frames in prop::collection::vec(prop::collection::vec(0u16..3, 64), 1..4),
        other in prop::collection::vec(prop::collection::vec(0u16..3, 64), 1..4),
    ) {
        let n = frames.len().min(other.len());
        let gt = graph_from(&frames[..n], 8, 8);
        prop_assume!(!gt.vertices.is_empty());
        let pred_masks: Vec<LabelMask> = other[..n].iter().map(|d| blocky(8, 8, d)).collect();
        let pred = TrackingGraph::from_masks(pred_masks.clone(), &[]);
        let base = tra_score(&gt, &pred, &AogmWeights::default()).unwrap();
        // Put a new object on a pixel that is background in both.
        let mut extra = pred_masks;
        let free = (0..64).find(|&i| gt.masks[0].data()[i] == 0 && extra[0].data()[i] == 0);
        prop_assume!(free.is_some());
        extra[0].data_mut()[free.unwrap()] = 99;
        let worse = tra_score(&gt, &TrackingGraph::from_masks(extra, &[]), &AogmWeights::default()).unwrap();
        prop_assert!(worse <= base);
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..10),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..10),
    ) {
        let sa = EmbeddingSet::new(a.clone(), "a", "m").unwrap();
        let sb = EmbeddingSet::new(b, "b", "m").unwrap();
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
        let again = EmbeddingSet::new(a, "c", "m").unwrap();
        prop_assert!(frechet_distance(&sa, &again).unwrap().abs() < 1e-6);
    }
}

#[test]
fn division_edges_count_as_semantics() {
    // Parent 1 in frame 0, daughters 2 and 3 in frame 1.
    let mut f0 = LabelMask::empty(6, 6);
    f0.set(1, 1, 1);
    f0.set(2, 1, 1);
    let mut f1 = LabelMask::empty(6, 6);
    f1.set(1, 1, 2);
    f1.set(4, 4, 3);
    let lineage = [
        LineageRow { label: 1, begin: 0, end: 0, parent: 0 },
        LineageRow { label: 2, begin: 1, end: 1, parent: 1 },
        LineageRow { label: 3, begin: 1, end: 1, parent: 1 },
    ];
    let gt = TrackingGraph::from_masks(vec![f0.clone(), f1.clone()], &lineage);
    assert_eq!(gt.edges.len(), 2);
    assert_eq!(tra_score(&gt, &gt, &AogmWeights::default()).unwrap(), 1.0);
    let no_lineage = TrackingGraph::from_masks(vec![f0, f1], &[]);
    assert!(tra_score(&gt, &no_lineage, &AogmWeights::default()).unwrap() < 1.0);
}
