use panoflow_core::detection::{
    decode_boxes, generate_anchors, iou, nms_per_class, select_candidates, BBox, Detection, MAX_LOG_SCALE,
};
use panoflow_testkit::reference::{box_iou, nms_reference};
use panoflow_testkit::TestRng;
use proptest::prelude::*;

fn random_box(rng: &mut TestRng, extent: f64) -> BBox {
    let (x, y) = (rng.range(0.0, extent), rng.range(0.0, extent));
    let (w, h) = (rng.range(1.0, extent / 2.0), rng.range(1.0, extent / 2.0));
    BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32)
}

/// Clustered boxes so that suppression chains actually happen.
fn random_detections(rng: &mut TestRng, n: usize) -> Vec<Detection> {
    let centers: Vec<BBox> = (0..3).map(|_| random_box(rng, 60.0)).collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.below(3)];
            let j = |v: f32, rng: &mut TestRng| v + rng.range(-6.0, 6.0) as f32;
            let (x1, y1) = (j(c.x1, rng), j(c.y1, rng));
            let (x2, y2) = (j(c.x2, rng).max(x1 + 0.5), j(c.y2, rng).max(y1 + 0.5));
            Detection {
                bbox: BBox::new(x1, y1, x2, y2),
                category_id: 1 + rng.below(3) as u32,
                score: rng.unit() as f32,
            }
        })
        .collect()
}

#[test]
fn nms_equals_exhaustive_reference() {
    let mut cases = 0;
    for seed in 0..200u64 {
        let mut rng = TestRng::new(seed);
        for thr in [0.3f32, 0.4, 0.5] {
            let n = rng.below(51);
            let dets = random_detections(&mut rng, n);
            for keep in [100, 7] {
                assert_eq!(nms_per_class(&dets, thr, keep), nms_reference(&dets, thr, keep), "seed {seed} thr {thr}");
            }
            cases += 1;
        }
    }
    assert!(cases >= 500);
}

#[test]
fn nms_keeps_top_hundred_of_150_disjoint() {
    let dets: Vec<Detection> = (0..150)
        .map(|i| Detection {
            bbox: BBox::new(i as f32 * 20.0, 0.0, i as f32 * 20.0 + 10.0, 10.0),
            category_id: 1,
            score: ((i * 37) % 150) as f32 / 150.0,
        })
        .collect();
    let kept = nms_per_class(&dets, 0.4, 100);
    assert_eq!(kept.len(), 100);
    let mut scores: Vec<f32> = dets.iter().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), scores[..100].to_vec());
}

#[test]
fn overlapping_pair() {
    let a = Detection { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), category_id: 1, score: 0.9 };
    let b = Detection { bbox: BBox::new(1.0, 1.0, 11.0, 11.0), score: 0.8, ..a };
    assert!((f64::from(iou(&a.bbox, &b.bbox)) - 81.0 / 119.0).abs() < 1e-7);
    assert_eq!(nms_per_class(&[a, b], 0.4, 100), vec![a]);
    let other = Detection { category_id: 2, ..b };
    assert_eq!(nms_per_class(&[a, other], 0.4, 100), vec![a, other]);
}

proptest! {
    #[test]
    fn nms_output_is_sorted_and_bounded(seed in any::<u64>(), n in 0usize..80, keep in 1usize..40) {
        let mut rng = TestRng::new(seed);
        let dets = random_detections(&mut rng, n);
        let kept = nms_per_class(&dets, 0.4, keep);
        prop_assert!(kept.len() <= keep);
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn iou_properties(seed in any::<u64>()) {
        let mut rng = TestRng::new(seed);
        let (a, b) = (random_box(&mut rng, 50.0), random_box(&mut rng, 50.0));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert!((f64::from(iou(&a, &b)) - box_iou(a.as_array(), b.as_array())).abs() < 1e-6);
        let far = BBox::new(a.x2 + 1.0, a.y1, a.x2 + 5.0, a.y2);
        prop_assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn decode_matches_formula(seed in any::<u64>(), level in 3usize..8) {
        let mut rng = TestRng::new(seed);
        let (gh, gw) = (2, 3);
        let anchors = generate_anchors(level, gh, gw).unwrap();
        let deltas = rng.f32s(anchors.len() * 4, -2.0, 5.0);
        let (width, height) = (gw << level, gh << level);
        let boxes = decode_boxes(&anchors, &deltas, width, height).unwrap();
        for (i, (a, b)) in anchors.iter().zip(&boxes).enumerate() {
            let d: Vec<f64> = deltas[4 * i..4 * i + 4].iter().map(|&v| f64::from(v)).collect();
            let (ax, ay) = (f64::from(a.x1), f64::from(a.y1));
            let (aw, ah) = (f64::from(a.x2) - ax, f64::from(a.y2) - ay);
            let half_w = 0.5 * aw * d[2].min(MAX_LOG_SCALE).exp();
            let half_h = 0.5 * ah * d[3].min(MAX_LOG_SCALE).exp();
            let (cx, cy) = (ax + aw * (0.5 + d[0]), ay + ah * (0.5 + d[1]));
            let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
            let want = [clip(cx - half_w, width), clip(cy - half_h, height), clip(cx + half_w, width), clip(cy + half_h, height)];
            for (got, want) in b.as_array().iter().zip(want) {
                prop_assert!((f64::from(*got) - want).abs() <= 1e-5 * (1.0 + want.abs()), "{} vs {}", got, want);
            }
        }
    }
}

#[test]
fn zero_deltas_give_anchors() {
    let anchors = generate_anchors(4, 4, 4).unwrap();
    let boxes = decode_boxes(&anchors, &vec![0.0; anchors.len() * 4], 10_000, 10_000).unwrap();
    for (a, b) in anchors.iter().zip(&boxes) {
        assert_eq!(*b, a.clip(10_000, 10_000));
    }
    let mut nan = vec![0.0; anchors.len() * 4];
    nan[5] = f32::NAN;
    assert!(decode_boxes(&anchors, &nan, 64, 64).is_err());
}

#[test]
fn dx_of_one_shifts_by_anchor_width() {
    let a = BBox::new(100.0, 100.0, 132.0, 132.0);
    let b = decode_boxes(&[a], &[1.0, 0.0, 0.0, 0.0], 1000, 1000).unwrap()[0];
    assert_eq!(b, BBox::new(132.0, 100.0, 164.0, 132.0));
}

#[test]
fn anchor_counts_and_centers() {
    for (level, h, w) in [(3, 1, 1), (3, 5, 2), (6, 3, 3)] {
        assert_eq!(generate_anchors(level, h, w).unwrap().len(), 9 * h * w);
    }
    let square = generate_anchors(3, 1, 1).unwrap()[1];
    assert_eq!(((square.x1 + square.x2) / 2.0, (square.y1 + square.y2) / 2.0), (4.0, 4.0));
    assert_eq!(square.width(), 32.0);
}

#[test]
fn candidates_respect_threshold_and_top_k() {
    let boxes = vec![BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(1.0, 1.0, 1.0, 9.0), BBox::new(5.0, 5.0, 9.0, 9.0)];
    let scores = vec![0.9, 0.04, 0.5, 0.99, 0.3, 0.5];
    let got = select_candidates(&scores, &boxes, &[7, 8], 0.05, 10).unwrap();
    // anchor 1 is empty, so its 0.99 never appears
    let summary: Vec<(u32, f32)> = got.iter().map(|d| (d.category_id, d.score)).collect();
    assert_eq!(summary, vec![(7, 0.9), (8, 0.5), (7, 0.3)]);
    assert_eq!(select_candidates(&scores, &boxes, &[7, 8], 0.05, 2).unwrap().len(), 2);
}
