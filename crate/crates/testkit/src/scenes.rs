//! Synthetic panoptic maps and the fusion golden scene.

use std::path::PathBuf;

use panoflow_core::detection::{BBox, Detection};
use panoflow_core::fusion::InstanceMask;
use panoflow_core::panoptic::{Category, CategoryTable, LabelSpace, PanopticMap, Segment, VOID};
use panoflow_core::tensor::{Dims, Tensor};

use crate::TestRng;

/// Categories of the random maps: 1 and 2 are things, 3 and 4 stuff.
pub fn small_categories() -> Vec<Category> {
    (1..=4).map(|id| Category { id, name: format!("c{id}"), isthing: id <= 2 }).collect()
}

pub fn small_table() -> CategoryTable {
    small_categories().into_iter().map(|c| (c.id, c)).collect()
}

/// Half-open pixel rectangle `(x0, y0, x1, y1)`.
pub type Rect = (usize, usize, usize, usize);

fn random_rect(rng: &mut TestRng, w: usize, h: usize) -> Rect {
    let (x0, y0) = (rng.below(w - 1), rng.below(h - 1));
    let x1 = x0 + 1 + rng.below(w - x0);
    let y1 = y0 + 1 + rng.below(h - y0);
    (x0, y0, x1.min(w), y1.min(h))
}

fn jitter(rng: &mut TestRng, r: Rect, w: usize, h: usize) -> Rect {
    let mut shift = |v: usize, hi: usize| (v as isize + rng.below(7) as isize - 3).clamp(0, hi as isize) as usize;
    let (x0, y0) = (shift(r.0, w - 1), shift(r.1, h - 1));
    let (x1, y1) = (shift(r.2, w), shift(r.3, h));
    (x0, y0, x1.max(x0 + 1), y1.max(y0 + 1))
}

/// Paints rectangles in order (later ones on top) and keeps the segments
/// that remain visible, with areas filled in.
pub fn paint(w: usize, h: usize, layers: &[(Segment, Rect)]) -> PanopticMap {
    let mut map = PanopticMap::void(w, h);
    for (seg, r) in layers {
        for y in r.1..r.3 {
            for x in r.0..r.2 {
                map.ids[y * w + x] = seg.id;
            }
        }
    }
    let counts = map.id_counts();
    map.segments = layers
        .iter()
        .filter_map(|(seg, _)| {
            let area = counts.get(&seg.id).copied().unwrap_or(0);
            (seg.id != VOID && area > 0).then(|| Segment { area, ..seg.clone() })
        })
        .collect();
    map
}

fn segment(id: u32, category_id: u32, iscrowd: bool) -> Segment {
    Segment { id, category_id, iscrowd, area: 0, isthing: category_id <= 2, score: None }
}

/// A random ground truth / prediction pair on a `side x side` grid with at
/// most six segments each, four categories, and occasional void and crowd
/// regions. Predictions are usually jittered copies of the ground truth so
/// that matches, near misses and misses all occur.
pub fn random_pair(seed: u64, side: usize) -> (PanopticMap, PanopticMap) {
    let mut rng = TestRng::new(seed);
    let next_id = |rng: &mut TestRng| 1 + rng.below(300) as u32;

    let n_gt = 1 + rng.below(6);
    let mut gt_layers: Vec<(Segment, Rect)> = Vec::new();
    while gt_layers.len() < n_gt {
        let id = next_id(&mut rng);
        if gt_layers.iter().any(|(s, _)| s.id == id) {
            continue;
        }
        let cat = 1 + rng.below(4) as u32;
        let crowd = rng.chance(0.12);
        let rect = random_rect(&mut rng, side, side);
        gt_layers.push((segment(id, cat, crowd), rect));
    }
    if rng.chance(0.3) {
        let rect = random_rect(&mut rng, side, side);
        gt_layers.push((segment(VOID, 0, false), rect));
    }
    let gt = paint(side, side, &gt_layers);

    let mut pred_layers: Vec<(Segment, Rect)> = Vec::new();
    let mut used = Vec::new();
    for (seg, rect) in gt_layers.iter().filter(|(s, _)| s.id != VOID) {
        if pred_layers.len() >= 6 || rng.chance(0.15) {
            continue;
        }
        let cat = if rng.chance(0.8) { seg.category_id } else { 1 + rng.below(4) as u32 };
        let r = if rng.chance(0.7) { jitter(&mut rng, *rect, side, side) } else { random_rect(&mut rng, side, side) };
        let id = loop {
            let id = next_id(&mut rng);
            if !used.contains(&id) {
                break id;
            }
        };
        used.push(id);
        pred_layers.push((segment(id, cat, false), r));
    }
    while pred_layers.len() < 6 && rng.chance(0.3) {
        let id = next_id(&mut rng);
        if used.contains(&id) {
            continue;
        }
        used.push(id);
        let cat = 1 + rng.below(4) as u32;
        let rect = random_rect(&mut rng, side, side);
        pred_layers.push((segment(id, cat, false), rect));
    }
    let pred = paint(side, side, &pred_layers);
    (gt, pred)
}

/// Inputs of the fusion golden scene and the panoptic map they must produce.
pub struct FusionScene {
    pub width: usize,
    pub height: usize,
    pub labels: LabelSpace,
    /// One mask per detection, in detection order; the last detection has an
    /// empty mask and is only reachable through box filling.
    pub instances: Vec<InstanceMask>,
    pub stuff_probs: Tensor,
    pub detections: Vec<Detection>,
    pub expected: PanopticMap,
}

fn rect_mask(w: usize, h: usize, r: Rect) -> Vec<bool> {
    (0..w * h).map(|p| (r.0..r.2).contains(&(p % w)) && (r.1..r.3).contains(&(p / w))).collect()
}

fn rect_box(r: Rect) -> BBox {
    BBox::new(r.0 as f32, r.1 as f32, r.2 as f32, r.3 as f32)
}

/// A 200x150 scene with three thing classes (1-3) and two stuff classes
/// (4, 5):
///
/// * stuff: left half class 4, right half class 5, top 20 rows `other`;
/// * A (class 1, 0.9) at x 20..60, y 30..70;
/// * B (class 2, 0.8) at x 50..90, y 40..80, 300 of its 1600 px under A;
/// * C (class 1, 0.6) at x 130..170, y 90..130;
/// * D (class 3, 0.36) at x 140..190, y 30..60, below the score threshold;
/// * E (class 3, 0.5) box x 0..60, y 0..25 without a mask.
///
/// Expected ids: A 1, B 2 (1300 px), C 3, stuff 4 then 5, E 6 on its 1200
/// `other` pixels (u = 0.8); the rest of the `other` band stays void.
pub fn fusion_scene() -> FusionScene {
    let (w, h) = (200usize, 150usize);
    let labels = LabelSpace::contiguous(3, 2);
    let a = (20, 30, 60, 70);
    let b = (50, 40, 90, 80);
    let c = (130, 90, 170, 130);
    let d = (140, 30, 190, 60);
    let e = (0, 0, 60, 25);
    let dets = [(a, 1, 0.9f32), (b, 2, 0.8), (c, 1, 0.6), (d, 3, 0.36), (e, 3, 0.5)];
    let detections: Vec<Detection> =
        dets.iter().map(|&(r, cat, score)| Detection { bbox: rect_box(r), category_id: cat, score }).collect();
    let instances = dets
        .iter()
        .enumerate()
        .map(|(i, &(r, cat, score))| InstanceMask {
            category_id: cat,
            score,
            width: w,
            height: h,
            mask: if i == 4 { vec![false; w * h] } else { rect_mask(w, h, r) },
            detection: Some(i),
        })
        .collect();

    let stuff_probs = Tensor::from_fn(Dims::new(1, 3, h, w), |_, ch, y, x| {
        let label = if y < 20 {
            2
        } else if x < 100 {
            0
        } else {
            1
        };
        if ch == label {
            0.8
        } else {
            0.1
        }
    });

    // expected map, written out region by region
    let mut ids = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let inside = |r: Rect| (r.0..r.2).contains(&x) && (r.1..r.3).contains(&y);
            ids[y * w + x] = if inside(a) {
                1
            } else if inside(b) {
                2
            } else if inside(c) {
                3
            } else if y >= 20 && x < 100 {
                4
            } else if y >= 20 {
                5
            } else if inside(e) {
                6
            } else {
                0
            };
        }
    }
    let seg = |id: u32, cat: u32, isthing: bool, area: u64, score: Option<f32>| Segment {
        id,
        category_id: cat,
        iscrowd: false,
        area,
        isthing,
        score,
    };
    let expected = PanopticMap {
        width: w,
        height: h,
        ids,
        segments: vec![
            seg(1, 1, true, 1600, Some(0.9)),
            seg(2, 2, true, 1300, Some(0.8)),
            seg(3, 1, true, 1600, Some(0.6)),
            seg(4, 4, false, 100 * 130 - 1600 - 1300, None),
            seg(5, 5, false, 100 * 130 - 1600, None),
            seg(6, 3, true, 60 * 20, Some(0.5)),
        ],
    };
    FusionScene { width: w, height: h, labels, instances, stuff_probs, detections, expected }
}

/// Frozen PNG encoding of the golden scene's panoptic map.
pub fn golden_png_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("golden").join("fusion_scene.png")
}

/// Set to rewrite golden files instead of comparing against them.
pub const BLESS_ENV: &str = "PANOFLOW_BLESS";
