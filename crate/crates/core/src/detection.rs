//! Anchors, box decoding, candidate selection and per-class NMS.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels, `(x1, y1)` top-left, `(x2, y2)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        !(self.x2 > self.x1 && self.y2 > self.y1)
    }

    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f32, height as f32);
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Pixels whose centers lie inside the box, as half-open column and row
    /// ranges clipped to the image: `x1 <= x + 0.5 < x2`.
    pub fn pixel_span(&self, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |lo: f32, hi: f32, n: usize| {
            let a = ((f64::from(lo) - 0.5).ceil().max(0.0) as usize).min(n);
            let b = ((f64::from(hi) - 0.5).ceil().max(0.0) as usize).min(n);
            a..b.max(a)
        };
        (span(self.x1, self.x2, width), span(self.y1, self.y2, height))
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    iou_f64(a, b) as f32
}

/// [`iou`] evaluated in f64, as used by suppression.
pub fn iou_f64(a: &BBox, b: &BBox) -> f64 {
    let a = a.as_array().map(f64::from);
    let b = b.as_array().map(f64::from);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored, class-labelled box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "bbox", with = "bbox_array")]
    pub bbox: BBox,
    pub category_id: u32,
    pub score: f32,
}

mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.as_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x1, y1, x2, y2] = <[f32; 4]>::deserialize(d)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

pub const ANCHOR_SCALES: [f64; 3] = [1.0, 1.259_921_049_894_873_2, 1.587_401_051_968_199_5];
/// Height/width ratios.
pub const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_LOCATION: usize = ANCHOR_SCALES.len() * ANCHOR_RATIOS.len();

/// Anchors for one pyramid level over an `h x w` grid.
///
/// Base size is `4 * 2^level`; a location `(y, x)` is centered at
/// `(x * stride + stride / 2, y * stride + stride / 2)`. Order is row-major
/// over locations, then scale-major, then ratio within a location, matching
/// the channel layout `anchor * K + class` of the classification head.
pub fn generate_anchors(level: usize, h: usize, w: usize) -> Result<Vec<BBox>> {
    if !(3..=7).contains(&level) {
        return Err(Error::invalid("generate_anchors", format!("level {level} outside 3..=7")));
    }
    let stride = (1u32 << level) as f64;
    let base = 4.0 * stride;
    let mut shapes = Vec::with_capacity(ANCHORS_PER_LOCATION);
    for s in ANCHOR_SCALES {
        for r in ANCHOR_RATIOS {
            let size = base * s;
            let aw = size / r.sqrt();
            let ah = size * r.sqrt();
            shapes.push((aw, ah));
        }
    }
    let mut out = Vec::with_capacity(h * w * ANCHORS_PER_LOCATION);
    for y in 0..h {
        for x in 0..w {
            let cx = x as f64 * stride + stride / 2.0;
            let cy = y as f64 * stride + stride / 2.0;
            for &(aw, ah) in &shapes {
                out.push(BBox::new(
                    (cx - aw / 2.0) as f32,
                    (cy - ah / 2.0) as f32,
                    (cx + aw / 2.0) as f32,
                    (cy + ah / 2.0) as f32,
                ));
            }
        }
    }
    Ok(out)
}

/// Upper bound on the log-scale size deltas, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Applies one `(dx, dy, dw, dh)` delta to an anchor, without clipping.
pub fn apply_delta(anchor: &BBox, delta: [f32; 4]) -> BBox {
    let aw = f64::from(anchor.x2) - f64::from(anchor.x1);
    let ah = f64::from(anchor.y2) - f64::from(anchor.y1);
    let acx = f64::from(anchor.x1) + 0.5 * aw;
    let acy = f64::from(anchor.y1) + 0.5 * ah;
    let [dx, dy, dw, dh] = delta.map(f64::from);
    let cx = dx * aw + acx;
    let cy = dy * ah + acy;
    let w = dw.min(MAX_LOG_SCALE).exp() * aw;
    let h = dh.min(MAX_LOG_SCALE).exp() * ah;
    BBox::new((cx - 0.5 * w) as f32, (cy - 0.5 * h) as f32, (cx + 0.5 * w) as f32, (cy + 0.5 * h) as f32)
}

/// Decodes `deltas` (four per anchor, `dx, dy, dw, dh`) and clips the boxes
/// to a `width x height` image. Output is aligned with `anchors`; boxes that
/// clip to nothing are returned empty.
pub fn decode_boxes(anchors: &[BBox], deltas: &[f32], width: usize, height: usize) -> Result<Vec<BBox>> {
    if deltas.len() != 4 * anchors.len() {
        return Err(Error::shape("decode_boxes", format!("{} deltas", 4 * anchors.len()), deltas.len()));
    }
    if let Some(i) = deltas.iter().position(|v| v.is_nan()) {
        return Err(Error::invalid("decode_boxes", format!("NaN delta at index {i}")));
    }
    Ok(anchors
        .iter()
        .zip(deltas.chunks_exact(4))
        .map(|(a, d)| apply_delta(a, [d[0], d[1], d[2], d[3]]).clip(width, height))
        .collect())
}

/// Default IoU above which a lower-scored box of the same class is suppressed.
pub const NMS_IOU: f32 = 0.4;
/// Default number of detections kept after NMS.
pub const KEEP_TOP: usize = 100;
/// Candidates scoring below this are discarded before NMS.
pub const SCORE_THRESH: f32 = 0.05;
/// Candidates kept per pyramid level before NMS.
pub const PRE_NMS_TOP_K: usize = 1000;

/// Score-descending order, ties broken by lower index.
fn by_score_then_index(dets: &[Detection]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Greedy non-maximum suppression run independently per class.
///
/// Within a class, boxes are visited by descending score (ties: lower input
/// index first) and a box is suppressed when its IoU with any already kept
/// box is strictly greater than `iou_threshold`. Survivors of all classes are
/// merged, sorted the same way, and truncated to `keep_top`.
pub fn nms_per_class(detections: &[Detection], iou_threshold: f32, keep_top: usize) -> Vec<Detection> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        by_class.entry(d.category_id).or_default().push(i);
    }
    let mut kept: Vec<usize> = Vec::new();
    for mut idx in by_class.into_values() {
        idx.sort_by(by_score_then_index(detections));
        let mut class_kept: Vec<usize> = Vec::new();
        for i in idx {
            let b = &detections[i].bbox;
            if class_kept.iter().all(|&k| iou_f64(&detections[k].bbox, b) <= f64::from(iou_threshold)) {
                class_kept.push(i);
            }
        }
        kept.extend(class_kept);
    }
    kept.sort_by(by_score_then_index(detections));
    kept.truncate(keep_top);
    kept.into_iter().map(|i| detections[i]).collect()
}

/// Turns one level's sigmoid class scores into candidate detections.
///
/// `scores` and `boxes` are in anchor order with `classes` scores per anchor.
/// Keeps entries scoring above `score_thresh` whose box is non-empty, then
/// the `top_k` highest (ties: lower flat index first).
pub fn select_candidates(
    scores: &[f32],
    boxes: &[BBox],
    category_ids: &[u32],
    score_thresh: f32,
    top_k: usize,
) -> Result<Vec<Detection>> {
    let classes = category_ids.len();
    if scores.len() != boxes.len() * classes {
        return Err(Error::shape("select_candidates", format!("{} scores", boxes.len() * classes), scores.len()));
    }
    let mut flat: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > score_thresh && !boxes[i / classes].is_empty())
        .map(|(i, _)| i)
        .collect();
    flat.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    flat.truncate(top_k);
    Ok(flat
        .into_iter()
        .map(|i| Detection { bbox: boxes[i / classes], category_id: category_ids[i % classes], score: scores[i] })
        .collect())
}
