//! Merging instance masks, the stuff map and detection boxes into one
//! panoptic map.

use std::collections::{BTreeSet, HashSet};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::heads::{RoiMask, MASK_SIZE};
use crate::panoptic::{LabelSpace, PanopticMap, Segment, VOID};
use crate::tensor::{bilinear_resize, Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Instances (and box fills) scoring below this are ignored.
    pub score_thresh: f32,
    /// An instance is dropped when more than this fraction of its mask is
    /// already taken by higher-scored instances.
    pub overlap_thresh: f64,
    /// Stuff regions smaller than this many pixels stay void.
    pub stuff_area_limit: u64,
    /// Minimum fraction of a detection box that must still be unassigned for
    /// the box to be filled in as a segment.
    pub box_fill_overlap: f64,
    /// Stuff channel to ignore; `None` means the label space's last channel.
    pub other_class_id: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.37,
            overlap_thresh: 0.37,
            stuff_area_limit: 4900,
            box_fill_overlap: 0.6,
            other_class_id: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid("fusion config", format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("score_thresh", f64::from(self.score_thresh))?;
        unit("overlap_thresh", self.overlap_thresh)?;
        unit("box_fill_overlap", self.box_fill_overlap)
    }
}

/// Full-resolution binary instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub category_id: u32,
    pub score: f32,
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    /// Detection the mask was predicted from, if any.
    pub detection: Option<usize>,
}

impl InstanceMask {
    pub fn area(&self) -> u64 {
        self.mask.iter().filter(|&&m| m).count() as u64
    }
}

/// Resizes a box-relative mask to the box's pixel extent, places it in an
/// image-sized raster and binarizes at 0.5 (values >= 0.5 are foreground).
/// Parts of the box outside the image are cut off.
pub fn paste_mask(roi: &RoiMask, width: usize, height: usize) -> Result<InstanceMask> {
    if roi.mask.len() != MASK_SIZE * MASK_SIZE {
        return Err(Error::shape("paste_mask", format!("{MASK_SIZE}x{MASK_SIZE} mask"), roi.mask.len()));
    }
    let mut out = InstanceMask {
        category_id: roi.category_id,
        score: roi.score,
        width,
        height,
        mask: vec![false; width * height],
        detection: Some(roi.detection),
    };
    // unclipped pixel extent: pixel centers inside the box
    let edge = |v: f32| (f64::from(v) - 0.5).ceil() as i64;
    let (x0, x1, y0, y1) = (edge(roi.bbox.x1), edge(roi.bbox.x2), edge(roi.bbox.y1), edge(roi.bbox.y2));
    let (bw, bh) = (x1 - x0, y1 - y0);
    let visible = x1 > 0 && y1 > 0 && x0 < width as i64 && y0 < height as i64;
    if bw <= 0 || bh <= 0 || !visible {
        return Ok(out);
    }
    let small = Tensor::new(Dims::new(1, 1, MASK_SIZE, MASK_SIZE), roi.mask.clone())?;
    let resized = bilinear_resize(&small, bh as usize, bw as usize, false)?;
    for r in 0..bh {
        let y = y0 + r;
        if y < 0 || y >= height as i64 {
            continue;
        }
        for c in 0..bw {
            let x = x0 + c;
            if x < 0 || x >= width as i64 {
                continue;
            }
            if resized.at(0, 0, r as usize, c as usize) >= 0.5 {
                out.mask[y as usize * width + x as usize] = true;
            }
        }
    }
    Ok(out)
}

/// Score-descending order over `scores`, ties by index.
fn ranked(scores: impl Iterator<Item = f32>, min_score: f32) -> Vec<usize> {
    let scores: Vec<f32> = scores.collect();
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= min_score).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Per-pixel argmax over channels of a batch-1 probability tensor; ties go to
/// the lowest channel.
pub fn stuff_labels(probs: &Tensor) -> Vec<usize> {
    let d = probs.dims();
    let plane = d.plane();
    let mut best = vec![0usize; plane];
    let mut best_p = probs.plane(0, 0).to_vec();
    for c in 1..d.channels {
        for (p, &v) in probs.plane(0, c).iter().enumerate() {
            if v > best_p[p] {
                best_p[p] = v;
                best[p] = c;
            }
        }
    }
    best
}

struct Builder {
    map: PanopticMap,
}

impl Builder {
    fn add_segment(&mut self, category_id: u32, isthing: bool, score: Option<f32>, pixels: &[usize]) {
        let id = self.map.segments.len() as u32 + 1;
        for &p in pixels {
            self.map.ids[p] = id;
        }
        self.map.segments.push(Segment { id, category_id, iscrowd: false, area: pixels.len() as u64, isthing, score });
    }
}

/// Builds the panoptic map.
///
/// 1. Instances scoring at least `score_thresh` are visited by descending
///    score; an instance is dropped when more than `overlap_thresh` of its
///    mask is already assigned, otherwise its still-free pixels become a new
///    thing segment.
/// 2. Each stuff class (argmax of `stuff_probs`, `other` skipped) claims its
///    unassigned pixels as one segment if they number at least
///    `stuff_area_limit`.
/// 3. Detections scoring at least `score_thresh` that did not produce an
///    instance segment are visited by descending score; when at least
///    `box_fill_overlap` of a box is unassigned, box ∩ unassigned becomes a
///    thing segment.
///
/// Everything else stays void.
pub fn fuse(
    instances: &[InstanceMask],
    stuff_probs: &Tensor,
    detections: &[Detection],
    labels: &LabelSpace,
    config: &FusionConfig,
) -> Result<PanopticMap> {
    config.validate()?;
    let d = stuff_probs.dims();
    if d.batch != 1 || d.channels != labels.stuff_channels() {
        return Err(Error::shape("fuse", format!("stuff probabilities of 1x{}xHxW", labels.stuff_channels()), d));
    }
    let (width, height) = (d.width, d.height);
    for (i, inst) in instances.iter().enumerate() {
        if inst.width != width || inst.height != height || inst.mask.len() != width * height {
            return Err(Error::shape(
                "fuse",
                format!("{width}x{height} instance masks"),
                format!("instance {i} of {}x{}", inst.width, inst.height),
            ));
        }
    }
    let other = config.other_class_id.unwrap_or_else(|| labels.other_channel());
    if other >= d.channels {
        return Err(Error::invalid("fuse", format!("other channel {other} outside {} channels", d.channels)));
    }

    let mut b = Builder { map: PanopticMap::void(width, height) };
    let mut represented = HashSet::new();

    for i in ranked(instances.iter().map(|m| m.score), config.score_thresh) {
        let inst = &instances[i];
        let area = inst.area();
        if area == 0 {
            continue;
        }
        let free: Vec<usize> = (0..width * height).filter(|&p| inst.mask[p] && b.map.ids[p] == VOID).collect();
        let claimed = (area - free.len() as u64) as f64 / area as f64;
        if claimed > config.overlap_thresh || free.is_empty() {
            continue;
        }
        b.add_segment(inst.category_id, true, Some(inst.score), &free);
        if let Some(det) = inst.detection {
            represented.insert(det);
        }
    }

    let labels_map = stuff_labels(stuff_probs);
    let present: BTreeSet<usize> = labels_map.iter().copied().collect();
    for c in present {
        if c == other {
            continue;
        }
        // stuff categories fill the channels around the `other` channel in order
        let category_id = labels.stuff[if c < other { c } else { c - 1 }];
        let region: Vec<usize> = (0..width * height).filter(|&p| labels_map[p] == c && b.map.ids[p] == VOID).collect();
        if (region.len() as u64) < config.stuff_area_limit || region.is_empty() {
            continue;
        }
        b.add_segment(category_id, false, None, &region);
    }

    for i in ranked(detections.iter().map(|d| d.score), config.score_thresh) {
        if represented.contains(&i) {
            continue;
        }
        let det = &detections[i];
        let (xs, ys) = det.bbox.pixel_span(width, height);
        let box_area = xs.len() * ys.len();
        if box_area == 0 {
            continue;
        }
        let free: Vec<usize> =
            ys.flat_map(|y| xs.clone().map(move |x| y * width + x)).filter(|&p| b.map.ids[p] == VOID).collect();
        if free.is_empty() || (free.len() as f64) / (box_area as f64) < config.box_fill_overlap {
            continue;
        }
        b.add_segment(det.category_id, true, Some(det.score), &free);
    }

    Ok(b.map)
}

fn palette_color(seed: u64, id: u32, attempt: u64) -> [u8; 3] {
    let mut rng = SplitMix64::seed_from_u64(seed ^ (u64::from(id) << 20) ^ attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let v = rng.next_u64();
    [(v >> 16) as u8, (v >> 24) as u8, (v >> 32) as u8]
}

/// Deterministic RGB rendering of a segment-id raster: void is black, every
/// other id gets a distinct seeded color (collisions probe the next draw).
pub fn colorize(ids: &[u32], seed: u64) -> Vec<u8> {
    let distinct: BTreeSet<u32> = ids.iter().copied().filter(|&id| id != VOID).collect();
    let mut used: HashSet<[u8; 3]> = HashSet::from([[0, 0, 0]]);
    let mut colors = std::collections::HashMap::new();
    for id in distinct {
        let mut attempt = 0;
        let color = loop {
            let c = palette_color(seed, id, attempt);
            if used.insert(c) {
                break c;
            }
            attempt += 1;
        };
        colors.insert(id, color);
    }
    ids.iter().flat_map(|id| colors.get(id).copied().unwrap_or([0, 0, 0])).collect()
}
