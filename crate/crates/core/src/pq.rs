//! Panoptic quality: per-image segment matching, reducible per-class
//! statistics and the PQ/SQ/RQ report.
//!
//! Void and crowd handling follow the usual panoptic evaluation rules:
//! crowd ground-truth segments never match and never count as false
//! negatives; a predicted segment is not a false positive when more than
//! half of it lies on ground-truth void or on a crowd region of its own
//! class; predicted pixels on ground-truth void are excluded from the union.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{CategoryTable, PanopticMap, VOID};

/// Matching accumulators for one category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassStats {
    fn merge(&mut self, other: &ClassStats) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(pq, sq, rq)`; `pq` is computed as `sq * rq`.
    pub fn quality(&self) -> (f64, f64, f64) {
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let rq = if denom == 0.0 { 0.0 } else { self.tp as f64 / denom };
        (sq * rq, sq, rq)
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Per-category statistics; merging is fieldwise addition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassStats>,
}

impl PqStats {
    pub fn class_mut(&mut self, category_id: u32) -> &mut ClassStats {
        self.per_class.entry(category_id).or_default()
    }

    pub fn merge(&mut self, other: &PqStats) {
        for (&c, s) in &other.per_class {
            self.class_mut(c).merge(s);
        }
    }
}

/// Fieldwise sum of a list of statistics, accumulated left to right.
pub fn reduce_stats<'a>(stats: impl IntoIterator<Item = &'a PqStats>) -> PqStats {
    let mut acc = PqStats::default();
    for s in stats {
        acc.merge(s);
    }
    acc
}

fn segment_index(map: &PanopticMap, which: &str) -> Result<HashMap<u32, usize>> {
    let mut index = HashMap::with_capacity(map.segments.len());
    for (i, s) in map.segments.iter().enumerate() {
        if s.id == VOID {
            return Err(Error::Schema(format!("{which} segment uses the void id")));
        }
        if index.insert(s.id, i).is_some() {
            return Err(Error::Schema(format!("duplicate {which} segment id {}", s.id)));
        }
    }
    Ok(index)
}

/// Matches predicted against ground-truth segments of one image.
///
/// A pair matches when both segments share a category, the ground truth is
/// not crowd, and IoU is strictly greater than 0.5. Segment areas are taken
/// from the rasters.
pub fn match_segments(gt: &PanopticMap, pred: &PanopticMap) -> Result<PqStats> {
    if gt.width != pred.width || gt.height != pred.height || gt.ids.len() != pred.ids.len() {
        return Err(Error::shape(
            "match_segments",
            format!("{}x{} prediction", gt.width, gt.height),
            format!("{}x{}", pred.width, pred.height),
        ));
    }
    let gt_index = segment_index(gt, "ground-truth")?;
    let pred_index = segment_index(pred, "predicted")?;

    let mut gt_area = vec![0u64; gt.segments.len()];
    let mut pred_area = vec![0u64; pred.segments.len()];
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
        if g != VOID {
            let i =
                *gt_index.get(&g).ok_or_else(|| Error::Schema(format!("ground-truth raster id {g} is not listed")))?;
            gt_area[i] += 1;
        }
        if p != VOID {
            let i =
                *pred_index.get(&p).ok_or_else(|| Error::Schema(format!("predicted raster id {p} is not listed")))?;
            pred_area[i] += 1;
        }
        *inter.entry((g, p)).or_insert(0) += 1;
    }

    let mut stats = PqStats::default();
    let mut gt_matched = HashSet::new();
    let mut pred_matched = HashSet::new();
    // visit pairs in a fixed order so iou_sum is reproducible
    let mut pairs: Vec<((u32, u32), u64)> = inter.iter().map(|(&k, &v)| (k, v)).collect();
    pairs.sort_unstable_by_key(|&(k, _)| k);
    for &((g, p), n) in &pairs {
        let (Some(&gi), Some(&pi)) = (gt_index.get(&g), pred_index.get(&p)) else {
            continue;
        };
        let (gs, ps) = (&gt.segments[gi], &pred.segments[pi]);
        if gs.iscrowd || gs.category_id != ps.category_id {
            continue;
        }
        let void_overlap = inter.get(&(VOID, p)).copied().unwrap_or(0);
        let union = pred_area[pi] + gt_area[gi] - n - void_overlap;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            let s = stats.class_mut(gs.category_id);
            s.tp += 1;
            s.iou_sum += iou;
            gt_matched.insert(g);
            pred_matched.insert(p);
        }
    }

    let mut crowd_by_class: HashMap<u32, Vec<u32>> = HashMap::new();
    for (gs, &area) in gt.segments.iter().zip(&gt_area) {
        if gt_matched.contains(&gs.id) {
            continue;
        }
        if gs.iscrowd {
            crowd_by_class.entry(gs.category_id).or_default().push(gs.id);
            continue;
        }
        if area > 0 {
            stats.class_mut(gs.category_id).fn_ += 1;
        }
    }

    for (ps, &area) in pred.segments.iter().zip(&pred_area) {
        if pred_matched.contains(&ps.id) || area == 0 {
            continue;
        }
        let mut ignored = inter.get(&(VOID, ps.id)).copied().unwrap_or(0);
        for crowd in crowd_by_class.get(&ps.category_id).into_iter().flatten() {
            ignored += inter.get(&(*crowd, ps.id)).copied().unwrap_or(0);
        }
        if ignored as f64 / area as f64 > 0.5 {
            continue;
        }
        stats.class_mut(ps.category_id).fp += 1;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Number of categories averaged over.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    #[serde(rename = "All")]
    pub all: Aggregate,
    #[serde(rename = "Things")]
    pub things: Aggregate,
    #[serde(rename = "Stuff")]
    pub stuff: Aggregate,
    pub per_class: BTreeMap<u32, Quality>,
}

/// Per-class qualities and unweighted class means over categories with at
/// least one TP, FP or FN. Categories missing from `categories` count as
/// stuff in the aggregates.
pub fn compute_pq(stats: &PqStats, categories: &CategoryTable) -> PqReport {
    let mut per_class = BTreeMap::new();
    let mut sums = [(0.0, 0.0, 0.0, 0usize); 3];
    for (&c, s) in &stats.per_class {
        if s.is_empty() {
            continue;
        }
        let (pq, sq, rq) = s.quality();
        per_class.insert(c, Quality { pq, sq, rq });
        let isthing = categories.get(&c).is_some_and(|cat| cat.isthing);
        for k in [0, if isthing { 1 } else { 2 }] {
            sums[k].0 += pq;
            sums[k].1 += sq;
            sums[k].2 += rq;
            sums[k].3 += 1;
        }
    }
    let mean = |(pq, sq, rq, n): (f64, f64, f64, usize)| {
        if n == 0 {
            Aggregate::default()
        } else {
            let d = n as f64;
            Aggregate { pq: pq / d, sq: sq / d, rq: rq / d, n }
        }
    };
    PqReport { all: mean(sums[0]), things: mean(sums[1]), stuff: mean(sums[2]), per_class }
}

impl PqReport {
    /// Fixed-width text table with values scaled by 100 and one decimal.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8}|{:>7}{:>7}{:>7}{:>6}\n", "", "PQ", "SQ", "RQ", "N");
        out.push_str(&"-".repeat(35));
        out.push('\n');
        for (name, a) in [("All", &self.all), ("Things", &self.things), ("Stuff", &self.stuff)] {
            out.push_str(&format!(
                "{name:<8}|{:>7.1}{:>7.1}{:>7.1}{:>6}\n",
                100.0 * a.pq,
                100.0 * a.sq,
                100.0 * a.rq,
                a.n
            ));
        }
        out
    }
}
