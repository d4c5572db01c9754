//! Loop-level reference implementations.

use std::collections::BTreeMap;

use panoflow_core::detection::Detection;
use panoflow_core::panoptic::PanopticMap;
use panoflow_core::pq::{ClassStats, PqStats};
use panoflow_core::tensor::Tensor;

/// Direct convolution, one output element at a time. Taps are summed in
/// (ic, ky, kx) order in f64, out-of-range taps skipped, bias added last.
pub fn conv2d_loops(input: &Tensor, weight: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Vec<f32> {
    let d = input.dims();
    let w = weight.dims();
    let (kh, kw) = (w.height, w.width);
    let oh = (d.height + 2 * pad - kh) / stride + 1;
    let ow = (d.width + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(d.batch * w.batch * oh * ow);
    for b in 0..d.batch {
        for (oc, &b_oc) in bias.iter().enumerate().take(w.batch) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..d.channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                                    continue;
                                }
                                let x = input.at(b, ic, iy as usize, ix as usize);
                                acc += f64::from(weight.at(oc, ic, ky, kx)) * f64::from(x);
                            }
                        }
                    }
                    out.push((acc + f64::from(b_oc)) as f32);
                }
            }
        }
    }
    out
}

/// Transposed 2x2 stride-2 convolution by scattering every input value.
pub fn deconv2x_scatter(input: &Tensor, weight: &Tensor, bias: &[f32]) -> Vec<f32> {
    let d = input.dims();
    let oc_n = weight.dims().batch;
    let (oh, ow) = (2 * d.height, 2 * d.width);
    let mut acc = vec![0.0f64; d.batch * oc_n * oh * ow];
    for b in 0..d.batch {
        for ic in 0..d.channels {
            for y in 0..d.height {
                for x in 0..d.width {
                    let v = f64::from(input.at(b, ic, y, x));
                    for oc in 0..oc_n {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let idx = ((b * oc_n + oc) * oh + 2 * y + ky) * ow + 2 * x + kx;
                                acc[idx] += v * f64::from(weight.at(oc, ic, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }
    acc.iter()
        .enumerate()
        .map(|(i, &a)| {
            let oc = (i / (oh * ow)) % oc_n;
            (a + f64::from(bias[oc])) as f32
        })
        .collect()
}

/// IoU evaluated in f64.
pub fn box_iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let a = a.map(f64::from);
    let b = b.map(f64::from);
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

/// Exhaustive suppression: a detection survives iff no higher-ranked
/// surviving detection of its class overlaps it by more than `thr`.
/// Rank is descending score, then ascending index.
pub fn nms_reference(dets: &[Detection], thr: f32, keep_top: usize) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut survives = vec![false; n];
    for &i in &order {
        survives[i] = (0..n).all(|j| {
            !(survives[j]
                && rank[j] < rank[i]
                && dets[j].category_id == dets[i].category_id
                && box_iou(dets[j].bbox.as_array(), dets[i].bbox.as_array()) > f64::from(thr))
        });
    }
    order.into_iter().filter(|&i| survives[i]).take(keep_top).map(|i| dets[i]).collect()
}

fn count(ids: &[u32], pred: impl Fn(usize) -> bool) -> u64 {
    (0..ids.len()).filter(|&p| pred(p)).count() as u64
}

/// Panoptic matching by scanning the rasters once per segment pair.
pub fn match_bruteforce(gt: &PanopticMap, pred: &PanopticMap) -> PqStats {
    let mut per_class: BTreeMap<u32, ClassStats> = BTreeMap::new();
    let mut gt_matched = vec![false; gt.segments.len()];
    let mut pred_matched = vec![false; pred.segments.len()];
    for (gi, g) in gt.segments.iter().enumerate() {
        for (pi, p) in pred.segments.iter().enumerate() {
            if g.iscrowd || g.category_id != p.category_id {
                continue;
            }
            let inter = count(&gt.ids, |k| gt.ids[k] == g.id && pred.ids[k] == p.id);
            if inter == 0 {
                continue;
            }
            let g_area = count(&gt.ids, |k| gt.ids[k] == g.id);
            let p_area = count(&pred.ids, |k| pred.ids[k] == p.id);
            let p_on_void = count(&pred.ids, |k| pred.ids[k] == p.id && gt.ids[k] == 0);
            let iou = inter as f64 / (g_area + p_area - inter - p_on_void) as f64;
            if iou > 0.5 {
                let s = per_class.entry(g.category_id).or_default();
                s.tp += 1;
                s.iou_sum += iou;
                gt_matched[gi] = true;
                pred_matched[pi] = true;
            }
        }
    }
    for (gi, g) in gt.segments.iter().enumerate() {
        if !gt_matched[gi] && !g.iscrowd && count(&gt.ids, |k| gt.ids[k] == g.id) > 0 {
            per_class.entry(g.category_id).or_default().fn_ += 1;
        }
    }
    for (pi, p) in pred.segments.iter().enumerate() {
        if pred_matched[pi] {
            continue;
        }
        let area = count(&pred.ids, |k| pred.ids[k] == p.id);
        if area == 0 {
            continue;
        }
        let crowd_ids: Vec<u32> =
            gt.segments.iter().filter(|g| g.iscrowd && g.category_id == p.category_id).map(|g| g.id).collect();
        let ignored = count(&pred.ids, |k| pred.ids[k] == p.id && (gt.ids[k] == 0 || crowd_ids.contains(&gt.ids[k])));
        if ignored as f64 / area as f64 > 0.5 {
            continue;
        }
        per_class.entry(p.category_id).or_default().fp += 1;
    }
    PqStats { per_class }
}

/// Number of predicted segments overlapping `gt` segment `g` with IoU > 0.5,
/// ignoring categories.
pub fn partners_above_half(gt: &PanopticMap, pred: &PanopticMap, g: u32) -> usize {
    let g_area = count(&gt.ids, |k| gt.ids[k] == g);
    pred.segments
        .iter()
        .filter(|p| {
            let inter = count(&gt.ids, |k| gt.ids[k] == g && pred.ids[k] == p.id);
            let p_area = count(&pred.ids, |k| pred.ids[k] == p.id);
            let union = g_area + p_area - inter;
            union > 0 && inter as f64 / union as f64 > 0.5
        })
        .count()
}
