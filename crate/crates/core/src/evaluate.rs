//! Dataset-level panoptic quality over two archives.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::panoptic_io::PanopticArchive;
use crate::pq::{compute_pq, match_segments, reduce_stats, PqReport, PqStats};

/// Per-image statistics in ground-truth image order.
///
/// Images are matched on image id; ids present in only one archive are an
/// error. Work is spread over `workers` threads; the result does not depend
/// on the worker count.
pub fn image_stats(gt: &PanopticArchive, pred: &PanopticArchive, workers: usize) -> Result<Vec<PqStats>> {
    let gt_ids: Vec<_> = gt.image_ids().collect();
    let pred_ids: Vec<_> = pred.image_ids().collect();
    if gt_ids != pred_ids {
        let missing: Vec<String> = gt_ids.iter().filter(|id| !pred_ids.contains(id)).map(|id| id.to_string()).collect();
        let extra: Vec<String> = pred_ids.iter().filter(|id| !gt_ids.contains(id)).map(|id| id.to_string()).collect();
        return Err(Error::Schema(format!(
            "prediction archive does not cover the ground truth: missing images [{}], unexpected images [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let unknown: Vec<String> = pred
        .annotations()
        .iter()
        .flat_map(|a| a.segments_info.iter().map(move |s| (a, s)))
        .filter(|(_, s)| !gt.categories.contains_key(&s.category_id))
        .map(|(a, s)| format!("image {} segment {} category {}", a.image_id, s.id, s.category_id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Schema(format!(
            "predicted categories missing from the ground truth: {}",
            unknown.join("; ")
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid("evaluate", e.to_string()))?;
    pool.install(|| {
        (0..gt.len())
            .into_par_iter()
            .map(|i| {
                let g = gt.item(i)?;
                let p = pred.item(i)?;
                match_segments(&g.map, &p.map).map_err(|e| match e {
                    Error::Schema(r) => Error::Schema(format!("image {}: {r}", g.image_id)),
                    Error::Shape { op, expected, actual } => {
                        Error::Shape { op, expected: format!("{expected} for image {}", g.image_id), actual }
                    }
                    other => other,
                })
            })
            .collect()
    })
}

/// Evaluates `pred` against `gt` and reduces in image order.
pub fn evaluate(gt: &PanopticArchive, pred: &PanopticArchive, workers: usize) -> Result<(PqStats, PqReport)> {
    let per_image = image_stats(gt, pred, workers)?;
    let total = reduce_stats(&per_image);
    let report = compute_pq(&total, &gt.categories);
    Ok((total, report))
}
