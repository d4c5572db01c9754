use panoflow_core::evaluate::{evaluate, image_stats};
use panoflow_core::panoptic_io::{load_archive, write_archive, ArchiveItem, ImageId, PanopticArchive};
use panoflow_core::pq::{match_segments, reduce_stats};
use panoflow_testkit::scenes::{random_pair, small_categories};

fn archives(dir: &std::path::Path, n: u64) -> (PanopticArchive, PanopticArchive) {
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for k in 0..n {
        let (g, p) = random_pair(500 + k, 32);
        let item = |map| ArchiveItem { image_id: ImageId::Int(k), file_name: format!("{k}.png"), map };
        gt.push(item(g));
        pred.push(item(p));
    }
    write_archive(dir.join("gt.json"), dir.join("gt"), &small_categories(), &gt).unwrap();
    write_archive(dir.join("pred.json"), dir.join("pred"), &small_categories(), &pred).unwrap();
    (
        load_archive(dir.join("gt.json"), dir.join("gt")).unwrap(),
        load_archive(dir.join("pred.json"), dir.join("pred")).unwrap(),
    )
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = archives(dir.path(), 12);
    let (stats, report) = evaluate(&gt, &pred, 1).unwrap();
    for workers in [2, 3, 8] {
        let (s, r) = evaluate(&gt, &pred, workers).unwrap();
        assert_eq!(s, stats);
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&report).unwrap());
    }
    // equal to matching the images one by one
    let direct: Vec<_> = (0..12)
        .map(|k| {
            let (g, p) = random_pair(500 + k, 32);
            match_segments(&g, &p).unwrap()
        })
        .collect();
    let per_image = image_stats(&gt, &pred, 4).unwrap();
    assert_eq!(per_image, direct);
    assert_eq!(reduce_stats(&direct), stats);
}

#[test]
fn image_sets_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, _) = archives(dir.path(), 3);
    let other = tempfile::tempdir().unwrap();
    let (_, fewer) = archives(other.path(), 2);
    let err = evaluate(&gt, &fewer, 2).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains('2'));
}
