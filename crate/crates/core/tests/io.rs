use panoflow_core::panoptic::{PanopticMap, Segment};
use panoflow_core::panoptic_io::{
    decode_png, encode_png, id_to_rgb, load_archive, rgb_to_id, write_archive, ArchiveItem, ImageId, MAX_ID,
};
use panoflow_core::Error;
use panoflow_testkit::scenes::{paint, random_pair, small_categories, small_table};
use proptest::prelude::*;

fn seg(id: u32, category_id: u32) -> Segment {
    Segment { id, category_id, iscrowd: false, area: 0, isthing: category_id <= 2, score: None }
}

#[test]
fn boundary_ids_round_trip() {
    let ids = [1u32, 255, 256, 65536, 256 * 256 * 256 - 1];
    assert_eq!(ids[4], MAX_ID);
    let layers: Vec<_> =
        ids.iter().enumerate().map(|(k, &id)| (seg(id, 1 + k as u32 % 4), (k * 2, 0, k * 2 + 2, 3))).collect();
    let map = paint(12, 3, &layers);
    let png = encode_png(&map).unwrap();
    let back = decode_png(&png, &map.segments).unwrap();
    assert_eq!(back.ids, map.ids);
    assert_eq!(back.segments, map.segments);
    for id in ids {
        assert_eq!(rgb_to_id(id_to_rgb(id)), id);
    }
    assert_eq!(id_to_rgb(256), [0, 1, 0]);
    assert_eq!(id_to_rgb(65536), [0, 0, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_maps_round_trip(seed in any::<u64>(), side in 1usize..40) {
        let (gt, _) = random_pair(seed, side.max(2));
        let png = encode_png(&gt).unwrap();
        let back = decode_png(&png, &gt.segments).unwrap();
        prop_assert_eq!(back.ids, gt.ids.clone());
        prop_assert_eq!(encode_png(&decode_png(&png, &gt.segments).unwrap()).unwrap(), png);
    }

    #[test]
    fn id_encoding_is_a_bijection(id in 0u32..=MAX_ID) {
        prop_assert_eq!(rgb_to_id(id_to_rgb(id)), id);
    }
}

fn items(n: u64) -> Vec<ArchiveItem> {
    (0..n)
        .map(|k| {
            let (mut map, _) = random_pair(100 + k, 32);
            if let Some(s) = map.segments.first_mut() {
                s.score = Some(0.25 + k as f32 / 7.0);
            }
            ArchiveItem { image_id: ImageId::Int(10 * (n - k)), file_name: format!("img{k}.png"), map }
        })
        .collect()
}

#[test]
fn archive_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let written = items(5);
    write_archive(dir.path().join("a.json"), dir.path().join("png"), &small_categories(), &written).unwrap();
    let archive = load_archive(dir.path().join("a.json"), dir.path().join("png")).unwrap();
    assert_eq!(archive.categories, small_table());
    assert_eq!(archive.len(), 5);

    // items come back in ascending image id order
    let ids: Vec<ImageId> = archive.image_ids().cloned().collect();
    assert_eq!(ids, [10, 20, 30, 40, 50].map(ImageId::Int).to_vec());
    for item in archive.iter() {
        let item = item.unwrap();
        let original = written.iter().find(|w| w.image_id == item.image_id).unwrap();
        assert_eq!(item, *original);
    }

    // writing what was read reproduces the same files
    let again = tempfile::tempdir().unwrap();
    let read: Vec<ArchiveItem> = archive.iter().map(Result::unwrap).collect();
    write_archive(again.path().join("a.json"), again.path().join("png"), &small_categories(), &read).unwrap();
    for k in 0..5 {
        let name = format!("png/img{k}.png");
        assert_eq!(std::fs::read(dir.path().join(&name)).unwrap(), std::fs::read(again.path().join(&name)).unwrap());
    }
}

#[test]
fn string_ids_and_empty_archives() {
    let dir = tempfile::tempdir().unwrap();
    let map = paint(4, 4, &[(seg(7, 3), (0, 0, 4, 2))]);
    let item = ArchiveItem { image_id: ImageId::Str("frankfurt_000000".into()), file_name: "f.png".into(), map };
    write_archive(dir.path().join("s.json"), dir.path(), &small_categories(), std::slice::from_ref(&item)).unwrap();
    let archive = load_archive(dir.path().join("s.json"), dir.path()).unwrap();
    assert_eq!(archive.item(0).unwrap(), item);

    write_archive(dir.path().join("e.json"), dir.path().join("none"), &small_categories(), &[]).unwrap();
    assert!(load_archive(dir.path().join("e.json"), dir.path().join("none")).unwrap().is_empty());
}

#[test]
fn broken_archives_report_errors() {
    let dir = tempfile::tempdir().unwrap();
    let written = items(2);
    write_archive(dir.path().join("a.json"), dir.path(), &small_categories(), &written).unwrap();
    std::fs::remove_file(dir.path().join("img1.png")).unwrap();
    let archive = load_archive(dir.path().join("a.json"), dir.path()).unwrap();
    let missing = archive.iter().find_map(Result::err).unwrap();
    assert!(matches!(missing, Error::Io { .. }));
    assert!(missing.to_string().contains("img1.png"));

    std::fs::write(dir.path().join("bad.json"), "{\"annotations\": 3, \"categories\": []}").unwrap();
    assert!(matches!(load_archive(dir.path().join("bad.json"), dir.path()), Err(Error::Schema(_))));
    std::fs::write(dir.path().join("trunc.json"), "{\"annotations\": [").unwrap();
    assert!(matches!(load_archive(dir.path().join("trunc.json"), dir.path()), Err(Error::Format { .. })));

    std::fs::write(dir.path().join("img0.png"), b"not a png").unwrap();
    assert!(archive.item(0).is_err());

    let dup = [written[0].clone(), written[0].clone()];
    assert!(write_archive(dir.path().join("d.json"), dir.path(), &small_categories(), &dup).is_err());
}

#[test]
fn unlisted_ids_fail_to_decode() {
    let map = paint(4, 4, &[(seg(3, 1), (0, 0, 2, 2)), (seg(4, 2), (2, 2, 4, 4))]);
    let png = encode_png(&map).unwrap();
    assert!(decode_png(&png, &map.segments[..1]).is_err());
    let void = PanopticMap::void(3, 3);
    assert_eq!(decode_png(&encode_png(&void).unwrap(), &[]).unwrap(), void);
}
