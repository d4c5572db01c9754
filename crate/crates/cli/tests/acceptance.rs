//! Acceptance checks, one line per criterion. Exits non-zero when any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use panoflow_core::checkpoint::Checkpoint;
use panoflow_core::detection::{nms_per_class, BBox, Detection};
use panoflow_core::fusion::{fuse, FusionConfig, InstanceMask};
use panoflow_core::heads::{run_cls_reg_heads, run_stuff_head, HeadConfig, HeadWeights};
use panoflow_core::model::seeded_image;
use panoflow_core::panoptic::{LabelSpace, PanopticMap, Segment, VOID};
use panoflow_core::panoptic_io::{decode_png, encode_png, load_archive, write_archive, ArchiveItem, ImageId};
use panoflow_core::pq::{compute_pq, match_segments, PqStats};
use panoflow_core::pyramid::{self, build_pyramid, BackboneWeights, FeaturePyramid, LEVELS};
use panoflow_core::subnets::{adapter_prefixes, loss_compose, run_subnets, FlowFlags, SubnetConfig, SubnetWeights};
use panoflow_core::tensor::{bilinear_resize, conv2d, deconv2x, group_norm, ConvParams, Dims, Tensor};
use panoflow_testkit::reference::{conv2d_loops, deconv2x_scatter, match_bruteforce, nms_reference};
use panoflow_testkit::scenes::{fusion_scene, golden_png_path, paint, random_pair, small_categories, small_table};
use panoflow_testkit::TestRng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn same_stats(a: &PqStats, b: &PqStats) -> bool {
    let keep = |s: &PqStats| -> BTreeMap<u32, (u64, u64, u64, f64)> {
        s.per_class.iter().filter(|(_, c)| !c.is_empty()).map(|(&k, c)| (k, (c.tp, c.fp, c.fn_, c.iou_sum))).collect()
    };
    let (a, b) = (keep(a), keep(b));
    a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|((ka, x), (kb, y))| ka == kb && (x.0, x.1, x.2) == (y.0, y.1, y.2) && (x.3 - y.3).abs() <= 1e-12)
}

fn pq_oracle() -> Check {
    let start = Instant::now();
    let seeds = 1000u64;
    for seed in 0..seeds {
        let (gt, pred) = random_pair(seed, 32);
        let fast = match_segments(&gt, &pred).map_err(err)?;
        ensure(same_stats(&fast, &match_bruteforce(&gt, &pred)), format!("seed {seed} differs"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{seeds} seeds equal, {secs:.2} s"))
}

fn seg(id: u32, category_id: u32) -> Segment {
    Segment { id, category_id, iscrowd: false, area: 0, isthing: category_id <= 2, score: None }
}

fn pq_analytic() -> Check {
    let report = |gt: &PanopticMap, pred: &PanopticMap| -> Result<_, String> {
        Ok(compute_pq(&match_segments(gt, pred).map_err(err)?, &small_table()))
    };
    let gt = paint(10, 1, &[(seg(1, 1), (0, 0, 10, 1))]);
    let perfect = 100.0 * report(&gt, &gt)?.all.pq;
    ensure(perfect == 100.0, format!("perfect {perfect}"))?;

    let six = paint(10, 1, &[(seg(5, 1), (0, 0, 6, 1))]);
    let single = 100.0 * report(&gt, &six)?.all.pq;
    ensure(single == 60.0, format!("IoU 0.6 gave {single}"))?;

    let gt2 = paint(20, 1, &[(seg(1, 1), (0, 0, 10, 1)), (seg(2, 3), (10, 0, 20, 1))]);
    let pred2 = paint(20, 1, &[(seg(5, 1), (0, 0, 6, 1)), (seg(6, 1), (10, 0, 20, 1))]);
    let with_fp = 100.0 * report(&gt2, &pred2)?.per_class[&1].pq;
    ensure(format!("{with_fp:.1}") == "40.0" && (with_fp - 40.0).abs() < 1e-12, format!("TP+FP gave {with_fp}"))?;

    let five = paint(10, 1, &[(seg(5, 1), (0, 0, 5, 1))]);
    let s = match_segments(&gt, &five).map_err(err)?;
    let c = s.per_class[&1];
    ensure((c.tp, c.fp, c.fn_) == (0, 1, 1), format!("IoU 0.5 gave tp {} fp {} fn {}", c.tp, c.fp, c.fn_))?;
    Ok(format!("100.0 / 60.0 / {with_fp:.1} (|d| < 1e-12) / IoU 0.5 unmatched"))
}

fn random_pyramid(rng: &mut TestRng, channels: usize, side: usize) -> FeaturePyramid {
    FeaturePyramid::from_levels(
        LEVELS
            .iter()
            .map(|&l| {
                let d = Dims::new(1, channels, side >> l, side >> l);
                (l, Tensor::new(d, rng.f32s(d.numel(), -1.0, 1.0)).unwrap())
            })
            .collect(),
    )
}

fn flow_ablation() -> Check {
    let seeds = 20u64;
    for seed in 0..seeds {
        let on = SubnetConfig { channels: 16, ..SubnetConfig::default() };
        let off = SubnetConfig { flows: FlowFlags::NONE, ..on };
        let mut ckpt = Checkpoint::seeded(&on.param_specs(), seed);
        for prefix in adapter_prefixes(&on.stages) {
            ckpt.zero_conv(&prefix).map_err(err)?;
        }
        let mut rng = TestRng::new(seed);
        let p = random_pyramid(&mut rng, 16, 128);
        let a = run_subnets(&p, &SubnetWeights::from_checkpoint(&ckpt, &on).map_err(err)?).map_err(err)?;
        let b = run_subnets(&p, &SubnetWeights::from_checkpoint(&ckpt, &off).map_err(err)?).map_err(err)?;
        ensure(a.bitwise_eq(&b), format!("seed {seed} differs"))?;
    }
    Ok(format!("{seeds} seeds bitwise identical"))
}

fn shape_suite() -> Check {
    let start = Instant::now();
    let sub = SubnetConfig::default();
    let heads = HeadConfig::default();
    let c = sub.channels;
    let mut specs = pyramid::param_specs(c);
    specs.extend(sub.param_specs());
    specs.extend(heads.param_specs(c));
    let ckpt = Checkpoint::seeded(&specs, 1);
    let image = seeded_image(1, 512, 512).map_err(err)?;
    let p = build_pyramid(&image, &BackboneWeights::from_checkpoint(&ckpt, c).map_err(err)?).map_err(err)?;
    for (level, side) in LEVELS.iter().zip([64, 32, 16, 8, 4]) {
        let d = p.level(*level).map_err(err)?.dims();
        ensure(d == Dims::new(1, 256, side, side), format!("P{level} is {d}"))?;
    }
    let features = run_subnets(&p, &SubnetWeights::from_checkpoint(&ckpt, &sub).map_err(err)?).map_err(err)?;
    let hw = HeadWeights::from_checkpoint(&ckpt, &heads, c).map_err(err)?;
    let out = run_cls_reg_heads(&features, &hw).map_err(err)?;
    for (level, t) in &out.cls_logits {
        ensure(t.dims().channels == 9 * 80, format!("cls P{level} has {} channels", t.dims().channels))?;
    }
    let probs = run_stuff_head(&features, &hw).map_err(err)?;
    ensure(probs.dims() == Dims::new(1, 54, 512, 512), format!("stuff output {}", probs.dims()))?;
    let mut worst = 0.0f64;
    for px in 0..512 * 512 {
        let sum: f64 = (0..54).map(|ch| f64::from(probs.plane(0, ch)[px])).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    ensure(worst <= 1e-6, format!("channel sum off by {worst:e}"))?;
    Ok(format!(
        "P3..P7 64..4 x256, cls 720 ch, stuff 54x512x512, max |sum-1| {worst:.1e}, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn nms_oracle() -> Check {
    let mut cases = 0;
    for seed in 0..200u64 {
        let mut rng = TestRng::new(seed);
        for thr in [0.3f32, 0.4, 0.5] {
            let n = rng.below(51);
            let centers: Vec<(f64, f64)> = (0..3).map(|_| (rng.range(0.0, 80.0), rng.range(0.0, 80.0))).collect();
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let (cx, cy) = centers[rng.below(3)];
                    let (x, y) = (cx + rng.range(-8.0, 8.0), cy + rng.range(-8.0, 8.0));
                    let (w, h) = (rng.range(4.0, 30.0), rng.range(4.0, 30.0));
                    Detection {
                        bbox: BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32),
                        category_id: 1 + rng.below(3) as u32,
                        score: rng.unit() as f32,
                    }
                })
                .collect();
            ensure(nms_per_class(&dets, thr, 100) == nms_reference(&dets, thr, 100), format!("seed {seed} thr {thr}"))?;
            cases += 1;
        }
    }
    let dets: Vec<Detection> = (0..150)
        .map(|i| Detection {
            bbox: BBox::new(i as f32 * 20.0, 0.0, i as f32 * 20.0 + 10.0, 10.0),
            category_id: 1,
            score: ((i * 37) % 150) as f32 / 150.0,
        })
        .collect();
    let kept = nms_per_class(&dets, 0.4, 100);
    let floor = 50.0 / 150.0;
    ensure(kept.len() == 100 && kept.iter().all(|d| d.score >= floor), "top-100 truncation")?;
    Ok(format!("{cases} random cases equal, 100 of 150 kept"))
}

fn fusion_invariants() -> Check {
    let s = fusion_scene();
    let cfg = FusionConfig::default();
    let map = fuse(&s.instances, &s.stuff_probs, &s.detections, &s.labels, &cfg).map_err(err)?;
    map.validate().map_err(err)?;
    ensure(map == s.expected, "golden scene differs from its hand-built map")?;
    let png = encode_png(&map).map_err(err)?;
    let golden = std::fs::read(golden_png_path()).map_err(err)?;
    ensure(png == golden, "PNG bytes differ from the frozen golden file")?;
    ensure(decode_png(&golden, &s.expected.segments).map_err(err)?.ids == s.expected.ids, "golden decodes wrongly")?;

    let (xs, ys) = s.detections[3].bbox.pixel_span(s.width, s.height);
    let d_clean = ys.flat_map(|y| xs.clone().map(move |x| (x, y))).all(|(x, y)| map.ids[y * s.width + x] == 5);
    ensure(d_clean, "score-0.36 instance left a trace")?;

    let labels = LabelSpace::contiguous(1, 1);
    let block = |n: usize| {
        Tensor::from_fn(
            Dims::new(1, 2, 100, 100),
            move |_, c, y, x| {
                if (c == 0) == (y * 100 + x < n) {
                    0.9
                } else {
                    0.1
                }
            },
        )
    };
    let kept = fuse(&[], &block(4900), &[], &labels, &cfg).map_err(err)?;
    let void = fuse(&[], &block(4899), &[], &labels, &cfg).map_err(err)?;
    ensure(kept.segments.len() == 1 && kept.segments[0].area == 4900, "4900-px region not kept")?;
    ensure(void.segments.is_empty() && void.ids.iter().all(|&i| i == VOID), "4899-px region not void")?;

    // partition property on random scenes
    for seed in 0..50u64 {
        let mut rng = TestRng::new(seed);
        let side = 64;
        let instances: Vec<InstanceMask> = (0..rng.below(6))
            .map(|_| {
                let (x0, y0) = (rng.below(48), rng.below(48));
                let (x1, y1) = (x0 + 4 + rng.below(12), y0 + 4 + rng.below(12));
                let mask = (0..side * side)
                    .map(|p| (x0..x1).contains(&(p % side)) && (y0..y1).contains(&(p / side)))
                    .collect();
                InstanceMask {
                    category_id: 1,
                    score: rng.range(0.3, 1.0) as f32,
                    width: side,
                    height: side,
                    mask,
                    detection: None,
                }
            })
            .collect();
        let probs = Tensor::new(Dims::new(1, 2, side, side), rng.f32s(2 * side * side, 0.0, 1.0)).unwrap();
        let small = FusionConfig { stuff_area_limit: 500, ..cfg };
        let m = fuse(&instances, &probs, &[], &labels, &small).map_err(err)?;
        m.validate().map_err(|e| format!("seed {seed}: {e}"))?;
        let listed: u64 = m.segments.iter().map(|s| s.area).sum();
        let void_px = m.ids.iter().filter(|&&i| i == VOID).count() as u64;
        ensure(listed + void_px == (side * side) as u64, format!("seed {seed} not a partition"))?;
    }

    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(err)?;
        let again = pool.install(|| fuse(&s.instances, &s.stuff_probs, &s.detections, &s.labels, &cfg)).map_err(err)?;
        ensure(encode_png(&again).map_err(err)? == golden, format!("rerun with {threads} threads differs"))?;
    }
    Ok("partition, golden bytes, 0.36 dropped, 4899 void / 4900 kept, reruns identical".into())
}

fn kernel_oracles() -> Check {
    let mut rng = TestRng::new(77);
    let mut cases = 0;
    for _ in 0..150 {
        let (ic, oc) = (1 + rng.below(5), 1 + rng.below(9));
        let (h, w) = (1 + rng.below(11), 1 + rng.below(11));
        let (kh, kw) = (1 + rng.below(3), 1 + rng.below(3));
        let (stride, pad) = (1 + rng.below(3), rng.below(3));
        if h + 2 * pad < kh || w + 2 * pad < kw {
            continue;
        }
        let x = Tensor::new(Dims::new(1, ic, h, w), rng.f32s(ic * h * w, -1.0, 1.0)).unwrap();
        let wt = Tensor::new(Dims::new(oc, ic, kh, kw), rng.f32s(oc * ic * kh * kw, -1.0, 1.0)).unwrap();
        let params = ConvParams::new(wt, rng.f32s(oc, -0.5, 0.5)).map_err(err)?;
        let fast = conv2d(&x, &params, stride, pad).map_err(err)?;
        let slow = conv2d_loops(&x, params.weight(), params.bias(), stride, pad);
        ensure(
            fast.data().iter().zip(&slow).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("conv case {cases} not bitwise equal"),
        )?;

        let dw = Tensor::new(Dims::new(oc, ic, 2, 2), rng.f32s(oc * ic * 4, -1.0, 1.0)).unwrap();
        let dp = ConvParams::new(dw, rng.f32s(oc, -0.5, 0.5)).map_err(err)?;
        let up = deconv2x(&x, &dp).map_err(err)?;
        let scatter = deconv2x_scatter(&x, dp.weight(), dp.bias());
        ensure(
            up.data().iter().zip(&scatter).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("deconv case {cases} not bitwise equal"),
        )?;
        cases += 1;
    }

    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let x = Tensor::new(Dims::new(1, 32, 4, 4), rng.f32s(512, -3.0, 3.0)).unwrap();
        let y = group_norm(&x, 32, &[1.0; 32], &[0.0; 32], 1e-5).map_err(err)?;
        for c in 0..32 {
            let v: Vec<f64> = y.plane(0, c).iter().map(|&v| f64::from(v)).collect();
            let mean = v.iter().sum::<f64>() / 16.0;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    ensure(worst_mean < 1e-5 && worst_var < 1e-3, format!("group norm mean {worst_mean:e} var {worst_var:e}"))?;

    for value in [0.1f32, -3.7, 1e-3, 12345.678] {
        let x = Tensor::filled(Dims::new(1, 2, 5, 7), value);
        for (oh, ow) in [(10, 14), (20, 28), (3, 4), (17, 9)] {
            let y = bilinear_resize(&x, oh, ow, false).map_err(err)?;
            ensure(y.data().iter().all(|v| v.to_bits() == value.to_bits()), format!("bilinear {value} -> {oh}x{ow}"))?;
        }
    }
    Ok(format!(
        "{cases} conv + deconv cases bitwise, gn |mean| {worst_mean:.1e} |var-1| {worst_var:.1e}, bilinear constants exact"
    ))
}

fn io_exact() -> Check {
    let ids = [1u32, 255, 256, 65536, 256 * 256 * 256 - 1];
    let layers: Vec<_> =
        ids.iter().enumerate().map(|(k, &id)| (seg(id, 1 + k as u32 % 4), (k * 2, 0, k * 2 + 2, 2))).collect();
    let map = paint(10, 2, &layers);
    let back = decode_png(&encode_png(&map).map_err(err)?, &map.segments).map_err(err)?;
    ensure(back.ids == map.ids, "id raster changed")?;

    let dir = tempfile::tempdir().map_err(err)?;
    let items: Vec<ArchiveItem> = (0..4u64)
        .map(|k| ArchiveItem {
            image_id: ImageId::Int(k),
            file_name: format!("{k}.png"),
            map: random_pair(900 + k, 32).0,
        })
        .collect();
    write_archive(dir.path().join("a.json"), dir.path().join("png"), &small_categories(), &items).map_err(err)?;
    let archive = load_archive(dir.path().join("a.json"), dir.path().join("png")).map_err(err)?;
    let read: Vec<ArchiveItem> = archive.iter().collect::<Result<_, _>>().map_err(err)?;
    ensure(read == items, "archive items changed")?;
    Ok("ids 1, 255, 256, 65536, 16777215 exact; 4-image archive lossless".into())
}

fn loss_composition() -> Check {
    let v = loss_compose(1.0, 1.0, 1.0, 2.0, 0.25).map_err(err)?;
    ensure(v == 3.5, format!("(1,1,1,2) gave {v}"))?;
    let zero = loss_compose(0.0, 0.0, 0.0, 1.3, 1.0).map_err(err)?;
    ensure(zero == 1.3, format!("(0,0,0,1.3) with lambda 1 gave {zero}"))?;
    let mut sweep = Vec::new();
    for lambda in [1.0, 0.75, 0.5, 0.3, 0.25, 0.2] {
        let total = loss_compose(0.6, 0.3, 0.4, 1.2, lambda).map_err(err)?;
        ensure(total == (0.6 + 0.3 + 0.4) + lambda * 1.2, format!("lambda {lambda}"))?;
        sweep.push(format!("{total:.3}"));
    }
    Ok(format!("3.5 exact; sweep {}", sweep.join(" ")))
}

fn run_bin(args: &[&str]) -> Result<String, String> {
    let out =
        Command::new(env!("CARGO_BIN_EXE_panoflow")).args(args).env_remove("PANOFLOW_WORKERS").output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn synthetic_ground_truth(dir: &Path) -> Result<(), String> {
    let labels = LabelSpace::contiguous(80, 53);
    let seg =
        |id, category_id| Segment { id, category_id, iscrowd: false, area: 0, isthing: category_id <= 80, score: None };
    let map = paint(
        256,
        256,
        &[
            (seg(1, 81), (0, 0, 256, 128)),
            (seg(2, 95), (0, 128, 256, 256)),
            (seg(3, 1), (40, 60, 120, 200)),
            (seg(4, 3), (150, 100, 230, 180)),
        ],
    );
    let item = ArchiveItem { image_id: ImageId::Int(0), file_name: "image.png".into(), map };
    write_archive(dir.join("gt.json"), dir.join("gt"), &labels.categories(), &[item]).map_err(err)
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    synthetic_ground_truth(d)?;
    let start = Instant::now();
    let fwd = d.join("fwd");
    let report = run_bin(&["forward", "--size", "256", "--seed", "0", "--out", &s(&fwd)])?;
    let pred = d.join("pred");
    let fused = run_bin(&[
        "fuse",
        "--instances",
        &s(&fwd.join("instances.ftns")),
        "--stuff",
        &s(&fwd.join("stuff_probs.ftns")),
        "--detections",
        &s(&fwd.join("detections.json")),
        "--out",
        &s(&pred),
    ])?;
    let eval = run_bin(&[
        "evaluate",
        "--gt-json",
        &s(&d.join("gt.json")),
        "--gt-dir",
        &s(&d.join("gt")),
        "--pred-json",
        &s(&pred.join("panoptic.json")),
        "--pred-dir",
        &s(&pred.join("panoptic")),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1} s"))?;
    let detections = report.lines().find(|l| l.starts_with("detections")).unwrap_or("").to_owned();
    let segments = fused.lines().next().unwrap_or("").to_owned();
    let all = eval.lines().nth(2).unwrap_or("").trim().to_owned();
    Ok(format!("exit 0 in {secs:.1} s; {detections}; {segments}; {all}"))
}

fn main() -> ExitCode {
    let checks: [Criterion; 10] = [
        ("PQ oracle equivalence", pq_oracle),
        ("PQ analytic cases", pq_analytic),
        ("flow-ablation equivalence", flow_ablation),
        ("shape suite at 512", shape_suite),
        ("NMS oracle", nms_oracle),
        ("fusion invariants", fusion_invariants),
        ("kernel oracles", kernel_oracles),
        ("I/O bit-exactness", io_exact),
        ("loss composition", loss_composition),
        ("end-to-end smoke at 256", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
