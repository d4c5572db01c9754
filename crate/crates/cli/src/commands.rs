use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use panoflow_core::checkpoint::Checkpoint;
use panoflow_core::detection::Detection;
use panoflow_core::evaluate::evaluate as evaluate_archives;
use panoflow_core::ftns;
use panoflow_core::fusion::{colorize as colorize_ids, fuse as fuse_maps, paste_mask, InstanceMask};
use panoflow_core::model::{seeded_image, tensor_report, Model};
use panoflow_core::panoptic_io::{
    load_archive, read_rgb_png, rgb_to_id, write_archive, write_rgb_png, ArchiveItem, ImageId,
};
use panoflow_core::subnets::{adapter_prefixes, loss_compose, FlowFlags};
use panoflow_core::tensor::Tensor;
use panoflow_core::Error;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Input image as a 1x3xHxW FTNS tensor; a seeded image otherwise.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Weights manifest; seeded weights otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the weights used by this run to a manifest at this path.
    #[arg(long, value_name = "PATH")]
    save_checkpoint: Option<PathBuf>,
    /// Zero every flow adapter present in the weights.
    #[arg(long)]
    zero_adapters: bool,
    /// Loss components `cls,reg,thing,stuff` to combine with lambda.
    #[arg(long, value_delimiter = ',', num_args = 1, value_name = "CLS,REG,THING,STUFF")]
    losses: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// N x H x W instance masks (FTNS), one per detection, in detection order.
    #[arg(long)]
    instances: PathBuf,
    /// 1 x (S+1) x H x W stuff probabilities (FTNS).
    #[arg(long)]
    stuff: PathBuf,
    /// Detections JSON.
    #[arg(long)]
    detections: PathBuf,
    /// Image id recorded in the annotation file.
    #[arg(long, default_value_t = 0)]
    image_id: u64,
    /// Base name of the written PNG.
    #[arg(long, default_value = "image")]
    name: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    gt_json: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    pred_json: PathBuf,
    #[arg(long)]
    pred_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ColorizeArgs {
    /// Id-encoded panoptic PNG.
    #[arg(long)]
    input: PathBuf,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Core(Error::Io { path: path.into(), source: e }))
}

fn flow_names(flows: &FlowFlags) -> String {
    let on: Vec<&str> = FlowFlags::NAMES
        .iter()
        .zip([flows.reg_to_cls, flows.reg_to_stuff, flows.reg_to_thing, flows.stuff_to_thing])
        .filter(|(_, on)| *on)
        .map(|(n, _)| *n)
        .collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join(",")
    }
}

pub fn forward(cfg: &RunConfig, args: &ForwardArgs) -> Result<(), CliError> {
    let model_cfg = &cfg.model;
    let mut ckpt = match args.checkpoint.as_ref().or(cfg.paths.checkpoint.as_ref()) {
        Some(path) => Checkpoint::load(path)?,
        None => Checkpoint::seeded(&model_cfg.param_specs(), cfg.seed),
    };
    if args.zero_adapters {
        for prefix in adapter_prefixes(&model_cfg.subnet.stages) {
            if ckpt.contains(&format!("{prefix}.conv")) {
                ckpt.zero_conv(&prefix)?;
            }
        }
    }
    if let Some(path) = &args.save_checkpoint {
        ckpt.save(path)?;
    }
    let model = Model::from_checkpoint(&ckpt, model_cfg)?;

    let image = match args.image.as_ref().or(cfg.paths.image.as_ref()) {
        Some(path) => ftns::load_tensor(path)?,
        None => seeded_image(cfg.seed, cfg.size, cfg.size)?,
    };
    let d = image.dims();
    let out = model.forward(&image)?;

    let s = &model_cfg.subnet.stages;
    let mut report = String::new();
    let _ = writeln!(
        report,
        "input {d} seed {} stages cls={} reg={} stuff={} thing={} flows {} lambda {}",
        cfg.seed,
        s.cls,
        s.reg,
        s.stuff,
        s.thing,
        flow_names(&model_cfg.subnet.flows),
        cfg.lambda
    );
    let rows = tensor_report(&out);
    for (name, dims, mean, max) in &rows {
        let _ = writeln!(report, "{name:<18} {:<18} mean {mean:+.6e} max {max:+.6e}", dims.to_string());
    }
    let _ =
        writeln!(report, "detections {} masks {} skipped {}", out.detections.len(), out.masks.len(), out.skipped.len());
    if let Some(l) = &args.losses {
        if l.len() != 4 {
            return Err(CliError::Usage(format!("--losses expects 4 values, got {}", l.len())));
        }
        let total = loss_compose(l[0], l[1], l[2], l[3], cfg.lambda)?;
        let _ = writeln!(report, "loss {total}");
    }
    print!("{report}");

    if let Some(dir) = &cfg.paths.out {
        let features = dir.join("features");
        create_dir(&features)?;
        let mut named: Vec<(String, &Tensor)> = out.pyramid.levels().map(|(l, t)| (format!("P{l}"), t)).collect();
        named.extend(out.features.named());
        for (level, t) in &out.heads.cls_logits {
            named.push((format!("head.cls.p{level}"), t));
        }
        for (level, t) in &out.heads.box_deltas {
            named.push((format!("head.reg.p{level}"), t));
        }
        for (name, t) in named {
            ftns::save_tensor(features.join(format!("{name}.ftns")), t)?;
        }
        ftns::save_tensor(dir.join("stuff_probs.ftns"), &out.stuff_probs)?;

        let (h, w) = (d.height, d.width);
        let mut masks = vec![0.0f32; out.detections.len() * h * w];
        for roi in &out.masks {
            let pasted = paste_mask(roi, w, h)?;
            let dst = &mut masks[roi.detection * h * w..(roi.detection + 1) * h * w];
            for (v, &m) in dst.iter_mut().zip(&pasted.mask) {
                *v = if m { 1.0 } else { 0.0 };
            }
        }
        ftns::save(dir.join("instances.ftns"), &[out.detections.len(), h, w], &masks)?;
        write_file(&dir.join("detections.json"), serde_json::to_string_pretty(&out.detections).map_err(Error::from)?)?;
        write_file(&dir.join("report.txt"), &report)?;
    }
    Ok(())
}

pub fn fuse(cfg: &RunConfig, args: &FuseArgs) -> Result<(), CliError> {
    let out_dir = cfg.paths.out.as_ref().ok_or_else(|| CliError::Usage("fuse needs --out".into()))?;
    let labels = cfg.model.labels();
    labels.validate()?;

    let stuff = ftns::load_tensor(&args.stuff)?;
    let detections: Vec<Detection> = {
        let text =
            fs::read_to_string(&args.detections).map_err(|e| Error::Io { path: args.detections.clone(), source: e })?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", args.detections.display())))?
    };
    let raw = ftns::load(&args.instances)?;
    let (n, h, w) = match raw.dims.as_slice() {
        &[n, h, w] | &[n, 1, h, w] => (n, h, w),
        other => {
            return Err(Error::Shape {
                op: "fuse",
                expected: "N x H x W instance masks".into(),
                actual: format!("{other:?}"),
            }
            .into())
        }
    };
    let sd = stuff.dims();
    if (h, w) != (sd.height, sd.width) {
        return Err(Error::Shape {
            op: "fuse",
            expected: format!("instance masks of {}x{}", sd.height, sd.width),
            actual: format!("{h}x{w}"),
        }
        .into());
    }
    if n != detections.len() {
        return Err(Error::Shape {
            op: "fuse",
            expected: format!("one instance mask per detection ({})", detections.len()),
            actual: format!("{n} masks"),
        }
        .into());
    }
    let instances: Vec<InstanceMask> = detections
        .iter()
        .enumerate()
        .map(|(i, det)| InstanceMask {
            category_id: det.category_id,
            score: det.score,
            width: w,
            height: h,
            mask: raw.data[i * h * w..(i + 1) * h * w].iter().map(|&v| v >= 0.5).collect(),
            detection: Some(i),
        })
        .collect();
    for det in &detections {
        if labels.thing_index(det.category_id).is_none() {
            return Err(Error::Schema(format!("detection category {} is not a thing class", det.category_id)).into());
        }
    }

    let map = fuse_maps(&instances, &stuff, &detections, &labels, &cfg.fusion)?;
    let item = ArchiveItem { image_id: ImageId::Int(args.image_id), file_name: format!("{}.png", args.name), map };
    write_archive(
        out_dir.join("panoptic.json"),
        out_dir.join("panoptic"),
        &labels.categories(),
        std::slice::from_ref(&item),
    )?;
    println!("segments {}", item.map.segments.len());
    println!("void_fraction {:.6}", item.map.void_fraction());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let gt = load_archive(&args.gt_json, &args.gt_dir)?;
    let pred = load_archive(&args.pred_json, &args.pred_dir)?;
    let workers = cfg.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let (_, report) = evaluate_archives(&gt, &pred, workers)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    print!("{}", report.table());
    println!("{json}");
    if let Some(dir) = &cfg.paths.out {
        create_dir(dir)?;
        write_file(&dir.join("pq.json"), json)?;
    }
    Ok(())
}

pub fn colorize(cfg: &RunConfig, args: &ColorizeArgs) -> Result<(), CliError> {
    let out = cfg.paths.out.as_ref().ok_or_else(|| CliError::Usage("colorize needs --out FILE".into()))?;
    let bytes = fs::read(&args.input).map_err(|e| Error::Io { path: args.input.clone(), source: e })?;
    let (w, h, rgb) = read_rgb_png(&bytes)?;
    let ids: Vec<u32> = rgb.chunks_exact(3).map(|p| rgb_to_id([p[0], p[1], p[2]])).collect();
    let png = write_rgb_png(w, h, &colorize_ids(&ids, cfg.seed))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, png)?;
    Ok(())
}
