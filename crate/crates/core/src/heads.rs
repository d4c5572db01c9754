//! Output heads: box classification, box regression, the RoI thing head and
//! the multi-level stuff head.
//!
//! Entry names: `head.cls`, `head.reg`, `head.thing.conv{1..4}`,
//! `head.thing.deconv`, `head.thing.out`, `head.stuff.p{3,4,5}.block{n}`
//! (with `gn_gamma`/`gn_beta` besides `conv`/`bias`) and `head.stuff.out`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Init, ParamSpec};
use crate::detection::{BBox, Detection, ANCHORS_PER_LOCATION};
use crate::error::{Error, Result};
use crate::panoptic::LabelSpace;
use crate::pyramid::{LEVELS, SEGMENTATION_LEVELS};
use crate::subnets::SubnetFeatures;
use crate::tensor::{
    self, activate, bilinear_resize, conv2d, deconv2x, group_norm, relu, sigmoid, Activation, ConvParams, Dims, Tensor,
    GROUP_NORM_EPS,
};

/// RoI feature side fed to the thing head.
pub const ROI_SIZE: usize = 14;
/// Side of the predicted instance masks.
pub const MASK_SIZE: usize = 2 * ROI_SIZE;
/// Bilinear samples per RoI bin along each axis.
pub const ROI_SAMPLING: usize = 2;
/// Classification bias so that initial foreground probability is 0.01.
pub const CLS_PRIOR_BIAS: f32 = -4.595_12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub thing_classes: usize,
    pub stuff_classes: usize,
    /// Width of the stuff head's upsampling blocks.
    pub stuff_channels: usize,
    pub groups: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { thing_classes: 80, stuff_classes: 53, stuff_channels: 128, groups: tensor::GROUP_NORM_GROUPS }
    }
}

impl HeadConfig {
    pub fn param_specs(&self, channels: usize) -> Vec<ParamSpec> {
        let (a, k, cs) = (ANCHORS_PER_LOCATION, self.thing_classes, self.stuff_channels);
        let mut specs = Vec::new();
        specs.extend(ParamSpec::conv_with_bias("head.cls", a * k, channels, 3, CLS_PRIOR_BIAS));
        specs.extend(ParamSpec::conv("head.reg", a * 4, channels, 3));
        for i in 1..=4 {
            specs.extend(ParamSpec::conv(&format!("head.thing.conv{i}"), channels, channels, 3));
        }
        specs.extend(ParamSpec::conv("head.thing.deconv", channels, channels, 2));
        specs.extend(ParamSpec::conv("head.thing.out", k, channels, 1));
        for level in SEGMENTATION_LEVELS {
            for n in 1..=block_count(level) {
                let prefix = format!("head.stuff.p{level}.block{n}");
                let cin = if n == 1 { channels } else { cs };
                specs.extend(ParamSpec::conv(&prefix, cs, cin, 3));
                specs.push(ParamSpec { name: format!("{prefix}.gn_gamma"), dims: vec![cs], init: Init::Constant(1.0) });
                specs.push(ParamSpec { name: format!("{prefix}.gn_beta"), dims: vec![cs], init: Init::Constant(0.0) });
            }
        }
        specs.extend(ParamSpec::conv("head.stuff.out", self.stuff_classes + 1, cs, 1));
        specs
    }
}

/// Upsampling blocks needed to bring level `i` to 1/4 scale.
fn block_count(level: usize) -> usize {
    level - 2
}

#[derive(Clone, Debug)]
struct StuffBlock {
    conv: ConvParams,
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct HeadWeights {
    config: HeadConfig,
    cls: ConvParams,
    reg: ConvParams,
    thing_convs: Vec<ConvParams>,
    thing_deconv: ConvParams,
    thing_out: ConvParams,
    stuff_blocks: BTreeMap<usize, Vec<StuffBlock>>,
    stuff_out: ConvParams,
}

impl HeadWeights {
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &HeadConfig, channels: usize) -> Result<Self> {
        let (a, k, cs) = (ANCHORS_PER_LOCATION, config.thing_classes, config.stuff_channels);
        if cs % config.groups != 0 {
            return Err(Error::invalid(
                "stuff head",
                format!("{cs} channels not divisible into {} groups", config.groups),
            ));
        }
        let mut stuff_blocks = BTreeMap::new();
        for level in SEGMENTATION_LEVELS {
            let blocks = (1..=block_count(level))
                .map(|n| {
                    let prefix = format!("head.stuff.p{level}.block{n}");
                    let cin = if n == 1 { channels } else { cs };
                    Ok(StuffBlock {
                        conv: ckpt.conv(&prefix, cs, cin, 3)?,
                        gamma: ckpt.vector(&format!("{prefix}.gn_gamma"), cs)?.to_vec(),
                        beta: ckpt.vector(&format!("{prefix}.gn_beta"), cs)?.to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stuff_blocks.insert(level, blocks);
        }
        Ok(Self {
            config: *config,
            cls: ckpt.conv("head.cls", a * k, channels, 3)?,
            reg: ckpt.conv("head.reg", a * 4, channels, 3)?,
            thing_convs: (1..=4)
                .map(|i| ckpt.conv(&format!("head.thing.conv{i}"), channels, channels, 3))
                .collect::<Result<_>>()?,
            thing_deconv: ckpt.conv("head.thing.deconv", channels, channels, 2)?,
            thing_out: ckpt.conv("head.thing.out", k, channels, 1)?,
            stuff_blocks,
            stuff_out: ckpt.conv("head.stuff.out", config.stuff_classes + 1, cs, 1)?,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }
}

/// Per-level raw classification logits (`A*K` channels) and box deltas
/// (`A*4` channels). Sigmoid is applied during decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutputs {
    pub cls_logits: BTreeMap<usize, Tensor>,
    pub box_deltas: BTreeMap<usize, Tensor>,
}

pub fn run_cls_reg_heads(features: &SubnetFeatures, weights: &HeadWeights) -> Result<DetectionOutputs> {
    let mut out = DetectionOutputs { cls_logits: BTreeMap::new(), box_deltas: BTreeMap::new() };
    for level in LEVELS {
        let missing = || Error::invalid("run_cls_reg_heads", format!("features lack level P{level}"));
        let cls = features.cls.get(&level).ok_or_else(missing)?;
        let reg = features.reg.get(&level).ok_or_else(missing)?;
        out.cls_logits.insert(level, conv2d(cls, &weights.cls, 1, 1)?);
        out.box_deltas.insert(level, conv2d(reg, &weights.reg, 1, 1)?);
    }
    Ok(out)
}

/// Pyramid level a box of the given size is pooled from:
/// `clamp(floor(4 + log2(sqrt(area) / 224)), 3, 5)`.
pub fn roi_level(bbox: &BBox) -> usize {
    let side = f64::from(bbox.area()).sqrt();
    let k = (4.0 + (side / 224.0).log2()).floor();
    k.clamp(3.0, 5.0) as usize
}

fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let v = |yy: usize, xx: usize| f64::from(plane[yy * w + xx]);
    (1.0 - ly) * (1.0 - lx) * v(y0, x0)
        + (1.0 - ly) * lx * v(y0, x1)
        + ly * (1.0 - lx) * v(y1, x0)
        + ly * lx * v(y1, x1)
}

/// RoIAlign with half-pixel alignment: bins of an `out x out` grid over the
/// box (in feature coordinates `box * scale - 0.5`), each the mean of
/// `ROI_SAMPLING^2` bilinear samples. `feature` must have batch 1.
pub fn roi_align(feature: &Tensor, bbox: &BBox, scale: f64, out: usize) -> Result<Tensor> {
    let d = feature.dims();
    if d.batch != 1 {
        return Err(Error::shape("roi_align", "batch 1 feature", d));
    }
    let x0 = f64::from(bbox.x1) * scale - 0.5;
    let y0 = f64::from(bbox.y1) * scale - 0.5;
    let bin_w = (f64::from(bbox.x2) - f64::from(bbox.x1)) * scale / out as f64;
    let bin_h = (f64::from(bbox.y2) - f64::from(bbox.y1)) * scale / out as f64;
    let s = ROI_SAMPLING;
    let n = (s * s) as f64;
    let coords = |origin: f64, bin: f64| -> Vec<f64> {
        (0..out)
            .flat_map(|b| (0..s).map(move |i| origin + b as f64 * bin + (i as f64 + 0.5) * bin / s as f64))
            .collect()
    };
    let ys = coords(y0, bin_h);
    let xs = coords(x0, bin_w);
    Ok(Tensor::from_fn(Dims::new(1, d.channels, out, out), |_, c, by, bx| {
        let plane = feature.plane(0, c);
        let mut acc = 0.0;
        for &y in &ys[by * s..(by + 1) * s] {
            for &x in &xs[bx * s..(bx + 1) * s] {
                acc += sample_bilinear(plane, d.height, d.width, y, x);
            }
        }
        (acc / n) as f32
    }))
}

/// One predicted instance mask in box coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    pub bbox: BBox,
    pub category_id: u32,
    pub score: f32,
    /// `MASK_SIZE x MASK_SIZE` foreground probabilities.
    pub mask: Vec<f32>,
    /// Index of the detection this mask was predicted for.
    pub detection: usize,
}

/// A detection the thing head could not process.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedRoi {
    pub detection: usize,
    pub reason: String,
}

/// Runs the mask head on every detection box. Boxes smaller than one pixel
/// are skipped and reported.
pub fn run_thing_head(
    features: &SubnetFeatures,
    detections: &[Detection],
    labels: &LabelSpace,
    weights: &HeadWeights,
) -> Result<(Vec<RoiMask>, Vec<SkippedRoi>)> {
    let mut skipped = Vec::new();
    let mut rois = Vec::new();
    for (i, det) in detections.iter().enumerate() {
        if det.bbox.is_empty() || det.bbox.area() < 1.0 {
            skipped.push(SkippedRoi { detection: i, reason: format!("degenerate box {:?}", det.bbox.as_array()) });
            continue;
        }
        let Some(class) = labels.thing_index(det.category_id) else {
            return Err(Error::invalid(
                "run_thing_head",
                format!("detection {i} has non-thing category {}", det.category_id),
            ));
        };
        rois.push((i, class));
    }
    if rois.is_empty() {
        return Ok((Vec::new(), skipped));
    }

    let channels = weights.thing_deconv.in_channels();
    let per_roi = channels * ROI_SIZE * ROI_SIZE;
    let mut batch = Vec::with_capacity(rois.len() * per_roi);
    for &(i, _) in &rois {
        let bbox = &detections[i].bbox;
        let level = roi_level(bbox);
        let feature = features
            .thing
            .get(&level)
            .ok_or_else(|| Error::invalid("run_thing_head", format!("thing features lack level P{level}")))?;
        let crop = roi_align(feature, bbox, 1.0 / f64::from(1u32 << level), ROI_SIZE)?;
        batch.extend_from_slice(crop.data());
    }
    let mut x = Tensor::new(Dims::new(rois.len(), channels, ROI_SIZE, ROI_SIZE), batch)?;
    for conv in &weights.thing_convs {
        x = relu(conv2d(&x, conv, 1, 1)?);
    }
    x = relu(deconv2x(&x, &weights.thing_deconv)?);
    let logits = conv2d(&x, &weights.thing_out, 1, 0)?;

    let masks = rois
        .iter()
        .enumerate()
        .map(|(n, &(i, class))| {
            let det = &detections[i];
            RoiMask {
                bbox: det.bbox,
                category_id: det.category_id,
                score: det.score,
                mask: logits.plane(n, class).iter().map(|&v| sigmoid(v)).collect(),
                detection: i,
            }
        })
        .collect();
    Ok((masks, skipped))
}

/// Stuff head: per-level upsampling blocks to 1/4 scale, summed, projected
/// to `S + 1` classes, bilinearly upsampled 4x and softmaxed per pixel.
pub fn run_stuff_head(features: &SubnetFeatures, weights: &HeadWeights) -> Result<Tensor> {
    let mut merged: Option<Tensor> = None;
    for (&level, blocks) in &weights.stuff_blocks {
        let mut x = features
            .stuff
            .get(&level)
            .ok_or_else(|| Error::invalid("run_stuff_head", format!("stuff features lack level P{level}")))?
            .clone();
        for block in blocks {
            x = conv2d(&x, &block.conv, 1, 1)?;
            x = group_norm(&x, weights.config.groups, &block.gamma, &block.beta, GROUP_NORM_EPS)?;
            x = relu(x);
            let d = x.dims();
            x = bilinear_resize(&x, d.height * 2, d.width * 2, false)?;
        }
        merged = Some(match merged {
            None => x,
            Some(acc) => tensor::add_all(acc, &[&x]).map_err(|_| {
                Error::shape("run_stuff_head", "equal 1/4-scale maps", format!("P{level} upsampled to {}", x.dims()))
            })?,
        });
    }
    let merged = merged.ok_or_else(|| Error::invalid("run_stuff_head", "no stuff levels"))?;
    let logits = conv2d(&merged, &weights.stuff_out, 1, 0)?;
    let d = logits.dims();
    let full = bilinear_resize(&logits, d.height * 4, d.width * 4, false)?;
    Ok(activate(&full, Activation::SoftmaxChannel))
}
