//! The full network: pyramid, sub-networks, heads and detection decoding.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{seeded_uniform, Checkpoint, ParamSpec};
use crate::detection::{
    decode_boxes, generate_anchors, nms_per_class, select_candidates, Detection, ANCHORS_PER_LOCATION, KEEP_TOP,
    NMS_IOU, PRE_NMS_TOP_K, SCORE_THRESH,
};
use crate::error::{Error, Result};
use crate::heads::{
    run_cls_reg_heads, run_stuff_head, run_thing_head, DetectionOutputs, HeadConfig, HeadWeights, RoiMask, SkippedRoi,
};
use crate::panoptic::LabelSpace;
use crate::pyramid::{self, build_pyramid, BackboneWeights, FeaturePyramid};
use crate::subnets::{run_subnets, SubnetConfig, SubnetFeatures, SubnetWeights};
use crate::tensor::{sigmoid, Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub score_thresh: f32,
    pub pre_nms_top_k: usize,
    pub nms_iou: f32,
    pub keep_top: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { score_thresh: SCORE_THRESH, pre_nms_top_k: PRE_NMS_TOP_K, nms_iou: NMS_IOU, keep_top: KEEP_TOP }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("detection config", "thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub subnet: SubnetConfig,
    pub heads: HeadConfig,
    pub detection: DetectionConfig,
}

impl ModelConfig {
    /// Every checkpoint entry the model reads.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.subnet.channels;
        let mut specs = pyramid::param_specs(c);
        specs.extend(self.subnet.param_specs());
        specs.extend(self.heads.param_specs(c));
        specs
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace::contiguous(self.heads.thing_classes, self.heads.stuff_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subnet.channels == 0 || self.heads.thing_classes == 0 || self.heads.groups == 0 {
            return Err(Error::invalid("model config", "channels, thing classes and groups must be positive"));
        }
        self.detection.validate()
    }
}

/// Deterministic 1x3xHxW image with values in [0, 1).
pub fn seeded_image(seed: u64, height: usize, width: usize) -> Result<Tensor> {
    let dims = Dims::new(1, 3, height, width);
    Tensor::new(dims, seeded_uniform(seed, "input.image", dims.numel(), 0.0, 1.0))
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    labels: LabelSpace,
    backbone: BackboneWeights,
    subnets: SubnetWeights,
    heads: HeadWeights,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub features: SubnetFeatures,
    pub heads: DetectionOutputs,
    /// `1 x (S+1) x H x W` per-pixel class probabilities.
    pub stuff_probs: Tensor,
    pub detections: Vec<Detection>,
    /// One entry per processed detection, in detection order.
    pub masks: Vec<RoiMask>,
    pub skipped: Vec<SkippedRoi>,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.subnet.channels;
        Ok(Self {
            config: *config,
            labels: config.labels(),
            backbone: BackboneWeights::from_checkpoint(ckpt, c)?,
            subnets: SubnetWeights::from_checkpoint(ckpt, &config.subnet)?,
            heads: HeadWeights::from_checkpoint(ckpt, &config.heads, c)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    /// Runs the whole network on a single `1x3xHxW` image.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let d = image.dims();
        if d.batch != 1 {
            return Err(Error::shape("forward", "batch of 1", d));
        }
        let pyramid = build_pyramid(image, &self.backbone)?;
        let features = run_subnets(&pyramid, &self.subnets)?;
        let heads = run_cls_reg_heads(&features, &self.heads)?;
        let stuff_probs = run_stuff_head(&features, &self.heads)?;
        let detections = decode_detections(&heads, &self.labels, &self.config.detection, d.width, d.height)?;
        let (masks, skipped) = run_thing_head(&features, &detections, &self.labels, &self.heads)?;
        Ok(ForwardOutput { pyramid, features, heads, stuff_probs, detections, masks, skipped })
    }
}

/// Sigmoid scores, anchor decoding, per-level candidate selection and
/// per-class NMS over all levels.
pub fn decode_detections(
    outputs: &DetectionOutputs,
    labels: &LabelSpace,
    config: &DetectionConfig,
    width: usize,
    height: usize,
) -> Result<Vec<Detection>> {
    let k = labels.things.len();
    let a = ANCHORS_PER_LOCATION;
    let mut candidates = Vec::new();
    for (&level, logits) in &outputs.cls_logits {
        let deltas = outputs
            .box_deltas
            .get(&level)
            .ok_or_else(|| Error::invalid("decode_detections", format!("no box deltas for P{level}")))?;
        let (ld, dd) = (logits.dims(), deltas.dims());
        if ld.batch != 1
            || ld.channels != a * k
            || dd.channels != a * 4
            || (ld.height, ld.width) != (dd.height, dd.width)
        {
            return Err(Error::shape(
                "decode_detections",
                format!("1x{}xHxW logits and 1x{}xHxW deltas", a * k, a * 4),
                format!("{ld} and {dd}"),
            ));
        }
        let (h, w) = (ld.height, ld.width);
        let anchors = generate_anchors(level, h, w)?;
        // channel-major head outputs to anchor-major vectors
        let mut scores = vec![0.0f32; anchors.len() * k];
        let mut flat_deltas = vec![0.0f32; anchors.len() * 4];
        for y in 0..h {
            for x in 0..w {
                for ai in 0..a {
                    let anchor = (y * w + x) * a + ai;
                    for ki in 0..k {
                        scores[anchor * k + ki] = sigmoid(logits.at(0, ai * k + ki, y, x));
                    }
                    for j in 0..4 {
                        flat_deltas[anchor * 4 + j] = deltas.at(0, ai * 4 + j, y, x);
                    }
                }
            }
        }
        let boxes = decode_boxes(&anchors, &flat_deltas, width, height)?;
        candidates.extend(select_candidates(
            &scores,
            &boxes,
            &labels.things,
            config.score_thresh,
            config.pre_nms_top_k,
        )?);
    }
    Ok(nms_per_class(&candidates, config.nms_iou, config.keep_top))
}

/// Forward pass summary lines: `name shape mean max` per tensor.
pub fn tensor_report(out: &ForwardOutput) -> Vec<(String, Dims, f64, f32)> {
    let mut rows: Vec<(String, &Tensor)> = out.pyramid.levels().map(|(l, t)| (format!("P{l}"), t)).collect();
    rows.extend(out.features.named());
    for (level, t) in &out.heads.cls_logits {
        rows.push((format!("head.cls.p{level}"), t));
    }
    for (level, t) in &out.heads.box_deltas {
        rows.push((format!("head.reg.p{level}"), t));
    }
    rows.push(("head.stuff.probs".into(), &out.stuff_probs));
    rows.into_iter().map(|(n, t)| (n, t.dims(), t.mean(), t.max_value())).collect()
}
