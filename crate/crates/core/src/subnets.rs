//! The four parallel per-level sub-networks (cls, reg, stuff, thing) and the
//! information flows that bridge them.
//!
//! Each stage `φ` is a 3x3 conv + ReLU. With flows enabled, every cls and
//! stuff stage `j` first adds an adapter conv `ψ` of the reg feature from the
//! same stage:
//!
//! ```text
//! reg[j]   = φ(reg[j-1])
//! cls[j]   = φ(cls[j-1]   + ψ_cls_j(reg[j]))
//! stuff[j] = φ(stuff[j-1] + ψ_stuff_j(reg[j]))
//! thing[1] = φ(P + ζ(stuff[last]) + ψ_thing(reg[last]))
//! ```
//!
//! with every chain starting from the pyramid level `P`. A disabled flow drops
//! its additive term. A flow into stage `j` only exists while the reg chain
//! has a stage `j`; thing stages after the first are plain `φ`.
//!
//! Weights are shared across pyramid levels. Entry names:
//! `subnet.{cls|reg|stuff|thing}.stage{j}.{conv|bias}` and
//! `flow.{reg_cls|reg_stuff|reg_thing|stuff_thing}.stage{j}.{conv|bias}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ParamSpec};
use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, Task, SEGMENTATION_LEVELS};
use crate::tensor::{add, conv2d, relu, ConvParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageCounts {
    pub cls: usize,
    pub reg: usize,
    pub stuff: usize,
    pub thing: usize,
}

impl Default for StageCounts {
    fn default() -> Self {
        Self { cls: 4, reg: 4, stuff: 4, thing: 1 }
    }
}

/// Which additive flows are wired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowFlags {
    pub reg_to_cls: bool,
    pub reg_to_stuff: bool,
    pub reg_to_thing: bool,
    pub stuff_to_thing: bool,
}

impl FlowFlags {
    pub const ALL: FlowFlags =
        FlowFlags { reg_to_cls: true, reg_to_stuff: true, reg_to_thing: true, stuff_to_thing: true };
    pub const NONE: FlowFlags =
        FlowFlags { reg_to_cls: false, reg_to_stuff: false, reg_to_thing: false, stuff_to_thing: false };

    /// Flow names as used on the command line and in checkpoint entries.
    pub const NAMES: [&'static str; 4] = ["reg_cls", "reg_stuff", "reg_thing", "stuff_thing"];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let flag = match name {
            "reg_cls" | "reg_to_cls" => &mut self.reg_to_cls,
            "reg_stuff" | "reg_to_stuff" => &mut self.reg_to_stuff,
            "reg_thing" | "reg_to_thing" => &mut self.reg_to_thing,
            "stuff_thing" | "stuff_to_thing" => &mut self.stuff_to_thing,
            "all" => {
                *self = if on { Self::ALL } else { Self::NONE };
                return Ok(());
            }
            other => {
                return Err(Error::invalid(
                    "flows",
                    format!("unknown flow `{other}`, expected one of {:?} or `all`", Self::NAMES),
                ))
            }
        };
        *flag = on;
        Ok(())
    }
}

impl Default for FlowFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubnetConfig {
    pub stages: StageCounts,
    pub flows: FlowFlags,
    pub channels: usize,
}

impl Default for SubnetConfig {
    fn default() -> Self {
        Self { stages: StageCounts::default(), flows: FlowFlags::ALL, channels: 256 }
    }
}

impl SubnetConfig {
    fn cls_flow_stages(&self) -> usize {
        if self.flows.reg_to_cls {
            self.stages.cls.min(self.stages.reg)
        } else {
            0
        }
    }

    fn stuff_flow_stages(&self) -> usize {
        if self.flows.reg_to_stuff {
            self.stages.stuff.min(self.stages.reg)
        } else {
            0
        }
    }

    fn thing_flows(&self) -> (bool, bool) {
        let has_thing = self.stages.thing > 0;
        (has_thing && self.flows.stuff_to_thing, has_thing && self.flows.reg_to_thing)
    }

    /// Checkpoint layout for the sub-networks and the enabled flows.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let mut specs = Vec::new();
        for (task, n) in [
            ("cls", self.stages.cls),
            ("reg", self.stages.reg),
            ("stuff", self.stages.stuff),
            ("thing", self.stages.thing),
        ] {
            for j in 1..=n {
                specs.extend(ParamSpec::conv(&format!("subnet.{task}.stage{j}"), c, c, 3));
            }
        }
        for j in 1..=self.cls_flow_stages() {
            specs.extend(ParamSpec::conv(&format!("flow.reg_cls.stage{j}"), c, c, 3));
        }
        for j in 1..=self.stuff_flow_stages() {
            specs.extend(ParamSpec::conv(&format!("flow.reg_stuff.stage{j}"), c, c, 3));
        }
        let (zeta, psi) = self.thing_flows();
        if zeta {
            specs.extend(ParamSpec::conv("flow.stuff_thing.stage1", c, c, 3));
        }
        if psi {
            specs.extend(ParamSpec::conv("flow.reg_thing.stage1", c, c, 3));
        }
        specs
    }
}

/// Entry prefixes of every flow adapter, for zeroing or inspection.
pub fn adapter_prefixes(stages: &StageCounts) -> Vec<String> {
    let mut out = Vec::new();
    for j in 1..=stages.cls.min(stages.reg) {
        out.push(format!("flow.reg_cls.stage{j}"));
    }
    for j in 1..=stages.stuff.min(stages.reg) {
        out.push(format!("flow.reg_stuff.stage{j}"));
    }
    if stages.thing > 0 {
        out.push("flow.stuff_thing.stage1".into());
        out.push("flow.reg_thing.stage1".into());
    }
    out
}

#[derive(Clone, Debug)]
pub struct SubnetWeights {
    config: SubnetConfig,
    cls: Vec<ConvParams>,
    reg: Vec<ConvParams>,
    stuff: Vec<ConvParams>,
    thing: Vec<ConvParams>,
    reg_cls: Vec<ConvParams>,
    reg_stuff: Vec<ConvParams>,
    stuff_thing: Option<ConvParams>,
    reg_thing: Option<ConvParams>,
}

impl SubnetWeights {
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &SubnetConfig) -> Result<Self> {
        let c = config.channels;
        let chain = |prefix: &str, n: usize| -> Result<Vec<ConvParams>> {
            (1..=n).map(|j| ckpt.conv(&format!("{prefix}.stage{j}"), c, c, 3)).collect()
        };
        let (zeta, psi) = config.thing_flows();
        Ok(Self {
            config: *config,
            cls: chain("subnet.cls", config.stages.cls)?,
            reg: chain("subnet.reg", config.stages.reg)?,
            stuff: chain("subnet.stuff", config.stages.stuff)?,
            thing: chain("subnet.thing", config.stages.thing)?,
            reg_cls: chain("flow.reg_cls", config.cls_flow_stages())?,
            reg_stuff: chain("flow.reg_stuff", config.stuff_flow_stages())?,
            stuff_thing: zeta.then(|| ckpt.conv("flow.stuff_thing.stage1", c, c, 3)).transpose()?,
            reg_thing: psi.then(|| ckpt.conv("flow.reg_thing.stage1", c, c, 3)).transpose()?,
        })
    }

    pub fn config(&self) -> &SubnetConfig {
        &self.config
    }
}

/// Final-stage features of each sub-network, keyed by pyramid level.
/// cls/reg cover P3..P7; stuff/thing cover P3..P5.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetFeatures {
    pub cls: BTreeMap<usize, Tensor>,
    pub reg: BTreeMap<usize, Tensor>,
    pub stuff: BTreeMap<usize, Tensor>,
    pub thing: BTreeMap<usize, Tensor>,
}

impl SubnetFeatures {
    pub fn bitwise_eq(&self, other: &SubnetFeatures) -> bool {
        let same = |a: &BTreeMap<usize, Tensor>, b: &BTreeMap<usize, Tensor>| {
            a.len() == b.len() && a.iter().zip(b).all(|((la, ta), (lb, tb))| la == lb && ta.bitwise_eq(tb))
        };
        same(&self.cls, &other.cls)
            && same(&self.reg, &other.reg)
            && same(&self.stuff, &other.stuff)
            && same(&self.thing, &other.thing)
    }

    /// All tensors with stable names such as `cls.p3`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (task, map) in [("cls", &self.cls), ("reg", &self.reg), ("stuff", &self.stuff), ("thing", &self.thing)] {
            for (level, t) in map {
                out.push((format!("{task}.p{level}"), t));
            }
        }
        out
    }
}

fn stage(x: &Tensor, phi: &ConvParams) -> Result<Tensor> {
    Ok(relu(conv2d(x, phi, 1, 1)?))
}

fn with_flow(x: &Tensor, adapter: Option<&ConvParams>, source: &Tensor) -> Result<Tensor> {
    match adapter {
        Some(psi) => add(x, &conv2d(source, psi, 1, 1)?),
        None => Ok(x.clone()),
    }
}

pub fn run_subnets(pyramid: &FeaturePyramid, weights: &SubnetWeights) -> Result<SubnetFeatures> {
    let mut out =
        SubnetFeatures { cls: BTreeMap::new(), reg: BTreeMap::new(), stuff: BTreeMap::new(), thing: BTreeMap::new() };
    let channels = weights.config.channels;

    for (level, p) in pyramid.select_levels(Task::Detection)? {
        if p.dims().channels != channels {
            return Err(Error::shape("run_subnets", format!("{channels}-channel P{level}"), p.dims()));
        }
        // reg chain; reg[j] is stage j, reg[0] the pyramid level itself
        let mut reg = vec![p.clone()];
        for phi in &weights.reg {
            let next = stage(reg.last().expect("non-empty"), phi)?;
            reg.push(next);
        }

        let mut cls = p.clone();
        for (j, phi) in weights.cls.iter().enumerate() {
            let input = with_flow(&cls, weights.reg_cls.get(j), &reg[(j + 1).min(reg.len() - 1)])?;
            cls = stage(&input, phi)?;
        }

        if SEGMENTATION_LEVELS.contains(&level) {
            let mut stuff = p.clone();
            for (j, phi) in weights.stuff.iter().enumerate() {
                let input = with_flow(&stuff, weights.reg_stuff.get(j), &reg[(j + 1).min(reg.len() - 1)])?;
                stuff = stage(&input, phi)?;
            }

            let mut thing = p.clone();
            for (j, phi) in weights.thing.iter().enumerate() {
                let input = if j == 0 {
                    let x = with_flow(p, weights.stuff_thing.as_ref(), &stuff)?;
                    with_flow(&x, weights.reg_thing.as_ref(), reg.last().expect("non-empty"))?
                } else {
                    thing
                };
                thing = stage(&input, phi)?;
            }
            out.stuff.insert(level, stuff);
            out.thing.insert(level, thing);
        }

        out.cls.insert(level, cls);
        out.reg.insert(level, reg.pop().expect("non-empty"));
    }
    Ok(out)
}

/// Total training objective: the three thing-side losses plus the
/// `lambda`-weighted stuff loss.
pub fn loss_compose(l_cls: f64, l_reg: f64, l_thing: f64, l_stuff: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("cls", l_cls), ("reg", l_reg), ("thing", l_thing), ("stuff", l_stuff), ("lambda", lambda)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid("loss_compose", format!("{name} loss must be finite and >= 0, got {v}")));
        }
    }
    Ok((l_cls + l_reg + l_thing) + lambda * l_stuff)
}

/// Stuff-loss weight that balances thing and stuff losses on COCO.
pub const DEFAULT_LAMBDA: f64 = 0.25;
