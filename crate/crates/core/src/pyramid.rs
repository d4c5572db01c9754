//! Toy bottom-up stem plus FPN top-down pathway producing levels P3..P7.
//!
//! Stem (every layer 3x3 conv + ReLU, padding 1):
//!
//! | entry            | in  | out | stride | output scale |
//! |------------------|-----|-----|--------|--------------|
//! | `backbone.stem1` | 3   | 32  | 2      | 1/2          |
//! | `backbone.stem2` | 32  | 64  | 2      | 1/4          |
//! | `backbone.stem3` | 64  | 64  | 1      | 1/4          |
//! | `backbone.stem4` | 64  | 128 | 2      | 1/8          |
//! | `backbone.stem5` | 128 | 128 | 1      | 1/8 (C3)     |
//! | `backbone.stem6` | 128 | 256 | 2      | 1/16 (C4)    |
//! | `backbone.stem7` | 256 | 256 | 2      | 1/32         |
//! | `backbone.stem8` | 256 | 256 | 1      | 1/32 (C5)    |
//!
//! FPN: `fpn.lateral{3,4,5}` are 1x1 convs to the pyramid width, merged
//! top-down with nearest 2x upsampling, then smoothed by `fpn.smooth{3,4,5}`
//! (3x3). `fpn.p6` is a stride-2 3x3 conv on P5 and `fpn.p7` a stride-2 3x3
//! conv on `relu(P6)`.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, relu, ConvParams, Tensor};

/// Pyramid levels in order; level `i` has stride `2^i`.
pub const LEVELS: [usize; 5] = [3, 4, 5, 6, 7];
/// Levels fed to the thing and stuff branches.
pub const SEGMENTATION_LEVELS: [usize; 3] = [3, 4, 5];
/// Input sides must be a multiple of the coarsest stride.
pub const SIZE_DIVISOR: usize = 128;

const STEM: [(usize, usize, usize); 8] =
    [(3, 32, 2), (32, 64, 2), (64, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 2), (256, 256, 1)];
/// Stem layer index (1-based) whose output is C3, C4, C5.
const TAPS: [usize; 3] = [5, 6, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Detection,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: BTreeMap<usize, Tensor>,
}

impl FeaturePyramid {
    pub fn from_levels(levels: BTreeMap<usize, Tensor>) -> Self {
        Self { levels }
    }

    pub fn level(&self, i: usize) -> Result<&Tensor> {
        self.levels.get(&i).ok_or_else(|| Error::invalid("pyramid", format!("level P{i} is not present")))
    }

    pub fn levels(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.levels.iter().map(|(&i, t)| (i, t))
    }

    pub fn select_levels(&self, task: Task) -> Result<Vec<(usize, &Tensor)>> {
        let wanted: &[usize] = match task {
            Task::Detection => &LEVELS,
            Task::Segmentation => &SEGMENTATION_LEVELS,
        };
        wanted.iter().map(|&i| Ok((i, self.level(i)?))).collect()
    }
}

/// Parameter layout of the stem and FPN for pyramid width `channels`.
pub fn param_specs(channels: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (i, &(cin, cout, _)) in STEM.iter().enumerate() {
        specs.extend(ParamSpec::conv(&format!("backbone.stem{}", i + 1), cout, cin, 3));
    }
    for (level, &tap) in SEGMENTATION_LEVELS.iter().zip(&TAPS) {
        let cin = STEM[tap - 1].1;
        specs.extend(ParamSpec::conv(&format!("fpn.lateral{level}"), channels, cin, 1));
    }
    for level in SEGMENTATION_LEVELS {
        specs.extend(ParamSpec::conv(&format!("fpn.smooth{level}"), channels, channels, 3));
    }
    specs.extend(ParamSpec::conv("fpn.p6", channels, channels, 3));
    specs.extend(ParamSpec::conv("fpn.p7", channels, channels, 3));
    specs
}

#[derive(Clone, Debug)]
pub struct BackboneWeights {
    stem: Vec<ConvParams>,
    lateral: [ConvParams; 3],
    smooth: [ConvParams; 3],
    p6: ConvParams,
    p7: ConvParams,
}

impl BackboneWeights {
    pub fn from_checkpoint(ckpt: &Checkpoint, channels: usize) -> Result<Self> {
        let stem = STEM
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, _))| ckpt.conv(&format!("backbone.stem{}", i + 1), cout, cin, 3))
            .collect::<Result<Vec<_>>>()?;
        let lat = |level: usize, tap: usize| ckpt.conv(&format!("fpn.lateral{level}"), channels, STEM[tap - 1].1, 1);
        let smooth = |level: usize| ckpt.conv(&format!("fpn.smooth{level}"), channels, channels, 3);
        Ok(Self {
            stem,
            lateral: [lat(3, TAPS[0])?, lat(4, TAPS[1])?, lat(5, TAPS[2])?],
            smooth: [smooth(3)?, smooth(4)?, smooth(5)?],
            p6: ckpt.conv("fpn.p6", channels, channels, 3)?,
            p7: ckpt.conv("fpn.p7", channels, channels, 3)?,
        })
    }
}

/// Checks that an `h x w` input yields exact level shapes.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_DIVISOR) || !w.is_multiple_of(SIZE_DIVISOR) {
        return Err(Error::invalid(
            "build_pyramid",
            format!("input {h}x{w} is not a multiple of {SIZE_DIVISOR}; pad the image to the next multiple of {SIZE_DIVISOR} on each side"),
        ));
    }
    Ok(())
}

pub fn build_pyramid(image: &Tensor, weights: &BackboneWeights) -> Result<FeaturePyramid> {
    let d = image.dims();
    if d.channels != 3 {
        return Err(Error::shape("build_pyramid", "3-channel image", d));
    }
    check_input_size(d.height, d.width)?;

    let mut x = image.clone();
    let mut taps = Vec::with_capacity(3);
    for (i, (params, &(_, _, stride))) in weights.stem.iter().zip(&STEM).enumerate() {
        x = relu(conv2d(&x, params, stride, 1)?);
        if TAPS.contains(&(i + 1)) {
            taps.push(x.clone());
        }
    }

    let l5 = conv2d(&taps[2], &weights.lateral[2], 1, 0)?;
    let l4 = conv2d(&taps[1], &weights.lateral[1], 1, 0)?;
    let l3 = conv2d(&taps[0], &weights.lateral[0], 1, 0)?;
    let m5 = l5;
    let m4 = tensor::add(&l4, &tensor::upsample_nearest2x(&m5))?;
    let m3 = tensor::add(&l3, &tensor::upsample_nearest2x(&m4))?;

    let p3 = conv2d(&m3, &weights.smooth[0], 1, 1)?;
    let p4 = conv2d(&m4, &weights.smooth[1], 1, 1)?;
    let p5 = conv2d(&m5, &weights.smooth[2], 1, 1)?;
    let p6 = conv2d(&p5, &weights.p6, 2, 1)?;
    let p7 = conv2d(&relu(p6.clone()), &weights.p7, 2, 1)?;

    Ok(FeaturePyramid { levels: BTreeMap::from([(3, p3), (4, p4), (5, p5), (6, p6), (7, p7)]) })
}
