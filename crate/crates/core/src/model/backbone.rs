//! Small residual backbone with a feature pyramid on top.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::params::ParamStore;
use crate::{Error, Result};

/// Stage `i` (1-based) runs at stride `2^i`; pyramid level `l` is the FPN
/// output built on stage `l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub levels: Vec<usize>,
    pub fpn_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![16, 24, 32, 48],
            blocks: vec![1, 1, 1, 1],
            levels: vec![3, 4],
            fpn_channels: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.blocks.len() || self.widths.is_empty() {
            return Err(Error::Config("backbone widths and blocks must have equal, nonzero length".into()));
        }
        if self.levels.len() < 2 {
            return Err(Error::Config("backbone needs at least 2 pyramid levels".into()));
        }
        if self.levels.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config("pyramid levels must be consecutive and increasing".into()));
        }
        if self.levels[0] < 1 || *self.levels.last().unwrap() > self.widths.len() {
            return Err(Error::Config(format!(
                "pyramid levels {:?} outside stages 1..={}",
                self.levels,
                self.widths.len()
            )));
        }
        if self.blocks.iter().any(|&b| b == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("every stage needs at least one block and channel".into()));
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|&l| 1 << l).collect()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(Conv2d::new(ps, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride)?)
        } else {
            None
        };
        Ok(ResBlock {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), in_ch, out_ch, 3, stride)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), out_ch, out_ch, 3, 1)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Backbone plus FPN for one stream.
#[derive(Debug, Clone)]
pub struct PyramidBackbone {
    stages: Vec<Vec<ResBlock>>,
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
    levels: Vec<usize>,
}

impl PyramidBackbone {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, (&w, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.backbone.stage{}.block{b}", i + 1);
                blocks.push(ResBlock::new(ps, &name, in_ch, w, stride)?);
                in_ch = w;
            }
            stages.push(blocks);
        }
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for &l in &cfg.levels {
            let c = cfg.widths[l - 1];
            lateral.push(Conv2d::new(ps, &format!("{prefix}.fpn.lateral{l}"), c, cfg.fpn_channels, 1, 1)?);
            output.push(Conv2d::new(
                ps,
                &format!("{prefix}.fpn.output{l}"),
                cfg.fpn_channels,
                cfg.fpn_channels,
                3,
                1,
            )?);
        }
        Ok(PyramidBackbone {
            stages,
            lateral,
            output,
            levels: cfg.levels.clone(),
        })
    }

    /// Returns one feature map per pyramid level, finest first.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = images.clone();
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(&x)?;
            }
            stage_out.push(x.clone());
        }
        let n = self.levels.len();
        let mut merged: Vec<Option<Tensor>> = vec![None; n];
        let mut top: Option<Tensor> = None;
        for i in (0..n).rev() {
            let c = &stage_out[self.levels[i] - 1];
            let mut lat = self.lateral[i].forward(c)?;
            if let Some(t) = &top {
                let (_, _, h, w) = lat.dims4()?;
                lat = (lat + t.upsample_nearest2d(h, w)?)?;
            }
            top = Some(lat.clone());
            merged[i] = Some(lat);
        }
        merged
            .into_iter()
            .zip(&self.output)
            .map(|(m, conv)| conv.forward(&m.expect("every level merged")))
            .collect()
    }
}
