use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::anchors::AnchorSet;
use super::layers::Conv2d;
use super::params::ParamStore;
use crate::geometry::{nms, BBox, BoxCoder, BoxDelta};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnConfig {
    pub pre_nms_train: usize,
    pub post_nms_train: usize,
    pub pre_nms_test: usize,
    pub post_nms_test: usize,
    pub nms_iou: f64,
    /// Proposals narrower or shorter than this (pixels) are discarded.
    pub min_size: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            pre_nms_train: 400,
            post_nms_train: 64,
            pre_nms_test: 300,
            post_nms_test: 48,
            nms_iou: 0.7,
            min_size: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A class-agnostic region emitted by the RPN and shared by both streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub source_level: usize,
}

/// Raw RPN outputs, flattened in anchor order.
#[derive(Debug, Clone)]
pub struct RpnOutputs {
    /// (N, A) objectness logits.
    pub objectness: Tensor,
    /// (N, A, 4) box deltas relative to the anchors.
    pub deltas: Tensor,
}

#[derive(Debug, Clone)]
pub struct RpnHead {
    conv: Conv2d,
    objectness: Conv2d,
    deltas: Conv2d,
    per_location: usize,
}

impl RpnHead {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, per_location: usize) -> Result<Self> {
        Ok(RpnHead {
            conv: Conv2d::new(ps, &format!("{prefix}.rpn.conv"), channels, channels, 3, 1)?,
            objectness: Conv2d::with_std(ps, &format!("{prefix}.rpn.objectness"), channels, per_location, 1, 0.01)?,
            deltas: Conv2d::with_std(ps, &format!("{prefix}.rpn.deltas"), channels, 4 * per_location, 1, 0.01)?,
            per_location,
        })
    }

    pub fn forward(&self, levels: &[Tensor]) -> Result<RpnOutputs> {
        let a = self.per_location;
        let mut obj = Vec::with_capacity(levels.len());
        let mut del = Vec::with_capacity(levels.len());
        for f in levels {
            let (n, _, h, w) = f.dims4()?;
            let t = self.conv.forward(f)?.relu()?;
            // (N, A, H, W) -> (N, H, W, A) so anchors vary fastest
            let o = self.objectness.forward(&t)?.permute((0, 2, 3, 1))?.reshape((n, h * w * a))?;
            let d = self
                .deltas
                .forward(&t)?
                .reshape((n, a, 4, h, w))?
                .permute((0, 3, 4, 1, 2))?
                .reshape((n, h * w * a, 4))?;
            obj.push(o);
            del.push(d);
        }
        Ok(RpnOutputs {
            objectness: Tensor::cat(&obj, 1)?,
            deltas: Tensor::cat(&del, 1)?,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes, clips, filters and suppresses proposals for every image.
/// Works on detached values, so proposals carry no gradient.
pub fn select_proposals(
    outputs: &RpnOutputs,
    anchors: &AnchorSet,
    image_size: (usize, usize),
    cfg: &RpnConfig,
    mode: Mode,
) -> Result<Vec<Vec<Proposal>>> {
    let (pre, post) = match mode {
        Mode::Train => (cfg.pre_nms_train, cfg.post_nms_train),
        Mode::Eval => (cfg.pre_nms_test, cfg.post_nms_test),
    };
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let logits: Vec<Vec<f64>> = outputs.objectness.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    let deltas: Vec<Vec<Vec<f64>>> = outputs.deltas.to_dtype(candle_core::DType::F64)?.to_vec3()?;
    let mut all = Vec::with_capacity(logits.len());
    for (img_logits, img_deltas) in logits.iter().zip(&deltas) {
        let mut order: Vec<usize> = (0..img_logits.len()).collect();
        order.sort_by(|&a, &b| img_logits[b].total_cmp(&img_logits[a]).then(a.cmp(&b)));
        let mut cands: Vec<(BBox, f64)> = Vec::new();
        let mut levels = Vec::new();
        for &i in order.iter() {
            if cands.len() >= pre {
                break;
            }
            let d = &img_deltas[i];
            let bx = BoxCoder::UNIT
                .decode(&BoxDelta::from_array([d[0], d[1], d[2], d[3]]), &anchors.boxes[i])
                .clip(w, h);
            if !bx.is_valid() || bx.width() < cfg.min_size || bx.height() < cfg.min_size {
                continue;
            }
            cands.push((bx, sigmoid(img_logits[i])));
            levels.push(anchors.level[i]);
        }
        let keep = nms(&cands, cfg.nms_iou);
        let props = keep
            .into_iter()
            .take(post)
            .map(|k| Proposal {
                bbox: cands[k].0,
                objectness: cands[k].1,
                source_level: levels[k],
            })
            .collect();
        all.push(props);
    }
    Ok(all)
}
