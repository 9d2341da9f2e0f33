//! The detection network and its stream-wiring variants.
//!
//! Every variant shares the same object pipeline: a pyramid backbone, an RPN
//! over its levels, RoI align, a two-layer box head, a category classifier
//! (with a background class) and class-wise box regression. The variants
//! differ in where the attribute (color / material) classifiers get their
//! input from:
//!
//! | variant | attribute input |
//! |---|---|
//! | `SingleStream` | the object box-head features |
//! | `SingleStreamDetectionOnly` | no attribute heads |
//! | `PaSce`, `PaUce` | object features ⊕ embedding of the object label, then a linear layer |
//! | `TwoStream` | features from a second, independent backbone + box head |
//! | `TwoStreamCrossLink` | second-stream features ⊕ a stop-gradient copy of the object features |
//! | `TwoStreamLfe` | both streams concatenated and fed to *every* classifier |
//!
//! In the two-stream variants the RPN belongs to the object stream and its
//! proposals are plain boxes handed to both RoI extractors, so no gradient
//! flows between the streams through proposal selection.

pub mod anchors;
pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod params;
pub mod roi_align;
pub mod rpn;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datamodel::{argmax, Detection, Vocabulary};
use crate::geometry::{nms, BBox, BoxCoder, BoxDelta};
use crate::{Error, Result};

use anchors::{generate_anchors, AnchorConfig, AnchorSet};
use backbone::{BackboneConfig, PyramidBackbone};
use layers::{softmax_rows, Embedding, Linear};
use params::ParamStore;
use roi_align::{pool_pyramid, RoiAlignConfig};
use rpn::{select_proposals, Mode, Proposal, RpnConfig, RpnHead, RpnOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ModelVariant {
    SingleStream,
    SingleStreamDetectionOnly,
    PaSce,
    PaUce,
    TwoStream,
    TwoStreamCrossLink,
    TwoStreamLfe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributeLossKind {
    /// Two independent softmax cross-entropies (color, material).
    Separated,
    /// One softmax over the concatenated color and material classes.
    Unified,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::PaSce,
        ModelVariant::PaUce,
        ModelVariant::SingleStream,
        ModelVariant::SingleStreamDetectionOnly,
        ModelVariant::TwoStream,
        ModelVariant::TwoStreamCrossLink,
        ModelVariant::TwoStreamLfe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::SingleStream => "single-stream",
            ModelVariant::SingleStreamDetectionOnly => "single-stream-detection-only",
            ModelVariant::PaSce => "pa-sce",
            ModelVariant::PaUce => "pa-uce",
            ModelVariant::TwoStream => "two-stream",
            ModelVariant::TwoStreamCrossLink => "two-stream-cross-link",
            ModelVariant::TwoStreamLfe => "two-stream-lfe",
        }
    }

    /// Row label used in result tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            ModelVariant::SingleStream => "Single-Stream (SS)",
            ModelVariant::SingleStreamDetectionOnly => "SS Detection Only",
            ModelVariant::PaSce => "PA + SCE",
            ModelVariant::PaUce => "PA + UCE",
            ModelVariant::TwoStream => "Two-Stream (TS)",
            ModelVariant::TwoStreamCrossLink => "TS + Cross Link",
            ModelVariant::TwoStreamLfe => "TS + LFE",
        }
    }

    pub fn is_two_stream(&self) -> bool {
        matches!(
            self,
            ModelVariant::TwoStream | ModelVariant::TwoStreamCrossLink | ModelVariant::TwoStreamLfe
        )
    }

    pub fn has_attributes(&self) -> bool {
        *self != ModelVariant::SingleStreamDetectionOnly
    }

    pub fn uses_label_embedding(&self) -> bool {
        matches!(self, ModelVariant::PaSce | ModelVariant::PaUce)
    }

    pub fn attribute_loss(&self) -> Option<AttributeLossKind> {
        match self {
            ModelVariant::SingleStreamDetectionOnly => None,
            ModelVariant::PaUce => Some(AttributeLossKind::Unified),
            _ => Some(AttributeLossKind::Separated),
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    /// Accepts the kebab-case names plus loose spellings such as
    /// `TwoStreamCrossLink`, `PA+SCE` or `TS + LFE`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let v = match key.as_str() {
            "singlestream" | "ss" => ModelVariant::SingleStream,
            "singlestreamdetectiononly" | "ssdetectiononly" | "detectiononly" => {
                ModelVariant::SingleStreamDetectionOnly
            }
            "pasce" => ModelVariant::PaSce,
            "pauce" => ModelVariant::PaUce,
            "twostream" | "ts" => ModelVariant::TwoStream,
            "twostreamcrosslink" | "tscrosslink" | "crosslink" => ModelVariant::TwoStreamCrossLink,
            "twostreamlfe" | "tslfe" | "lfe" => ModelVariant::TwoStreamLfe,
            _ => {
                return Err(Error::UnknownVariant {
                    name: s.to_string(),
                    valid: Self::valid_names(),
                })
            }
        };
        Ok(v)
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.name().to_string()
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Which attribute predictors receive the cross-link features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossLinkTarget {
    Both,
    MaterialOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub box_weights: [f64; 4],
    pub cross_link: CrossLinkTarget,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 128,
            embed_dim: 32,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            cross_link: CrossLinkTarget::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub roi: RoiAlignConfig,
    pub head: HeadConfig,
}

/// Per-channel image normalization, `(pixel / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Mean and standard deviation over every pixel of `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n);
        let mut std = [0f64; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(1e-6).sqrt();
        }
        Normalization { mean, std }
    }

    /// CHW float buffer.
    pub fn apply(&self, img: &RgbImage, flip: bool) -> Vec<f32> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let p = img.get_pixel(sx as u32, y as u32).0;
                for c in 0..3 {
                    out[c * h * w + y * w + x] = ((p[c] as f64 / 255.0 - self.mean[c]) / self.std[c]) as f32;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Object,
    Attribute,
}

/// Pooled RoI features of one stream, one row per RoI.
#[derive(Debug, Clone)]
pub struct StreamFeatures {
    pub stream: StreamTag,
    pub features: Tensor,
}

/// Pyramid features of both streams for a batch.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    pub object: Vec<Tensor>,
    pub attribute: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// (R, C + 1); column 0 is background.
    pub cls_logits: Tensor,
    /// (R, 4 C): one delta set per foreground class.
    pub box_deltas: Tensor,
    pub color_logits: Option<Tensor>,
    pub material_logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct FcStack {
    fc1: Linear,
    fc2: Linear,
}

impl FcStack {
    fn new(ps: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(FcStack {
            fc1: Linear::new(ps, &format!("{prefix}.box_head.fc1"), in_dim, hidden)?,
            fc2: Linear::new(ps, &format!("{prefix}.box_head.fc2"), hidden, hidden)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.relu()?;
        Ok(self.fc2.forward(&h)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct AttributeStream {
    backbone: PyramidBackbone,
    head: FcStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// A built detector. Owns its parameters; cloning shares them.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: ModelVariant,
    pub vocabulary: Vocabulary,
    pub config: ModelConfig,
    pub normalization: Normalization,
    params: ParamStore,
    object_backbone: PyramidBackbone,
    rpn: RpnHead,
    object_head: FcStack,
    cls: Linear,
    bbox: Linear,
    attribute: Option<AttributeStream>,
    embed: Option<Embedding>,
    embed_fc: Option<Linear>,
    color: Option<Linear>,
    material: Option<Linear>,
}

/// Builds a model in f32 with parameters initialized from `seed`.
pub fn build_model(variant: ModelVariant, vocabulary: &Vocabulary, config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(variant, vocabulary, config, seed, DType::F32)
}

impl Model {
    pub fn build(
        variant: ModelVariant,
        vocabulary: &Vocabulary,
        config: &ModelConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Model> {
        vocabulary.validate()?;
        config.backbone.validate()?;
        config.anchors.validate(config.backbone.levels.len())?;
        let mut ps = ParamStore::new(seed, dtype);
        let fpn = config.backbone.fpn_channels;
        let pooled_dim = fpn * config.roi.output_size * config.roi.output_size;
        let hidden = config.head.hidden;
        let n_cat = vocabulary.num_categories();

        let object_backbone = PyramidBackbone::new(&mut ps, "object", &config.backbone)?;
        let rpn = RpnHead::new(&mut ps, "object", fpn, config.anchors.per_location())?;
        let object_head = FcStack::new(&mut ps, "object", pooled_dim, hidden)?;

        let attribute = if variant.is_two_stream() {
            Some(AttributeStream {
                backbone: PyramidBackbone::new(&mut ps, "attribute", &config.backbone)?,
                head: FcStack::new(&mut ps, "attribute", pooled_dim, hidden)?,
            })
        } else {
            None
        };

        let cls_in = if variant == ModelVariant::TwoStreamLfe { 2 * hidden } else { hidden };
        let cls = Linear::with_init(&mut ps, "object.cls", cls_in, n_cat + 1, params::Init::Normal(0.01))?;
        let bbox = Linear::with_init(&mut ps, "object.bbox", cls_in, 4 * n_cat, params::Init::Normal(0.001))?;

        let (mut embed, mut embed_fc) = (None, None);
        if variant.uses_label_embedding() {
            embed = Some(Embedding::new(&mut ps, "attribute.embed", n_cat + 1, config.head.embed_dim)?);
            embed_fc = Some(Linear::new(&mut ps, "attribute.embed_fc", hidden + config.head.embed_dim, hidden)?);
        }
        let (color_in, material_in) = match variant {
            ModelVariant::TwoStreamLfe => (2 * hidden, 2 * hidden),
            ModelVariant::TwoStreamCrossLink => match config.head.cross_link {
                CrossLinkTarget::Both => (2 * hidden, 2 * hidden),
                CrossLinkTarget::MaterialOnly => (hidden, 2 * hidden),
            },
            _ => (hidden, hidden),
        };
        let mut color = None;
        let mut material = None;
        if variant.has_attributes() {
            if vocabulary.num_colors() > 0 {
                color = Some(Linear::with_init(
                    &mut ps,
                    "attribute.color",
                    color_in,
                    vocabulary.num_colors(),
                    params::Init::Normal(0.01),
                )?);
            }
            if vocabulary.num_materials() > 0 {
                material = Some(Linear::with_init(
                    &mut ps,
                    "attribute.material",
                    material_in,
                    vocabulary.num_materials(),
                    params::Init::Normal(0.01),
                )?);
            }
        }

        Ok(Model {
            variant,
            vocabulary: vocabulary.clone(),
            config: config.clone(),
            normalization: Normalization::default(),
            params: ps,
            object_backbone,
            rpn,
            object_head,
            cls,
            bbox,
            attribute,
            embed,
            embed_fc,
            color,
            material,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn num_backbones(&self) -> usize {
        1 + self.attribute.is_some() as usize
    }

    pub fn embedding_rows(&self) -> Option<usize> {
        self.embed.as_ref().map(Embedding::rows)
    }

    pub fn has_color_head(&self) -> bool {
        self.color.is_some()
    }

    pub fn has_material_head(&self) -> bool {
        self.material.is_some()
    }

    /// Parameter counts per component (`object.backbone`, `attribute.fpn`, ...).
    pub fn parameter_report(&self) -> BTreeMap<String, usize> {
        self.params.component_counts()
    }

    /// Names of parameters owned by the object stream.
    pub fn object_stream_params(&self) -> Vec<String> {
        self.params.with_prefix("object.").map(|(k, _)| k.clone()).collect()
    }

    /// Names of parameters owned by the attribute stream and heads.
    pub fn attribute_stream_params(&self) -> Vec<String> {
        self.params.with_prefix("attribute.").map(|(k, _)| k.clone()).collect()
    }

    pub fn box_coder(&self) -> BoxCoder {
        BoxCoder {
            weights: self.config.head.box_weights,
        }
    }

    pub fn anchors(&self, height: usize, width: usize) -> AnchorSet {
        generate_anchors(&self.config.anchors, &self.config.backbone.levels, height, width)
    }

    /// Normalized (N, 3, H, W) batch; all images must share one size.
    pub fn images_to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let (w, h) = images
            .first()
            .map(|i| (i.width() as usize, i.height() as usize))
            .ok_or_else(|| Error::Config("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.width() as usize, img.height() as usize) != (w, h) {
                return Err(Error::Config("images in one batch must share a size".into()));
            }
            data.extend(self.normalization.apply(img, false));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), self.device())?.to_dtype(self.dtype())?)
    }

    pub fn backbone_features(&self, images: &Tensor) -> Result<BackboneFeatures> {
        let object = self.object_backbone.forward(images)?;
        let attribute = match &self.attribute {
            Some(a) => Some(a.backbone.forward(images)?),
            None => None,
        };
        Ok(BackboneFeatures { object, attribute })
    }

    pub fn rpn_outputs(&self, features: &BackboneFeatures) -> Result<RpnOutputs> {
        self.rpn.forward(&features.object)
    }

    /// Runs both backbones and the RPN; proposals are sorted by objectness.
    pub fn forward_rpn(&self, images: &Tensor, mode: Mode) -> Result<(Vec<Vec<Proposal>>, RpnOutputs, BackboneFeatures)> {
        let (_, _, h, w) = images.dims4()?;
        let features = self.backbone_features(images)?;
        let raw = self.rpn_outputs(&features)?;
        let anchors = self.anchors(h, w);
        let proposals = select_proposals(&raw, &anchors, (h, w), &self.config.rpn, mode)?;
        Ok((proposals, raw, features))
    }

    /// Pools one vector per RoI from a stream's pyramid.
    pub fn extract_roi_features(
        &self,
        levels: &[Tensor],
        stream: StreamTag,
        rois: &[(usize, BBox)],
    ) -> Result<StreamFeatures> {
        let features = pool_pyramid(levels, &self.config.backbone.levels, rois, &self.config.roi)?;
        Ok(StreamFeatures { stream, features })
    }

    /// Pools RoIs from every stream the variant has.
    pub fn pool_streams(
        &self,
        features: &BackboneFeatures,
        rois: &[(usize, BBox)],
    ) -> Result<(StreamFeatures, Option<StreamFeatures>)> {
        let obj = self.extract_roi_features(&features.object, StreamTag::Object, rois)?;
        let attr = match &features.attribute {
            Some(levels) => Some(self.extract_roi_features(levels, StreamTag::Attribute, rois)?),
            None => None,
        };
        Ok((obj, attr))
    }

    fn object_part(&self, object: &StreamFeatures, attribute: Option<&StreamFeatures>) -> Result<(Tensor, Option<Tensor>, Tensor, Tensor)> {
        let h_obj = self.object_head.forward(&object.features)?;
        let h_attr = match (&self.attribute, attribute) {
            (Some(stream), Some(a)) => Some(stream.head.forward(&a.features)?),
            (Some(_), None) => {
                return Err(Error::WrongVariant {
                    variant: self.variant.to_string(),
                    reason: "two-stream heads need attribute-stream features".into(),
                })
            }
            (None, _) => None,
        };
        let cls_input = match (self.variant, &h_attr) {
            (ModelVariant::TwoStreamLfe, Some(ha)) => Tensor::cat(&[&h_obj, ha], 1)?,
            _ => h_obj.clone(),
        };
        let cls = self.cls.forward(&cls_input)?;
        let bbox = self.bbox.forward(&cls_input)?;
        Ok((h_obj, h_attr, cls, bbox))
    }

    fn attribute_part(
        &self,
        h_obj: &Tensor,
        h_attr: Option<&Tensor>,
        categories: Option<&[usize]>,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        if !self.variant.has_attributes() {
            return Ok((None, None));
        }
        let (color_in, material_in) = match self.variant {
            ModelVariant::SingleStream => (h_obj.clone(), h_obj.clone()),
            ModelVariant::PaSce | ModelVariant::PaUce => {
                let cats = categories.ok_or_else(|| Error::MissingCategories {
                    variant: self.variant.to_string(),
                })?;
                if cats.len() != h_obj.dims2()?.0 {
                    return Err(Error::Config(format!(
                        "{} category labels for {} RoIs",
                        cats.len(),
                        h_obj.dims2()?.0
                    )));
                }
                let embed = self.embed.as_ref().expect("PA variants build an embedding");
                if let Some(&bad) = cats.iter().find(|&&c| c >= embed.rows()) {
                    return Err(Error::LabelOutOfRange {
                        what: "category",
                        label: bad,
                        classes: embed.rows(),
                    });
                }
                let e = embed.forward(cats)?;
                let joined = Tensor::cat(&[h_obj, &e], 1)?;
                let a = self.embed_fc.as_ref().expect("PA variants build embed_fc").forward(&joined)?.relu()?;
                (a.clone(), a)
            }
            ModelVariant::TwoStream => {
                let ha = h_attr.expect("two-stream has attribute features");
                (ha.clone(), ha.clone())
            }
            ModelVariant::TwoStreamCrossLink => {
                let ha = h_attr.expect("two-stream has attribute features");
                // stop-gradient at the concatenation point
                let linked = Tensor::cat(&[ha, &h_obj.detach()], 1)?;
                match self.config.head.cross_link {
                    CrossLinkTarget::Both => (linked.clone(), linked),
                    CrossLinkTarget::MaterialOnly => (ha.clone(), linked),
                }
            }
            ModelVariant::TwoStreamLfe => {
                let ha = h_attr.expect("two-stream has attribute features");
                let shared = Tensor::cat(&[h_obj, ha], 1)?;
                (shared.clone(), shared)
            }
            ModelVariant::SingleStreamDetectionOnly => unreachable!("handled above"),
        };
        let color = self.color.as_ref().map(|l| l.forward(&color_in)).transpose()?;
        let material = self.material.as_ref().map(|l| l.forward(&material_in)).transpose()?;
        Ok((color, material))
    }

    /// Classifier outputs for pooled RoI features.
    ///
    /// Single-stream variants ignore `attribute`. PA variants need a category
    /// label per RoI (`0` is background) for the embedding path.
    pub fn forward_heads(
        &self,
        object: &StreamFeatures,
        attribute: Option<&StreamFeatures>,
        categories: Option<&[usize]>,
    ) -> Result<HeadOutputs> {
        let (h_obj, h_attr, cls, bbox) = self.object_part(object, attribute)?;
        let (color, material) = self.attribute_part(&h_obj, h_attr.as_ref(), categories)?;
        Ok(HeadOutputs {
            cls_logits: cls,
            box_deltas: bbox,
            color_logits: color,
            material_logits: material,
        })
    }

    /// Like [`Model::forward_heads`], but PA variants embed the argmax of
    /// their own category prediction.
    pub fn forward_heads_inference(
        &self,
        object: &StreamFeatures,
        attribute: Option<&StreamFeatures>,
    ) -> Result<HeadOutputs> {
        let (h_obj, h_attr, cls, bbox) = self.object_part(object, attribute)?;
        let predicted: Option<Vec<usize>> = if self.variant.uses_label_embedding() {
            let rows: Vec<Vec<f32>> = cls.to_dtype(DType::F32)?.to_vec2()?;
            Some(
                rows.iter()
                    .map(|r| {
                        let r64: Vec<f64> = r.iter().map(|&x| x as f64).collect();
                        argmax(&r64).unwrap_or(0)
                    })
                    .collect(),
            )
        } else {
            None
        };
        let (color, material) = self.attribute_part(&h_obj, h_attr.as_ref(), predicted.as_deref())?;
        Ok(HeadOutputs {
            cls_logits: cls,
            box_deltas: bbox,
            color_logits: color,
            material_logits: material,
        })
    }

    /// Head outputs for externally supplied boxes, bypassing the RPN.
    pub fn forward_with_proposals(
        &self,
        images: &Tensor,
        rois: &[(usize, BBox)],
        categories: Option<&[usize]>,
    ) -> Result<HeadOutputs> {
        let features = self.backbone_features(images)?;
        let (obj, attr) = self.pool_streams(&features, rois)?;
        match categories {
            Some(c) => self.forward_heads(&obj, attr.as_ref(), Some(c)),
            None => self.forward_heads_inference(&obj, attr.as_ref()),
        }
    }

    pub fn predict(&self, image: &RgbImage, opts: &PredictOptions) -> Result<Vec<Detection>> {
        Ok(self.predict_batch(&[image], opts)?.pop().expect("one image in, one out"))
    }

    /// Detections per image: per-class decoding and NMS, background removed,
    /// sorted by score.
    pub fn predict_batch(&self, images: &[&RgbImage], opts: &PredictOptions) -> Result<Vec<Vec<Detection>>> {
        let batch = self.images_to_tensor(images)?;
        let (_, _, h, w) = batch.dims4()?;
        let (proposals, _, features) = self.forward_rpn(&batch, Mode::Eval)?;
        let rois: Vec<(usize, BBox)> = proposals
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |p| (i, p.bbox)))
            .collect();
        let mut out = vec![Vec::new(); images.len()];
        if rois.is_empty() {
            return Ok(out);
        }
        let (obj, attr) = self.pool_streams(&features, &rois)?;
        let heads = self.forward_heads_inference(&obj, attr.as_ref())?;
        self.postprocess(&heads, &proposals, (h, w), opts, &mut out)?;
        Ok(out)
    }

    fn postprocess(
        &self,
        heads: &HeadOutputs,
        proposals: &[Vec<Proposal>],
        (h, w): (usize, usize),
        opts: &PredictOptions,
        out: &mut [Vec<Detection>],
    ) -> Result<()> {
        let probs = softmax_rows(&heads.cls_logits)?;
        let deltas: Vec<Vec<f64>> = heads.box_deltas.to_dtype(DType::F64)?.to_vec2()?;
        let colors = match &heads.color_logits {
            Some(t) => softmax_rows(t)?,
            None => vec![Vec::new(); probs.len()],
        };
        let materials = match &heads.material_logits {
            Some(t) => softmax_rows(t)?,
            None => vec![Vec::new(); probs.len()],
        };
        let coder = self.box_coder();
        let n_cat = self.vocabulary.num_categories();
        let mut row = 0;
        for (img, props) in proposals.iter().enumerate() {
            let rows = row..row + props.len();
            row += props.len();
            let mut dets = Vec::new();
            for c in 0..n_cat {
                let mut cands: Vec<(BBox, f64)> = Vec::new();
                let mut src: Vec<usize> = Vec::new();
                for r in rows.clone() {
                    let score = probs[r][c + 1];
                    if score < opts.score_threshold {
                        continue;
                    }
                    let d = &deltas[r][4 * c..4 * c + 4];
                    let p = &props[r - rows.start];
                    let bx = coder
                        .decode(&BoxDelta::from_array([d[0], d[1], d[2], d[3]]), &p.bbox)
                        .clip(w as f64, h as f64);
                    if !bx.is_valid() {
                        continue;
                    }
                    cands.push((bx, score));
                    src.push(r);
                }
                for k in nms(&cands, opts.nms_iou) {
                    let r = src[k];
                    let fg = &probs[r][1..];
                    let fg_sum: f64 = fg.iter().sum();
                    dets.push(Detection {
                        bbox: cands[k].0,
                        category: c,
                        score: cands[k].1,
                        category_scores: fg.iter().map(|p| p / fg_sum).collect(),
                        color_scores: colors[r].clone(),
                        material_scores: materials[r].clone(),
                        objectness: props[r - rows.start].objectness,
                    });
                }
            }
            dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.category.cmp(&b.category)));
            dets.truncate(opts.max_detections);
            out[img] = dets;
        }
        Ok(())
    }
}
