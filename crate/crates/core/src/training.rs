//! The optimization loop, checkpoints, metrics log and gradient audits.
//!
//! A run is a pure function of its [`TrainConfig`] and dataset: data order,
//! flips, anchor/RoI sampling and initialization all derive from `seed`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CategorySplit, Dataset, ObjectAnnotation};
use crate::evaluation::{evaluate_model, EvalConfig, EvalReport};
use crate::geometry::{BBox, BoxCoder};
use crate::losses::{self, detection_loss, rpn_loss, sce_attribute_loss, uce_attribute_loss, LossBreakdown, LossTerms};
use crate::model::rpn::{select_proposals, Mode};
use crate::model::{build_model, checkpoint, AttributeLossKind, Model, ModelConfig, ModelVariant, Normalization};
use crate::targets::{assign_anchor_targets, assign_roi_targets, AnchorMatchConfig, RoiMatchConfig, RoiTargets};
use crate::{Error, Result};

/// Adam moment parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_interval: usize,
    /// Save `step_{N}.ckpt` every this many steps (0 keeps only the first and last).
    pub checkpoint_interval: usize,
    pub optimizer: AdamConfig,
    /// Global gradient-norm bound.
    pub grad_clip: Option<f64>,
    pub hflip: bool,
    pub anchor_matching: AnchorMatchConfig,
    pub roi_matching: RoiMatchConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(ModelVariant::TwoStreamCrossLink)
    }
}

impl TrainConfig {
    /// Small-image, CPU-sized settings used for the synthetic benchmark.
    pub fn desk(variant: ModelVariant) -> Self {
        TrainConfig {
            variant,
            learning_rate: 1e-3,
            batch_size: 4,
            max_steps: 5000,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
            optimizer: AdamConfig::default(),
            grad_clip: None,
            hflip: true,
            anchor_matching: AnchorMatchConfig::default(),
            roi_matching: RoiMatchConfig {
                batch_size: 64,
                ..RoiMatchConfig::default()
            },
            model: ModelConfig::default(),
        }
    }

    /// Optimizer settings of the original full-scale setup: Adam at 5e-5
    /// with 12 images per batch.
    pub fn paper(variant: ModelVariant) -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 12,
            roi_matching: RoiMatchConfig::default(),
            ..TrainConfig::desk(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.model.backbone.validate()?;
        self.model.anchors.validate(self.model.backbone.levels.len())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

fn loss_map(b: &LossBreakdown, with_attributes: bool) -> BTreeMap<String, f64> {
    b.components()
        .into_iter()
        .filter(|(k, _)| with_attributes || !matches!(*k, "color" | "material" | "attr"))
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// A normalized image batch with its (possibly flipped) annotations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub annotations: Vec<Vec<ObjectAnnotation>>,
}

pub fn make_batch(model: &Model, images: &[&RgbImage], annotations: &[&[ObjectAnnotation]], flips: &[bool]) -> Result<Batch> {
    let (w, h) = images
        .first()
        .map(|i| (i.width() as usize, i.height() as usize))
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    let mut anns = Vec::with_capacity(images.len());
    for ((img, a), &flip) in images.iter().zip(annotations).zip(flips) {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::Config("images in one batch must share a size".into()));
        }
        data.extend(model.normalization.apply(img, flip));
        anns.push(
            a.iter()
                .map(|o| ObjectAnnotation {
                    bbox: if flip { o.bbox.flip_horizontal(w as f64) } else { o.bbox },
                    ..o.clone()
                })
                .collect(),
        );
    }
    let images = Tensor::from_vec(data, (images.len(), 3, h, w), model.device())?.to_dtype(model.dtype())?;
    Ok(Batch {
        images,
        annotations: anns,
    })
}

/// Loss terms for one batch plus the RoI targets that produced them.
pub struct StepLosses {
    pub terms: LossTerms,
    pub roi_targets: RoiTargets,
}

/// Full forward pass with target assignment. Ground-truth boxes are appended
/// to the proposals of each image. PA variants are fed the RoI target
/// categories.
pub fn compute_losses<R: Rng>(
    model: &Model,
    batch: &Batch,
    anchor_matching: &AnchorMatchConfig,
    roi_matching: &RoiMatchConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let (_, _, h, w) = batch.images.dims4()?;
    let dtype = model.dtype();
    let dev = model.device().clone();
    let features = model.backbone_features(&batch.images)?;
    let raw = model.rpn_outputs(&features)?;
    let anchors = model.anchors(h, w);
    let anchor_targets = batch
        .annotations
        .iter()
        .map(|anns| {
            let gt: Vec<BBox> = anns.iter().map(|a| a.bbox).collect();
            assign_anchor_targets(&anchors.boxes, &gt, anchor_matching, &BoxCoder::UNIT, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let (rpn_objectness, rpn_box) = rpn_loss(&raw, &anchor_targets)?;

    let proposals = select_proposals(&raw, &anchors, (h, w), &model.config.rpn, Mode::Train)?;
    let coder = model.box_coder();
    let mut targets = RoiTargets::default();
    let mut rois = Vec::new();
    for (img, (props, anns)) in proposals.iter().zip(&batch.annotations).enumerate() {
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).chain(anns.iter().map(|a| a.bbox)).collect();
        let t = assign_roi_targets(&boxes, anns, roi_matching, &coder, rng)?;
        rois.extend(t.rois.iter().map(|&b| (img, b)));
        targets.extend(&t);
    }

    let z = || losses::zero(dtype, &dev);
    let (cls, loc, color, material, attr) = if rois.is_empty() {
        (z()?, z()?, z()?, z()?, z()?)
    } else {
        let (obj, attr_feats) = model.pool_streams(&features, &rois)?;
        let cats = model.variant.uses_label_embedding().then_some(targets.labels.as_slice());
        let heads = model.forward_heads(&obj, attr_feats.as_ref(), cats)?;
        let (cls, loc) = detection_loss(&heads, &targets)?;
        let (color, material, attr) = match (model.variant.attribute_loss(), heads.color_logits.is_some() || heads.material_logits.is_some()) {
            (Some(AttributeLossKind::Separated), true) => {
                let (c, m) = sce_attribute_loss(
                    heads.color_logits.as_ref(),
                    &targets.colors,
                    heads.material_logits.as_ref(),
                    &targets.materials,
                )?;
                let a = (&c + &m)?;
                (c, m, a)
            }
            (Some(AttributeLossKind::Unified), true) => {
                let parts: Vec<&Tensor> = heads.color_logits.iter().chain(heads.material_logits.iter()).collect();
                let unified = Tensor::cat(&parts, 1)?;
                let (a, c, m) = uce_attribute_loss(&unified, &targets.colors, &targets.materials, model.vocabulary.num_colors())?;
                (c, m, a)
            }
            _ => (z()?, z()?, z()?),
        };
        (cls, loc, color, material, attr)
    };
    Ok(StepLosses {
        terms: LossTerms {
            rpn_objectness,
            rpn_box,
            cls,
            loc,
            color,
            material,
            attr,
        },
        roi_targets: targets,
    })
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * scale)?);
            }
        }
    }
    Ok(())
}

/// Labeled attribute rows that reached the attribute loss, per category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRows {
    pub color: usize,
    pub material: usize,
}

/// Extra outputs of a run besides the trained model.
#[derive(Debug, Default)]
pub struct RunOptions<'a> {
    /// Writes `metrics.jsonl`, `eval.jsonl` and `step_{N}.ckpt` here.
    pub run_dir: Option<&'a Path>,
    /// Evaluated every `eval_interval` steps and after the last step.
    pub eval_set: Option<&'a Dataset>,
    pub eval: EvalConfig,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub evals: Vec<(usize, EvalReport)>,
    /// Indexed by category.
    pub attribute_rows: Vec<AttributeRows>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains `config.variant` on `dataset`. With a split, target-category
/// attribute labels are removed first.
pub fn train(config: &TrainConfig, dataset: &Dataset, split: Option<&CategorySplit>, opts: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let masked;
    let dataset = match split {
        Some(s) => {
            s.validate(dataset.vocabulary.num_categories())?;
            masked = dataset.masked(s);
            &masked
        }
        None => dataset,
    };
    if dataset.samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let images = (0..dataset.samples.len()).map(|i| dataset.load_image(i)).collect::<Result<Vec<_>>>()?;
    let mut model = build_model(config.variant, &dataset.vocabulary, &config.model, config.seed)?;
    model.normalization = Normalization::from_images(images.iter());

    let mut metrics = match opts.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    let save = |model: &Model, step: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = opts.run_dir {
            let p = dir.join(format!("step_{step}.ckpt"));
            checkpoint::save(model, step, &p)?;
            checkpoints.push(p);
        }
        Ok(())
    };
    save(&model, 0, &mut checkpoints)?;

    let vars = model.params().all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: config.optimizer.beta1,
            beta2: config.optimizer.beta2,
            eps: config.optimizer.eps,
            weight_decay: 0.0,
        },
    )?;

    let mut order_rng = rng_stream(config.seed, 1);
    let mut sample_rng = rng_stream(config.seed, 2);
    let mut flip_rng = rng_stream(config.seed, 3);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(config.max_steps);
    let mut evals = Vec::new();
    let mut attribute_rows = vec![AttributeRows::default(); dataset.vocabulary.num_categories()];
    let with_attributes = config.variant.has_attributes();

    for step in 1..=config.max_steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..dataset.samples.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let flips: Vec<bool> = idx.iter().map(|_| config.hflip && flip_rng.random::<bool>()).collect();
        let imgs: Vec<&RgbImage> = idx.iter().map(|&i| &images[i]).collect();
        let anns: Vec<&[ObjectAnnotation]> = idx.iter().map(|&i| dataset.samples[i].annotations.as_slice()).collect();
        let batch = make_batch(&model, &imgs, &anns, &flips)?;
        let out = compute_losses(&model, &batch, &config.anchor_matching, &config.roi_matching, &mut sample_rng)?;
        let breakdown = out.terms.breakdown()?;
        if let Some(component) = breakdown.non_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                component: component.to_string(),
            });
        }
        if with_attributes {
            let t = &out.roi_targets;
            for (i, &l) in t.labels.iter().enumerate() {
                if l > 0 {
                    attribute_rows[l - 1].color += t.colors[i].is_some() as usize;
                    attribute_rows[l - 1].material += t.materials[i].is_some() as usize;
                }
            }
        }
        let mut grads = out.terms.total()?.backward()?;
        if let Some(c) = config.grad_clip {
            clip_gradients(&mut grads, &vars, c)?;
        }
        opt.step(&grads)?;

        let record = StepRecord {
            step,
            losses: loss_map(&breakdown, with_attributes),
            lr: config.learning_rate,
            timestamp: now(),
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        history.push(record);

        if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 && step != config.max_steps {
            save(&model, step, &mut checkpoints)?;
        }
        let periodic = config.eval_interval > 0 && step % config.eval_interval == 0;
        if let Some(ev) = opts.eval_set {
            if periodic || step == config.max_steps {
                evals.push((step, evaluate_model(&model, ev, split, &opts.eval)?));
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if config.max_steps > 0 {
        save(&model, config.max_steps, &mut checkpoints)?;
    }
    if let (Some(dir), false) = (opts.run_dir, evals.is_empty()) {
        let mut w = BufWriter::new(File::create(dir.join("eval.jsonl"))?);
        for (step, report) in &evals {
            serde_json::to_writer(&mut w, &serde_json::json!({ "step": step, "report": report }))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
        evals,
        attribute_rows,
    })
}

/// Result of backpropagating the attribute loss alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    pub variant: ModelVariant,
    /// Largest absolute gradient over all object-stream parameters.
    pub max_abs_object_grad: f64,
    pub object_parameters: usize,
    /// Value of the attribute loss that was backpropagated.
    pub attr_loss: f64,
    /// Labeled attribute rows in the batch.
    pub attribute_rows: usize,
    pub passed: bool,
}

/// Backpropagates only `L_attr` and reports the largest gradient reaching
/// the object stream. Passes iff that gradient is exactly zero.
///
/// Available for the two-stream variants; the others share one stream, so
/// the question does not apply.
pub fn audit_gradient_block(model: &Model, batch: &Batch, seed: u64) -> Result<GradientAudit> {
    if !model.variant.is_two_stream() {
        return Err(Error::WrongVariant {
            variant: model.variant.to_string(),
            reason: "the gradient audit needs a separate attribute stream".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = compute_losses(model, batch, &AnchorMatchConfig::default(), &RoiMatchConfig::default(), &mut rng)?;
    let grads = out.terms.attr.backward()?;
    let mut max_abs = 0.0f64;
    let names = model.object_stream_params();
    for name in &names {
        let var = &model.params().vars()[name];
        if let Some(g) = grads.get(var) {
            let m = g.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            max_abs = max_abs.max(m);
        }
    }
    let t = &out.roi_targets;
    Ok(GradientAudit {
        variant: model.variant,
        max_abs_object_grad: max_abs,
        object_parameters: names.len(),
        attr_loss: out.terms.attr.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
        attribute_rows: t.colors.iter().flatten().count() + t.materials.iter().flatten().count(),
        passed: max_abs == 0.0,
    })
}
