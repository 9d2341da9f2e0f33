//! Training objectives.
//!
//! Every term uses mean reduction. Attribute labels are `Option<usize>`; a
//! `None` row is masked out by never being selected, so it contributes
//! neither value nor gradient. A term with no contributing rows is an exact
//! zero rather than NaN.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::model::rpn::RpnOutputs;
use crate::model::HeadOutputs;
use crate::targets::{AnchorLabel, AnchorTargets, RoiTargets};
use crate::{Error, Result};

/// Smooth-L1 transition point for the RPN box term.
pub const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
/// Smooth-L1 transition point for the RoI box term.
pub const ROI_SMOOTH_L1_BETA: f64 = 1.0;

/// Scalar loss values for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub loc: f64,
    pub color: f64,
    pub material: f64,
    pub attr: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Named components in a fixed order, `total` last.
    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("rpn_objectness", self.rpn_objectness),
            ("rpn_box", self.rpn_box),
            ("cls", self.cls),
            ("loc", self.loc),
            ("color", self.color),
            ("material", self.material),
            ("attr", self.attr),
            ("total", self.total),
        ]
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

/// Differentiable loss terms. `attr` is `color + material` under SCE and the
/// unified value under UCE.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub rpn_objectness: Tensor,
    pub rpn_box: Tensor,
    pub cls: Tensor,
    pub loc: Tensor,
    pub color: Tensor,
    pub material: Tensor,
    pub attr: Tensor,
}

impl LossTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((((&self.rpn_objectness + &self.rpn_box)? + &self.cls)? + &self.loc)? + &self.attr)?)
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            rpn_objectness: v(&self.rpn_objectness)?,
            rpn_box: v(&self.rpn_box)?,
            cls: v(&self.cls)?,
            loc: v(&self.loc)?,
            color: v(&self.color)?,
            material: v(&self.material)?,
            attr: v(&self.attr)?,
            total: v(&self.total()?)?,
        })
    }
}

pub(crate) fn zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

fn check_labels(what: &'static str, labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { what, label, classes }),
        None => Ok(()),
    }
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

/// Summed cross-entropy of the selected `rows` of `logits` (R, K).
fn ce_sum(logits: &Tensor, rows: &[usize], labels: &[usize]) -> Result<Tensor> {
    if rows.is_empty() {
        return zero(logits.dtype(), logits.device());
    }
    let dev = logits.device();
    let picked = logits.index_select(&index_tensor(rows, dev)?, 0)?;
    let logp = candle_nn::ops::log_softmax(&picked, D::Minus1)?;
    let y = index_tensor(labels, dev)?.unsqueeze(1)?;
    Ok(logp.gather(&y, 1)?.sum_all()?.neg()?)
}

/// Mean softmax cross-entropy over rows whose label is present.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[Option<usize>], what: &'static str) -> Result<Tensor> {
    let (r, k) = logits.dims2()?;
    if r != labels.len() {
        return Err(Error::Config(format!("{what}: {r} logit rows for {} labels", labels.len())));
    }
    let (rows, ys): (Vec<usize>, Vec<usize>) =
        labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).unzip();
    check_labels(what, &ys, k)?;
    if rows.is_empty() {
        return zero(logits.dtype(), logits.device());
    }
    Ok((ce_sum(logits, &rows, &ys)? / rows.len() as f64)?)
}

/// Separated cross-entropy: independent color and material terms. A missing
/// head (empty vocabulary) yields a zero term.
pub fn sce_attribute_loss(
    color_logits: Option<&Tensor>,
    colors: &[Option<usize>],
    material_logits: Option<&Tensor>,
    materials: &[Option<usize>],
) -> Result<(Tensor, Tensor)> {
    let reference = color_logits
        .or(material_logits)
        .ok_or(Error::AttributeDisabled("no attribute logits"))?;
    let color = match color_logits {
        Some(z) => masked_cross_entropy(z, colors, "color")?,
        None => zero(reference.dtype(), reference.device())?,
    };
    let material = match material_logits {
        Some(z) => masked_cross_entropy(z, materials, "material")?,
        None => zero(reference.dtype(), reference.device())?,
    };
    Ok((color, material))
}

/// One unified-space row per available attribute label: `(roi, class)` where
/// materials are offset by `n_colors`. Color rows precede material rows.
pub fn unified_rows(
    colors: &[Option<usize>],
    materials: &[Option<usize>],
    n_colors: usize,
) -> Vec<(usize, usize)> {
    let c = colors.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l)));
    let m = materials.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, n_colors + l)));
    c.chain(m).collect()
}

/// Unified cross-entropy over `z` = (R, colors ⊕ materials).
///
/// Returns `(attr, color_share, material_share)`: the mean over all rows and
/// the parts of that mean contributed by color and material rows.
pub fn uce_attribute_loss(
    z: &Tensor,
    colors: &[Option<usize>],
    materials: &[Option<usize>],
    n_colors: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (r, k) = z.dims2()?;
    if r != colors.len() || r != materials.len() {
        return Err(Error::Config(format!("unified attribute loss: {r} rows, {} / {} labels", colors.len(), materials.len())));
    }
    let n_materials = k.checked_sub(n_colors).ok_or_else(|| Error::Config("n_colors exceeds logit width".into()))?;
    let cs: Vec<usize> = colors.iter().flatten().copied().collect();
    let ms: Vec<usize> = materials.iter().flatten().copied().collect();
    check_labels("color", &cs, n_colors)?;
    check_labels("material", &ms, n_materials)?;
    let rows = unified_rows(colors, materials, n_colors);
    if rows.is_empty() {
        let z0 = zero(z.dtype(), z.device())?;
        return Ok((z0.clone(), z0.clone(), z0));
    }
    let n = rows.len() as f64;
    let split = cs.len();
    let (ci, cy): (Vec<usize>, Vec<usize>) = rows[..split].iter().copied().unzip();
    let (mi, my): (Vec<usize>, Vec<usize>) = rows[split..].iter().copied().unzip();
    let color = (ce_sum(z, &ci, &cy)? / n)?;
    let material = (ce_sum(z, &mi, &my)? / n)?;
    let attr = (&color + &material)?;
    Ok((attr, color, material))
}

/// Elementwise smooth-L1, written with `min` so it stays differentiable.
pub fn smooth_l1(diff: &Tensor, beta: f64) -> Result<Tensor> {
    let a = diff.abs()?;
    let m = a.minimum(beta)?;
    Ok(((m.sqr()? * (0.5 / beta))? + (a - m)?)?)
}

/// Numerically stable binary cross-entropy with logits, elementwise.
fn bce_with_logits(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((x.relu()? - (x * y)?)? + softplus)?)
}

fn delta_tensor(rows: &[[f64; 4]], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), 4), device)?.to_dtype(dtype)?)
}

/// RPN objectness (binary CE over sampled anchors) and box (smooth-L1 over
/// positive anchors) terms, both divided by the number of sampled anchors.
/// `targets[i]` belongs to image `i`.
pub fn rpn_loss(outputs: &RpnOutputs, targets: &[AnchorTargets]) -> Result<(Tensor, Tensor)> {
    let (n, a) = outputs.objectness.dims2()?;
    let dtype = outputs.objectness.dtype();
    let dev = outputs.objectness.device().clone();
    if targets.len() != n {
        return Err(Error::Config(format!("{} anchor target sets for {n} images", targets.len())));
    }
    let mut sampled = Vec::new();
    let mut labels = Vec::new();
    let mut pos = Vec::new();
    let mut pos_deltas = Vec::new();
    for (img, t) in targets.iter().enumerate() {
        if t.labels.len() != a {
            return Err(Error::Config(format!("{} anchor labels for {a} anchors", t.labels.len())));
        }
        for &i in &t.sampled {
            sampled.push(img * a + i);
            let positive = t.labels[i] == AnchorLabel::Positive;
            labels.push(if positive { 1.0 } else { 0.0 });
            if positive {
                pos.push(img * a + i);
                pos_deltas.push(t.deltas[i].expect("positive anchors carry deltas").to_array());
            }
        }
    }
    if sampled.is_empty() {
        return Ok((zero(dtype, &dev)?, zero(dtype, &dev)?));
    }
    let norm = sampled.len() as f64;
    let logits = outputs.objectness.flatten_all()?.index_select(&index_tensor(&sampled, &dev)?, 0)?;
    let y = Tensor::from_vec(labels, sampled.len(), &dev)?.to_dtype(dtype)?;
    let objectness = (bce_with_logits(&logits, &y)?.sum_all()? / norm)?;
    let boxes = if pos.is_empty() {
        zero(dtype, &dev)?
    } else {
        let pred = outputs.deltas.reshape((n * a, 4))?.index_select(&index_tensor(&pos, &dev)?, 0)?;
        let target = delta_tensor(&pos_deltas, dtype, &dev)?;
        (smooth_l1(&(pred - target)?, RPN_SMOOTH_L1_BETA)?.sum_all()? / norm)?
    };
    Ok((objectness, boxes))
}

/// Classification CE over every sampled RoI (background included) and
/// smooth-L1 over foreground class-specific deltas, divided by the number of
/// sampled RoIs.
pub fn detection_loss(heads: &HeadOutputs, targets: &RoiTargets) -> Result<(Tensor, Tensor)> {
    let (r, k) = heads.cls_logits.dims2()?;
    let dtype = heads.cls_logits.dtype();
    let dev = heads.cls_logits.device().clone();
    if r != targets.len() {
        return Err(Error::Config(format!("{r} RoI rows for {} targets", targets.len())));
    }
    check_labels("category", &targets.labels, k)?;
    if r == 0 {
        return Ok((zero(dtype, &dev)?, zero(dtype, &dev)?));
    }
    let rows: Vec<usize> = (0..r).collect();
    let cls = (ce_sum(&heads.cls_logits, &rows, &targets.labels)? / r as f64)?;
    let n_cat = k - 1;
    let mut picked = Vec::new();
    let mut wanted = Vec::new();
    for (i, (&l, d)) in targets.labels.iter().zip(&targets.deltas).enumerate() {
        if l > 0 {
            picked.push(i * n_cat + (l - 1));
            wanted.push(d.expect("foreground RoIs carry deltas").to_array());
        }
    }
    let loc = if picked.is_empty() {
        zero(dtype, &dev)?
    } else {
        let pred = heads.box_deltas.reshape((r * n_cat, 4))?.index_select(&index_tensor(&picked, &dev)?, 0)?;
        let target = delta_tensor(&wanted, dtype, &dev)?;
        (smooth_l1(&(pred - target)?, ROI_SMOOTH_L1_BETA)?.sum_all()? / r as f64)?
    };
    Ok((cls, loc))
}
