//! Detection and attribute metrics, subgroup reports and the two-run
//! attribute-transfer protocol.
//!
//! All reported values are percentages in `[0, 100]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{make_split, Attribute, CategorySplit, Dataset, Detection, ObjectAnnotation, SplitFile};
use crate::model::{Model, PredictOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Detections below this score are ignored by attribute recall.
    pub score_threshold: f64,
    /// When set, a recalled object also needs its category predicted correctly.
    pub category_aware: bool,
    pub predict: PredictOptions,
    /// Images per forward pass when evaluating a model.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.5,
            category_aware: true,
            predict: PredictOptions::default(),
            batch_size: 16,
        }
    }
}

/// Average precision with all-points interpolation: the area under the
/// precision envelope of the ranked list. `tp` is in descending score order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_rec = 0.0;
    for k in 0..tp.len() {
        if rec[k] > last_rec {
            ap += (rec[k] - last_rec) * prec[k];
            last_rec = rec[k];
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Mean over categories with at least one ground-truth object.
    pub map: f64,
    /// AP per category index, only for categories with ground truth.
    pub per_category: BTreeMap<usize, f64>,
}

/// mAP at `iou_threshold`. Per category, detections are visited in
/// descending score order and each claims the highest-IoU unmatched ground
/// truth of that category in its image.
pub fn compute_map(detections: &[Vec<Detection>], ground_truth: &[Vec<ObjectAnnotation>], iou_threshold: f64) -> MapResult {
    assert_eq!(detections.len(), ground_truth.len(), "one detection list per image");
    let cats: BTreeSet<usize> = ground_truth.iter().flatten().map(|a| a.category).collect();
    let mut per_category = BTreeMap::new();
    for &c in &cats {
        let num_gt = ground_truth.iter().flatten().filter(|a| a.category == c).count();
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.category == c).map(move |d| (img, d)))
            .collect();
        // stable sort keeps image order on equal scores
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let tp: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let mut best: Option<(f64, usize)> = None;
                for (j, g) in ground_truth[img].iter().enumerate() {
                    if g.category != c || used[img][j] {
                        continue;
                    }
                    let v = d.bbox.iou(&g.bbox);
                    if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, j));
                    }
                }
                match best {
                    Some((_, j)) => {
                        used[img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_category.insert(c, average_precision(&tp, num_gt));
    }
    let map = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    MapResult { map, per_category }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    /// `None` when no ground-truth object carries the attribute.
    pub recall: Option<f64>,
    pub recalled: usize,
    pub labeled: usize,
}

/// Fraction of attribute-labeled ground-truth objects found by a detection
/// (score ≥ `score_threshold`, IoU ≥ `iou_threshold`, correct category when
/// `category_aware`) whose attribute argmax equals the label. Detections are
/// visited by descending score and each claims at most one object.
pub fn compute_attribute_recall(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<ObjectAnnotation>],
    attribute: Attribute,
    cfg: &EvalConfig,
) -> Result<RecallResult> {
    assert_eq!(detections.len(), ground_truth.len(), "one detection list per image");
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().map(move |d| (img, d)))
        .filter(|(_, d)| d.score >= cfg.score_threshold)
        .collect();
    if !ranked.is_empty() && ranked.iter().all(|(_, d)| d.attribute_argmax(attribute).is_none()) {
        return Err(Error::AttributeDisabled(match attribute {
            Attribute::Color => "detections carry no color scores",
            Attribute::Material => "detections carry no material scores",
        }));
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let labeled = ground_truth.iter().flatten().filter(|a| a.has_attribute(attribute)).count();
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut recalled = 0;
    for (img, d) in ranked {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in ground_truth[img].iter().enumerate() {
            if used[img][j] || !g.has_attribute(attribute) || (cfg.category_aware && g.category != d.category) {
                continue;
            }
            let v = d.bbox.iou(&g.bbox);
            if v >= cfg.iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        if let Some((_, j)) = best {
            used[img][j] = true;
            if d.attribute_argmax(attribute) == ground_truth[img][j].attribute(attribute) {
                recalled += 1;
            }
        }
    }
    Ok(RecallResult {
        recall: (labeled > 0).then(|| recalled as f64 / labeled as f64),
        recalled,
        labeled,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub objects: usize,
    pub color_labeled: usize,
    pub material_labeled: usize,
}

/// Metrics over one set of categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub map_50: f64,
    pub color_recall_50: Option<f64>,
    pub material_recall_50: Option<f64>,
    /// AP (percent) by category name.
    pub per_category_ap: BTreeMap<String, f64>,
    pub counts: EvalCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: MetricSet,
    pub reference: Option<MetricSet>,
    pub target: Option<MetricSet>,
}

fn restrict(ground_truth: &[Vec<ObjectAnnotation>], cats: Option<&BTreeSet<usize>>) -> Vec<Vec<ObjectAnnotation>> {
    ground_truth
        .iter()
        .map(|g| g.iter().filter(|a| cats.is_none_or(|c| c.contains(&a.category))).cloned().collect())
        .collect()
}

fn metric_set(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<ObjectAnnotation>],
    cats: Option<&BTreeSet<usize>>,
    names: &[String],
    heads: (bool, bool),
    cfg: &EvalConfig,
) -> Result<MetricSet> {
    let gt = restrict(ground_truth, cats);
    let dets: Vec<Vec<Detection>> = detections
        .iter()
        .map(|ds| ds.iter().filter(|d| cats.is_none_or(|c| c.contains(&d.category))).cloned().collect())
        .collect();
    let m = compute_map(&dets, &gt, cfg.iou_threshold);
    // recall sees every detection; category-agnostic matching may cross groups
    let color = if heads.0 { Some(compute_attribute_recall(detections, &gt, Attribute::Color, cfg)?) } else { None };
    let material = if heads.1 { Some(compute_attribute_recall(detections, &gt, Attribute::Material, cfg)?) } else { None };
    let flat = gt.iter().flatten();
    Ok(MetricSet {
        map_50: 100.0 * m.map,
        color_recall_50: color.and_then(|r| r.recall).map(|r| 100.0 * r),
        material_recall_50: material.and_then(|r| r.recall).map(|r| 100.0 * r),
        per_category_ap: m.per_category.iter().map(|(&c, &ap)| (names[c].clone(), 100.0 * ap)).collect(),
        counts: EvalCounts {
            images: gt.len(),
            objects: flat.clone().count(),
            color_labeled: flat.clone().filter(|a| a.color.is_some()).count(),
            material_labeled: flat.filter(|a| a.material.is_some()).count(),
        },
    })
}

/// Builds a report from precomputed detections. `heads` says whether the
/// model predicts (color, material); disabled attributes are reported as
/// `None`.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    dataset: &Dataset,
    split: Option<&CategorySplit>,
    heads: (bool, bool),
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if detections.len() != dataset.samples.len() {
        return Err(Error::Config(format!(
            "{} detection lists for {} images",
            detections.len(),
            dataset.samples.len()
        )));
    }
    let gt: Vec<Vec<ObjectAnnotation>> = dataset.samples.iter().map(|s| s.annotations.clone()).collect();
    let names = &dataset.vocabulary.categories;
    let all = metric_set(detections, &gt, None, names, heads, cfg)?;
    let (reference, target) = match split {
        Some(s) => (
            Some(metric_set(detections, &gt, Some(&s.reference), names, heads, cfg)?),
            Some(metric_set(detections, &gt, Some(&s.target), names, heads, cfg)?),
        ),
        None => (None, None),
    };
    Ok(EvalReport { all, reference, target })
}

/// Runs the model over every image of `dataset`.
pub fn predict_dataset(model: &Model, dataset: &Dataset, cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(dataset.samples.len());
    let idx: Vec<usize> = (0..dataset.samples.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let images = chunk.iter().map(|&i| dataset.load_image(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&image::RgbImage> = images.iter().collect();
        out.extend(model.predict_batch(&refs, &cfg.predict)?);
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, dataset: &Dataset, split: Option<&CategorySplit>, cfg: &EvalConfig) -> Result<EvalReport> {
    let dets = predict_dataset(model, dataset, cfg)?;
    evaluate_detections(&dets, dataset, split, (model.has_color_head(), model.has_material_head()), cfg)
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Arithmetic mean per metric. A metric missing from some sets is averaged
/// over the sets that have it; counts are summed.
pub fn average_metric_sets(sets: &[&MetricSet]) -> MetricSet {
    let n = sets.len().max(1) as f64;
    let mut per_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in sets {
        for (k, v) in &s.per_category_ap {
            per_cat.entry(k.clone()).or_default().push(*v);
        }
    }
    let mut counts = EvalCounts::default();
    for s in sets {
        counts.images += s.counts.images;
        counts.objects += s.counts.objects;
        counts.color_labeled += s.counts.color_labeled;
        counts.material_labeled += s.counts.material_labeled;
    }
    MetricSet {
        map_50: sets.iter().map(|s| s.map_50).sum::<f64>() / n,
        color_recall_50: mean_opt(&sets.iter().map(|s| s.color_recall_50).collect::<Vec<_>>()),
        material_recall_50: mean_opt(&sets.iter().map(|s| s.material_recall_50).collect::<Vec<_>>()),
        per_category_ap: per_cat.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect(),
        counts,
    }
}

pub fn average_reports(reports: &[&EvalReport]) -> EvalReport {
    let all = average_metric_sets(&reports.iter().map(|r| &r.all).collect::<Vec<_>>());
    let group = |f: fn(&EvalReport) -> Option<&MetricSet>| {
        let sets: Option<Vec<&MetricSet>> = reports.iter().map(|r| f(r)).collect();
        sets.map(|s| average_metric_sets(&s))
    };
    EvalReport {
        all,
        reference: group(|r| r.reference.as_ref()),
        target: group(|r| r.target.as_ref()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub splits: [SplitFile; 2],
    pub runs: [EvalReport; 2],
    pub average: EvalReport,
}

/// The attribute-transfer protocol: categories are cut into mirrored halves,
/// `run` trains on the masked training set of each split and returns
/// detections for every image of `test`, and the two resulting reports are
/// averaged.
///
/// `run` receives the run index (0 or 1), the split and the masked training
/// set.
pub fn run_transfer_protocol<F>(
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    heads: (bool, bool),
    cfg: &EvalConfig,
    mut run: F,
) -> Result<TransferReport>
where
    F: FnMut(usize, &CategorySplit, &Dataset) -> Result<Vec<Vec<Detection>>>,
{
    let splits = match &train.groups {
        Some(g) => {
            let a = g.resolve(&train.vocabulary)?;
            let b = a.mirrored();
            (a, b)
        }
        None => make_split(&train.vocabulary, seed)?,
    };
    let mut reports = Vec::with_capacity(2);
    for (i, split) in [&splits.0, &splits.1].into_iter().enumerate() {
        let masked = train.masked(split);
        let dets = run(i, split, &masked)?;
        reports.push(evaluate_detections(&dets, test, Some(split), heads, cfg)?);
    }
    let average = average_reports(&reports.iter().collect::<Vec<_>>());
    let b = reports.pop().expect("two runs");
    let a = reports.pop().expect("two runs");
    Ok(TransferReport {
        splits: [splits.0.to_names(&train.vocabulary), splits.1.to_names(&train.vocabulary)],
        runs: [a, b],
        average,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

const HEADER: &str = "| Method | Object mAP @.5 | Color Recall @.5 | Material Recall @.5 |\n|---|---|---|---|\n";

/// A supervised-setting table, one row per method.
pub fn render_table(rows: &[(&str, &MetricSet)]) -> String {
    let mut s = String::from(HEADER);
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} |",
            cell(Some(m.map_50)),
            cell(m.color_recall_50),
            cell(m.material_recall_50)
        );
    }
    s
}

/// A transfer-setting table with a Target and a Reference row group.
pub fn render_transfer_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from(HEADER);
    for (group, pick) in [
        ("Target", (|r: &EvalReport| r.target.clone()) as fn(&EvalReport) -> Option<MetricSet>),
        ("Reference", |r: &EvalReport| r.reference.clone()),
    ] {
        let _ = writeln!(s, "| **{group}** | | | |");
        for (name, r) in rows {
            match pick(r) {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        "| {name} | {} | {} | {} |",
                        cell(Some(m.map_50)),
                        cell(m.color_recall_50),
                        cell(m.material_recall_50)
                    );
                }
                None => {
                    let _ = writeln!(s, "| {name} | - | - | - |");
                }
            }
        }
    }
    s
}
