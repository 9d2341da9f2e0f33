//! Anchor and RoI target assignment.
//!
//! Both assigners are split-agnostic: attribute transfer is applied upstream
//! by removing labels from the annotations, and here an attribute target is
//! simply present iff the matched annotation carries it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::ObjectAnnotation;
use crate::geometry::{BBox, BoxCoder, BoxDelta};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorMatchConfig {
    /// Anchors whose best IoU is below this are negative.
    pub negative_max: f64,
    /// Anchors whose best IoU reaches this are positive.
    pub positive_min: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
}

impl Default for AnchorMatchConfig {
    fn default() -> Self {
        AnchorMatchConfig {
            negative_max: 0.3,
            positive_min: 0.7,
            batch_size: 256,
            positive_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Index of the matched ground-truth box for positive anchors.
    pub matched: Vec<Option<usize>>,
    /// Regression targets for positive anchors.
    pub deltas: Vec<Option<BoxDelta>>,
    /// Sampled anchor indices, ascending.
    pub sampled: Vec<usize>,
}

impl AnchorTargets {
    pub fn num_positive_sampled(&self) -> usize {
        self.sampled
            .iter()
            .filter(|&&i| self.labels[i] == AnchorLabel::Positive)
            .count()
    }
}

fn sample_subset<R: Rng>(mut pool: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() > n {
        pool.shuffle(rng);
        pool.truncate(n);
    }
    pool
}

/// Labels every anchor, then samples up to `batch_size` of them with at most
/// `positive_fraction` positives.
///
/// An anchor is positive when its best IoU reaches `positive_min`, or when it
/// attains the highest IoU (greater than zero) of some ground-truth box; such
/// forced positives are matched to that box.
pub fn assign_anchor_targets<R: Rng>(
    anchors: &[BBox],
    gt: &[BBox],
    cfg: &AnchorMatchConfig,
    coder: &BoxCoder,
    rng: &mut R,
) -> Result<AnchorTargets> {
    if !(0.0 <= cfg.negative_max && cfg.negative_max < cfg.positive_min && cfg.positive_min <= 1.0) {
        return Err(Error::Config(format!(
            "anchor thresholds must satisfy 0 <= {} < {} <= 1",
            cfg.negative_max, cfg.positive_min
        )));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched = vec![None; n];
    if !gt.is_empty() {
        let mut best_for_gt = vec![0.0f64; gt.len()];
        let mut ious = vec![0.0f64; n * gt.len()];
        for (i, a) in anchors.iter().enumerate() {
            let mut best = (0.0f64, 0usize);
            for (j, g) in gt.iter().enumerate() {
                let v = a.iou(g);
                ious[i * gt.len() + j] = v;
                if v > best.0 {
                    best = (v, j);
                }
                best_for_gt[j] = best_for_gt[j].max(v);
            }
            if best.0 >= cfg.positive_min {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(best.1);
            } else if best.0 >= cfg.negative_max {
                labels[i] = AnchorLabel::Ignore;
            }
        }
        for (j, &best) in best_for_gt.iter().enumerate() {
            if best <= 0.0 {
                continue;
            }
            for i in 0..n {
                if ious[i * gt.len() + j] == best {
                    labels[i] = AnchorLabel::Positive;
                    matched[i] = Some(j);
                }
            }
        }
    }
    let deltas = (0..n)
        .map(|i| matched[i].map(|j| coder.encode(&gt[j], &anchors[i])))
        .collect();

    let positives: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let negatives: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let max_pos = (cfg.batch_size as f64 * cfg.positive_fraction).floor() as usize;
    let pos = sample_subset(positives, max_pos, rng);
    let neg = sample_subset(negatives, cfg.batch_size - pos.len(), rng);
    let mut sampled: Vec<usize> = pos.into_iter().chain(neg).collect();
    sampled.sort_unstable();
    Ok(AnchorTargets {
        labels,
        matched,
        deltas,
        sampled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiMatchConfig {
    pub fg_threshold: f64,
    pub batch_size: usize,
    pub fg_fraction: f64,
}

impl Default for RoiMatchConfig {
    fn default() -> Self {
        RoiMatchConfig {
            fg_threshold: 0.5,
            batch_size: 128,
            fg_fraction: 0.25,
        }
    }
}

/// Targets for the sampled RoIs of one image, in ascending proposal order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoiTargets {
    pub rois: Vec<BBox>,
    pub proposal_index: Vec<usize>,
    /// 0 is background; category `c` is stored as `c + 1`.
    pub labels: Vec<usize>,
    pub matched: Vec<Option<usize>>,
    pub deltas: Vec<Option<BoxDelta>>,
    pub colors: Vec<Option<usize>>,
    pub materials: Vec<Option<usize>>,
    /// Label of every proposal before sampling.
    pub all_labels: Vec<usize>,
}

impl RoiTargets {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn color_mask(&self) -> Vec<bool> {
        self.colors.iter().map(Option::is_some).collect()
    }

    pub fn material_mask(&self) -> Vec<bool> {
        self.materials.iter().map(Option::is_some).collect()
    }

    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// Appends `other`'s sampled rows (used to stack a batch of images).
    pub fn extend(&mut self, other: &RoiTargets) {
        self.rois.extend_from_slice(&other.rois);
        self.proposal_index.extend_from_slice(&other.proposal_index);
        self.labels.extend_from_slice(&other.labels);
        self.matched.extend_from_slice(&other.matched);
        self.deltas.extend_from_slice(&other.deltas);
        self.colors.extend_from_slice(&other.colors);
        self.materials.extend_from_slice(&other.materials);
        self.all_labels.extend_from_slice(&other.all_labels);
    }
}

/// Matches each proposal to its highest-IoU annotation (lower index on ties);
/// IoU at or above `fg_threshold` makes it foreground. Then samples up to
/// `batch_size` proposals with at most `fg_fraction` foreground.
pub fn assign_roi_targets<R: Rng>(
    proposals: &[BBox],
    annotations: &[ObjectAnnotation],
    cfg: &RoiMatchConfig,
    coder: &BoxCoder,
    rng: &mut R,
) -> Result<RoiTargets> {
    if !(cfg.fg_threshold > 0.0 && cfg.fg_threshold < 1.0) {
        return Err(Error::Config(format!("fg_threshold {} outside (0, 1)", cfg.fg_threshold)));
    }
    let mut all_labels = vec![0usize; proposals.len()];
    let mut match_of = vec![None; proposals.len()];
    for (i, p) in proposals.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, a) in annotations.iter().enumerate() {
            let v = p.iou(&a.bbox);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        if let Some((v, j)) = best {
            if v >= cfg.fg_threshold {
                all_labels[i] = annotations[j].category + 1;
                match_of[i] = Some(j);
            }
        }
    }
    let fg: Vec<usize> = (0..proposals.len()).filter(|&i| all_labels[i] > 0).collect();
    let bg: Vec<usize> = (0..proposals.len()).filter(|&i| all_labels[i] == 0).collect();
    let max_fg = (cfg.batch_size as f64 * cfg.fg_fraction).round() as usize;
    let fg = sample_subset(fg, max_fg, rng);
    let bg = sample_subset(bg, cfg.batch_size - fg.len(), rng);
    let mut sampled: Vec<usize> = fg.into_iter().chain(bg).collect();
    sampled.sort_unstable();

    let mut t = RoiTargets {
        all_labels,
        ..Default::default()
    };
    for &i in &sampled {
        t.rois.push(proposals[i]);
        t.proposal_index.push(i);
        t.labels.push(t.all_labels[i]);
        t.matched.push(match_of[i]);
        match match_of[i] {
            Some(j) => {
                let a = &annotations[j];
                t.deltas.push(Some(coder.encode(&a.bbox, &proposals[i])));
                t.colors.push(a.color);
                t.materials.push(a.material);
            }
            None => {
                t.deltas.push(None);
                t.colors.push(None);
                t.materials.push(None);
            }
        }
    }
    Ok(t)
}
