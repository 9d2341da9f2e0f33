//! One function per subcommand. Each returns what it wrote so tests can
//! compare against direct library calls.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use attrdet::datamodel::{load_manifest, CategorySplit, Dataset, Detection, SplitFile};
use attrdet::evaluation::{
    evaluate_detections, predict_dataset, render_table, render_transfer_table, run_transfer_protocol, EvalConfig,
    EvalReport, TransferReport,
};
use attrdet::geometry::BBox;
use attrdet::model::{checkpoint, ModelVariant, PredictOptions};
use attrdet::synthdata::{generate, write_dataset};
use attrdet::training::{self, AttributeRows, RunOptions, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{fingerprint, to_json, write_json, RunManifest};
use crate::render::{annotate, label_text, PLAIN_RGB, REFERENCE_RGB, TARGET_RGB};
use crate::{CliError, CliResult, EvalArgs, SynthArgs, TrainArgs, VisualizeArgs};

pub const DATASET_MANIFEST: &str = "manifest.json";
/// Upscaling factor for visualizations of small images.
pub const VIS_SCALE: u32 = 4;

fn usage(e: attrdet::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_split(path: &Path, ds: &Dataset) -> CliResult<(SplitFile, CategorySplit)> {
    let file = SplitFile::load(path)?;
    let split = file.resolve(&ds.vocabulary)?;
    Ok((file, split))
}

/// Attribute heads a variant has for this vocabulary: (color, material).
fn heads(variant: ModelVariant, ds: &Dataset) -> (bool, bool) {
    let a = variant.has_attributes();
    (a && ds.vocabulary.num_colors() > 0, a && ds.vocabulary.num_materials() > 0)
}

fn report_markdown(name: &str, report: &EvalReport) -> String {
    let mut s = render_table(&[(name, &report.all)]);
    if report.target.is_some() {
        s.push('\n');
        s.push_str(&render_transfer_table(&[(name, report)]));
    }
    s
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> CliResult<()> {
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("report.md"), report_markdown(name, report))?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult<RunManifest> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let ds = generate(&cfg.synth)?;
    write_dataset(&ds, &a.out, DATASET_MANIFEST)?;
    let m = RunManifest::new("synth", cfg.synth.seed, &cfg.synth, fingerprint(&ds)?)?;
    m.write(&a.out)?;
    println!(
        "wrote {} images ({} objects) to {}; fingerprint {}",
        ds.samples.len(),
        ds.num_annotations(),
        a.out.display(),
        m.dataset_fingerprint
    );
    Ok(m)
}

/// Written as `summary.json` at the end of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: ModelVariant,
    pub seed: u64,
    pub steps: usize,
    pub final_losses: Option<BTreeMap<String, f64>>,
    /// Labeled attribute rows that reached the loss, by category name.
    pub attribute_rows: BTreeMap<String, AttributeRows>,
    pub report: Option<EvalReport>,
}

fn resolve_train(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply_train_overrides(&a.overrides());
    cfg.train.validate().map_err(usage)?;
    Ok(cfg)
}

fn default_dir(prefix: &str, t: &TrainConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{prefix}{}-seed{}", t.variant, t.seed))
}

fn train_run(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    split: Option<&CategorySplit>,
    dir: &Path,
) -> CliResult<(TrainSummary, attrdet::model::Model)> {
    let opts = RunOptions {
        run_dir: Some(dir),
        eval_set: test_set,
        eval: cfg.eval.clone(),
    };
    let outcome = training::train(&cfg.train, train_set, split, &opts)?;
    let report = outcome.evals.last().map(|(_, r)| r.clone());
    if let Some(r) = &report {
        write_report(dir, cfg.train.variant.display_name(), r)?;
    }
    let summary = TrainSummary {
        variant: cfg.train.variant,
        seed: cfg.train.seed,
        steps: cfg.train.max_steps,
        final_losses: outcome.history.last().map(|r| r.losses.clone()),
        attribute_rows: train_set
            .vocabulary
            .categories
            .iter()
            .cloned()
            .zip(outcome.attribute_rows.iter().copied())
            .collect(),
        report,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((summary, outcome.model))
}

pub fn train(a: &TrainArgs) -> CliResult<TrainSummary> {
    let cfg = resolve_train(a)?;
    let train_set = cfg.train_set()?;
    let test_set = if cfg.data.test.is_some() || cfg.data.test_images > 0 {
        Some(cfg.test_set()?)
    } else {
        None
    };
    let split = a.split.as_deref().map(|p| load_split(p, &train_set)).transpose()?;
    let dir = a.out.clone().unwrap_or_else(|| default_dir("", &cfg.train));

    let mut m = RunManifest::new("train", cfg.train.seed, &cfg, fingerprint(&train_set)?)?;
    m.variant = Some(cfg.train.variant);
    m.test_fingerprint = test_set.as_ref().map(fingerprint).transpose()?;
    m.split = split.as_ref().map(|s| s.0.clone());
    m.write(&dir)?;
    if let Some((file, _)) = &split {
        file.write(&dir.join("split.json"))?;
    }

    let (summary, _) = train_run(&cfg, &train_set, test_set.as_ref(), split.as_ref().map(|s| &s.1), &dir)?;
    println!("trained {} for {} steps in {}", summary.variant, summary.steps, dir.display());
    if let Some(r) = &summary.report {
        print!("{}", report_markdown(summary.variant.display_name(), r));
    }
    Ok(summary)
}

pub fn eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalConfig::default(),
    };
    if let Some(c) = a.confidence {
        cfg.score_threshold = c;
    }
    let ds = load_manifest(&a.manifest)?;
    let split = a.split.as_deref().map(|p| load_split(p, &ds)).transpose()?;

    let (dets, heads, name, input) = match (&a.checkpoint, &a.detections) {
        (Some(p), _) => {
            let (model, _) = checkpoint::load(p)?;
            let dets = predict_dataset(&model, &ds, &cfg)?;
            let h = (model.has_color_head(), model.has_material_head());
            (dets, h, model.variant.display_name().to_string(), p)
        }
        (None, Some(p)) => {
            let dets: Vec<Vec<Detection>> = serde_json::from_str(&fs::read_to_string(p)?)?;
            let all: Vec<&Detection> = dets.iter().flatten().collect();
            // an empty set says nothing about the heads; score recall as zero
            let h = (
                all.is_empty() || all.iter().any(|d| !d.color_scores.is_empty()),
                all.is_empty() || all.iter().any(|d| !d.material_scores.is_empty()),
            );
            (dets, h, "Detections".to_string(), p)
        }
        (None, None) => return Err(CliError::Usage("one of --checkpoint or --detections is required".into())),
    };
    let report = evaluate_detections(&dets, &ds, split.as_ref().map(|s| &s.1), heads, &cfg)?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).join("eval"));
    fs::create_dir_all(&dir)?;
    write_report(&dir, &name, &report)?;
    if a.checkpoint.is_some() {
        write_json(&dir.join("detections.json"), &dets)?;
    }
    print!("{}", report_markdown(&name, &report));
    Ok(report)
}

pub const TRANSFER_REPORT: &str = "transfer.json";

pub fn transfer(a: &TrainArgs) -> CliResult<TransferReport> {
    let cfg = resolve_train(a)?;
    let mut train_set = cfg.train_set()?;
    let test_set = cfg.test_set()?;
    if let Some(p) = &a.split {
        let file = SplitFile::load(p)?;
        file.resolve(&train_set.vocabulary)?;
        train_set.groups = Some(file);
    }
    let n = train_set.vocabulary.num_categories();
    if n % 2 != 0 {
        return Err(attrdet::Error::OddCategoryCount(n).into());
    }
    let dir = a.out.clone().unwrap_or_else(|| default_dir("transfer-", &cfg.train));
    let mut m = RunManifest::new("transfer", cfg.train.seed, &cfg, fingerprint(&train_set)?)?;
    m.variant = Some(cfg.train.variant);
    m.test_fingerprint = Some(fingerprint(&test_set)?);
    m.write(&dir)?;

    let report = run_transfer_protocol(
        &train_set,
        &test_set,
        cfg.train.seed,
        heads(cfg.train.variant, &train_set),
        &cfg.eval,
        |i, split, masked| {
            let run_dir = dir.join(format!("run_{i}"));
            let file = split.to_names(&masked.vocabulary);
            let mut rm = RunManifest::new("transfer", cfg.train.seed, &cfg, fingerprint(masked).map_err(cli_to_core)?)
                .map_err(cli_to_core)?;
            rm.variant = Some(cfg.train.variant);
            rm.split = Some(file.clone());
            rm.write(&run_dir).map_err(cli_to_core)?;
            file.write(&run_dir.join("split.json"))?;
            let (_, model) = train_run(&cfg, masked, None, Some(split), &run_dir).map_err(cli_to_core)?;
            predict_dataset(&model, &test_set, &cfg.eval)
        },
    )?;

    let name = cfg.train.variant.display_name();
    let mut md = String::new();
    for (i, r) in report.runs.iter().enumerate() {
        write_report(&dir.join(format!("run_{i}")), name, r)?;
        md.push_str(&format!("Run {}\n\n{}\n", i + 1, render_transfer_table(&[(name, r)])));
    }
    md.push_str(&format!("Average of both runs\n\n{}", render_transfer_table(&[(name, &report.average)])));
    fs::write(dir.join(TRANSFER_REPORT), to_json(&report)?)?;
    fs::write(dir.join("transfer.md"), &md)?;
    print!("{md}");
    Ok(report)
}

fn cli_to_core(e: CliError) -> attrdet::Error {
    match e {
        CliError::Core(e) => e,
        CliError::Io(e) => attrdet::Error::Io(e),
        CliError::Json(e) => attrdet::Error::Json(e),
        CliError::Image(e) => attrdet::Error::Image(e),
        CliError::Usage(m) => attrdet::Error::Config(m),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawnBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
    /// `reference` or `target` when a split was given.
    pub group: Option<String>,
    pub rgb: [u8; 3],
}

/// One entry of `labels.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizedImage {
    pub image_id: String,
    pub file: String,
    pub boxes: Vec<DrawnBox>,
}

pub fn visualize(a: &VisualizeArgs) -> CliResult<Vec<VisualizedImage>> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let ds = load_manifest(&a.manifest)?;
    let split = a.split.as_deref().map(|p| load_split(p, &ds)).transpose()?.map(|s| s.1);
    fs::create_dir_all(&a.out)?;
    let opts = PredictOptions::default();
    let mut out = Vec::with_capacity(ds.samples.len());
    for (i, sample) in ds.samples.iter().enumerate() {
        let img = ds.load_image(i)?;
        let boxes: Vec<DrawnBox> = model
            .predict(&img, &opts)?
            .into_iter()
            .filter(|d| d.score >= a.confidence)
            .map(|d| {
                let (group, rgb) = match &split {
                    Some(s) if s.target.contains(&d.category) => (Some("target".to_string()), TARGET_RGB),
                    Some(_) => (Some("reference".to_string()), REFERENCE_RGB),
                    None => (None, PLAIN_RGB),
                };
                DrawnBox {
                    bbox: d.bbox,
                    label: label_text(&d, &ds.vocabulary),
                    score: d.score,
                    group,
                    rgb,
                }
            })
            .collect();
        let drawn: Vec<(BBox, String, [u8; 3])> = boxes.iter().map(|b| (b.bbox, b.label.clone(), b.rgb)).collect();
        let file = format!("{}.png", sample.image_id);
        annotate(&img, &drawn, VIS_SCALE).save_with_format(a.out.join(&file), image::ImageFormat::Png)?;
        out.push(VisualizedImage {
            image_id: sample.image_id.clone(),
            file,
            boxes,
        });
    }
    write_json(&a.out.join("labels.json"), &out)?;
    println!(
        "drew {} boxes on {} images in {}",
        out.iter().map(|v| v.boxes.len()).sum::<usize>(),
        out.len(),
        a.out.display()
    );
    Ok(out)
}
