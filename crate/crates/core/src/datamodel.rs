//! Ground-truth and prediction types, vocabularies, the dataset manifest,
//! and reference/target category splits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

pub const MIN_IMAGE_SIDE: u32 = 32;

pub const VG20_CATEGORIES: [&str; 20] = [
    "car", "cat", "tree", "chair", "hat", "bottle", "shirt", "table", "bird", "truck", "door",
    "window", "dog", "bear", "bench", "fence", "cow", "cup", "post", "pole",
];

pub const DEFAULT_COLORS: [&str; 12] = [
    "white", "black", "green", "blue", "brown", "red", "gray", "yellow", "orange", "silver",
    "pink", "purple",
];

pub const DEFAULT_MATERIALS: [&str; 4] = ["wood", "metal", "plastic", "glass"];

/// Ordered name lists for categories, colors and materials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub materials: Vec<String>,
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Vocabulary(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}

impl Vocabulary {
    pub fn new(categories: Vec<String>, colors: Vec<String>, materials: Vec<String>) -> Result<Self> {
        let v = Vocabulary {
            categories,
            colors,
            materials,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_names(categories: &[&str], colors: &[&str], materials: &[&str]) -> Result<Self> {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self::new(own(categories), own(colors), own(materials))
    }

    /// 20 categories, 12 colors, 4 materials.
    pub fn vg20() -> Self {
        Self::from_names(&VG20_CATEGORIES, &DEFAULT_COLORS, &DEFAULT_MATERIALS)
            .expect("static vocabulary is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Vocabulary("category list is empty".into()));
        }
        check_unique("category", &self.categories)?;
        check_unique("color", &self.colors)?;
        check_unique("material", &self.materials)?;
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_colors(&self) -> usize {
        self.colors.len()
    }

    pub fn num_materials(&self) -> usize {
        self.materials.len()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub bbox: BBox,
    pub category: usize,
    pub color: Option<usize>,
    pub material: Option<usize>,
}

impl ObjectAnnotation {
    pub fn has_attribute(&self, attr: Attribute) -> bool {
        self.attribute(attr).is_some()
    }

    pub fn attribute(&self, attr: Attribute) -> Option<usize> {
        match attr {
            Attribute::Color => self.color,
            Attribute::Material => self.material,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Material,
}

/// One image and its ground truth. `image` holds the decoded raster when the
/// sample was generated in memory or loaded explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<ObjectAnnotation>,
    pub image: Option<RgbImage>,
}

impl DetectionSample {
    /// Returns the in-memory raster, or reads `image_path` relative to `root`.
    pub fn load_image(&self, root: Option<&Path>) -> Result<RgbImage> {
        if let Some(img) = &self.image {
            return Ok(img.clone());
        }
        let p = match root {
            Some(r) => r.join(&self.image_path),
            None => PathBuf::from(&self.image_path),
        };
        let img = image::open(&p)?.to_rgb8();
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::ManifestValidation(format!(
                "image {} is {}x{}, manifest says {}x{}",
                p.display(),
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        Ok(img)
    }
}

/// One predicted object.
///
/// `category` and `score` identify the class this detection was emitted for
/// (per-class NMS can emit several detections from one region). The three
/// distributions are softmax outputs and each sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    pub category_scores: Vec<f64>,
    pub color_scores: Vec<f64>,
    pub material_scores: Vec<f64>,
    pub objectness: f64,
}

impl Detection {
    pub fn attribute_argmax(&self, attr: Attribute) -> Option<usize> {
        let scores = match attr {
            Attribute::Color => &self.color_scores,
            Attribute::Material => &self.material_scores,
        };
        argmax(scores)
    }
}

pub(crate) fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= *x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Reference categories keep attribute labels during training, target
/// categories do not.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategorySplit {
    pub reference: BTreeSet<usize>,
    pub target: BTreeSet<usize>,
}

impl CategorySplit {
    pub fn new(reference: BTreeSet<usize>, target: BTreeSet<usize>, num_categories: usize) -> Result<Self> {
        let s = CategorySplit { reference, target };
        s.validate(num_categories)?;
        Ok(s)
    }

    /// Checks disjointness and that the union covers `0..num_categories`.
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        if let Some(c) = self.reference.intersection(&self.target).next() {
            return Err(Error::Config(format!("category {c} is both reference and target")));
        }
        let union: BTreeSet<usize> = self.reference.union(&self.target).copied().collect();
        let all: BTreeSet<usize> = (0..num_categories).collect();
        if union != all {
            return Err(Error::Config(format!(
                "split does not cover exactly the {num_categories} categories"
            )));
        }
        Ok(())
    }

    pub fn mirrored(&self) -> Self {
        CategorySplit {
            reference: self.target.clone(),
            target: self.reference.clone(),
        }
    }

    pub fn to_names(&self, vocab: &Vocabulary) -> SplitFile {
        let names = |s: &BTreeSet<usize>| s.iter().map(|&i| vocab.categories[i].clone()).collect();
        SplitFile {
            reference: names(&self.reference),
            target: names(&self.target),
        }
    }
}

/// Name-based, on-disk form of a [`CategorySplit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub reference: Vec<String>,
    pub target: Vec<String>,
}

impl SplitFile {
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<CategorySplit> {
        let idx = |names: &[String]| -> Result<BTreeSet<usize>> {
            names
                .iter()
                .map(|n| {
                    vocab
                        .category_index(n)
                        .ok_or_else(|| Error::Config(format!("split names unknown category {n:?}")))
                })
                .collect()
        };
        CategorySplit::new(idx(&self.reference)?, idx(&self.target)?, vocab.num_categories())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| Error::ManifestParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Builds the two mirrored runs of the transfer protocol: the categories are
/// shuffled by `seed` and cut into equal halves A and B; run A uses A as
/// reference and B as target, run B the reverse.
pub fn make_split(vocab: &Vocabulary, seed: u64) -> Result<(CategorySplit, CategorySplit)> {
    let n = vocab.num_categories();
    if n % 2 != 0 {
        return Err(Error::OddCategoryCount(n));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let group_a: BTreeSet<usize> = ids[..n / 2].iter().copied().collect();
    let group_b: BTreeSet<usize> = ids[n / 2..].iter().copied().collect();
    let run_a = CategorySplit::new(group_a, group_b, n)?;
    let run_b = run_a.mirrored();
    Ok((run_a, run_b))
}

/// Returns a copy where annotations of target categories have no color or
/// material label. Boxes and categories are untouched.
pub fn mask_target_attributes(samples: &[DetectionSample], split: &CategorySplit) -> Vec<DetectionSample> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for a in &mut s.annotations {
                if split.target.contains(&a.category) {
                    a.color = None;
                    a.material = None;
                }
            }
            s
        })
        .collect()
}

/// A loaded manifest: vocabulary, samples, and the directory image paths are
/// relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub samples: Vec<DetectionSample>,
    pub root: Option<PathBuf>,
    /// Optional fixed category grouping for the transfer protocol.
    pub groups: Option<SplitFile>,
}

impl Dataset {
    pub fn new(vocabulary: Vocabulary, samples: Vec<DetectionSample>) -> Self {
        Dataset {
            vocabulary,
            samples,
            root: None,
            groups: None,
        }
    }

    pub fn load_image(&self, index: usize) -> Result<RgbImage> {
        self.samples[index].load_image(self.root.as_deref())
    }

    pub fn num_annotations(&self) -> usize {
        self.samples.iter().map(|s| s.annotations.len()).sum()
    }

    /// Same dataset but with target-category attributes removed.
    pub fn masked(&self, split: &CategorySplit) -> Dataset {
        Dataset {
            samples: mask_target_attributes(&self.samples, split),
            ..self.clone()
        }
    }
}

// On-disk manifest records. Names, not indices, are stored so a manifest stays
// readable and survives vocabulary reordering by external exporters.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    vocabulary: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<SplitFile>,
    samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    image_id: String,
    image_path: String,
    width: u32,
    height: u32,
    annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    category: String,
    color: Option<String>,
    material: Option<String>,
}

fn resolve(names: &[String], name: &str, kind: &str, locator: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::ManifestValidation(format!("{locator}: unknown {kind} {name:?}")))
}

fn sample_from_record(vocab: &Vocabulary, rec: SampleRecord, index: usize) -> Result<DetectionSample> {
    let loc = format!("sample {index} (image_id {:?})", rec.image_id);
    if rec.width < MIN_IMAGE_SIDE || rec.height < MIN_IMAGE_SIDE {
        return Err(Error::ManifestValidation(format!(
            "{loc}: image {}x{} smaller than {MIN_IMAGE_SIDE}px",
            rec.width, rec.height
        )));
    }
    let mut annotations = Vec::with_capacity(rec.annotations.len());
    for (j, a) in rec.annotations.into_iter().enumerate() {
        let aloc = format!("{loc}, annotation {j}");
        let [x1, y1, x2, y2] = a.bbox;
        let raw = BBox { x1, y1, x2, y2 };
        let bbox = raw.clip(rec.width as f64, rec.height as f64);
        if !bbox.is_valid() {
            return Err(Error::ManifestValidation(format!(
                "{aloc}: box {:?} is degenerate after clipping to the image",
                a.bbox
            )));
        }
        let category = resolve(&vocab.categories, &a.category, "category", &aloc)?;
        let color = a
            .color
            .map(|c| resolve(&vocab.colors, &c, "color", &aloc))
            .transpose()?;
        let material = a
            .material
            .map(|m| resolve(&vocab.materials, &m, "material", &aloc))
            .transpose()?;
        annotations.push(ObjectAnnotation {
            bbox,
            category,
            color,
            material,
        });
    }
    Ok(DetectionSample {
        image_id: rec.image_id,
        image_path: rec.image_path,
        width: rec.width,
        height: rec.height,
        annotations,
        image: None,
    })
}

fn record_from_sample(vocab: &Vocabulary, s: &DetectionSample) -> Result<SampleRecord> {
    let name = |names: &[String], i: usize, what: &'static str| -> Result<String> {
        names.get(i).cloned().ok_or(Error::LabelOutOfRange {
            what,
            label: i,
            classes: names.len(),
        })
    };
    let annotations = s
        .annotations
        .iter()
        .map(|a| {
            Ok(AnnotationRecord {
                bbox: a.bbox.to_array(),
                category: name(&vocab.categories, a.category, "category")?,
                color: a.color.map(|c| name(&vocab.colors, c, "color")).transpose()?,
                material: a
                    .material
                    .map(|m| name(&vocab.materials, m, "material"))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleRecord {
        image_id: s.image_id.clone(),
        image_path: s.image_path.clone(),
        width: s.width,
        height: s.height,
        annotations,
    })
}

/// Parses a manifest from text. `path` is only used in error messages.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Dataset> {
    let file: ManifestFile = serde_json::from_str(text).map_err(|source| Error::ManifestParse {
        path: path.to_path_buf(),
        source,
    })?;
    file.vocabulary.validate()?;
    let vocabulary = file.vocabulary;
    let samples = file
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, rec)| sample_from_record(&vocabulary, rec, i))
        .collect::<Result<Vec<_>>>()?;
    if let Some(g) = &file.groups {
        // a fixed grouping must itself be a valid split
        g.resolve(&vocabulary)?;
    }
    Ok(Dataset {
        vocabulary,
        samples,
        root: path.parent().map(Path::to_path_buf),
        groups: file.groups,
    })
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path)
}

/// Canonical manifest text: pretty JSON, fixed key order, sample order as given.
pub fn manifest_to_string(dataset: &Dataset) -> Result<String> {
    let file = ManifestFile {
        vocabulary: dataset.vocabulary.clone(),
        groups: dataset.groups.clone(),
        samples: dataset
            .samples
            .iter()
            .map(|s| record_from_sample(&dataset.vocabulary, s))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, manifest_to_string(dataset)?)?;
    Ok(())
}

/// Per-category count of annotations that carry each attribute.
pub fn attribute_counts(samples: &[DetectionSample], num_categories: usize) -> HashMap<Attribute, Vec<usize>> {
    let mut out = HashMap::new();
    for attr in [Attribute::Color, Attribute::Material] {
        let mut counts = vec![0; num_categories];
        for a in samples.iter().flat_map(|s| &s.annotations) {
            if a.has_attribute(attr) {
                counts[a.category] += 1;
            }
        }
        out.insert(attr, counts);
    }
    out
}
