//! Deterministic synthetic shapes benchmark.
//!
//! Every image is a cluttered gray background with a few geometric shapes,
//! each painted in one named color with per-pixel jitter and modulated by a
//! texture that stands in for its material. Boxes are the exact extent of
//! the painted shape mask.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_manifest, Dataset, DetectionSample, ObjectAnnotation, Vocabulary};
use crate::geometry::BBox;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
        }
    }

    /// Whether the normalized point `(u, v)` in `[-1, 1]^2` is inside the shape.
    fn covers(&self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square | ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= 0.5 * (v + 1.0),
            ShapeKind::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.34) || (v.abs() <= 1.0 && u.abs() <= 0.34)
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub min_size: u32,
    pub max_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [u8; 3],
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Speckle,
    Stripe,
    GlossGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub name: String,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: u32,
    pub categories: Vec<ShapeSpec>,
    pub colors: Vec<ColorSpec>,
    pub materials: Vec<MaterialSpec>,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    pub seed: u64,
    /// Probability that an object keeps its color and material labels.
    pub attribute_label_rate: f64,
    /// Probability that an object takes its category's preferred color
    /// (category index modulo the color count) instead of a uniform draw.
    pub color_bias: f64,
    /// Same as `color_bias` for materials.
    pub material_bias: f64,
    /// Objects in one image must overlap less than this IoU.
    pub max_overlap_iou: f64,
    /// Placement attempts per image before giving up.
    pub max_retries: usize,
    /// Inclusive range of background clutter rectangles.
    pub clutter: (usize, usize),
    /// Probability of one thin occluding bar drawn on top of the scene.
    pub occluder_rate: f64,
    pub image_prefix: String,
}

fn color(name: &str, rgb: [u8; 3]) -> ColorSpec {
    ColorSpec {
        name: name.into(),
        rgb,
        jitter: 12.0,
    }
}

impl Default for SynthConfig {
    /// The desk-scale benchmark: 64x64 images, 6 shapes, 6 colors, 2 materials.
    fn default() -> Self {
        SynthConfig {
            n_images: 2000,
            image_size: 64,
            categories: ShapeKind::ALL
                .iter()
                .map(|&kind| ShapeSpec {
                    kind,
                    min_size: if kind == ShapeKind::Bar { 18 } else { 12 },
                    max_size: if kind == ShapeKind::Bar { 30 } else { 26 },
                })
                .collect(),
            colors: vec![
                color("red", [215, 40, 40]),
                color("green", [40, 170, 60]),
                color("blue", [45, 75, 215]),
                color("yellow", [230, 205, 40]),
                color("white", [240, 240, 240]),
                color("black", [22, 22, 22]),
            ],
            materials: vec![
                MaterialSpec {
                    name: "plastic".into(),
                    texture: Texture::Flat,
                },
                MaterialSpec {
                    name: "wood".into(),
                    texture: Texture::Stripe,
                },
            ],
            objects_per_image: (2, 4),
            seed: 0,
            attribute_label_rate: 1.0 / 3.0,
            color_bias: 0.0,
            material_bias: 0.0,
            max_overlap_iou: 0.3,
            max_retries: 500,
            clutter: (2, 4),
            occluder_rate: 0.25,
            image_prefix: "img".into(),
        }
    }
}

impl SynthConfig {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(
            self.categories.iter().map(|c| c.kind.name().to_string()).collect(),
            self.colors.iter().map(|c| c.name.clone()).collect(),
            self.materials.iter().map(|m| m.name.clone()).collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 || self.colors.len() < 2 || self.materials.is_empty() {
            return Err(Error::Config(
                "synthetic data needs at least 2 categories, 2 colors and 1 material".into(),
            ));
        }
        if self.image_size < crate::datamodel::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi || self.clutter.0 > self.clutter.1 {
            return Err(Error::Config("empty range in objects_per_image or clutter".into()));
        }
        for s in &self.categories {
            if s.min_size < 4 || s.min_size > s.max_size || s.max_size >= self.image_size {
                return Err(Error::Config(format!("bad size range for {}", s.kind.name())));
            }
        }
        for (what, p) in [
            ("attribute_label_rate", self.attribute_label_rate),
            ("color_bias", self.color_bias),
            ("material_bias", self.material_bias),
            ("occluder_rate", self.occluder_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Ground truth for one rendered object: the pre-jitter color and the
/// material, before label dropping.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObject {
    pub bbox: BBox,
    pub category: usize,
    pub color: usize,
    pub material: usize,
}

struct Placement {
    kind: ShapeKind,
    category: usize,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

impl Placement {
    fn nominal_box(&self) -> BBox {
        BBox {
            x1: self.cx - self.half_w,
            y1: self.cy - self.half_h,
            x2: self.cx + self.half_w,
            y2: self.cy + self.half_h,
        }
    }

    fn covers_pixel(&self, px: u32, py: u32) -> bool {
        let u = (px as f64 + 0.5 - self.cx) / self.half_w;
        let v = (py as f64 + 0.5 - self.cy) / self.half_h;
        self.kind.covers(u, v)
    }

    fn pixel_ranges(&self, sz: f64) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
        let n = self.nominal_box();
        (
            (n.x1.floor().max(0.0) as u32)..(n.x2.ceil().min(sz) as u32),
            (n.y1.floor().max(0.0) as u32)..(n.y2.ceil().min(sz) as u32),
        )
    }

    /// Tight box around the covered pixels, if any.
    fn mask_box(&self, sz: f64) -> Option<BBox> {
        let (xs, ys) = self.pixel_ranges(sz);
        let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in ys {
            for x in xs.clone() {
                if self.covers_pixel(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).ok()
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn draw_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, rgb: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, Rgb(rgb));
        }
    }
}

/// Applies a texture factor to a jittered color. Factors above 1 blend toward
/// white; factors below 1 blend toward black, or toward light gray for dark
/// colors so the texture stays visible on them.
fn shade(rgb: [u8; 3], f: f64, mut jitter: impl FnMut() -> f64) -> [u8; 3] {
    let luma = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    let (toward, t) = if f >= 1.0 {
        (255.0, f - 1.0)
    } else if luma < 70.0 {
        (200.0, 1.0 - f)
    } else {
        (0.0, 1.0 - f)
    };
    rgb.map(|c| {
        let v = c as f64 + jitter();
        clamp_u8(v + (toward - v) * t)
    })
}

fn texture_factor(texture: Texture, x: u32, y: u32, bbox: &BBox, rng: &mut ChaCha8Rng) -> f64 {
    match texture {
        Texture::Flat => 1.0,
        Texture::Speckle => {
            if rng.random::<f64>() < 0.25 {
                if rng.random::<bool>() {
                    1.35
                } else {
                    0.6
                }
            } else {
                1.0
            }
        }
        Texture::Stripe => {
            if ((x + y) / 4) % 2 == 0 {
                0.6
            } else {
                1.0
            }
        }
        Texture::GlossGradient => {
            let t = ((x as f64 - bbox.x1) / bbox.width() + (y as f64 - bbox.y1) / bbox.height()) / 2.0;
            1.35 - 0.7 * t.clamp(0.0, 1.0)
        }
    }
}

/// Renders one image. The RNG stream is derived from `(seed, index)` only, so
/// images can be produced in any order.
pub fn render_image(config: &SynthConfig, index: usize) -> Result<(RgbImage, Vec<RenderedObject>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let size = config.image_size;
    let sz = size as f64;

    let base: f64 = rng.random_range(70.0..150.0);
    let noise = Normal::new(0.0, 6.0).expect("valid stddev");
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let g = clamp_u8(base + noise.sample(&mut rng));
            img.put_pixel(x, y, Rgb([g, g, g]));
        }
    }
    let n_clutter = rng.random_range(config.clutter.0..=config.clutter.1);
    for _ in 0..n_clutter {
        let w = rng.random_range(4..=(size / 4).max(5));
        let h = rng.random_range(4..=(size / 4).max(5));
        let x0 = rng.random_range(0..size - w);
        let y0 = rng.random_range(0..size - h);
        // low-saturation tint so clutter never reads as a palette color
        let tint: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let lvl = rng.random_range(60.0..170.0);
        let rgb = tint.map(|t| clamp_u8(lvl + 40.0 * (t - 0.5)));
        draw_rect(&mut img, x0, y0, w, h, rgb);
    }

    let n_objects = rng.random_range(config.objects_per_image.0..=config.objects_per_image.1);
    let mut placed: Vec<(Placement, BBox)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_objects {
        attempts += 1;
        if attempts > config.max_retries {
            return Err(Error::SceneTooCrowded {
                image_index: index,
                retries: config.max_retries,
            });
        }
        let category = rng.random_range(0..config.categories.len());
        let spec = &config.categories[category];
        let s = rng.random_range(spec.min_size..=spec.max_size) as f64;
        let (w, h) = if spec.kind == ShapeKind::Bar {
            if rng.random::<bool>() {
                (s, (s / 3.0).max(4.0))
            } else {
                ((s / 3.0).max(4.0), s)
            }
        } else {
            (s, s)
        };
        let cx = rng.random_range(w / 2.0..=sz - w / 2.0);
        let cy = rng.random_range(h / 2.0..=sz - h / 2.0);
        let p = Placement {
            kind: spec.kind,
            category,
            cx,
            cy,
            half_w: w / 2.0,
            half_h: h / 2.0,
        };
        let Some(tight) = p.mask_box(sz) else { continue };
        if placed
            .iter()
            .any(|(_, b)| b.iou(&tight) >= config.max_overlap_iou)
        {
            continue;
        }
        placed.push((p, tight));
    }

    let mut objects = Vec::with_capacity(placed.len());
    for (p, tight) in &placed {
        let nominal = &p.nominal_box();
        let category = p.category;
        let n_colors = config.colors.len();
        let color = if rng.random::<f64>() < config.color_bias {
            category % n_colors
        } else {
            rng.random_range(0..n_colors)
        };
        let n_materials = config.materials.len();
        let material = if rng.random::<f64>() < config.material_bias {
            category % n_materials
        } else {
            rng.random_range(0..n_materials)
        };
        let cspec = &config.colors[color];
        let texture = config.materials[material].texture;
        let jitter = Normal::new(0.0, cspec.jitter.max(1e-9)).expect("valid stddev");

        let (xs, ys) = p.pixel_ranges(sz);
        for y in ys {
            for x in xs.clone() {
                if !p.covers_pixel(x, y) {
                    continue;
                }
                let f = texture_factor(texture, x, y, nominal, &mut rng);
                let rgb = shade(cspec.rgb, f, || jitter.sample(&mut rng));
                img.put_pixel(x, y, Rgb(rgb));
            }
        }
        objects.push(RenderedObject {
            bbox: *tight,
            category,
            color,
            material,
        });
    }

    if rng.random::<f64>() < config.occluder_rate {
        let horizontal = rng.random::<bool>();
        let len = rng.random_range(size / 4..size / 2);
        let at = rng.random_range(0..size - 2);
        let start = rng.random_range(0..size - len);
        let lvl = clamp_u8(rng.random_range(40.0..200.0));
        if horizontal {
            draw_rect(&mut img, start, at, len, 2, [lvl; 3]);
        } else {
            draw_rect(&mut img, at, start, 2, len, [lvl; 3]);
        }
    }

    Ok((img, objects))
}

/// Generates the whole dataset in memory. Label dropping uses its own RNG
/// stream so it never perturbs rendering.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let vocabulary = config.vocabulary()?;
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed);
    label_rng.set_stream(0);
    let digits = config.n_images.max(1).to_string().len().max(5);
    let mut samples = Vec::with_capacity(config.n_images);
    for index in 0..config.n_images {
        let (img, objects) = render_image(config, index)?;
        let annotations = objects
            .into_iter()
            .map(|o| {
                let keep = label_rng.random::<f64>() < config.attribute_label_rate;
                ObjectAnnotation {
                    bbox: o.bbox,
                    category: o.category,
                    color: keep.then_some(o.color),
                    material: keep.then_some(o.material),
                }
            })
            .collect();
        let image_id = format!("{}{:0digits$}", config.image_prefix, index);
        samples.push(DetectionSample {
            image_path: format!("images/{image_id}.png"),
            image_id,
            width: config.image_size,
            height: config.image_size,
            annotations,
            image: Some(img),
        });
    }
    Ok(Dataset::new(vocabulary, samples))
}

/// Writes every in-memory image as PNG under `out_dir` and the manifest to
/// `out_dir/manifest_name`.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path, manifest_name: &str) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for s in &dataset.samples {
        if let Some(img) = &s.image {
            let p = out_dir.join(&s.image_path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            img.save_with_format(&p, image::ImageFormat::Png)?;
        }
    }
    write_manifest(dataset, &out_dir.join(manifest_name))
}
