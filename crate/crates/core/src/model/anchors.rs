use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

/// Anchor sizes per pyramid level (pixels, square-root of the area) and the
/// aspect ratios (height / width) shared by every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub sizes: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            sizes: vec![vec![12.0, 16.0, 22.0], vec![28.0, 36.0, 48.0]],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.sizes.first().map_or(0, |s| s.len()) * self.ratios.len()
    }

    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if self.sizes.len() != num_levels {
            return Err(Error::Config(format!(
                "anchor sizes given for {} levels, backbone has {num_levels}",
                self.sizes.len()
            )));
        }
        if self.sizes.iter().any(|s| s.len() != self.sizes[0].len() || s.is_empty()) {
            return Err(Error::Config("every level needs the same nonzero number of anchor sizes".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().chain(self.sizes.iter().flatten()).any(|v| *v <= 0.0) {
            return Err(Error::Config("anchor sizes and ratios must be positive".into()));
        }
        Ok(())
    }
}

/// A full anchor set for one image size, ordered level, row, column, size,
/// ratio (the same order the RPN head flattens its outputs in).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub level: Vec<usize>,
    /// Feature-map shape per level.
    pub shapes: Vec<(usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Output size of a stride-2, padding-1, kernel-3 convolution chain.
pub fn feature_size(input: usize, level: usize) -> usize {
    let mut s = input;
    for _ in 0..level {
        s = (s - 1) / 2 + 1;
    }
    s
}

pub fn generate_anchors(cfg: &AnchorConfig, levels: &[usize], height: usize, width: usize) -> AnchorSet {
    let mut boxes = Vec::new();
    let mut level_of = Vec::new();
    let mut shapes = Vec::new();
    for (li, &l) in levels.iter().enumerate() {
        let stride = (1usize << l) as f64;
        let (fh, fw) = (feature_size(height, l), feature_size(width, l));
        shapes.push((fh, fw));
        for y in 0..fh {
            for x in 0..fw {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                for &size in &cfg.sizes[li] {
                    for &r in &cfg.ratios {
                        let w = size / r.sqrt();
                        let h = size * r.sqrt();
                        boxes.push(BBox {
                            x1: cx - 0.5 * w,
                            y1: cy - 0.5 * h,
                            x2: cx + 0.5 * w,
                            y2: cy + 0.5 * h,
                        });
                        level_of.push(li);
                    }
                }
            }
        }
    }
    AnchorSet {
        boxes,
        level: level_of,
        shapes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_count_64px() {
        let a = generate_anchors(&AnchorConfig::default(), &[3, 4], 64, 64);
        assert_eq!(a.len(), (8 * 8 + 4 * 4) * 9);
        assert_eq!(a.len(), 720);
        assert_eq!(a.shapes, vec![(8, 8), (4, 4)]);
    }

    #[test]
    fn anchor_geometry() {
        let cfg = AnchorConfig {
            sizes: vec![vec![16.0], vec![32.0]],
            ratios: vec![0.5, 1.0, 2.0],
        };
        let a = generate_anchors(&cfg, &[3, 4], 64, 64);
        // first location, ratio 1 is square and centered on the cell
        let b = a.boxes[1];
        assert_eq!(b.center(), (4.0, 4.0));
        assert!((b.width() - 16.0).abs() < 1e-12 && (b.height() - 16.0).abs() < 1e-12);
        // ratio 2 is twice as tall as wide with the same area
        let t = a.boxes[2];
        assert!((t.height() / t.width() - 2.0).abs() < 1e-12);
        assert!((t.area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn uneven_image_sizes() {
        assert_eq!(feature_size(65, 3), 9);
        assert_eq!(feature_size(33, 1), 17);
    }
}
