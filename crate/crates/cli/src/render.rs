//! Box and label drawing for `attrdet visualize`.

use attrdet::datamodel::{Attribute, Detection, Vocabulary};
use attrdet::geometry::BBox;
use image::{imageops, Rgb, RgbImage};

pub const REFERENCE_RGB: [u8; 3] = [30, 90, 255];
pub const TARGET_RGB: [u8; 3] = [255, 40, 40];
/// Used when no split is given.
pub const PLAIN_RGB: [u8; 3] = [40, 220, 40];

pub const GLYPH_W: u32 = 3;
pub const GLYPH_H: u32 = 5;

/// 3x5 glyphs, one 3-bit row per entry, most significant bit on the left.
/// Letters render as capitals.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '|' => [0b010, 0b010, 0b010, 0b010, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        ' ' => [0; 5],
        _ => [0b110, 0b001, 0b010, 0b000, 0b010],
    }
}

/// `category|color|material`, with `-` for an attribute the model does not
/// predict.
pub fn label_text(det: &Detection, vocab: &Vocabulary) -> String {
    let name = |list: &[String], attr| {
        det.attribute_argmax(attr).and_then(|i| list.get(i)).map_or("-", |s| s.as_str()).to_string()
    };
    format!(
        "{}|{}|{}",
        vocab.categories.get(det.category).map_or("?", |s| s.as_str()),
        name(&vocab.colors, Attribute::Color),
        name(&vocab.materials, Attribute::Material)
    )
}

fn put(img: &mut RgbImage, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(rgb));
    }
}

/// Draws text with its top-left corner at `(x, y)`; pixels outside the image
/// are dropped.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, rgb: [u8; 3]) {
    for (i, c) in text.chars().enumerate() {
        let ox = x + i as i64 * (GLYPH_W as i64 + 1);
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    put(img, ox + col as i64, y + row as i64, rgb);
                }
            }
        }
    }
}

pub fn text_width(text: &str) -> u32 {
    (text.chars().count() as u32 * (GLYPH_W + 1)).saturating_sub(1)
}

/// Rectangle outline `thickness` pixels wide, inside the box edge.
pub fn draw_rect(img: &mut RgbImage, b: &BBox, rgb: [u8; 3], thickness: i64) {
    let (x1, y1) = (b.x1.round() as i64, b.y1.round() as i64);
    let (x2, y2) = (b.x2.round() as i64 - 1, b.y2.round() as i64 - 1);
    for t in 0..thickness {
        for x in x1..=x2 {
            put(img, x, y1 + t, rgb);
            put(img, x, y2 - t, rgb);
        }
        for y in y1..=y2 {
            put(img, x1 + t, y, rgb);
            put(img, x2 - t, y, rgb);
        }
    }
}

/// Upscales `img` by `scale` and draws each `(box, label, color)` with the
/// label on a filled strip above the box (below it at the top edge).
pub fn annotate(img: &RgbImage, boxes: &[(BBox, String, [u8; 3])], scale: u32) -> RgbImage {
    let mut out = imageops::resize(img, img.width() * scale, img.height() * scale, imageops::FilterType::Nearest);
    let s = scale as f64;
    for (b, label, rgb) in boxes {
        let sb = BBox {
            x1: b.x1 * s,
            y1: b.y1 * s,
            x2: b.x2 * s,
            y2: b.y2 * s,
        };
        draw_rect(&mut out, &sb, *rgb, 2);
        let h = GLYPH_H as i64 + 2;
        let x = sb.x1.round() as i64;
        let mut y = sb.y1.round() as i64 - h;
        if y < 0 {
            y = sb.y1.round() as i64 + 2;
        }
        for dy in 0..h {
            for dx in 0..text_width(label) as i64 + 2 {
                put(&mut out, x + dx, y + dy, *rgb);
            }
        }
        draw_text(&mut out, x + 1, y + 1, label, [255, 255, 255]);
    }
    out
}
