//! Procedural toy benchmark: 32×32 colored geometric lesions on textured skin.
//!
//! The class is the lesion shape. Color, size, surface texture, background tone
//! and position vary within each class, and every sample carries a ground-truth
//! attribute description that can stand in for a multimodal-model answer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{sin, sqrt};
use crate::rng::{derive, streams};
use crate::Image;

pub const SIDE: usize = 32;
pub const CLASS_NAMES: [&str; 3] = ["round", "angular", "triangular"];

const COLORS: [(&str, [f64; 3]); 3] =
    [("red", [0.78, 0.18, 0.16]), ("brown", [0.42, 0.24, 0.10]), ("purple", [0.48, 0.20, 0.62])];
const SIZES: [(&str, f64); 3] = [("small", 5.0), ("medium", 8.0), ("large", 11.0)];
const TEXTURES: [&str; 3] = ["smooth", "spotted", "striped"];
const TONES: [(&str, [f64; 3]); 2] = [("light", [0.95, 0.82, 0.72]), ("dark", [0.62, 0.45, 0.34])];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyAttributes {
    pub class: usize,
    pub color: usize,
    pub size: usize,
    pub texture: usize,
    pub tone: usize,
    pub center: (f64, f64),
    /// Seed for the background grain.
    pub grain: u64,
}

impl ToyAttributes {
    pub fn describe(&self) -> String {
        format!(
            "a {} {} {} lesion with {} texture on {} skin",
            SIZES[self.size].0, COLORS[self.color].0, CLASS_NAMES[self.class], TEXTURES[self.texture], TONES[self.tone].0
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub class: usize,
    pub attributes: ToyAttributes,
    pub image: Image,
    pub description: String,
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => sqrt(dx * dx + dy * dy) <= r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        _ => {
            // apex up, base at dy = 0.8r
            let top = -r;
            let base = 0.8 * r;
            dy >= top && dy <= base && dx.abs() <= (dy - top) / (base - top) * r
        }
    }
}

pub fn render(attrs: &ToyAttributes) -> Image {
    let mut grain_rng = derive(attrs.grain, streams::TOY, 1);
    let tone = TONES[attrs.tone].1;
    let color = COLORS[attrs.color].1;
    let r = SIZES[attrs.size].1;
    let (cx, cy) = attrs.center;
    let mut data = alloc::vec![0.0; 3 * SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let grain: f64 = grain_rng.random_range(-0.04..0.04);
            let wave = 0.03 * sin(0.7 * x as f64 + 0.4 * y as f64);
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let lesion = inside(attrs.class, dx, dy, r);
            let shade = match (lesion, attrs.texture) {
                (false, _) => 0.0,
                (true, 1) if (x % 4 < 2) && (y % 4 < 2) => -0.22,
                (true, 2) if (y / 2) % 2 == 0 => -0.18,
                _ => 0.0,
            };
            for c in 0..3 {
                let base = if lesion { color[c] + shade } else { tone[c] + wave };
                data[(c * SIDE + y) * SIDE + x] = (base + grain).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(3, SIDE, SIDE, data).expect("rendered values are clamped")
}

/// `count` samples with classes assigned round-robin; ids are `"{prefix}-{index:04}"`.
pub fn generate(count: usize, seed: u64, prefix: &str) -> Vec<ToySample> {
    (0..count)
        .map(|i| {
            let mut rng = derive(seed, streams::TOY, i as u64 + 2);
            let class = i % CLASS_NAMES.len();
            let size = rng.random_range(0..SIZES.len());
            let r = SIZES[size].1;
            let margin = r + 1.5;
            let span = SIDE as f64 - 2.0 * margin;
            let jitter = |rng: &mut crate::rng::StreamRng| margin + if span > 0.0 { rng.random_range(0.0..span) } else { 0.0 };
            let attributes = ToyAttributes {
                class,
                color: rng.random_range(0..COLORS.len()),
                size,
                texture: rng.random_range(0..TEXTURES.len()),
                tone: rng.random_range(0..TONES.len()),
                center: (jitter(&mut rng), jitter(&mut rng)),
                grain: rng.random(),
            };
            ToySample {
                id: format!("{prefix}-{i:04}"),
                class,
                image: render(&attributes),
                description: attributes.describe(),
                attributes,
            }
        })
        .collect()
}
