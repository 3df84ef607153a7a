//! Procedural captioned-shapes dataset.
//!
//! Each sample is one anti-aliased shape in a palette colour over a grey
//! gradient background, captioned `a {color} {shape} on the {position}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::Latent;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteColor {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    Magenta,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 8] = [
        PaletteColor::Red,
        PaletteColor::Orange,
        PaletteColor::Yellow,
        PaletteColor::Green,
        PaletteColor::Cyan,
        PaletteColor::Blue,
        PaletteColor::Purple,
        PaletteColor::Magenta,
    ];

    pub fn word(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Orange => "orange",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Green => "green",
            PaletteColor::Cyan => "cyan",
            PaletteColor::Blue => "blue",
            PaletteColor::Purple => "purple",
            PaletteColor::Magenta => "magenta",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }

    /// RGB in `[0, 1]`.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            PaletteColor::Red => [1.0, 0.0, 0.0],
            PaletteColor::Orange => [1.0, 0.5, 0.0],
            PaletteColor::Yellow => [1.0, 1.0, 0.0],
            PaletteColor::Green => [0.0, 1.0, 0.0],
            PaletteColor::Cyan => [0.0, 1.0, 1.0],
            PaletteColor::Blue => [0.0, 0.0, 1.0],
            PaletteColor::Purple => [0.5, 0.0, 1.0],
            PaletteColor::Magenta => [1.0, 0.0, 1.0],
        }
    }

    /// Hue in degrees.
    pub fn hue(self) -> f64 {
        let [r, g, b] = self.rgb();
        rgb_hue(r as f64, g as f64, b as f64).expect("palette colours are chromatic")
    }
}

/// Hue in degrees of an RGB triple, `None` for greys.
pub fn rgb_hue(r: f64, g: f64, b: f64) -> Option<f64> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c <= 1e-9 {
        return None;
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some(h * 60.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::Left,
        Position::Right,
        Position::Top,
        Position::Bottom,
        Position::Center,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
            Position::Top => "top",
            Position::Bottom => "bottom",
            Position::Center => "center",
        }
    }

    fn anchor(self) -> (f64, f64) {
        match self {
            Position::Left => (9.0, 16.0),
            Position::Right => (23.0, 16.0),
            Position::Top => (16.0, 9.0),
            Position::Bottom => (16.0, 23.0),
            Position::Center => (16.0, 16.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: PaletteColor,
    pub shape: ShapeKind,
    pub position: Position,
    /// Always 1 in this dataset.
    pub count: usize,
}

impl Attributes {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} on the {}",
            self.color.word(),
            self.shape.word(),
            self.position.word()
        )
    }
}

/// Geometry and background of a rendered sample, enough to re-render it
/// with different attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub center: (f64, f64),
    pub size: f64,
    pub bg_base: f64,
    pub bg_amplitude: f64,
    pub bg_angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    /// `(3, 32, 32)` channel-major values in `[-1, 1]`.
    pub image: Vec<f32>,
    pub caption: String,
    /// Row-major `32 x 32`, `true` wherever the shape covers a pixel.
    pub mask: Vec<bool>,
    pub attributes: Attributes,
    pub layout: Layout,
}

impl ShapesSample {
    pub fn latent(&self) -> Result<Latent> {
        Latent::from_vec(self.image.clone(), (CHANNELS, IMAGE_SIZE, IMAGE_SIZE))
    }
}

const SUPERSAMPLE: usize = 4;

fn inside(shape: ShapeKind, (cx, cy): (f64, f64), size: f64, x: f64, y: f64) -> bool {
    match shape {
        ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= size * size,
        ShapeKind::Square => (x - cx).abs() <= size * 0.85 && (y - cy).abs() <= size * 0.85,
        ShapeKind::Triangle => {
            // apex up, base down
            let top = cy - size;
            let bottom = cy + size * 0.8;
            if y < top || y > bottom {
                return false;
            }
            let half = size * (y - top) / (bottom - top);
            (x - cx).abs() <= half
        }
    }
}

/// Renders one sample; pure function of attributes and layout.
pub fn render(attributes: Attributes, layout: Layout) -> ShapesSample {
    let n = IMAGE_SIZE;
    let mut image = vec![0f32; CHANNELS * n * n];
    let mut mask = vec![false; n * n];
    let rgb = attributes.color.rgb();
    let (ca, sa) = (layout.bg_angle.cos(), layout.bg_angle.sin());
    for py in 0..n {
        for px in 0..n {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if inside(attributes.shape, layout.center, layout.size, x, y) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let u = ((px as f64 + 0.5 - 16.0) * ca + (py as f64 + 0.5 - 16.0) * sa) / 16.0;
            let bg = (layout.bg_base + layout.bg_amplitude * u).clamp(-1.0, 1.0);
            for c in 0..CHANNELS {
                let fg = 2.0 * rgb[c] as f64 - 1.0;
                image[c * n * n + py * n + px] = (coverage * fg + (1.0 - coverage) * bg) as f32;
            }
            mask[py * n + px] = hits > 0;
        }
    }
    ShapesSample {
        image,
        caption: attributes.caption(),
        mask,
        attributes,
        layout,
    }
}

fn random_sample(rng: &mut ChaCha8Rng) -> ShapesSample {
    let attributes = Attributes {
        color: PaletteColor::ALL[rng.random_range(0..PaletteColor::ALL.len())],
        shape: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
        position: Position::ALL[rng.random_range(0..Position::ALL.len())],
        count: 1,
    };
    let (ax, ay) = attributes.position.anchor();
    let layout = Layout {
        center: (ax + rng.random_range(-1.5..1.5), ay + rng.random_range(-1.5..1.5)),
        size: rng.random_range(5.0..7.0),
        bg_base: rng.random_range(-0.7..0.1),
        bg_amplitude: rng.random_range(-0.25..0.25),
        bg_angle: rng.random_range(0.0..std::f64::consts::TAU),
    };
    render(attributes, layout)
}

/// `n` samples, deterministic in `seed`.
pub fn generate_dataset(n: usize, seed: u64) -> Vec<ShapesSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_sample(&mut rng)).collect()
}

/// SHA-256 over image bytes and captions.
pub fn dataset_hash(samples: &[ShapesSample]) -> String {
    use sha2::Digest;
    let mut h = sha2::Sha256::new();
    for s in samples {
        for v in &s.image {
            h.update(v.to_le_bytes());
        }
        h.update(s.caption.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Pearson chi-square statistic of observed counts against a uniform law.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::{tokenize, UNK_ID};

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(16, 42);
        let b = generate_dataset(16, 42);
        assert_eq!(dataset_hash(&a), dataset_hash(&b));
        assert_eq!(a, b);
        assert_ne!(dataset_hash(&a), dataset_hash(&generate_dataset(16, 43)));
    }

    #[test]
    fn masks_non_empty_and_match_pixels() {
        for s in generate_dataset(200, 1) {
            assert!(s.mask.iter().any(|&m| m));
            // outside the mask every pixel is pure grey background
            for p in 0..IMAGE_SIZE * IMAGE_SIZE {
                let px = [s.image[p], s.image[1024 + p], s.image[2048 + p]];
                if !s.mask[p] {
                    assert!(px[0] == px[1] && px[1] == px[2]);
                }
            }
            assert!(s.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn captions_stay_inside_vocabulary() {
        for s in generate_dataset(100, 5) {
            let ids = tokenize(&s.caption, 8).unwrap();
            assert_eq!(ids.len(), 6);
            assert!(!ids.ids().contains(&UNK_ID), "{}", s.caption);
        }
    }

    #[test]
    fn attribute_marginals_are_uniform() {
        let data = generate_dataset(1000, 2024);
        let mut colors = [0usize; 8];
        let mut shapes = [0usize; 3];
        let mut positions = [0usize; 5];
        for s in &data {
            colors[PaletteColor::ALL.iter().position(|c| *c == s.attributes.color).unwrap()] += 1;
            shapes[ShapeKind::ALL.iter().position(|c| *c == s.attributes.shape).unwrap()] += 1;
            positions[Position::ALL.iter().position(|c| *c == s.attributes.position).unwrap()] += 1;
        }
        // 0.999 quantiles of chi-square with 7, 2 and 4 degrees of freedom
        for (counts, critical) in [(&colors[..], 24.32), (&shapes[..], 13.82), (&positions[..], 18.47)] {
            let k = counts.len() as f64;
            for &c in counts {
                assert!((c as f64 / 1000.0 - 1.0 / k).abs() <= 0.05, "{counts:?}");
            }
            assert!(chi_square_uniform(counts) < critical, "{counts:?}");
        }
    }

    #[test]
    fn palette_hues() {
        let hues: Vec<f64> = PaletteColor::ALL.iter().map(|c| c.hue()).collect();
        assert_eq!(hues, vec![0.0, 30.0, 60.0, 120.0, 180.0, 240.0, 270.0, 300.0]);
        assert_eq!(rgb_hue(0.3, 0.3, 0.3), None);
    }
}
