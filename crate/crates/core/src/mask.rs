//! Edit-region masks read off the joint attention map.
//!
//! The mask is taken from the text-to-visual attention rows of the edited
//! words in the last Double block, averaged over heads and words, thresholded
//! at `mean + k * std`, and grown by 8-neighbourhood dilation.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::tokenizer::{word_id, PAD_ID, UNK_ID};
use crate::model::TokenIds;

/// Binary mask over the visual-token (patch) grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditMask {
    rows: usize,
    cols: usize,
    values: Vec<bool>,
}

impl EditMask {
    pub fn from_tokens(values: Vec<bool>, (rows, cols): (usize, usize)) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                got: vec![values.len()],
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn empty(grid: (usize, usize)) -> Self {
        Self {
            rows: grid.0,
            cols: grid.1,
            values: vec![false; grid.0 * grid.1],
        }
    }

    pub fn full(grid: (usize, usize)) -> Self {
        Self {
            rows: grid.0,
            cols: grid.1,
            values: vec![true; grid.0 * grid.1],
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn tokens(&self) -> &[bool] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.cols + c]
    }

    /// Patch-grid view.
    pub fn to_grid(&self) -> Vec<Vec<bool>> {
        self.values.chunks(self.cols).map(|r| r.to_vec()).collect()
    }

    pub fn from_grid(grid: &[Vec<bool>]) -> Result<Self> {
        let rows = grid.len();
        let cols = grid.first().map(Vec::len).unwrap_or(0);
        if grid.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged mask grid"));
        }
        Self::from_tokens(grid.concat(), (rows, cols))
    }

    /// Nearest-neighbour upsample to pixels, row-major `(rows*patch, cols*patch)`.
    pub fn pixel_view(&self, patch: usize) -> Vec<bool> {
        let w = self.cols * patch;
        let h = self.rows * patch;
        (0..h * w)
            .map(|i| self.get((i / w) / patch, (i % w) / patch))
            .collect()
    }

    /// Patch-level mask of a pixel mask: a patch is set if any pixel in it is.
    pub fn from_pixels(pixels: &[bool], (height, width): (usize, usize), patch: usize) -> Result<Self> {
        if pixels.len() != height * width || patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(invalid("pixel mask does not tile into patches"));
        }
        let (rows, cols) = (height / patch, width / patch);
        let mut values = vec![false; rows * cols];
        for (i, _) in pixels.iter().enumerate().filter(|(_, &p)| p) {
            values[(i / width / patch) * cols + (i % width) / patch] = true;
        }
        Self::from_tokens(values, (rows, cols))
    }

    /// `(visual_tokens,)` tensor of 0/1 in the given dtype.
    pub fn token_tensor(&self, dtype: DType) -> Result<Tensor> {
        let v: Vec<f32> = self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, self.values.len(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn complement(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    pub fn contains_all(&self, other: &EditMask) -> bool {
        self.grid() == other.grid() && self.values.iter().zip(&other.values).all(|(a, b)| *a || !*b)
    }

    /// Grayscale 0/255 image at patch resolution (`patch = 1`) or upsampled.
    pub fn to_image(&self, patch: usize) -> image::GrayImage {
        let px = self.pixel_view(patch);
        let (w, h) = ((self.cols * patch) as u32, (self.rows * patch) as u32);
        image::GrayImage::from_fn(w, h, |x, y| image::Luma([if px[(y * w + x) as usize] { 255 } else { 0 }]))
    }

    pub fn save_png(&self, path: &Path, patch: usize) -> Result<()> {
        self.to_image(patch).save(path)?;
        Ok(())
    }

    /// Reads a grayscale mask at patch or pixel resolution; values above 127 are set.
    pub fn load_png(path: &Path, grid: (usize, usize), patch: usize) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bits: Vec<bool> = img.pixels().map(|p| p.0[0] > 127).collect();
        if (h, w) == grid {
            Self::from_tokens(bits, grid)
        } else if (h, w) == (grid.0 * patch, grid.1 * patch) {
            Self::from_pixels(&bits, (h, w), patch)
        } else {
            Err(invalid(format!(
                "mask image is {w}x{h}, expected {}x{} or {}x{}",
                grid.1,
                grid.0,
                grid.1 * patch,
                grid.0 * patch
            )))
        }
    }
}

/// Grows the mask by `steps` rounds of 8-neighbourhood dilation.
pub fn dilate(mask: &EditMask, steps: usize) -> EditMask {
    let (rows, cols) = mask.grid();
    let mut cur = mask.clone();
    for _ in 0..steps {
        let mut next = cur.clone();
        for r in 0..rows {
            for c in 0..cols {
                if !cur.get(r, c) {
                    continue;
                }
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols {
                            next.values[nr as usize * cols + nc as usize] = true;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    MeanPlusKStd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub rule: ThresholdRule,
    pub k: f64,
    pub dilation_steps: usize,
    pub head_reduction: Reduction,
    pub token_reduction: Reduction,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            rule: ThresholdRule::MeanPlusKStd,
            k: 1.0,
            dilation_steps: 1,
            head_reduction: Reduction::Mean,
            token_reduction: Reduction::Mean,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.k.is_finite() {
            return Err(invalid("threshold k must be finite"));
        }
        Ok(())
    }
}

/// Source-prompt positions of the words the edit changes.
///
/// Without an override this is the positional diff of the two padded id
/// sequences, restricted to real (non-pad, non-unknown) source words. With
/// an override it is every source position holding one of the given words.
pub fn select_edit_tokens(source: &TokenIds, target: &TokenIds, override_words: Option<&[String]>) -> Result<Vec<usize>> {
    if source.max_len() != target.max_len() {
        return Err(invalid("prompts were tokenized with different lengths"));
    }
    let usable = |i: usize| !source.is_pad(i) && source.ids()[i] != UNK_ID && source.ids()[i] != PAD_ID;
    let picked: Vec<usize> = match override_words {
        Some(words) => {
            let ids: Vec<u32> = words.iter().map(|w| word_id(&w.to_lowercase())).collect();
            (0..source.max_len())
                .filter(|&i| usable(i) && ids.contains(&source.ids()[i]))
                .collect()
        }
        None => (0..source.max_len())
            .filter(|&i| usable(i) && source.ids()[i] != target.ids()[i])
            .collect(),
    };
    if picked.is_empty() {
        return Err(Error::NoEditTokens);
    }
    Ok(picked)
}

fn reduce(values: impl Iterator<Item = f64>, how: Reduction) -> f64 {
    let mut n = 0usize;
    let mut acc = match how {
        Reduction::Mean => 0.0,
        Reduction::Max => f64::NEG_INFINITY,
    };
    for v in values {
        n += 1;
        acc = match how {
            Reduction::Mean => acc + v,
            Reduction::Max => acc.max(v),
        };
    }
    match how {
        Reduction::Mean => acc / n.max(1) as f64,
        Reduction::Max => acc,
    }
}

/// Per-visual-token relevance of the edit words.
///
/// `attn` is `(heads, tokens, tokens)` or `(1, heads, tokens, tokens)` with
/// the `num_text` text tokens first.
pub fn relevance(attn: &Tensor, edit_tokens: &[usize], num_text: usize, cfg: &ThresholdConfig) -> Result<Vec<f64>> {
    if edit_tokens.is_empty() {
        return Err(Error::NoEditTokens);
    }
    let attn = match attn.rank() {
        4 => attn.squeeze(0)?,
        3 => attn.clone(),
        r => return Err(invalid(format!("attention map must be rank 3 or 4, got {r}"))),
    };
    let probs = attn.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let tokens = probs.first().map(Vec::len).unwrap_or(0);
    if num_text >= tokens || edit_tokens.iter().any(|&i| i >= num_text) {
        return Err(invalid("edit token outside the text segment"));
    }
    Ok((num_text..tokens)
        .map(|col| {
            reduce(
                edit_tokens.iter().map(|&row| {
                    reduce(probs.iter().map(|head| head[row][col]), cfg.head_reduction)
                }),
                cfg.token_reduction,
            )
        })
        .collect())
}

/// Thresholds a relevance vector and applies the configured dilation.
pub fn binarize(relevance: &[f64], grid: (usize, usize), cfg: &ThresholdConfig) -> Result<EditMask> {
    cfg.validate()?;
    if relevance.len() != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch {
            expected: vec![grid.0, grid.1],
            got: vec![relevance.len()],
        });
    }
    if relevance.iter().all(|&r| r == 0.0) {
        return Err(Error::DegenerateMask("relevance is zero everywhere".into()));
    }
    let n = relevance.len() as f64;
    let mean = relevance.iter().sum::<f64>() / n;
    let std = (relevance.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = match cfg.rule {
        ThresholdRule::MeanPlusKStd => mean + cfg.k * std,
    };
    let values: Vec<bool> = relevance.iter().map(|&r| r > threshold).collect();
    if !values.iter().any(|&v| v) {
        return Err(Error::DegenerateMask(format!(
            "no visual token exceeds the threshold {threshold:.4}"
        )));
    }
    Ok(dilate(&EditMask::from_tokens(values, grid)?, cfg.dilation_steps))
}

/// Edit mask from the attention map of one forward pass.
pub fn extract_mask(
    attn: &Tensor,
    edit_tokens: &[usize],
    num_text: usize,
    grid: (usize, usize),
    cfg: &ThresholdConfig,
) -> Result<EditMask> {
    binarize(&relevance(attn, edit_tokens, num_text, cfg)?, grid, cfg)
}
