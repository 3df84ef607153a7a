//! Colour-edit studies on the shapes dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, PaletteColor, ShapesSample, IMAGE_SIZE};
use super::image_io::quantize;
use super::metrics::{dominant_color, psnr, psnr_region, ssim, ssim_region};
use crate::control::AttentionMode;
use crate::error::{Error, Result};
use crate::flow::Latent;
use crate::mask::{dilate, EditMask};
use crate::pipeline::{run_inversion_phase, run_sampling_phase, EditConfig, EditableModel, Inversion};

/// One source image and the colour it should be recoloured to.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub id: String,
    pub source: ShapesSample,
    pub target_color: PaletteColor,
    pub source_prompt: String,
    pub target_prompt: String,
}

impl EditCase {
    /// Pixels the shape covers in the source image.
    pub fn edit_region(&self) -> &[bool] {
        &self.source.mask
    }

    /// Pixels outside the shape's patches grown by `dilation` steps.
    pub fn unedited_region(&self, patch: usize, dilation: usize) -> Result<Vec<bool>> {
        let m = EditMask::from_pixels(&self.source.mask, (IMAGE_SIZE, IMAGE_SIZE), patch)?;
        Ok(dilate(&m, dilation).complement().pixel_view(patch))
    }
}

/// `n` recolouring cases drawn from a dataset that does not overlap the
/// training draw when `seed` differs from the training dataset seed.
pub fn color_edit_cases(n: usize, seed: u64) -> Vec<EditCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0105);
    generate_dataset(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, source)| {
            let others: Vec<PaletteColor> = PaletteColor::ALL
                .into_iter()
                .filter(|&c| c != source.attributes.color)
                .collect();
            let target_color = others[rng.random_range(0..others.len())];
            let target = super::data::Attributes {
                color: target_color,
                ..source.attributes
            };
            EditCase {
                id: format!("case{i:03}"),
                source_prompt: source.caption.clone(),
                target_prompt: target.caption(),
                target_color,
                source,
            }
        })
        .collect()
}

/// Named pipeline configuration compared in a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: EditConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: EditConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

/// Both modules off, masked blend only, latent shift only, both.
pub fn ablation_variants(base: &EditConfig) -> Vec<Variant> {
    let with = |kvmix, latents_shift| EditConfig {
        kvmix,
        latents_shift,
        ..base.clone()
    };
    vec![
        Variant::new("none", with(false, false)),
        Variant::new("kv-mix", with(true, false)),
        Variant::new("latents-shift", with(false, true)),
        Variant::new("kv-mix+latents-shift", with(true, true)),
    ]
}

/// Full pipeline once per attention combination.
pub fn sweep_variants(base: &EditConfig, modes: &[AttentionMode]) -> Vec<Variant> {
    modes
        .iter()
        .map(|&m| {
            let mut cfg = base.clone();
            cfg.schedule.mode = m;
            Variant::new(m.as_str(), cfg)
        })
        .collect()
}

/// Full pipeline against global V injection and against no injection.
pub fn comparison_variants(base: &EditConfig) -> Vec<Variant> {
    vec![
        Variant::new("full", base.clone()),
        Variant::new("global-v", base.global_injection(AttentionMode::V)),
        Variant::new("no-injection", base.without_injection()),
    ]
}

/// Metrics of one case under one variant and noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub variant: String,
    pub case_id: String,
    pub seed: u64,
    pub target_color: PaletteColor,
    pub dominant_color: Option<PaletteColor>,
    pub edit_success: bool,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr_unedited: Option<f64>,
    pub ssim_unedited: Option<f64>,
    pub mask_area: Option<usize>,
    pub error: Option<String>,
}

/// Edited image of a successful job, for persistence.
#[derive(Debug, Clone)]
pub struct JobImages {
    pub edited: Latent,
    pub mask: Option<EditMask>,
}

/// Settings shared by every job of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    /// Dilation of the ground-truth region before taking its complement.
    pub unedited_dilation: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self { unedited_dilation: 1 }
    }
}

fn score(
    case: &EditCase,
    edited: &Latent,
    source: &Latent,
    unedited: &[bool],
    variant: &str,
    seed: u64,
    mask: Option<&EditMask>,
) -> Result<CaseOutcome> {
    let edited = quantize(edited)?;
    let dominant = dominant_color(&edited, case.edit_region())?;
    Ok(CaseOutcome {
        variant: variant.to_string(),
        case_id: case.id.clone(),
        seed,
        target_color: case.target_color,
        dominant_color: dominant,
        edit_success: dominant == Some(case.target_color),
        psnr: Some(psnr(&edited, source)?),
        ssim: Some(ssim(&edited, source)?),
        psnr_unedited: Some(psnr_region(&edited, source, unedited)?),
        ssim_unedited: Some(ssim_region(&edited, source, unedited)?),
        mask_area: mask.map(EditMask::area),
        error: None,
    })
}

fn failed(case: &EditCase, variant: &str, seed: u64, err: &Error) -> CaseOutcome {
    CaseOutcome {
        variant: variant.to_string(),
        case_id: case.id.clone(),
        seed,
        target_color: case.target_color,
        dominant_color: None,
        edit_success: false,
        psnr: None,
        ssim: None,
        psnr_unedited: None,
        ssim_unedited: None,
        mask_area: None,
        error: Some(err.to_string()),
    }
}

/// Inversion settings able to serve every variant: the shared schedule,
/// Q recorded if any variant substitutes it, and a mask.
fn inversion_config(variants: &[Variant]) -> Result<EditConfig> {
    let first = &variants
        .first()
        .ok_or_else(|| crate::error::invalid("a study needs at least one variant"))?
        .config;
    for v in variants {
        let c = &v.config;
        if c.num_steps != first.num_steps
            || c.spacing != first.spacing
            || c.solver != first.solver
            || c.threshold != first.threshold
            || c.mask_source != first.mask_source
            || c.edit_words != first.edit_words
            || c.schedule.active_steps != first.schedule.active_steps
            || c.schedule.block_kinds != first.schedule.block_kinds
        {
            return Err(crate::error::invalid(format!(
                "variant '{}' needs a different inversion than '{}'",
                v.name, variants[0].name
            )));
        }
    }
    let any_q = variants.iter().any(|v| {
        let c = &v.config;
        c.schedule.mode.uses_q() || c.baseline_mode.is_some_and(AttentionMode::uses_q)
    });
    let mut cfg = first.clone();
    cfg.kvmix = variants.iter().any(|v| v.config.kvmix || v.config.latents_shift);
    cfg.latents_shift = false;
    if any_q {
        cfg.schedule.mode = AttentionMode::QKV;
    }
    Ok(cfg)
}

/// Runs every variant on every case and noise seed.
///
/// Each case is inverted once and sampled once per variant and seed; seeds
/// only matter to variants with the latent shift on, so the others are
/// sampled once and their outcome repeated. Cases run in parallel.
pub fn run_study<M: EditableModel + Sync + ?Sized>(
    model: &M,
    cases: &[EditCase],
    seeds: &[u64],
    variants: &[Variant],
    settings: StudySettings,
    on_job: impl Fn(&CaseOutcome, Option<&JobImages>) -> Result<()> + Sync,
) -> Result<Vec<CaseOutcome>> {
    let inv_cfg = inversion_config(variants)?;
    let patch = model.latent_shape().1 / model.token_grid().0;
    let per_case: Vec<Vec<CaseOutcome>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<CaseOutcome>> {
            let source = case.source.latent()?;
            let unedited = case.unedited_region(patch, settings.unedited_dilation)?;
            let inversion = run_inversion_phase(model, &source, &case.source_prompt, &case.target_prompt, &inv_cfg, None);
            // a mask failure only sinks the variants that use the mask
            let maskless: Option<Result<Inversion>> = match &inversion {
                Err(e) if matches!(e.root(), Error::DegenerateMask(_) | Error::NoEditTokens) => {
                    let plain = EditConfig {
                        kvmix: false,
                        latents_shift: false,
                        ..inv_cfg.clone()
                    };
                    Some(run_inversion_phase(model, &source, &case.source_prompt, &case.target_prompt, &plain, None))
                }
                _ => None,
            };
            let mut out = Vec::new();
            for v in variants {
                let uses_seed = v.config.latents_shift;
                let mut first: Option<CaseOutcome> = None;
                for &seed in seeds {
                    if let (false, Some(prev)) = (uses_seed, &first) {
                        let repeat = CaseOutcome { seed, ..prev.clone() };
                        on_job(&repeat, None)?;
                        out.push(repeat);
                        continue;
                    }
                    let cfg = EditConfig {
                        noise_seed: seed,
                        ..v.config.clone()
                    };
                    let needs_mask = cfg.kvmix || cfg.latents_shift;
                    let inv = match (&maskless, needs_mask) {
                        (Some(plain), false) => plain,
                        _ => &inversion,
                    };
                    let result = match inv {
                        Err(e) => Err(e.to_string()),
                        Ok(inv) => run_sampling_phase(model, inv, &case.target_prompt, &cfg)
                            .map(|s| (s.image, if needs_mask { inv.mask.clone() } else { None }))
                            .map_err(|e| e.to_string()),
                    };
                    let outcome = match result {
                        Ok((edited, mask)) => {
                            let o = score(case, &edited, &source, &unedited, &v.name, seed, mask.as_ref())?;
                            on_job(&o, Some(&JobImages { edited, mask }))?;
                            o
                        }
                        Err(msg) => {
                            let o = failed(case, &v.name, seed, &crate::error::invalid(msg));
                            on_job(&o, None)?;
                            o
                        }
                    };
                    log::debug!("{} {} seed {}: success {}", v.name, case.id, seed, outcome.edit_success);
                    first.get_or_insert_with(|| outcome.clone());
                    out.push(outcome);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// Aggregate of one variant over all its jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub name: String,
    pub jobs: usize,
    pub failures: usize,
    /// `None` where success is undefined (no target colour).
    pub edit_success_rate: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr_unedited: Option<f64>,
    pub ssim_unedited: Option<f64>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per variant, in variant order.
pub fn summarize(variants: &[Variant], outcomes: &[CaseOutcome]) -> Vec<StudyRow> {
    variants
        .iter()
        .map(|v| {
            let rows: Vec<&CaseOutcome> = outcomes.iter().filter(|o| o.variant == v.name).collect();
            let n = rows.len();
            StudyRow {
                name: v.name.clone(),
                jobs: n,
                failures: rows.iter().filter(|o| o.error.is_some()).count(),
                edit_success_rate: Some(rows.iter().filter(|o| o.edit_success).count() as f64 / n.max(1) as f64),
                psnr: mean(rows.iter().map(|o| o.psnr)),
                ssim: mean(rows.iter().map(|o| o.ssim)),
                psnr_unedited: mean(rows.iter().map(|o| o.psnr_unedited)),
                ssim_unedited: mean(rows.iter().map(|o| o.ssim_unedited)),
            }
        })
        .collect()
}

/// Markdown table of study rows.
pub fn format_table(rows: &[StudyRow]) -> String {
    let f = |x: Option<f64>, p: usize| x.map_or("-".to_string(), |v| format!("{v:.p$}"));
    let mut s = String::from("| variant | jobs | failed | edit success | PSNR | SSIM | PSNR unedited | SSIM unedited |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.name,
            r.jobs,
            r.failures,
            f(r.edit_success_rate, 3),
            f(r.psnr, 2),
            f(r.ssim, 4),
            f(r.psnr_unedited, 2),
            f(r.ssim_unedited, 4)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_change_only_the_colour() {
        let cases = color_edit_cases(30, 1000);
        assert_eq!(cases.len(), 30);
        for c in &cases {
            assert_ne!(c.target_color, c.source.attributes.color);
            let s: Vec<&str> = c.source_prompt.split(' ').collect();
            let t: Vec<&str> = c.target_prompt.split(' ').collect();
            let diffs: Vec<usize> = (0..s.len()).filter(|&i| s[i] != t[i]).collect();
            assert_eq!(diffs, vec![1]);
        }
        let again = color_edit_cases(30, 1000);
        assert!(cases.iter().zip(&again).all(|(a, b)| a.target_prompt == b.target_prompt));
    }

    #[test]
    fn unedited_region_excludes_the_shape() {
        let c = &color_edit_cases(1, 7)[0];
        let region = c.unedited_region(4, 1).unwrap();
        assert!(c.edit_region().iter().zip(&region).all(|(&shape, &keep)| !(shape && keep)));
        assert!(region.iter().filter(|&&k| k).count() > 256);
    }

    #[test]
    fn variant_sets() {
        let base = EditConfig::default();
        let names: Vec<String> = ablation_variants(&base).into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["none", "kv-mix", "latents-shift", "kv-mix+latents-shift"]);
        let sweep = sweep_variants(&base, &AttentionMode::ALL);
        assert_eq!(sweep.len(), 4);
        assert_eq!(sweep[1].config.schedule.mode, AttentionMode::QV);
        let inv = inversion_config(&sweep).unwrap();
        assert_eq!(inv.schedule.mode, AttentionMode::QKV);
        let mut bad = ablation_variants(&base);
        bad[1].config.num_steps = 3;
        assert!(inversion_config(&bad).is_err());
    }

    #[test]
    fn summary_means_skip_failures() {
        let v = vec![Variant::new("a", EditConfig::default())];
        let ok = CaseOutcome {
            variant: "a".into(),
            case_id: "c".into(),
            seed: 0,
            target_color: PaletteColor::Red,
            dominant_color: Some(PaletteColor::Red),
            edit_success: true,
            psnr: Some(20.0),
            ssim: Some(0.5),
            psnr_unedited: Some(30.0),
            ssim_unedited: Some(0.9),
            mask_area: Some(4),
            error: None,
        };
        let bad = CaseOutcome {
            edit_success: false,
            psnr: None,
            ssim: None,
            psnr_unedited: None,
            ssim_unedited: None,
            error: Some("x".into()),
            ..ok.clone()
        };
        let rows = summarize(&v, &[ok, bad]);
        assert_eq!(rows[0].jobs, 2);
        assert_eq!(rows[0].failures, 1);
        assert_eq!(rows[0].edit_success_rate, Some(0.5));
        assert_eq!(rows[0].psnr_unedited, Some(30.0));
        assert!(format_table(&rows).contains("| a | 2 | 1 | 0.500 |"));
    }
}
