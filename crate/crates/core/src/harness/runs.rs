//! Persisted runs: resolved configs in, run directories out.
//!
//! A run directory holds `config.json` (the fully resolved config, enough to
//! repeat the run), the produced images and masks, `metrics.json` (pure
//! function of the inputs, no timings), `diagnostics.json` (timings and
//! per-step velocity norms) and `manifest.json`, written last.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle_core::DType;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::data::{generate_dataset, PaletteColor};
use super::experiments::{
    ablation_variants, color_edit_cases, comparison_variants, format_table, run_study, summarize, sweep_variants,
    CaseOutcome, StudyRow, StudySettings, Variant,
};
use super::image_io::{load_png, quantize, save_png};
use super::metrics::{dominant_color, psnr, psnr_region, ssim, ssim_region, MetricsReport};
use crate::control::AttentionMode;
use crate::error::{invalid, Result};
use crate::flow::Latent;
use crate::mask::EditMask;
use crate::model::{load_checkpoint, ToyMmDit};
use crate::pipeline::{edit, reconstruct, EditConfig};

pub const RUN_SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Where the source image of a single edit comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    Png(PathBuf),
    /// Sample `index` of `generate_dataset(index + 1, seed)`.
    Dataset { seed: u64, index: usize },
}

/// Config of the `edit` and `reconstruct` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditRunConfig {
    pub schema_version: u32,
    pub checkpoint: PathBuf,
    pub image: ImageSource,
    /// Defaults to the dataset caption for dataset images.
    pub source_prompt: Option<String>,
    pub target_prompt: Option<String>,
    /// Externally supplied edit mask (patch or pixel resolution PNG).
    pub mask: Option<PathBuf>,
    pub save_cache: bool,
    pub edit: EditConfig,
}

impl Default for EditRunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            checkpoint: PathBuf::from("checkpoints/shapes-toy.safetensors"),
            image: ImageSource::Dataset { seed: 1000, index: 0 },
            source_prompt: None,
            target_prompt: None,
            mask: None,
            save_cache: false,
            edit: EditConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Ablate,
    Sweep,
    Compare,
}

/// Config of the `ablate` and `sweep` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub schema_version: u32,
    pub kind: StudyKind,
    pub checkpoint: PathBuf,
    pub num_cases: usize,
    pub case_seed: u64,
    /// Latent-shift noise seeds; every case runs once per seed.
    pub seeds: Vec<u64>,
    /// Attention combinations compared by a sweep.
    pub modes: Vec<AttentionMode>,
    pub settings: StudySettings,
    pub save_images: bool,
    pub edit: EditConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            kind: StudyKind::Ablate,
            checkpoint: PathBuf::from("checkpoints/shapes-toy.safetensors"),
            num_cases: 20,
            case_seed: 1000,
            seeds: vec![0, 1, 2],
            modes: AttentionMode::ALL.to_vec(),
            settings: StudySettings::default(),
            save_images: true,
            edit: EditConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn variants(&self) -> Vec<Variant> {
        match self.kind {
            StudyKind::Ablate => ablation_variants(&self.edit),
            StudyKind::Sweep => sweep_variants(&self.edit, &self.modes),
            StudyKind::Compare => comparison_variants(&self.edit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub model_seed: u64,
    pub noise_seeds: Vec<u64>,
    pub files: Vec<String>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub rows: Vec<StudyRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub single: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jobs: Vec<CaseOutcome>,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn check_schema(v: u32) -> Result<()> {
    if v != RUN_SCHEMA_VERSION {
        return Err(invalid(format!("run config schema version {v} is not supported")));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(ToyMmDit, String)> {
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt.model(DType::F32)?, ckpt.hash))
}

fn prepare_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    // a stale manifest would mark a half-written directory as complete
    let m = out.join(MANIFEST_FILE);
    if m.exists() {
        std::fs::remove_file(m)?;
    }
    Ok(())
}

fn listing(out: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for entry in walk(out)? {
        let rel = entry.strip_prefix(out).unwrap_or(&entry).to_string_lossy().replace('\\', "/");
        if rel != MANIFEST_FILE {
            files.push(rel);
        }
    }
    files.sort();
    Ok(files)
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn finish(out: &Path, command: &str, checkpoint: &Path, hash: String, model_seed: u64, noise_seeds: Vec<u64>) -> Result<RunManifest> {
    let manifest = RunManifest {
        schema_version: RUN_SCHEMA_VERSION,
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint: checkpoint.to_path_buf(),
        checkpoint_hash: hash,
        model_seed,
        noise_seeds,
        files: listing(out)?,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

struct Loaded {
    image: Latent,
    source_prompt: String,
    ground_truth: Option<Vec<bool>>,
}

fn load_source(cfg: &EditRunConfig) -> Result<Loaded> {
    match &cfg.image {
        ImageSource::Png(p) => Ok(Loaded {
            image: load_png(p)?,
            source_prompt: cfg
                .source_prompt
                .clone()
                .ok_or_else(|| invalid("source_prompt is required for PNG inputs"))?,
            ground_truth: None,
        }),
        ImageSource::Dataset { seed, index } => {
            let sample = generate_dataset(index + 1, *seed).pop().expect("non-empty draw");
            Ok(Loaded {
                image: sample.latent()?,
                source_prompt: cfg.source_prompt.clone().unwrap_or(sample.caption),
                ground_truth: Some(sample.mask),
            })
        }
    }
}

/// Colour word in the target prompt that the source prompt lacks.
fn target_color(source: &str, target: &str) -> Option<PaletteColor> {
    let src: Vec<String> = source.split_whitespace().map(str::to_lowercase).collect();
    target
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| !src.contains(w))
        .find_map(|w| PaletteColor::from_word(&w))
}

fn single_report(
    run_id: &str,
    out: &Latent,
    source: &Latent,
    edit_region: Option<&[bool]>,
    target: Option<PaletteColor>,
) -> Result<MetricsReport> {
    let keep: Option<Vec<bool>> = edit_region.map(|r| r.iter().map(|&x| !x).collect());
    let keep = keep.filter(|k| k.iter().any(|&x| x));
    let (pu, su) = match &keep {
        Some(k) => (psnr_region(out, source, k)?, ssim_region(out, source, k)?),
        None => (psnr(out, source)?, ssim(out, source)?),
    };
    let success = match (edit_region, target) {
        (Some(r), Some(c)) if r.iter().any(|&x| x) => Some(dominant_color(out, r)? == Some(c)),
        _ => None,
    };
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        psnr: psnr(out, source)?,
        ssim: ssim(out, source)?,
        psnr_unedited: pu,
        ssim_unedited: su,
        edit_success: success,
    })
}

fn row_of(name: &str, r: &MetricsReport) -> StudyRow {
    StudyRow {
        name: name.to_string(),
        jobs: 1,
        failures: 0,
        edit_success_rate: r.edit_success.map(|s| s as u8 as f64),
        psnr: Some(r.psnr),
        ssim: Some(r.ssim),
        psnr_unedited: Some(r.psnr_unedited),
        ssim_unedited: Some(r.ssim_unedited),
    }
}

/// Runs one edit and writes its run directory.
pub fn execute_edit(cfg: &EditRunConfig, out: &Path) -> Result<MetricsFile> {
    check_schema(cfg.schema_version)?;
    cfg.edit.validate()?;
    let target_prompt = cfg
        .target_prompt
        .clone()
        .ok_or_else(|| invalid("target_prompt is required for an edit"))?;
    let (model, hash) = load_model(&cfg.checkpoint)?;
    let src = load_source(cfg)?;
    let grid = (model.config().grid_size(), model.config().grid_size());
    let mask_override = match &cfg.mask {
        Some(p) => Some(EditMask::load_png(p, grid, model.config().patch_size)?),
        None => None,
    };
    prepare_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;

    let result = edit(&model, &src.image, &src.source_prompt, &target_prompt, &cfg.edit, mask_override.as_ref())?;
    save_png(&src.image, &out.join("source.png"))?;
    save_png(&result.edited, &out.join("edited.png"))?;
    if let Some(r) = &result.reconstructed {
        save_png(r, &out.join("reconstructed.png"))?;
    }
    let patch = model.config().patch_size;
    if let Some(m) = &result.mask {
        m.save_png(&out.join("mask.png"), 1)?;
        m.save_png(&out.join("mask_pixels.png"), patch)?;
    }
    if cfg.save_cache {
        result.cache.save(&out.join("cache.safetensors"))?;
    }

    let edited = quantize(&result.edited)?;
    let source = quantize(&src.image)?;
    let region = src.ground_truth.clone().or_else(|| result.mask.as_ref().map(|m| m.pixel_view(patch)));
    let report = single_report("edit", &edited, &source, region.as_deref(), target_color(&src.source_prompt, &target_prompt))?;
    let metrics = MetricsFile {
        rows: vec![row_of("edit", &report)],
        single: vec![report],
        jobs: Vec::new(),
    };
    write_json(&out.join(METRICS_FILE), &metrics)?;
    write_json(&out.join(DIAGNOSTICS_FILE), &result.diagnostics)?;
    finish(out, "edit", &cfg.checkpoint, hash, cfg.edit.model_seed, vec![cfg.edit.noise_seed])?;
    Ok(metrics)
}

/// Inverts and re-samples under the source prompt.
pub fn execute_reconstruct(cfg: &EditRunConfig, out: &Path) -> Result<MetricsFile> {
    check_schema(cfg.schema_version)?;
    cfg.edit.validate()?;
    let (model, hash) = load_model(&cfg.checkpoint)?;
    let src = load_source(cfg)?;
    prepare_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let rec = reconstruct(&model, &src.image, &src.source_prompt, &cfg.edit)?;
    save_png(&src.image, &out.join("source.png"))?;
    save_png(&rec, &out.join("reconstructed.png"))?;
    let report = single_report("reconstruct", &quantize(&rec)?, &quantize(&src.image)?, None, None)?;
    let metrics = MetricsFile {
        rows: vec![row_of("reconstruct", &report)],
        single: vec![report],
        jobs: Vec::new(),
    };
    write_json(&out.join(METRICS_FILE), &metrics)?;
    finish(out, "reconstruct", &cfg.checkpoint, hash, cfg.edit.model_seed, vec![])?;
    Ok(metrics)
}

/// Runs a multi-case study and writes per-job outputs under `jobs/`.
pub fn execute_study(cfg: &StudyConfig, out: &Path) -> Result<MetricsFile> {
    check_schema(cfg.schema_version)?;
    cfg.edit.validate()?;
    if cfg.num_cases == 0 || cfg.seeds.is_empty() {
        return Err(invalid("a study needs at least one case and one seed"));
    }
    let variants = cfg.variants();
    for v in &variants {
        v.config.validate()?;
    }
    let (model, hash) = load_model(&cfg.checkpoint)?;
    let cases = color_edit_cases(cfg.num_cases, cfg.case_seed);
    prepare_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let patch = model.config().patch_size;
    let written = Mutex::new(());
    let outcomes = run_study(&model, &cases, &cfg.seeds, &variants, cfg.settings, |o, images| {
        if !cfg.save_images {
            return Ok(());
        }
        let Some(images) = images else { return Ok(()) };
        let dir = out.join("jobs").join(&o.variant).join(format!("{}_s{}", o.case_id, o.seed));
        let _guard = written.lock().expect("job writer lock");
        std::fs::create_dir_all(&dir)?;
        save_png(&images.edited, &dir.join("edited.png"))?;
        if let Some(m) = &images.mask {
            m.save_png(&dir.join("mask_pixels.png"), patch)?;
        }
        Ok(())
    })?;
    let mut outcomes = outcomes;
    outcomes.sort_by(|a, b| (&a.variant, &a.case_id, a.seed).cmp(&(&b.variant, &b.case_id, b.seed)));
    let rows = summarize(&variants, &outcomes);
    let metrics = MetricsFile {
        rows,
        single: Vec::new(),
        jobs: outcomes,
    };
    write_json(&out.join(METRICS_FILE), &metrics)?;
    std::fs::write(out.join("table.md"), format_table(&metrics.rows))?;
    let command = match cfg.kind {
        StudyKind::Ablate => "ablate",
        StudyKind::Sweep => "sweep",
        StudyKind::Compare => "compare",
    };
    finish(out, command, &cfg.checkpoint, hash, cfg.edit.model_seed, cfg.seeds.clone())?;
    Ok(metrics)
}

/// Re-executes a run directory from its own `config.json` into `out`.
pub fn rerun(run_dir: &Path, out: &Path) -> Result<MetricsFile> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let config = run_dir.join(CONFIG_FILE);
    match manifest.command.as_str() {
        "edit" => execute_edit(&read_json(&config)?, out),
        "reconstruct" => execute_reconstruct(&read_json(&config)?, out),
        "ablate" | "sweep" | "compare" => execute_study(&read_json(&config)?, out),
        other => Err(invalid(format!("cannot re-run a '{other}' run"))),
    }
}

/// One row of an aggregated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub command: String,
    pub checkpoint_hash: String,
    pub row: StudyRow,
}

/// Collects the metric rows of completed run directories.
///
/// Directories without a manifest are still being written and are refused.
/// Runs from different checkpoints are refused unless `allow_mixed`.
pub fn report(run_dirs: &[PathBuf], allow_mixed: bool) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut hashes: Vec<(String, String)> = Vec::new();
    for dir in run_dirs {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(invalid(format!("{} has no manifest; run is incomplete", dir.display())));
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        let metrics: MetricsFile = read_json(&dir.join(METRICS_FILE))?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        hashes.push((name.clone(), manifest.checkpoint_hash.clone()));
        for row in metrics.rows {
            rows.push(ReportRow {
                run: name.clone(),
                command: manifest.command.clone(),
                checkpoint_hash: manifest.checkpoint_hash.clone(),
                row,
            });
        }
    }
    if let Some((first_run, first)) = hashes.first() {
        if let Some((run, h)) = hashes.iter().find(|(_, h)| h != first) {
            if !allow_mixed {
                return Err(invalid(format!(
                    "runs come from different checkpoints ({first_run}: {}, {run}: {}); pass the allow-mixed flag to aggregate anyway",
                    &first[..12.min(first.len())],
                    &h[..12.min(h.len())]
                )));
            }
        }
    }
    Ok(rows)
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let f = |x: Option<f64>, p: usize| x.map_or("-".to_string(), |v| format!("{v:.p$}"));
    let mut s = String::from("| run | command | variant | jobs | edit success | PSNR | SSIM | PSNR unedited | SSIM unedited | checkpoint |\n");
    s.push_str("|---|---|---|---:|---:|---:|---:|---:|---:|---|\n");
    for r in rows {
        let success = f(r.row.edit_success_rate, 3);
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.command,
            r.row.name,
            r.row.jobs,
            success,
            f(r.row.psnr, 2),
            f(r.row.ssim, 4),
            f(r.row.psnr_unedited, 2),
            f(r.row.ssim_unedited, 4),
            &r.checkpoint_hash[..12.min(r.checkpoint_hash.len())]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_colour_is_the_new_word() {
        assert_eq!(target_color("a red circle", "a blue circle"), Some(PaletteColor::Blue));
        assert_eq!(target_color("a red circle", "a red square"), None);
    }

    #[test]
    fn configs_round_trip_and_reject_unknown_keys() {
        let c = StudyConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<StudyConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<StudyConfig>(r#"{"num_case": 3}"#).is_err());
        let e: EditRunConfig = serde_json::from_str(r#"{"image": {"png": "x.png"}, "edit": {"delta": 0.5}}"#).unwrap();
        assert_eq!(e.edit.delta, 0.5);
        assert_eq!(e.edit.num_steps, 15);
    }

    #[test]
    fn report_refuses_incomplete_and_mixed_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, hash: &str| {
            let d = dir.path().join(name);
            std::fs::create_dir_all(&d).unwrap();
            let m = MetricsFile {
                rows: vec![StudyRow {
                    name: "v".into(),
                    jobs: 1,
                    failures: 0,
                    edit_success_rate: Some(1.0),
                    psnr: Some(30.0),
                    ssim: None,
                    psnr_unedited: None,
                    ssim_unedited: None,
                }],
                single: vec![],
                jobs: vec![],
            };
            write_json(&d.join(METRICS_FILE), &m).unwrap();
            let man = RunManifest {
                schema_version: 1,
                command: "ablate".into(),
                tool_version: "0".into(),
                checkpoint: "c".into(),
                checkpoint_hash: hash.into(),
                model_seed: 0,
                noise_seeds: vec![],
                files: vec![],
            };
            write_json(&d.join(MANIFEST_FILE), &man).unwrap();
            d
        };
        let a = mk("a", "aaaa");
        let b = mk("b", "aaaa");
        let c = mk("c", "bbbb");
        assert_eq!(report(&[a.clone(), b.clone()], false).unwrap().len(), 2);
        assert!(report(&[a.clone(), c.clone()], false).is_err());
        assert_eq!(report(&[a.clone(), c], true).unwrap().len(), 2);
        std::fs::remove_file(b.join(MANIFEST_FILE)).unwrap();
        assert!(report(&[a, b], false).is_err());
    }
}
