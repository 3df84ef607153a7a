//! Inversion, mask extraction, latent shift and controlled sampling,
//! composed into a text-driven edit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{
    make_kvmix_controller, AttentionMode, CacheRecorder, InjectionController, InjectionSchedule, KvCache, MixParams,
};
use crate::error::{invalid, Error, Result};
use crate::flow::{invert_traced, make_schedule, sample_traced, Latent, Phase, SolverKind, Spacing, StepRecord, TimeGrid, VelocityModel};
use crate::mask::{extract_mask, select_edit_tokens, EditMask, ThresholdConfig};
use crate::model::{
    tokenize, AttentionController, AttentionProbe, BlockKind, ControllerChain, SiteSelector, TokenIds, ToyMmDit,
};
use crate::shift::{latents_shift, MomentScope, ShiftParams};

pub const EDIT_CONFIG_SCHEMA_VERSION: u32 = 1;

/// Which solve the edit mask is read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Inversion step leaving the clean image.
    #[default]
    FirstInversionStep,
    /// Final step of a source-prompt reconstruction from the inverted latent.
    LastSamplingStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub schema_version: u32,
    pub num_steps: usize,
    pub spacing: Spacing,
    pub delta: f64,
    pub beta: f64,
    pub schedule: InjectionSchedule,
    pub threshold: ThresholdConfig,
    pub mask_source: MaskSource,
    pub solver: SolverKind,
    /// Seed of the latent-shift noise.
    pub noise_seed: u64,
    /// Seed the checkpoint was trained from; echoed into run manifests.
    pub model_seed: u64,
    pub kvmix: bool,
    pub latents_shift: bool,
    /// Global injection used while the masked blend is off. `None` samples
    /// without any source features.
    pub baseline_mode: Option<AttentionMode>,
    pub moment_scope: MomentScope,
    pub epsilon: f64,
    /// Source words whose attention defines the mask, replacing the prompt diff.
    pub edit_words: Option<Vec<String>>,
    /// Also produce a source-prompt reconstruction.
    pub reconstruct: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            schema_version: EDIT_CONFIG_SCHEMA_VERSION,
            num_steps: 15,
            spacing: Spacing::Uniform,
            delta: 0.9,
            beta: 0.25,
            schedule: InjectionSchedule::default(),
            threshold: ThresholdConfig::default(),
            mask_source: MaskSource::FirstInversionStep,
            solver: SolverKind::Euler,
            noise_seed: 0,
            model_seed: 0,
            kvmix: true,
            latents_shift: true,
            baseline_mode: Some(AttentionMode::KV),
            moment_scope: MomentScope::Global,
            epsilon: 1e-6,
            edit_words: None,
            reconstruct: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EDIT_CONFIG_SCHEMA_VERSION {
            return Err(invalid(format!(
                "config schema version {} is not supported (expected {EDIT_CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.num_steps == 0 {
            return Err(invalid("num_steps must be at least 1"));
        }
        crate::control::check_delta(self.delta)?;
        self.shift_params().validate()?;
        self.schedule.validate(self.num_steps)?;
        self.threshold.validate()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        make_schedule(self.num_steps, self.spacing)
    }

    pub fn shift_params(&self) -> ShiftParams {
        ShiftParams {
            beta: self.beta,
            epsilon: self.epsilon,
            seed: self.noise_seed,
            scope: self.moment_scope,
        }
    }

    fn needs_mask(&self) -> bool {
        self.kvmix || self.latents_shift
    }

    /// Mode of whichever controller runs during sampling.
    fn sampling_mode(&self) -> Option<AttentionMode> {
        if self.kvmix {
            Some(self.schedule.mode)
        } else {
            self.baseline_mode
        }
    }

    /// Same edit with both modules disabled and no source features at all.
    pub fn without_injection(&self) -> Self {
        Self {
            kvmix: false,
            latents_shift: false,
            baseline_mode: None,
            ..self.clone()
        }
    }

    /// Same edit with both modules disabled, using global injection.
    pub fn global_injection(&self, mode: AttentionMode) -> Self {
        Self {
            kvmix: false,
            latents_shift: false,
            baseline_mode: Some(mode),
            ..self.clone()
        }
    }
}

/// What the editing pipeline needs from a velocity model.
pub trait EditableModel: VelocityModel<Condition = TokenIds> {
    fn latent_shape(&self) -> (usize, usize, usize);
    fn max_text_tokens(&self) -> usize;
    /// Patch grid of the visual tokens.
    fn token_grid(&self) -> (usize, usize);
    fn num_double_blocks(&self) -> usize;
}

impl EditableModel for ToyMmDit {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.config().latent_shape()
    }
    fn max_text_tokens(&self) -> usize {
        self.config().max_text_tokens
    }
    fn token_grid(&self) -> (usize, usize) {
        let g = self.config().grid_size();
        (g, g)
    }
    fn num_double_blocks(&self) -> usize {
        self.config().num_double_blocks
    }
}

/// Output of the inversion phase.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub inverted: Latent,
    pub cache: KvCache,
    pub mask: Option<EditMask>,
    pub edit_tokens: Vec<usize>,
    pub grid: TimeGrid,
    pub steps: Vec<StepRecord>,
    pub evaluations: usize,
    pub seconds: f64,
}

/// Output of the sampling phase.
#[derive(Debug, Clone)]
pub struct Sampling {
    pub image: Latent,
    pub shifted: Latent,
    pub steps: Vec<StepRecord>,
    pub evaluations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub inversion: Vec<StepRecord>,
    pub sampling: Vec<StepRecord>,
    pub evaluations: usize,
    pub inversion_seconds: f64,
    pub sampling_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub edited: Latent,
    pub reconstructed: Option<Latent>,
    pub mask: Option<EditMask>,
    pub edit_tokens: Vec<usize>,
    pub inverted: Latent,
    pub shifted: Latent,
    /// Source features recorded during inversion.
    pub cache: KvCache,
    pub diagnostics: StepDiagnostics,
    pub config: EditConfig,
}

fn check_image<M: EditableModel + ?Sized>(model: &M, image: &Latent) -> Result<()> {
    let want = model.latent_shape();
    if image.dims() != want {
        return Err(Error::ShapeMismatch {
            expected: vec![want.0, want.1, want.2],
            got: {
                let d = image.dims();
                vec![d.0, d.1, d.2]
            },
        });
    }
    if !image.is_finite()? {
        return Err(invalid("input image is not finite"));
    }
    Ok(())
}

fn check_mask<M: EditableModel + ?Sized>(model: &M, mask: &EditMask) -> Result<()> {
    if mask.grid() != model.token_grid() {
        return Err(invalid(format!(
            "mask grid {:?} does not match the model token grid {:?}",
            mask.grid(),
            model.token_grid()
        )));
    }
    Ok(())
}

fn mask_probe<M: EditableModel + ?Sized>(model: &M, phase: Phase, step_index: usize) -> AttentionProbe {
    AttentionProbe::new(SiteSelector {
        phase,
        step_index,
        block_kind: BlockKind::Double,
        layer_index: model.num_double_blocks().saturating_sub(1),
    })
}

/// Inverts `image` under the source prompt, recording source features and,
/// when an edit module needs it, extracting the edit mask.
pub fn run_inversion_phase<M: EditableModel + ?Sized>(
    model: &M,
    image: &Latent,
    source_prompt: &str,
    target_prompt: &str,
    cfg: &EditConfig,
    mask_override: Option<&EditMask>,
) -> Result<Inversion> {
    cfg.validate()?;
    check_image(model, image)?;
    let start = Instant::now();
    let source = tokenize(source_prompt, model.max_text_tokens())?;
    let target = tokenize(target_prompt, model.max_text_tokens())?;
    let grid = cfg.grid()?;
    let n = grid.num_steps();
    if let Some(m) = mask_override {
        check_mask(model, m)?;
    }

    let want_mask = cfg.needs_mask() && mask_override.is_none();
    let edit_tokens = if want_mask {
        select_edit_tokens(&source, &target, cfg.edit_words.as_deref())?
    } else {
        Vec::new()
    };

    let record_q = cfg.sampling_mode().is_some_and(AttentionMode::uses_q) || cfg.schedule.mode.uses_q();
    let mut recorder = CacheRecorder::new(cfg.schedule.clone(), record_q);
    let mut probe = mask_probe(model, Phase::Inversion, n - 1);
    let solver = cfg.solver;
    let traj = {
        let mut parts: Vec<&mut dyn AttentionController> = vec![&mut recorder];
        if want_mask && cfg.mask_source == MaskSource::FirstInversionStep {
            parts.push(&mut probe);
        }
        let mut chain = ControllerChain(parts);
        invert_traced(model, image, &grid, &source, &solver, Some(&mut chain))?
    };
    let cache = recorder.finish();

    let mask = match (mask_override, want_mask) {
        (Some(m), _) => Some(m.clone()),
        (None, false) => None,
        (None, true) => {
            let probs = match cfg.mask_source {
                MaskSource::FirstInversionStep => probe.probabilities()?.clone(),
                MaskSource::LastSamplingStep => {
                    let mut probe = mask_probe(model, Phase::Sampling, n - 1);
                    let mut inject = InjectionController::new(&cache, cfg.schedule.clone(), AttentionMode::KV);
                    let mut chain = ControllerChain(vec![&mut inject, &mut probe]);
                    sample_traced(model, &traj.state, &grid, &source, &solver, Some(&mut chain))?;
                    probe.probabilities()?.clone()
                }
            };
            Some(extract_mask(&probs, &edit_tokens, model.max_text_tokens(), model.token_grid(), &cfg.threshold)?)
        }
    };

    Ok(Inversion {
        inverted: traj.state,
        cache,
        mask,
        edit_tokens,
        grid,
        steps: traj.steps,
        evaluations: traj.evaluations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Shifts the inverted latent and samples under the target prompt with the
/// configured source-feature controller. Pixels are clamped to `[-1, 1]`.
pub fn run_sampling_phase<M: EditableModel + ?Sized>(
    model: &M,
    inversion: &Inversion,
    target_prompt: &str,
    cfg: &EditConfig,
) -> Result<Sampling> {
    cfg.validate()?;
    let start = Instant::now();
    let target = tokenize(target_prompt, model.max_text_tokens())?;
    let grid = cfg.grid()?;
    if grid != inversion.grid {
        let iv = grid.interval(0);
        return Err(Error::TimestepMismatch { t_from: iv.0, t_to: iv.1 });
    }
    let mask = || {
        inversion
            .mask
            .as_ref()
            .ok_or_else(|| invalid("edit needs a mask but the inversion phase produced none"))
    };

    let shifted = if cfg.latents_shift {
        latents_shift(&inversion.inverted, mask()?, &cfg.shift_params())?
    } else {
        inversion.inverted.clone()
    };

    let mut fusion;
    let mut inject;
    let controller: Option<&mut dyn AttentionController> = if cfg.kvmix {
        fusion = make_kvmix_controller(&inversion.cache, cfg.schedule.clone(), MixParams::new(cfg.delta, mask()?.clone())?)?;
        Some(&mut fusion)
    } else if let Some(mode) = cfg.baseline_mode {
        inject = InjectionController::new(&inversion.cache, cfg.schedule.clone(), mode);
        Some(&mut inject)
    } else {
        None
    };
    let solver = cfg.solver;
    let traj = sample_traced(model, &shifted, &grid, &target, &solver, controller)?;
    let image = Latent::new(traj.state.tensor().clamp(-1.0, 1.0)?)?;
    Ok(Sampling {
        image,
        shifted,
        steps: traj.steps,
        evaluations: traj.evaluations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Source-prompt resampling from an inversion with source K/V at every
/// scheduled site.
fn resample_source<M: EditableModel + ?Sized>(
    model: &M,
    inversion: &Inversion,
    prompt: &str,
    cfg: &EditConfig,
) -> Result<Latent> {
    let cfg = EditConfig {
        kvmix: true,
        latents_shift: false,
        schedule: cfg.schedule.clone().with_mode(AttentionMode::KV),
        ..cfg.clone()
    };
    let inv = Inversion {
        mask: Some(EditMask::empty(model.token_grid())),
        ..inversion.clone()
    };
    Ok(run_sampling_phase(model, &inv, prompt, &cfg)?.image)
}

/// Full edit: source-prompt inversion, then target-prompt sampling.
pub fn edit<M: EditableModel + ?Sized>(
    model: &M,
    image: &Latent,
    source_prompt: &str,
    target_prompt: &str,
    cfg: &EditConfig,
    mask_override: Option<&EditMask>,
) -> Result<EditResult> {
    let inv = run_inversion_phase(model, image, source_prompt, target_prompt, cfg, mask_override)
        .map_err(|e| e.in_phase(Phase::Inversion.as_str()))?;
    let smp = run_sampling_phase(model, &inv, target_prompt, cfg).map_err(|e| e.in_phase(Phase::Sampling.as_str()))?;
    let reconstructed = if cfg.reconstruct {
        Some(resample_source(model, &inv, source_prompt, cfg).map_err(|e| e.in_phase(Phase::Sampling.as_str()))?)
    } else {
        None
    };
    Ok(EditResult {
        edited: smp.image,
        reconstructed,
        mask: inv.mask,
        edit_tokens: inv.edit_tokens,
        inverted: inv.inverted,
        shifted: smp.shifted,
        cache: inv.cache,
        diagnostics: StepDiagnostics {
            inversion: inv.steps,
            sampling: smp.steps,
            evaluations: inv.evaluations + smp.evaluations,
            inversion_seconds: inv.seconds,
            sampling_seconds: smp.seconds,
        },
        config: cfg.clone(),
    })
}

/// Inverts and re-samples under the same prompt with source K/V injected
/// everywhere; measures how faithfully an image survives the round trip.
pub fn reconstruct<M: EditableModel + ?Sized>(model: &M, image: &Latent, prompt: &str, cfg: &EditConfig) -> Result<Latent> {
    let inv_cfg = EditConfig {
        kvmix: false,
        latents_shift: false,
        schedule: cfg.schedule.clone().with_mode(AttentionMode::KV),
        ..cfg.clone()
    };
    let inv = run_inversion_phase(model, image, prompt, prompt, &inv_cfg, None)
        .map_err(|e| e.in_phase(Phase::Inversion.as_str()))?;
    resample_source(model, &inv, prompt, &inv_cfg).map_err(|e| e.in_phase(Phase::Sampling.as_str()))
}
