use serde::{Deserialize, Serialize};

use super::{Hook, Latent, VelocityModel};
use crate::error::{invalid, Result};

/// Result of advancing the state across one interval.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: Latent,
    /// RMS of the velocity from the canonical (first) evaluation.
    pub velocity_rms: f64,
    pub evaluations: usize,
}

/// One-step ODE integrator. Implementations must accept both ascending
/// (`t_to > t_from`, sampling) and descending (inversion) steps.
///
/// The hook, if any, is handed to exactly one velocity evaluation per step:
/// the one whose velocity advances the state. Predictor evaluations run
/// uncontrolled. The hook's stage names the evaluation it was given to.
pub trait SolverStep {
    fn name(&self) -> &'static str;

    fn step<M: VelocityModel + ?Sized>(
        &self,
        model: &M,
        state: &Latent,
        t_from: f64,
        t_to: f64,
        condition: &M::Condition,
        hook: Option<Hook<'_>>,
    ) -> Result<StepOutput>;
}

fn check_interval(t_from: f64, t_to: f64) -> Result<f64> {
    let h = t_to - t_from;
    if h == 0.0 || !h.is_finite() {
        return Err(invalid(format!("degenerate step from {t_from} to {t_to}")));
    }
    Ok(h)
}

/// First-order explicit Euler: `z + (t_to - t_from) * v(z, t_from)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euler;

impl SolverStep for Euler {
    fn name(&self) -> &'static str {
        "euler"
    }

    fn step<M: VelocityModel + ?Sized>(
        &self,
        model: &M,
        state: &Latent,
        t_from: f64,
        t_to: f64,
        condition: &M::Condition,
        hook: Option<Hook<'_>>,
    ) -> Result<StepOutput> {
        let h = check_interval(t_from, t_to)?;
        let v = model.velocity(state, t_from, condition, hook)?;
        Ok(StepOutput {
            velocity_rms: v.rms()?,
            state: state.axpy(h, &v)?,
            evaluations: 1,
        })
    }
}

/// Explicit midpoint rule, second order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Midpoint;

impl SolverStep for Midpoint {
    fn name(&self) -> &'static str {
        "midpoint"
    }

    fn step<M: VelocityModel + ?Sized>(
        &self,
        model: &M,
        state: &Latent,
        t_from: f64,
        t_to: f64,
        condition: &M::Condition,
        mut hook: Option<Hook<'_>>,
    ) -> Result<StepOutput> {
        let h = check_interval(t_from, t_to)?;
        let k1 = model.velocity(state, t_from, condition, None)?;
        let mid = state.axpy(0.5 * h, &k1)?;
        let k2 = model.velocity(&mid, t_from + 0.5 * h, condition, hook.as_mut().map(|k| k.at_stage(1)))?;
        Ok(StepOutput {
            velocity_rms: k1.rms()?,
            state: state.axpy(h, &k2)?,
            evaluations: 2,
        })
    }
}

/// Solver selection as it appears in configuration files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Euler,
    Midpoint,
}

impl SolverStep for SolverKind {
    fn name(&self) -> &'static str {
        match self {
            SolverKind::Euler => Euler.name(),
            SolverKind::Midpoint => Midpoint.name(),
        }
    }

    fn step<M: VelocityModel + ?Sized>(
        &self,
        model: &M,
        state: &Latent,
        t_from: f64,
        t_to: f64,
        condition: &M::Condition,
        hook: Option<Hook<'_>>,
    ) -> Result<StepOutput> {
        match self {
            SolverKind::Euler => Euler.step(model, state, t_from, t_to, condition, hook),
            SolverKind::Midpoint => Midpoint.step(model, state, t_from, t_to, condition, hook),
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverKind::Euler),
            "midpoint" => Ok(SolverKind::Midpoint),
            other => Err(format!("unknown solver '{other}' (expected euler or midpoint)")),
        }
    }
}
