//! Flow-matching primitives: the straight interpolation path, the training
//! objective, and discretised forward (sampling) and reverse (inversion)
//! integration of `dz = v(z, t) dt` over a pluggable one-step solver.
//!
//! Time runs from noise at `t = 0` to data at `t = 1`. Sampling walks the
//! grid upwards; inversion walks it downwards from a data point and produces
//! the noise latent that re-generates it.

mod latent;
mod schedule;
mod solver;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use latent::Latent;
pub use schedule::{make_schedule, Spacing, TimeGrid};
pub use solver::{Euler, Midpoint, SolverKind, SolverStep, StepOutput};

use crate::error::{invalid, Error, Result};
use crate::model::AttentionController;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inversion,
    Sampling,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Inversion => "inversion",
            Phase::Sampling => "sampling",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where in a solve a velocity evaluation happens.
///
/// `step_index` is the index `i` of the grid interval `[t_i, t_{i+1}]` being
/// crossed, in both phases. Sampling step `i` and the inversion step that
/// crosses the same interval therefore share a step index and an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub phase: Phase,
    pub step_index: usize,
    /// `(t_i, t_{i+1})`, always ascending.
    pub interval: (f64, f64),
    /// Which velocity evaluation within the step carries the hook: 0 for the
    /// first, 1 for a midpoint-type second evaluation.
    pub stage: usize,
}

/// Controller plus the solve position it is being consulted at.
pub struct Hook<'a> {
    pub context: StepContext,
    pub controller: &'a mut dyn AttentionController,
}

impl Hook<'_> {
    /// The same hook relabelled for evaluation `stage` of its step.
    pub fn at_stage(&mut self, stage: usize) -> Hook<'_> {
        Hook {
            context: StepContext { stage, ..self.context },
            controller: &mut *self.controller,
        }
    }
}

/// A (possibly conditioned) velocity field `v(z, t)`.
pub trait VelocityModel {
    type Condition: ?Sized;

    /// Must be deterministic for fixed inputs, parameters and controller state.
    fn velocity(
        &self,
        state: &Latent,
        t: f64,
        condition: &Self::Condition,
        hook: Option<Hook<'_>>,
    ) -> Result<Latent>;
}

/// Unconditioned velocity field backed by a closure; handy for analytic fields.
pub struct FieldFn<F>(pub F);

impl<F> VelocityModel for FieldFn<F>
where
    F: Fn(&Latent, f64) -> Result<Latent>,
{
    type Condition = ();

    fn velocity(&self, state: &Latent, t: f64, _: &(), _: Option<Hook<'_>>) -> Result<Latent> {
        (self.0)(state, t)
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `t * z1 + (1 - t) * z0`.
pub fn interpolate(z0: &Latent, z1: &Latent, t: f64) -> Result<Latent> {
    z0.ensure_same_shape(z1)?;
    check_unit_time(t)?;
    // exact endpoints, signed zeros included
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(z1.clone());
    }
    let out = ((z1.tensor() * t)? + (z0.tensor() * (1.0 - t))?)?;
    Latent::new(out)
}

/// Squared error between the straight-path velocity `z1 - z0` and the
/// model prediction at `interpolate(z0, z1, t)`, averaged over elements.
pub fn fm_loss<M: VelocityModel + ?Sized>(
    model: &M,
    z0: &Latent,
    z1: &Latent,
    t: f64,
    condition: &M::Condition,
) -> Result<f64> {
    let zt = interpolate(z0, z1, t)?;
    let pred = model.velocity(&zt, t, condition, None)?;
    zt.ensure_same_shape(&pred)?;
    if !pred.is_finite()? {
        return Err(Error::NonFiniteOutput { t });
    }
    let target = (z1.tensor() - z0.tensor())?;
    let diff = (target - pred.tensor().to_dtype(z0.dtype())?)?;
    Ok(diff.sqr()?.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub t_from: f64,
    pub t_to: f64,
    pub velocity_rms: f64,
}

/// Final state of a solve plus per-step diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub state: Latent,
    pub steps: Vec<StepRecord>,
    pub evaluations: usize,
}

fn solve<M, S>(
    model: &M,
    start: &Latent,
    grid: &TimeGrid,
    condition: &M::Condition,
    solver: &S,
    mut controller: Option<&mut dyn AttentionController>,
    phase: Phase,
) -> Result<Trajectory>
where
    M: VelocityModel + ?Sized,
    S: SolverStep + ?Sized,
{
    if !start.is_finite()? {
        return Err(invalid(format!("{phase} start state is not finite")));
    }
    let n = grid.num_steps();
    let order: Vec<usize> = match phase {
        Phase::Sampling => (0..n).collect(),
        Phase::Inversion => (0..n).rev().collect(),
    };
    let mut state = start.clone();
    let mut steps = Vec::with_capacity(n);
    let mut evaluations = 0;
    for i in order {
        let interval = grid.interval(i);
        let (t_from, t_to) = match phase {
            Phase::Sampling => interval,
            Phase::Inversion => (interval.1, interval.0),
        };
        let hook = controller.as_deref_mut().map(|controller| Hook {
            context: StepContext {
                phase,
                step_index: i,
                interval,
                stage: 0,
            },
            controller,
        });
        let out = solver.step(model, &state, t_from, t_to, condition, hook)?;
        if out.state.dims() != state.dims() {
            return Err(Error::ShapeMismatch {
                expected: state.tensor().dims().to_vec(),
                got: out.state.tensor().dims().to_vec(),
            });
        }
        if !out.state.is_finite()? {
            return Err(Error::NonFinite {
                phase: phase.as_str(),
                step: i,
            });
        }
        evaluations += out.evaluations;
        steps.push(StepRecord {
            step_index: i,
            t_from,
            t_to,
            velocity_rms: out.velocity_rms,
        });
        state = out.state;
    }
    Ok(Trajectory {
        state,
        steps,
        evaluations,
    })
}

/// Integrates from noise `z0` at `t = 0` up to `t = 1`.
pub fn sample<M, S>(
    model: &M,
    z0: &Latent,
    grid: &TimeGrid,
    condition: &M::Condition,
    solver: &S,
    controller: Option<&mut dyn AttentionController>,
) -> Result<Latent>
where
    M: VelocityModel + ?Sized,
    S: SolverStep + ?Sized,
{
    Ok(sample_traced(model, z0, grid, condition, solver, controller)?.state)
}

pub fn sample_traced<M, S>(
    model: &M,
    z0: &Latent,
    grid: &TimeGrid,
    condition: &M::Condition,
    solver: &S,
    controller: Option<&mut dyn AttentionController>,
) -> Result<Trajectory>
where
    M: VelocityModel + ?Sized,
    S: SolverStep + ?Sized,
{
    solve(model, z0, grid, condition, solver, controller, Phase::Sampling)
}

/// Integrates from data `z1` at `t = 1` back down to `t = 0`.
pub fn invert<M, S>(
    model: &M,
    z1: &Latent,
    grid: &TimeGrid,
    condition: &M::Condition,
    solver: &S,
    controller: Option<&mut dyn AttentionController>,
) -> Result<Latent>
where
    M: VelocityModel + ?Sized,
    S: SolverStep + ?Sized,
{
    Ok(invert_traced(model, z1, grid, condition, solver, controller)?.state)
}

pub fn invert_traced<M, S>(
    model: &M,
    z1: &Latent,
    grid: &TimeGrid,
    condition: &M::Condition,
    solver: &S,
    controller: Option<&mut dyn AttentionController>,
) -> Result<Trajectory>
where
    M: VelocityModel + ?Sized,
    S: SolverStep + ?Sized,
{
    solve(model, z1, grid, condition, solver, controller, Phase::Inversion)
}
