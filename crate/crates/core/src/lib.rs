//! Training-free, text-driven editing for flow-matching image models.
//!
//! An image is inverted to noise under its source prompt while the visual
//! K/V of every attention block are cached. The edit region is read off the
//! attention of the changed words. Sampling under the target prompt then
//! blends target and source K/V inside the region, keeps source K/V outside
//! it, and starts from a latent whose statistics were shifted towards fresh
//! noise inside the region.

pub mod control;
pub mod error;
pub mod flow;
pub mod harness;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod shift;
pub mod util;

pub use control::{mix_kv, AttentionMode, InjectionSchedule, KvCache, MixParams};
pub use error::{Error, Result};
pub use flow::{Latent, Phase, SolverKind, TimeGrid};
pub use mask::{EditMask, ThresholdConfig};
pub use model::{ModelConfig, TokenIds, ToyMmDit};
pub use pipeline::{edit, reconstruct, EditConfig, EditResult};
pub use shift::{adain, latents_shift, ShiftParams};
