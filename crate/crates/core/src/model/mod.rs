//! Toy multimodal DiT velocity model with attention instrumentation.

mod attention;
mod checkpoint;
mod config;
mod mmdit;
mod patch;
pub mod tokenizer;

pub use attention::{
    AttentionController, AttentionInputs, AttentionOverride, AttentionProbe, AttentionSite, BlockKind,
    ControllerChain, NoopController, SiteLog, SiteSelector,
};
pub use checkpoint::{
    load_checkpoint, manifest_path, parameter_count, save_checkpoint, Checkpoint, TrainManifest,
    CHECKPOINT_FORMAT_VERSION,
};
pub use config::ModelConfig;
pub use mmdit::{InitScheme, ToyMmDit};
pub use patch::{patchify, patchify_batch, unpatchify, unpatchify_batch};
pub use tokenizer::{tokenize, TokenIds};

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Freshly initialised model together with its trainable parameters.
///
/// Parameters are redrawn from a seeded generator in name order so the
/// initial state is reproducible: matrices `N(0, 1/fan_in)`, embeddings
/// `N(0, 1)`, text positions `N(0, 0.02^2)`, biases zero. Parameters the
/// init scheme starts at zero stay zero.
pub fn init_model(cfg: ModelConfig, dtype: DType, init: InitScheme, seed: u64) -> Result<(ToyMmDit, VarMap)> {
    let vars = VarMap::new();
    let vb = VarBuilder::from_varmap(&vars, dtype, &Device::Cpu);
    let model = ToyMmDit::new(cfg, vb, init)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vars.data().lock().expect("var map lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let t = var.as_tensor();
        let is_zero = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0;
        if is_zero || name.ends_with(".bias") {
            var.set(&t.zeros_like()?)?;
            continue;
        }
        let std = if name.ends_with("txt_pos") {
            0.02
        } else if name.contains("txt_embed") {
            1.0
        } else {
            1.0 / (t.dims()[t.rank() - 1] as f64).sqrt()
        };
        let normal = Normal::new(0.0, std).expect("valid std");
        let values: Vec<f64> = (0..t.elem_count()).map(|_| normal.sample(&mut rng)).collect();
        var.set(&Tensor::from_vec(values, t.dims(), &Device::Cpu)?.to_dtype(dtype)?)?;
    }
    drop(data);
    Ok((model, vars))
}
