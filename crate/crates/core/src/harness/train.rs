//! Flow-matching training loop for the toy model.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::ShapesSample;
use crate::error::{invalid, Error, Result};
use crate::model::{init_model, tokenize, InitScheme, ModelConfig, ToyMmDit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 4000,
            batch_size: 32,
            learning_rate: 6e-4,
            warmup_steps: 200,
            weight_decay: 0.0,
            seed: 0,
            dataset_size: 6000,
            dataset_seed: 1,
            eval_every: 100,
            eval_batch: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

/// One batch of flow-matching training data.
pub struct FmBatch {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: Tensor,
    pub text: Tensor,
}

impl FmBatch {
    pub fn new(model: &ToyMmDit, samples: &[&ShapesSample], rng: &mut impl Rng) -> Result<Self> {
        let cfg = model.config();
        let (c, h, w) = cfg.latent_shape();
        let per = c * h * w;
        let b = samples.len();
        let mut z1 = Vec::with_capacity(b * per);
        for s in samples {
            if s.image.len() != per {
                return Err(invalid("sample does not match model latent shape"));
            }
            z1.extend_from_slice(&s.image);
        }
        let z0: Vec<f32> = (0..b * per).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let t: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
        let prompts = samples
            .iter()
            .map(|s| tokenize(&s.caption, cfg.max_text_tokens))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = prompts.iter().collect();
        let dev = Device::Cpu;
        let dt = model.dtype();
        Ok(Self {
            z0: Tensor::from_vec(z0, (b, c, h, w), &dev)?.to_dtype(dt)?,
            z1: Tensor::from_vec(z1, (b, c, h, w), &dev)?.to_dtype(dt)?,
            t: Tensor::from_vec(t, b, &dev)?.to_dtype(dt)?,
            text: model.text_tensor(&refs)?,
        })
    }
}

/// Mean squared flow-matching residual of a batch, as a differentiable scalar.
pub fn batch_fm_loss(model: &ToyMmDit, batch: &FmBatch) -> Result<Tensor> {
    let tt = batch.t.reshape((batch.t.dim(0)?, 1, 1, 1))?;
    let zt = (batch.z1.broadcast_mul(&tt)? + batch.z0.broadcast_mul(&(1.0 - &tt)?)?)?;
    let pred = model.forward(&zt, &batch.t, &batch.text, None)?;
    let target = (&batch.z1 - &batch.z0)?;
    Ok((target - pred)?.sqr()?.mean_all()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct TrainOutcome {
    pub model: ToyMmDit,
    pub vars: VarMap,
    pub curve: Vec<LossPoint>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn initial_eval_loss(&self) -> f64 {
        self.curve.first().map(|p| p.eval_loss).unwrap_or(f64::NAN)
    }

    pub fn final_eval_loss(&self) -> f64 {
        self.curve.last().map(|p| p.eval_loss).unwrap_or(f64::NAN)
    }
}

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let p = (step - cfg.warmup_steps) as f64 / span;
    cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains from scratch. `on_point` sees every evaluation point as it is produced.
pub fn train_toy(
    cfg: &TrainConfig,
    dataset: &[ShapesSample],
    mut on_point: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(invalid("batch_size and eval_every must be positive"));
    }
    let (model, vars) = init_model(cfg.model.clone(), DType::F32, InitScheme::AdaLnZero, cfg.seed)?;
    let mut opt = AdamW::new(
        vars.all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // fixed evaluation batch: same noise, times and samples at every point
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let eval_samples: Vec<&ShapesSample> = (0..cfg.eval_batch.max(1))
        .map(|i| &dataset[(i * 7919) % dataset.len()])
        .collect();
    let eval_batch = FmBatch::new(&model, &eval_samples, &mut eval_rng)?;
    let eval = |model: &ToyMmDit| -> Result<f64> { scalar(&batch_fm_loss(model, &eval_batch)?) };

    let mut curve = Vec::new();
    let first = LossPoint {
        step: 0,
        train_loss: f64::NAN,
        eval_loss: eval(&model)?,
    };
    on_point(&first);
    curve.push(first);

    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 0..cfg.steps {
        let idx: Vec<&ShapesSample> = (0..cfg.batch_size)
            .map(|_| &dataset[rng.random_range(0..dataset.len())])
            .collect();
        let batch = FmBatch::new(&model, &idx, &mut rng)?;
        let loss = batch_fm_loss(&model, &batch)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged(step));
        }
        opt.set_learning_rate(lr_at(cfg, step));
        opt.backward_step(&loss)?;
        running += value;
        running_n += 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let point = LossPoint {
                step: step + 1,
                train_loss: running / running_n as f64,
                eval_loss: eval(&model)?,
            };
            if !point.eval_loss.is_finite() {
                return Err(Error::Diverged(step));
            }
            log::info!(
                "step {} train loss {:.4} eval loss {:.4}",
                point.step,
                point.train_loss,
                point.eval_loss
            );
            on_point(&point);
            curve.push(point);
            running = 0.0;
            running_n = 0;
        }
    }
    Ok(TrainOutcome {
        model,
        vars,
        curve,
        steps: cfg.steps,
    })
}

/// Writes `step,train_loss,eval_loss` rows.
pub fn write_loss_curve(path: &std::path::Path, curve: &[LossPoint]) -> Result<()> {
    let mut out = String::from("step,train_loss,eval_loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.train_loss, p.eval_loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_loss_curve(path: &std::path::Path) -> Result<Vec<LossPoint>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| invalid(format!("bad loss row '{l}'")));
            if f.len() != 3 {
                return Err(invalid(format!("bad loss row '{l}'")));
            }
            Ok(LossPoint {
                step: f[0].trim().parse().map_err(|_| invalid(format!("bad loss row '{l}'")))?,
                train_loss: parse(f[1])?,
                eval_loss: parse(f[2])?,
            })
        })
        .collect()
}

/// Summary written next to a trained checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint_hash: String,
    pub parameter_count: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub wall_seconds: f64,
    pub config: TrainConfig,
}

pub fn loss_curve_path(checkpoint: &std::path::Path) -> std::path::PathBuf {
    checkpoint.with_extension("loss.csv")
}

/// Generates the dataset, trains, and writes the checkpoint with its
/// manifest, loss curve and summary.
pub fn train_to_checkpoint(
    cfg: &TrainConfig,
    checkpoint: &std::path::Path,
    on_point: impl FnMut(&LossPoint),
) -> Result<TrainSummary> {
    let start = std::time::Instant::now();
    let dataset = super::data::generate_dataset(cfg.dataset_size, cfg.dataset_seed);
    let outcome = train_toy(cfg, &dataset, on_point)?;
    let manifest = crate::model::TrainManifest {
        seed: cfg.seed,
        training_steps: outcome.steps,
        dataset_hash: super::data::dataset_hash(&dataset),
    };
    let hash = crate::model::save_checkpoint(checkpoint, &cfg.model, &outcome.vars, &manifest)?;
    write_loss_curve(&loss_curve_path(checkpoint), &outcome.curve)?;
    let summary = TrainSummary {
        checkpoint_hash: hash,
        parameter_count: crate::model::parameter_count(&outcome.vars),
        initial_eval_loss: outcome.initial_eval_loss(),
        final_eval_loss: outcome.final_eval_loss(),
        wall_seconds: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    std::fs::write(
        checkpoint.with_extension("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
