//! Toy multimodal diffusion transformer.
//!
//! Text tokens and pixel-patch tokens share a joint attention. The first
//! `num_double_blocks` blocks keep separate projections and MLPs for the two
//! streams; the remaining `num_single_blocks` blocks run one shared stream
//! over the concatenated sequence. Every block is modulated by the timestep
//! embedding (scale, shift and gate per sub-layer).

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Embedding, Init, Linear, VarBuilder};

use super::attention::{attention_probs, AttentionInputs, AttentionSite, BlockKind};
use super::config::ModelConfig;
use super::patch::{patchify_batch, unpatchify_batch};
use super::tokenizer::TokenIds;
use crate::error::{Error, Result};
use crate::flow::{Hook, Latent, VelocityModel};

/// How freshly created parameters are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Modulation and output projections start at zero, so every block is
    /// the identity and the initial velocity is zero.
    AdaLnZero,
    /// Every layer random; used where non-trivial gradients are wanted
    /// everywhere from the first step.
    Random,
}

fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder, zero: bool) -> Result<Linear> {
    if zero {
        let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?;
        let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
        Ok(Linear::new(w, Some(b)))
    } else {
        Ok(candle_nn::linear(in_dim, out_dim, vb)?)
    }
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

/// `x * (1 + scale) + shift`, with `scale`/`shift` of shape `(B, 1, hidden)`.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

fn mod_chunks(lin: &Linear, vec: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let out = lin.forward(&vec.silu()?)?.unsqueeze(1)?;
    Ok(out.chunk(n, D::Minus1)?)
}

/// Sinusoidal features of `t * 1000`, `(B, dim)` with cosines first.
pub(crate) fn timestep_features(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::new(freqs, t.device())?.to_dtype(t.dtype())?;
    let args = (t.unsqueeze(1)? * 1000.0)?.broadcast_mul(&freqs.unsqueeze(0)?)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

/// Fixed 2-D sine/cosine position features, `(grid * grid, hidden)`.
fn position_features(grid: usize, hidden: usize) -> Vec<f32> {
    let quarter = hidden / 4;
    let mut out = Vec::with_capacity(grid * grid * hidden);
    for gy in 0..grid {
        for gx in 0..grid {
            for pos in [gy as f64, gx as f64] {
                for i in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).sin() as f32);
                }
                for i in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).cos() as f32);
                }
            }
        }
    }
    out
}

struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(hidden: usize, inner: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(hidden, inner, vb.pp("fc1"), false)?,
            fc2: linear(inner, hidden, vb.pp("fc2"), false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?)
    }
}

struct StreamParams {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    mlp: Mlp,
}

impl StreamParams {
    fn new(cfg: &ModelConfig, vb: VarBuilder, init: InitScheme) -> Result<Self> {
        let h = cfg.hidden_dim;
        let zero = init == InitScheme::AdaLnZero;
        Ok(Self {
            modulation: linear(h, 6 * h, vb.pp("mod"), zero)?,
            qkv: linear(h, 3 * h, vb.pp("qkv"), false)?,
            proj: linear(h, h, vb.pp("proj"), false)?,
            mlp: Mlp::new(h, cfg.mlp_ratio * h, vb.pp("mlp"))?,
        })
    }
}

struct DoubleBlock {
    img: StreamParams,
    txt: StreamParams,
}

struct SingleBlock {
    modulation: Linear,
    linear1: Linear,
    linear2: Linear,
}

/// Per-forward state shared by every block: the hook and the layout.
struct PassState<'h, 'c> {
    hook: &'h mut Option<Hook<'c>>,
    cfg: &'h ModelConfig,
    num_text: usize,
}

impl PassState<'_, '_> {
    /// Joint attention over `(B, T, hidden)` projections, consulting the
    /// controller first.
    fn attend(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        block_kind: BlockKind,
        layer_index: usize,
    ) -> Result<Tensor> {
        let (b, t, hidden) = q.dims3()?;
        let heads = self.cfg.num_heads;
        let hd = hidden / heads;
        let split = |x: &Tensor| -> Result<Tensor> {
            Ok(x.reshape((b, t, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let (mut q, mut k, mut v) = (split(q)?, split(k)?, split(v)?);

        if let Some(hook) = self.hook.as_mut() {
            let site = AttentionSite {
                phase: hook.context.phase,
                step_index: hook.context.step_index,
                interval: hook.context.interval,
                stage: hook.context.stage,
                layer_index,
                block_kind,
                num_heads: heads,
                num_text_tokens: self.num_text,
                num_visual_tokens: t - self.num_text,
            };
            let ov = {
                let inputs = AttentionInputs::new(&q, &k, &v, self.num_text);
                hook.controller.on_attention(&site, &inputs)?
            };
            let num_text = self.num_text;
            let splice = |orig: &Tensor, repl: Option<Tensor>, name: &'static str| -> Result<Tensor> {
                let Some(repl) = repl else {
                    return Ok(orig.clone());
                };
                let expected = [b, heads, t - num_text, hd];
                if repl.dims() != expected {
                    return Err(Error::ControllerShape {
                        site,
                        tensor: name,
                        expected: expected.to_vec(),
                        got: repl.dims().to_vec(),
                    });
                }
                let repl = repl.to_dtype(orig.dtype())?;
                Ok(Tensor::cat(&[&orig.narrow(2, 0, num_text)?, &repl], 2)?)
            };
            q = splice(&q, ov.q, "Q")?;
            k = splice(&k, ov.k, "K")?;
            v = splice(&v, ov.v, "V")?;
        }

        let probs = attention_probs(&q, &k)?;
        Ok(probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, t, hidden))?)
    }
}

impl DoubleBlock {
    fn new(cfg: &ModelConfig, vb: VarBuilder, init: InitScheme) -> Result<Self> {
        Ok(Self {
            img: StreamParams::new(cfg, vb.pp("img"), init)?,
            txt: StreamParams::new(cfg, vb.pp("txt"), init)?,
        })
    }

    fn forward(
        &self,
        img: &Tensor,
        txt: &Tensor,
        vec: &Tensor,
        layer_index: usize,
        pass: &mut PassState<'_, '_>,
    ) -> Result<(Tensor, Tensor)> {
        let im = mod_chunks(&self.img.modulation, vec, 6)?;
        let tm = mod_chunks(&self.txt.modulation, vec, 6)?;

        let img_qkv = self.img.qkv.forward(&modulate(&layer_norm(img)?, &im[0], &im[1])?)?;
        let txt_qkv = self.txt.qkv.forward(&modulate(&layer_norm(txt)?, &tm[0], &tm[1])?)?;
        let iq = img_qkv.chunk(3, D::Minus1)?;
        let tq = txt_qkv.chunk(3, D::Minus1)?;
        let q = Tensor::cat(&[&tq[0], &iq[0]], 1)?;
        let k = Tensor::cat(&[&tq[1], &iq[1]], 1)?;
        let v = Tensor::cat(&[&tq[2], &iq[2]], 1)?;

        let attn = pass.attend(&q, &k, &v, BlockKind::Double, layer_index)?;
        let n_txt = txt.dim(1)?;
        let txt_attn = attn.narrow(1, 0, n_txt)?;
        let img_attn = attn.narrow(1, n_txt, img.dim(1)?)?;

        let img = (img + self.img.proj.forward(&img_attn)?.broadcast_mul(&im[2])?)?;
        let img = (&img
            + self
                .img
                .mlp
                .forward(&modulate(&layer_norm(&img)?, &im[3], &im[4])?)?
                .broadcast_mul(&im[5])?)?;

        let txt = (txt + self.txt.proj.forward(&txt_attn)?.broadcast_mul(&tm[2])?)?;
        let txt = (&txt
            + self
                .txt
                .mlp
                .forward(&modulate(&layer_norm(&txt)?, &tm[3], &tm[4])?)?
                .broadcast_mul(&tm[5])?)?;
        Ok((img, txt))
    }
}

impl SingleBlock {
    fn new(cfg: &ModelConfig, vb: VarBuilder, init: InitScheme) -> Result<Self> {
        let h = cfg.hidden_dim;
        let inner = cfg.mlp_ratio * h;
        Ok(Self {
            modulation: linear(h, 3 * h, vb.pp("mod"), init == InitScheme::AdaLnZero)?,
            linear1: linear(h, 3 * h + inner, vb.pp("linear1"), false)?,
            linear2: linear(h + inner, h, vb.pp("linear2"), false)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        vec: &Tensor,
        layer_index: usize,
        pass: &mut PassState<'_, '_>,
    ) -> Result<Tensor> {
        let m = mod_chunks(&self.modulation, vec, 3)?;
        let h = x.dim(D::Minus1)?;
        let fused = self.linear1.forward(&modulate(&layer_norm(x)?, &m[0], &m[1])?)?;
        let inner = fused.dim(D::Minus1)? - 3 * h;
        let q = fused.narrow(D::Minus1, 0, h)?;
        let k = fused.narrow(D::Minus1, h, h)?;
        let v = fused.narrow(D::Minus1, 2 * h, h)?;
        let mlp = fused.narrow(D::Minus1, 3 * h, inner)?.gelu()?;
        let attn = pass.attend(&q, &k, &v, BlockKind::Single, layer_index)?;
        let out = self.linear2.forward(&Tensor::cat(&[&attn, &mlp], D::Minus1)?)?;
        Ok((x + out.broadcast_mul(&m[2])?)?)
    }
}

pub struct ToyMmDit {
    cfg: ModelConfig,
    dtype: DType,
    device: Device,
    img_in: Linear,
    txt_embed: Embedding,
    txt_pos: Tensor,
    vis_pos: Tensor,
    time_in: Linear,
    time_out: Linear,
    double_blocks: Vec<DoubleBlock>,
    single_blocks: Vec<SingleBlock>,
    final_mod: Linear,
    final_out: Linear,
}

impl ToyMmDit {
    pub fn new(cfg: ModelConfig, vb: VarBuilder, init: InitScheme) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let zero = init == InitScheme::AdaLnZero;
        let txt_embed = candle_nn::embedding(cfg.vocab_size, h, vb.pp("txt_embed"))?;
        let txt_pos = vb.get_with_hints(
            (cfg.max_text_tokens, h),
            "txt_pos",
            Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;
        let grid = cfg.grid_size();
        let vis_pos = Tensor::from_vec(position_features(grid, h), (grid * grid, h), vb.device())?
            .to_dtype(vb.dtype())?;
        let double_blocks = (0..cfg.num_double_blocks)
            .map(|i| DoubleBlock::new(&cfg, vb.pp(format!("double.{i}")), init))
            .collect::<Result<Vec<_>>>()?;
        let single_blocks = (0..cfg.num_single_blocks)
            .map(|i| SingleBlock::new(&cfg, vb.pp(format!("single.{i}")), init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            img_in: linear(cfg.patch_dim(), h, vb.pp("img_in"), false)?,
            time_in: linear(cfg.time_embed_dim, h, vb.pp("time_in"), false)?,
            time_out: linear(h, h, vb.pp("time_out"), false)?,
            final_mod: linear(h, 2 * h, vb.pp("final_mod"), zero)?,
            final_out: linear(h, cfg.patch_dim(), vb.pp("final_out"), zero)?,
            txt_embed,
            txt_pos,
            vis_pos,
            double_blocks,
            single_blocks,
            dtype: vb.dtype(),
            device: vb.device().clone(),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Batched velocity: `x` is `(B, C, H, W)`, `t` is `(B,)`, `text` is
    /// `(B, max_text_tokens)` of `u32` ids.
    pub fn forward(&self, x: &Tensor, t: &Tensor, text: &Tensor, mut hook: Option<Hook<'_>>) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (_, c, hgt, wid) = x.dims4()?;
        if (c, hgt, wid) != cfg.latent_shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![cfg.channels, cfg.image_size, cfg.image_size],
                got: vec![c, hgt, wid],
            });
        }
        let x = x.to_dtype(self.dtype)?;
        let t = t.to_dtype(self.dtype)?;

        let mut img = self
            .img_in
            .forward(&patchify_batch(&x, cfg.patch_size)?)?
            .broadcast_add(&self.vis_pos)?;
        let mut txt = self.txt_embed.forward(text)?.broadcast_add(&self.txt_pos)?;
        let vec = self
            .time_out
            .forward(&self.time_in.forward(&timestep_features(&t, cfg.time_embed_dim)?)?.silu()?)?;

        let num_text = txt.dim(1)?;
        let mut pass = PassState {
            hook: &mut hook,
            cfg,
            num_text,
        };
        for (i, block) in self.double_blocks.iter().enumerate() {
            (img, txt) = block.forward(&img, &txt, &vec, i, &mut pass)?;
        }
        let mut joint = Tensor::cat(&[&txt, &img], 1)?;
        for (i, block) in self.single_blocks.iter().enumerate() {
            joint = block.forward(&joint, &vec, i, &mut pass)?;
        }
        let img = joint.narrow(1, num_text, cfg.num_visual_tokens())?;
        let m = mod_chunks(&self.final_mod, &vec, 2)?;
        let out = self.final_out.forward(&modulate(&layer_norm(&img)?, &m[0], &m[1])?)?;
        unpatchify_batch(&out, c, (cfg.grid_size(), cfg.grid_size()), cfg.patch_size)
    }

    /// Stacks prompts into a `(B, max_text_tokens)` id tensor.
    pub fn text_tensor(&self, prompts: &[&TokenIds]) -> Result<Tensor> {
        let l = self.cfg.max_text_tokens;
        let mut ids = Vec::with_capacity(prompts.len() * l);
        for p in prompts {
            if p.max_len() != l {
                return Err(crate::error::invalid(format!(
                    "prompt padded to {} tokens, model expects {l}",
                    p.max_len()
                )));
            }
            if let Some(bad) = p.ids().iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
                return Err(crate::error::invalid(format!("token id {bad} outside vocabulary")));
            }
            ids.extend_from_slice(p.ids());
        }
        Ok(Tensor::from_vec(ids, (prompts.len(), l), &self.device)?)
    }
}

impl VelocityModel for ToyMmDit {
    type Condition = TokenIds;

    fn velocity(&self, state: &Latent, t: f64, condition: &TokenIds, hook: Option<Hook<'_>>) -> Result<Latent> {
        let x = state.tensor().unsqueeze(0)?;
        let t = Tensor::new(&[t], &self.device)?;
        let text = self.text_tensor(&[condition])?;
        let v = self.forward(&x, &t, &text, hook)?;
        Latent::new(v.squeeze(0)?.to_dtype(state.dtype())?)
    }
}
