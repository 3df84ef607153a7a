//! Source-feature caching during inversion and the controllers that feed
//! cached source K/V (and optionally Q) back into sampling.

mod cache;
mod controllers;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mask::EditMask;
use crate::model::BlockKind;

pub use cache::{CacheEntry, CacheRecorder, KvCache, SiteKey};
pub use controllers::{baseline_injection, make_kvmix_controller, FusionController, InjectionController};

/// Which projections are taken from the source pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    V,
    QV,
    QKV,
    #[default]
    KV,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [AttentionMode::V, AttentionMode::QV, AttentionMode::QKV, AttentionMode::KV];

    pub fn uses_q(self) -> bool {
        matches!(self, AttentionMode::QV | AttentionMode::QKV)
    }

    pub fn uses_k(self) -> bool {
        matches!(self, AttentionMode::QKV | AttentionMode::KV)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::V => "V",
            AttentionMode::QV => "QV",
            AttentionMode::QKV => "QKV",
            AttentionMode::KV => "KV",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace(['&', '+', '-', '_'], "");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == up)
            .ok_or_else(|| invalid(format!("unknown attention mode '{s}' (expected V, QV, QKV or KV)")))
    }
}

/// Where and how source features are fed into sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionSchedule {
    /// Sampling step indices to control; `None` means every step.
    pub active_steps: Option<Vec<usize>>,
    pub block_kinds: Vec<BlockKind>,
    pub mode: AttentionMode,
}

impl Default for InjectionSchedule {
    fn default() -> Self {
        Self {
            active_steps: None,
            block_kinds: vec![BlockKind::Double, BlockKind::Single],
            mode: AttentionMode::KV,
        }
    }
}

impl InjectionSchedule {
    /// Schedule that controls nothing.
    pub fn inactive() -> Self {
        Self {
            active_steps: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if let Some(steps) = &self.active_steps {
            if let Some(bad) = steps.iter().find(|&&s| s >= num_steps) {
                return Err(invalid(format!("active step {bad} outside 0..{num_steps}")));
            }
        }
        Ok(())
    }

    pub fn step_active(&self, step: usize) -> bool {
        self.active_steps.as_ref().is_none_or(|s| s.contains(&step))
    }

    pub fn is_active(&self, step: usize, kind: BlockKind) -> bool {
        self.step_active(step) && self.block_kinds.contains(&kind)
    }

    pub fn num_active_steps(&self, num_steps: usize) -> usize {
        (0..num_steps).filter(|&s| self.step_active(s)).count()
    }
}

/// Mixing strength and region of the masked source/target blend.
#[derive(Debug, Clone, PartialEq)]
pub struct MixParams {
    pub delta: f64,
    pub mask: EditMask,
}

impl MixParams {
    pub fn new(delta: f64, mask: EditMask) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self { delta, mask })
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid(format!("delta = {delta} outside [0, 1]")));
    }
    Ok(())
}

/// Mask as a `(1, 1, tokens, 1)` boolean selector for `(B, H, T, D)` tensors.
pub(crate) fn token_selector(mask: &EditMask, like: &Tensor) -> Result<Tensor> {
    let t = like.dim(2)?;
    if mask.len() != t {
        return Err(Error::ShapeMismatch {
            expected: vec![t],
            got: vec![mask.len()],
        });
    }
    let bits: Vec<u8> = mask.tokens().iter().map(|&b| b as u8).collect();
    Ok(Tensor::from_vec(bits, (1, 1, t, 1), like.device())?.broadcast_as(like.shape())?)
}

/// `M * (delta * target + (1 - delta) * source) + (1 - M) * source` for one
/// visual segment. Outside the mask, and at `delta` of 0 or 1, the result
/// copies the selected operand exactly.
pub fn masked_mix(target: &Tensor, source: &Tensor, selector: &Tensor, delta: f64) -> Result<Tensor> {
    check_delta(delta)?;
    if target.dims() != source.dims() {
        return Err(Error::ShapeMismatch {
            expected: source.dims().to_vec(),
            got: target.dims().to_vec(),
        });
    }
    if target.dtype() != source.dtype() {
        return Err(invalid("target and source dtypes differ"));
    }
    let blend = if delta == 1.0 {
        target.clone()
    } else if delta == 0.0 {
        source.clone()
    } else {
        ((target * delta)? + (source * (1.0 - delta))?)?
    };
    Ok(selector.where_cond(&blend, source)?)
}

/// Masked convex blend of target and source visual K/V.
///
/// All four tensors are `(batch, heads, visual_tokens, head_dim)`; the mask
/// has one entry per visual token and broadcasts over heads and channels.
pub fn mix_kv(
    k_tg: &Tensor,
    v_tg: &Tensor,
    k_s: &Tensor,
    v_s: &Tensor,
    mask: &EditMask,
    delta: f64,
) -> Result<(Tensor, Tensor)> {
    for (name, t) in [("V_tg", v_tg), ("K_s", k_s), ("V_s", v_s)] {
        if t.dims() != k_tg.dims() {
            return Err(invalid(format!(
                "{name} has shape {:?}, K_tg has {:?}",
                t.dims(),
                k_tg.dims()
            )));
        }
    }
    let sel = token_selector(mask, k_tg)?;
    Ok((masked_mix(k_tg, k_s, &sel, delta)?, masked_mix(v_tg, v_s, &sel, delta)?))
}

pub(crate) fn same_dtype(t: &Tensor, dtype: DType) -> Result<Tensor> {
    Ok(if t.dtype() == dtype { t.clone() } else { t.to_dtype(dtype)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t4(v: Vec<f64>, tokens: usize) -> Tensor {
        let d = v.len() / tokens;
        Tensor::from_vec(v, (1, 1, tokens, d), &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn scalar_token_arithmetic() {
        let m = EditMask::full((1, 1));
        let (k, v) = mix_kv(&t4(vec![2.0], 1), &t4(vec![4.0], 1), &t4(vec![0.0], 1), &t4(vec![1.0], 1), &m, 0.9).unwrap();
        assert!((flat(&k)[0] - 1.8).abs() < 1e-12);
        assert!((flat(&v)[0] - 3.7).abs() < 1e-12);
    }

    #[test]
    fn limits_are_exact() {
        let tg = t4(vec![1.5, -0.0, 3.25, 7.0], 2);
        let s = t4(vec![0.1, 0.2, 0.3, 0.4], 2);
        let full = EditMask::full((1, 2));
        let (k, v) = mix_kv(&tg, &tg, &s, &s, &full, 1.0).unwrap();
        assert_eq!(flat(&k).iter().map(|x| x.to_bits()).collect::<Vec<_>>(), flat(&tg).iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(flat(&v), flat(&tg));
        for delta in [0.0, 0.3, 1.0] {
            let (k, v) = mix_kv(&tg, &tg, &s, &s, &EditMask::empty((1, 2)), delta).unwrap();
            assert_eq!(flat(&k), flat(&s));
            assert_eq!(flat(&v), flat(&s));
        }
    }

    #[test]
    fn mask_selects_tokens() {
        let tg = t4(vec![1.0, 1.0, 1.0, 1.0], 2);
        let s = t4(vec![0.0, 0.0, 0.0, 0.0], 2);
        let m = EditMask::from_tokens(vec![false, true], (1, 2)).unwrap();
        let (k, _) = mix_kv(&tg, &tg, &s, &s, &m, 0.5).unwrap();
        assert_eq!(flat(&k), vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = t4(vec![1.0, 2.0], 2);
        let b = t4(vec![1.0, 2.0, 3.0, 4.0], 2);
        let m = EditMask::full((1, 2));
        assert!(mix_kv(&a, &a, &a, &a, &m, 1.1).is_err());
        assert!(mix_kv(&a, &a, &a, &a, &m, -0.1).is_err());
        assert!(mix_kv(&a, &b, &a, &a, &m, 0.5).is_err());
        assert!(mix_kv(&a, &a, &a, &a, &EditMask::full((1, 3)), 0.5).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("qkv".parse::<AttentionMode>().unwrap(), AttentionMode::QKV);
        assert_eq!("Q&V".parse::<AttentionMode>().unwrap(), AttentionMode::QV);
        assert!("QK".parse::<AttentionMode>().is_err());
        assert_eq!(serde_json::to_string(&AttentionMode::KV).unwrap(), "\"KV\"");
    }

    #[test]
    fn schedule_validation() {
        let s = InjectionSchedule {
            active_steps: Some(vec![0, 3]),
            ..Default::default()
        };
        assert!(s.validate(4).is_ok());
        assert!(s.validate(3).is_err());
        assert!(s.is_active(3, BlockKind::Single));
        assert!(!s.is_active(1, BlockKind::Double));
        assert_eq!(InjectionSchedule::default().num_active_steps(15), 15);
        assert_eq!(InjectionSchedule::inactive().num_active_steps(15), 0);
    }

    fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n))
    }

    proptest! {
        #[test]
        fn affine_in_target((x, y) in vec_pair(12), a in -3.0f64..3.0, b in -3.0f64..3.0,
                            delta in 0.0f64..=1.0, bits in prop::collection::vec(any::<bool>(), 3)) {
            let m = EditMask::from_tokens(bits, (1, 3)).unwrap();
            let zero = t4(vec![0.0; 12], 3);
            let comb: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (lhs, _) = mix_kv(&t4(comb, 3), &zero, &zero, &zero, &m, delta).unwrap();
            let (mx, _) = mix_kv(&t4(x.clone(), 3), &zero, &zero, &zero, &m, delta).unwrap();
            let (my, _) = mix_kv(&t4(y.clone(), 3), &zero, &zero, &zero, &m, delta).unwrap();
            for ((l, p), q) in flat(&lhs).iter().zip(flat(&mx)).zip(flat(&my)) {
                prop_assert!((l - (a * p + b * q)).abs() < 1e-9);
            }
            // and in the source with the target held at zero
            let (lhs, _) = mix_kv(&zero, &zero, &t4(x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect(), 3), &zero, &m, delta).unwrap();
            let (mx, _) = mix_kv(&zero, &zero, &t4(x, 3), &zero, &m, delta).unwrap();
            let (my, _) = mix_kv(&zero, &zero, &t4(y, 3), &zero, &m, delta).unwrap();
            for ((l, p), q) in flat(&lhs).iter().zip(flat(&mx)).zip(flat(&my)) {
                prop_assert!((l - (a * p + b * q)).abs() < 1e-9);
            }
        }

        #[test]
        fn stays_in_convex_hull((tg, s) in vec_pair(12), delta in 0.0f64..=1.0,
                                bits in prop::collection::vec(any::<bool>(), 3)) {
            let m = EditMask::from_tokens(bits.clone(), (1, 3)).unwrap();
            let (k, v) = mix_kv(&t4(tg.clone(), 3), &t4(tg.clone(), 3), &t4(s.clone(), 3), &t4(s.clone(), 3), &m, delta).unwrap();
            for (i, (&kk, &vv)) in flat(&k).iter().zip(flat(&v).iter()).enumerate() {
                let (lo, hi) = (tg[i].min(s[i]), tg[i].max(s[i]));
                prop_assert!(kk >= lo - 1e-12 && kk <= hi + 1e-12);
                prop_assert_eq!(kk, vv);
                if !bits[i / 4] {
                    prop_assert_eq!(kk.to_bits(), s[i].to_bits());
                }
            }
        }
    }
}
