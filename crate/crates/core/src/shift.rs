//! Re-statisticising the inverted latent inside the edit region.
//!
//! The inverted latent is pushed towards the per-channel moments of fresh
//! Gaussian noise with AdaIN, then blended back by `beta` inside the mask.
//! Outside the mask the latent is returned untouched.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::Latent;
use crate::mask::EditMask;

/// Pixels the AdaIN moments are measured over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentScope {
    #[default]
    Global,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    pub beta: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub scope: MomentScope,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            beta: 0.25,
            epsilon: 1e-6,
            seed: 0,
            scope: MomentScope::Global,
        }
    }
}

impl ShiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of a slice.
///
/// Values are offset by the first element before summing so a constant
/// slice yields exactly its value and zero spread.
fn moments(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut it = xs.clone();
    let Some(pivot) = it.next() else {
        return (f64::NAN, f64::NAN);
    };
    let n = xs.clone().count() as f64;
    let shifted = xs.clone().map(|x| x - pivot).sum::<f64>() / n;
    let var = xs.map(|x| (x - pivot - shifted).powi(2)).sum::<f64>() / n;
    (pivot + shifted, var.sqrt())
}

fn channels(z: &Latent) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = z.dims();
    Ok((z.to_vec_f64()?, c, h * w))
}

/// Per-channel `(mean, population std)` over all spatial positions.
pub fn channel_moments(z: &Latent) -> Result<(Vec<f64>, Vec<f64>)> {
    let (data, c, hw) = channels(z)?;
    if hw < 2 {
        return Err(invalid("channel moments need at least two spatial positions"));
    }
    Ok((0..c).map(|ch| moments(data[ch * hw..(ch + 1) * hw].iter().copied())).unzip())
}

fn moments_where(data: &[f64], c: usize, hw: usize, select: Option<&[bool]>) -> Result<(Vec<f64>, Vec<f64>)> {
    (0..c)
        .map(|ch| {
            let plane = &data[ch * hw..(ch + 1) * hw];
            let (m, s) = match select {
                Some(sel) => moments(plane.iter().zip(sel).filter(|(_, &s)| s).map(|(x, _)| *x)),
                None => moments(plane.iter().copied()),
            };
            if m.is_nan() {
                return Err(invalid("moment region is empty"));
            }
            Ok((m, s))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn adain_with(z: &Latent, z_ref: &Latent, epsilon: f64, select: Option<&[bool]>) -> Result<Latent> {
    z.ensure_same_shape(z_ref)?;
    let (data, c, hw) = channels(z)?;
    let (rdata, _, _) = channels(z_ref)?;
    let (mu, sigma) = moments_where(&data, c, hw, select)?;
    let (mu_r, sigma_r) = moments_where(&rdata, c, hw, select)?;
    let out: Vec<f64> = data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ch = i / hw;
            sigma_r[ch] * ((x - mu[ch]) / (sigma[ch] + epsilon)) + mu_r[ch]
        })
        .collect();
    let (cc, h, w) = z.dims();
    Latent::new(Tensor::from_vec(out, (cc, h, w), &Device::Cpu)?.to_dtype(z.dtype())?)
}

/// Gives `z` the per-channel mean and spread of `z_ref`.
pub fn adain(z: &Latent, z_ref: &Latent, epsilon: f64) -> Result<Latent> {
    adain_with(z, z_ref, epsilon, None)
}

/// Standard-normal latent drawn from `seed`, in the dtype of `like`.
pub fn shift_noise(like: &Latent, seed: u64) -> Result<Latent> {
    let (c, h, w) = like.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    Latent::new(Tensor::from_vec(data, (c, h, w), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Pixel-resolution view of a token mask for a latent of the given size.
pub(crate) fn pixel_mask(mask: &EditMask, (h, w): (usize, usize)) -> Result<Vec<bool>> {
    let (rows, cols) = mask.grid();
    if rows == 0 || h % rows != 0 || w % cols != 0 || h / rows != w / cols {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            got: vec![rows, cols],
        });
    }
    Ok(mask.pixel_view(h / rows))
}

/// `M * (beta * adain(z, noise) + (1 - beta) * z) + (1 - M) * z`.
pub fn latents_shift(z: &Latent, mask: &EditMask, params: &ShiftParams) -> Result<Latent> {
    params.validate()?;
    let (c, h, w) = z.dims();
    let px = pixel_mask(mask, (h, w))?;
    if params.beta == 0.0 || !px.iter().any(|&b| b) {
        return Ok(z.clone());
    }
    let noise = shift_noise(z, params.seed)?;
    let select = match params.scope {
        MomentScope::Global => None,
        MomentScope::Masked => Some(px.as_slice()),
    };
    let styled = adain_with(z, &noise, params.epsilon, select)?;
    let blend = if params.beta == 1.0 {
        styled
    } else {
        Latent::new(((styled.tensor() * params.beta)? + (z.tensor() * (1.0 - params.beta))?)?)?
    };
    let sel: Vec<u8> = (0..c).flat_map(|_| px.iter().map(|&b| b as u8)).collect();
    let sel = Tensor::from_vec(sel, (c, h, w), &Device::Cpu)?;
    Latent::new(sel.where_cond(blend.tensor(), z.tensor())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn latent(c: usize, h: usize, w: usize, v: Vec<f64>) -> Latent {
        Latent::from_vec_f64(v, (c, h, w)).unwrap()
    }

    #[test]
    fn two_point_and_constant_moments() {
        let (m, s) = channel_moments(&latent(2, 1, 2, vec![1.0, 3.0, 0.7, 0.7])).unwrap();
        assert_eq!(m, vec![2.0, 0.7]);
        assert_eq!(s, vec![1.0, 0.0]);
        assert!(channel_moments(&latent(1, 1, 1, vec![1.0])).is_err());
    }

    #[test]
    fn monte_carlo_moments_of_noise() {
        let noise = shift_noise(&Latent::zeros((1, 100, 100), candle_core::DType::F64).unwrap(), 11).unwrap();
        let (m, s) = channel_moments(&noise).unwrap();
        assert!(m[0].abs() < 0.05 && (s[0] - 1.0).abs() < 0.05, "{m:?} {s:?}");
    }

    #[test]
    fn adain_hand_example() {
        let out = adain(&latent(1, 1, 2, vec![1.0, 3.0]), &latent(1, 1, 2, vec![0.0, 2.0]), 1e-6).unwrap();
        let v = out.to_vec_f64().unwrap();
        assert!((v[0] - 0.0).abs() < 1e-5 && (v[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn adain_self_and_constant() {
        let z = latent(1, 2, 2, vec![0.3, -1.2, 2.0, 0.9]);
        let out = adain(&z, &z, 1e-6).unwrap();
        for (a, b) in out.to_vec_f64().unwrap().iter().zip(z.to_vec_f64().unwrap()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        let c = latent(1, 2, 2, vec![5.0; 4]);
        let out = adain(&c, &z, 1e-6).unwrap();
        let mu = channel_moments(&z).unwrap().0[0];
        assert!(out.to_vec_f64().unwrap().iter().all(|&x| x == mu));
    }

    #[test]
    fn beta_zero_and_empty_mask_are_identity() {
        let z = shift_noise(&Latent::zeros((3, 8, 8), candle_core::DType::F32).unwrap(), 3).unwrap();
        let full = EditMask::full((2, 2));
        let p0 = ShiftParams { beta: 0.0, ..Default::default() };
        assert!(latents_shift(&z, &full, &p0).unwrap().bit_eq(&z).unwrap());
        let p = ShiftParams { beta: 0.7, ..Default::default() };
        assert!(latents_shift(&z, &EditMask::empty((2, 2)), &p).unwrap().bit_eq(&z).unwrap());
    }

    #[test]
    fn full_strength_transfers_noise_moments() {
        let z = latent(2, 4, 4, (0..32).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect());
        let p = ShiftParams { beta: 1.0, seed: 9, ..Default::default() };
        let out = latents_shift(&z, &EditMask::full((2, 2)), &p).unwrap();
        let (m, s) = channel_moments(&out).unwrap();
        let (mr, sr) = channel_moments(&shift_noise(&z, 9).unwrap()).unwrap();
        for ch in 0..2 {
            assert!((m[ch] - mr[ch]).abs() <= 1e-5 * mr[ch].abs().max(1.0));
            assert!((s[ch] - sr[ch]).abs() <= 1e-5 * sr[ch]);
        }
    }

    #[test]
    fn masked_scope_measures_inside_only() {
        let z = latent(1, 4, 4, (0..16).map(|i| i as f64).collect());
        let mask = EditMask::from_tokens(vec![true, false, false, false], (2, 2)).unwrap();
        let p = ShiftParams { beta: 1.0, scope: MomentScope::Masked, seed: 2, ..Default::default() };
        let out = latents_shift(&z, &mask, &p).unwrap().to_vec_f64().unwrap();
        let noise = shift_noise(&z, 2).unwrap().to_vec_f64().unwrap();
        let inside = [0usize, 1, 4, 5];
        let (m, s) = moments(inside.iter().map(|&i| out[i]));
        let (mr, sr) = moments(inside.iter().map(|&i| noise[i]));
        assert!((m - mr).abs() < 1e-9 && (s - sr).abs() < 1e-5);
        assert_eq!(out[2], 2.0);
    }

    #[test]
    fn rejects_bad_params_and_shapes() {
        let z = latent(1, 4, 4, vec![0.0; 16]);
        assert!(latents_shift(&z, &EditMask::full((2, 2)), &ShiftParams { beta: 1.5, ..Default::default() }).is_err());
        assert!(latents_shift(&z, &EditMask::full((3, 3)), &ShiftParams::default()).is_err());
    }

    proptest! {
        #[test]
        fn moment_transfer(z in prop::collection::vec(-5.0f64..5.0, 32), r in prop::collection::vec(-5.0f64..5.0, 32)) {
            let z = latent(2, 4, 4, z);
            let r = latent(2, 4, 4, r);
            let (_, sz) = channel_moments(&z).unwrap();
            prop_assume!(sz.iter().all(|&s| s > 0.1));
            let (m, s) = channel_moments(&adain(&z, &r, 1e-6).unwrap()).unwrap();
            let (mr, sr) = channel_moments(&r).unwrap();
            for ch in 0..2 {
                prop_assert!((m[ch] - mr[ch]).abs() <= 1e-5 * mr[ch].abs().max(1.0));
                prop_assert!((s[ch] - sr[ch]).abs() <= 1e-5 * sr[ch].max(1e-3));
            }
        }

        #[test]
        fn affine_in_beta_and_local(z in prop::collection::vec(-3.0f64..3.0, 64), beta in 0.0f64..=1.0,
                                    bits in prop::collection::vec(any::<bool>(), 4), seed in 0u64..1000) {
            let z = latent(1, 8, 8, z);
            let mask = EditMask::from_tokens(bits, (2, 2)).unwrap();
            let at = |b: f64| latents_shift(&z, &mask, &ShiftParams { beta: b, seed, ..Default::default() }).unwrap().to_vec_f64().unwrap();
            let (o0, o1, ob) = (at(0.0), at(1.0), at(beta));
            let px = mask.pixel_view(4);
            let zv = z.to_vec_f64().unwrap();
            for i in 0..64 {
                prop_assert!((ob[i] - (beta * o1[i] + (1.0 - beta) * o0[i])).abs() < 1e-9);
                if !px[i] {
                    prop_assert_eq!(ob[i].to_bits(), zv[i].to_bits());
                }
            }
        }
    }
}
