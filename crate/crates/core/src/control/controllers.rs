use candle_core::Tensor;

use super::{masked_mix, same_dtype, token_selector, AttentionMode, InjectionSchedule, KvCache, MixParams};
use crate::error::{invalid, Result};
use crate::flow::Phase;
use crate::model::{AttentionController, AttentionInputs, AttentionOverride, AttentionSite};

fn cached_q(cache: &KvCache, site: &AttentionSite) -> Result<Tensor> {
    cache
        .lookup(site)?
        .q
        .clone()
        .ok_or_else(|| invalid(format!("cache holds no Q for {site}; record with a Q-substituting mode")))
}

/// Global source-feature substitution at one site, no mask.
///
/// Mode V swaps in source V, KV swaps K and V, QV swaps Q and V, QKV all three.
pub fn baseline_injection(
    site: &AttentionSite,
    inputs: &AttentionInputs<'_>,
    cache: &KvCache,
    mode: AttentionMode,
) -> Result<AttentionOverride> {
    let entry = cache.lookup(site)?;
    let dtype = inputs.visual_v()?.dtype();
    Ok(AttentionOverride {
        q: if mode.uses_q() { Some(same_dtype(&cached_q(cache, site)?, dtype)?) } else { None },
        k: if mode.uses_k() { Some(same_dtype(&entry.k, dtype)?) } else { None },
        v: Some(same_dtype(&entry.v, dtype)?),
    })
}

/// Sampling-phase controller applying [`baseline_injection`] at every
/// scheduled site.
pub struct InjectionController<'a> {
    cache: &'a KvCache,
    schedule: InjectionSchedule,
    mode: AttentionMode,
}

impl<'a> InjectionController<'a> {
    pub fn new(cache: &'a KvCache, schedule: InjectionSchedule, mode: AttentionMode) -> Self {
        Self { cache, schedule, mode }
    }
}

impl AttentionController for InjectionController<'_> {
    fn on_attention(&mut self, site: &AttentionSite, inputs: &AttentionInputs<'_>) -> Result<AttentionOverride> {
        if site.phase != Phase::Sampling || !self.schedule.is_active(site.step_index, site.block_kind) {
            return Ok(AttentionOverride::default());
        }
        baseline_injection(site, inputs, self.cache, self.mode)
    }
}

/// Sampling-phase controller blending target and cached source features
/// inside the edit mask, source features outside it.
///
/// The schedule's mode picks the blended projections (K and V by default).
pub struct FusionController<'a> {
    cache: &'a KvCache,
    schedule: InjectionSchedule,
    params: MixParams,
}

impl<'a> FusionController<'a> {
    pub fn new(cache: &'a KvCache, schedule: InjectionSchedule, params: MixParams) -> Result<Self> {
        super::check_delta(params.delta)?;
        Ok(Self { cache, schedule, params })
    }
}

pub fn make_kvmix_controller(cache: &KvCache, schedule: InjectionSchedule, params: MixParams) -> Result<FusionController<'_>> {
    FusionController::new(cache, schedule, params)
}

impl AttentionController for FusionController<'_> {
    fn on_attention(&mut self, site: &AttentionSite, inputs: &AttentionInputs<'_>) -> Result<AttentionOverride> {
        if site.phase != Phase::Sampling || !self.schedule.is_active(site.step_index, site.block_kind) {
            return Ok(AttentionOverride::default());
        }
        let entry = self.cache.lookup(site)?;
        let v_tg = inputs.visual_v()?;
        let dtype = v_tg.dtype();
        let sel = token_selector(&self.params.mask, &v_tg)?;
        let delta = self.params.delta;
        let mix = |tg: Tensor, src: &Tensor| masked_mix(&tg, &same_dtype(src, dtype)?, &sel, delta);
        let mode = self.schedule.mode;
        Ok(AttentionOverride {
            q: if mode.uses_q() { Some(mix(inputs.visual_q()?, &cached_q(self.cache, site)?)?) } else { None },
            k: if mode.uses_k() { Some(mix(inputs.visual_k()?, &entry.k)?) } else { None },
            v: Some(mix(v_tg, &entry.v)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::CacheRecorder;
    use crate::error::Error;
    use crate::mask::EditMask;
    use crate::model::BlockKind;
    use candle_core::Device;

    fn site(phase: Phase) -> AttentionSite {
        AttentionSite {
            phase,
            step_index: 0,
            interval: (0.0, 0.5),
            stage: 0,
            layer_index: 0,
            block_kind: BlockKind::Double,
            num_heads: 1,
            num_text_tokens: 1,
            num_visual_tokens: 2,
        }
    }

    fn t(base: f64) -> Tensor {
        Tensor::from_vec((0..6).map(|i| base + i as f64).collect::<Vec<_>>(), (1, 1, 3, 2), &Device::Cpu).unwrap()
    }

    fn flat(t: &Option<Tensor>) -> Option<Vec<f64>> {
        t.as_ref().map(|t| t.flatten_all().unwrap().to_vec1::<f64>().unwrap())
    }

    /// Cache recorded from q/k/v with bases 100/200/300.
    fn cache(record_q: bool) -> KvCache {
        let mut rec = CacheRecorder::new(InjectionSchedule::default(), record_q);
        let (q, k, v) = (t(100.0), t(200.0), t(300.0));
        rec.on_attention(&site(Phase::Inversion), &AttentionInputs::new(&q, &k, &v, 1)).unwrap();
        rec.finish()
    }

    #[test]
    fn baseline_modes() {
        let c = cache(true);
        let (q, k, v) = (t(0.0), t(10.0), t(20.0));
        let inputs = AttentionInputs::new(&q, &k, &v, 1);
        let s = site(Phase::Sampling);
        let o = baseline_injection(&s, &inputs, &c, AttentionMode::V).unwrap();
        assert!(o.q.is_none() && o.k.is_none());
        assert_eq!(flat(&o.v).unwrap(), vec![302.0, 303.0, 304.0, 305.0]);
        let o = baseline_injection(&s, &inputs, &c, AttentionMode::QKV).unwrap();
        assert_eq!(flat(&o.q).unwrap(), vec![102.0, 103.0, 104.0, 105.0]);
        assert_eq!(flat(&o.k).unwrap(), vec![202.0, 203.0, 204.0, 205.0]);
        let o = baseline_injection(&s, &inputs, &cache(false), AttentionMode::KV).unwrap();
        assert!(o.q.is_none());
        assert!(baseline_injection(&s, &inputs, &cache(false), AttentionMode::QV).is_err());
    }

    #[test]
    fn baseline_with_target_cache_is_identity() {
        let (q, k, v) = (t(100.0), t(200.0), t(300.0));
        let c = cache(false);
        let inputs = AttentionInputs::new(&q, &k, &v, 1);
        let o = baseline_injection(&site(Phase::Sampling), &inputs, &c, AttentionMode::KV).unwrap();
        assert_eq!(flat(&o.k), flat(&Some(inputs.visual_k().unwrap())));
        assert_eq!(flat(&o.v), flat(&Some(inputs.visual_v().unwrap())));
    }

    #[test]
    fn fusion_at_delta_zero_full_mask_equals_kv_baseline() {
        let c = cache(false);
        let (q, k, v) = (t(0.0), t(10.0), t(20.0));
        let inputs = AttentionInputs::new(&q, &k, &v, 1);
        let s = site(Phase::Sampling);
        let mut fusion =
            make_kvmix_controller(&c, InjectionSchedule::default(), MixParams::new(0.0, EditMask::full((1, 2))).unwrap()).unwrap();
        let a = fusion.on_attention(&s, &inputs).unwrap();
        let b = baseline_injection(&s, &inputs, &c, AttentionMode::KV).unwrap();
        let bits = |t: &Option<Tensor>| flat(t).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.k), bits(&b.k));
        assert_eq!(bits(&a.v), bits(&b.v));
    }

    #[test]
    fn fusion_matches_elementwise_oracle() {
        let c = cache(false);
        let (q, k, v) = (t(0.0), t(10.0), t(20.0));
        let inputs = AttentionInputs::new(&q, &k, &v, 1);
        let mut fusion =
            make_kvmix_controller(&c, InjectionSchedule::default(), MixParams::new(0.9, EditMask::full((1, 2))).unwrap()).unwrap();
        let o = fusion.on_attention(&site(Phase::Sampling), &inputs).unwrap();
        // visual tokens are rows 1..3 of the 3x2 ramps
        for (i, x) in flat(&o.k).unwrap().into_iter().enumerate() {
            let tg = 10.0 + (i + 2) as f64;
            let src = 200.0 + (i + 2) as f64;
            assert!((x - (0.9 * tg + 0.1 * src)).abs() < 1e-12);
        }
        assert!(o.q.is_none());
    }

    #[test]
    fn inactive_sites_and_inversion_pass_through() {
        let c = cache(false);
        let (q, k, v) = (t(0.0), t(10.0), t(20.0));
        let inputs = AttentionInputs::new(&q, &k, &v, 1);
        let params = MixParams::new(0.5, EditMask::full((1, 2))).unwrap();
        let mut off = make_kvmix_controller(&c, InjectionSchedule::inactive(), params.clone()).unwrap();
        assert!(off.on_attention(&site(Phase::Sampling), &inputs).unwrap().is_empty());
        let mut on = make_kvmix_controller(&c, InjectionSchedule::default(), params).unwrap();
        assert!(on.on_attention(&site(Phase::Inversion), &inputs).unwrap().is_empty());
        let mut inj = InjectionController::new(&c, InjectionSchedule::default(), AttentionMode::V);
        assert!(inj.on_attention(&site(Phase::Inversion), &inputs).unwrap().is_empty());
    }

    #[test]
    fn mismatched_grid_is_an_error() {
        let c = cache(false);
        let (q, k, v) = (t(0.0), t(10.0), t(20.0));
        let inputs = AttentionInputs::new(&q, &k, &v, 1);
        let mut s = site(Phase::Sampling);
        s.interval = (0.0, 1.0 / 3.0);
        let mut fusion =
            make_kvmix_controller(&c, InjectionSchedule::default(), MixParams::new(0.5, EditMask::full((1, 2))).unwrap()).unwrap();
        assert!(matches!(fusion.on_attention(&s, &inputs), Err(Error::TimestepMismatch { .. })));
    }
}
