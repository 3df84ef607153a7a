use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::InjectionSchedule;
use crate::error::{invalid, Error, Result};
use crate::flow::{Phase, TimeGrid};
use crate::model::{AttentionController, AttentionInputs, AttentionOverride, AttentionSite, BlockKind};

/// Identifies one attention call within a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub step_index: usize,
    pub stage: usize,
    pub block_kind: BlockKind,
    pub layer_index: usize,
}

impl SiteKey {
    pub fn of(site: &AttentionSite) -> Self {
        Self {
            step_index: site.step_index,
            stage: site.stage,
            block_kind: site.block_kind,
            layer_index: site.layer_index,
        }
    }

    fn tensor_name(&self, which: &str) -> String {
        format!("{}.{}.{}.{}.{which}", self.step_index, self.stage, self.block_kind, self.layer_index)
    }
}

/// Source visual segments recorded at one site, `(batch, heads, visual_tokens, head_dim)`.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub interval: (f64, f64),
    pub k: Tensor,
    pub v: Tensor,
    pub q: Option<Tensor>,
}

/// Frozen source features from one inversion pass.
///
/// There is no way to modify a cache once [`CacheRecorder::finish`] has
/// produced it; sampling controllers only ever hold shared references.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    entries: BTreeMap<SiteKey, CacheEntry>,
    /// Interval bit pattern to step index.
    steps: HashMap<(u64, u64), usize>,
}

fn interval_bits(iv: (f64, f64)) -> (u64, u64) {
    (iv.0.to_bits(), iv.1.to_bits())
}

impl KvCache {
    fn from_entries(entries: BTreeMap<SiteKey, CacheEntry>) -> Self {
        let steps = entries
            .iter()
            .map(|(k, e)| (interval_bits(e.interval), k.step_index))
            .collect();
        Self { entries, steps }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &SiteKey> {
        self.entries.keys()
    }

    pub fn get(&self, key: &SiteKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    /// Step index of the recorded pass that crossed exactly this interval.
    pub fn step_for_interval(&self, interval: (f64, f64)) -> Option<usize> {
        self.steps.get(&interval_bits(interval)).copied()
    }

    /// Entry recorded over the same interval, evaluation stage and block,
    /// whatever step index the reading solve uses.
    pub fn lookup(&self, site: &AttentionSite) -> Result<&CacheEntry> {
        let step = self.step_for_interval(site.interval).ok_or(Error::TimestepMismatch {
            t_from: site.interval.0,
            t_to: site.interval.1,
        })?;
        self.entries
            .get(&SiteKey {
                step_index: step,
                stage: site.stage,
                block_kind: site.block_kind,
                layer_index: site.layer_index,
            })
            .ok_or(Error::MissingCacheEntry(*site))
    }

    /// Checks that every interval the schedule controls on `grid` was recorded.
    pub fn check_grid(&self, grid: &TimeGrid, schedule: &InjectionSchedule) -> Result<()> {
        for i in 0..grid.num_steps() {
            if schedule.step_active(i) && !schedule.block_kinds.is_empty() {
                let iv = grid.interval(i);
                if self.step_for_interval(iv).is_none() {
                    return Err(Error::TimestepMismatch { t_from: iv.0, t_to: iv.1 });
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over keys, intervals and tensor contents.
    pub fn fingerprint(&self) -> Result<String> {
        let mut bytes = Vec::new();
        for (key, e) in &self.entries {
            bytes.extend(key.tensor_name("").as_bytes());
            bytes.extend(e.interval.0.to_le_bytes());
            bytes.extend(e.interval.1.to_le_bytes());
            for t in [Some(&e.k), Some(&e.v), e.q.as_ref()].into_iter().flatten() {
                for x in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                    bytes.extend(x.to_le_bytes());
                }
            }
        }
        Ok(crate::util::sha256_hex(&bytes))
    }

    /// Writes the cache as a safetensors file: one `step.stage.kind.layer.{k,v,q}`
    /// tensor per recorded segment, intervals in the header metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut intervals = BTreeMap::new();
        for (key, e) in &self.entries {
            tensors.push((key.tensor_name("k"), e.k.clone()));
            tensors.push((key.tensor_name("v"), e.v.clone()));
            if let Some(q) = &e.q {
                tensors.push((key.tensor_name("q"), q.clone()));
            }
            intervals.insert(key.tensor_name(""), [e.interval.0, e.interval.1]);
        }
        let mut meta = HashMap::new();
        meta.insert("intervals".to_string(), serde_json::to_string(&intervals)?);
        safetensors::tensor::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| invalid(format!("cannot write cache {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |why: String| invalid(format!("cache {}: {why}", path.display()));
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let intervals: BTreeMap<String, [f64; 2]> = serde_json::from_str(
            meta.metadata()
                .as_ref()
                .and_then(|m| m.get("intervals"))
                .ok_or_else(|| bad("missing interval metadata".into()))?,
        )?;
        let mut tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut entries = BTreeMap::new();
        for (prefix, iv) in intervals {
            let parts: Vec<&str> = prefix.trim_end_matches('.').split('.').collect();
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad key {prefix}")));
            let block_kind = match parts.get(2) {
                Some(&"double") => BlockKind::Double,
                Some(&"single") => BlockKind::Single,
                _ => return Err(bad(format!("bad key {prefix}"))),
            };
            if parts.len() != 4 {
                return Err(bad(format!("bad key {prefix}")));
            }
            let key = SiteKey {
                step_index: parse(parts[0])?,
                stage: parse(parts[1])?,
                block_kind,
                layer_index: parse(parts[3])?,
            };
            let mut take = |w: &str| tensors.remove(&format!("{prefix}{w}"));
            let entry = CacheEntry {
                interval: (iv[0], iv[1]),
                k: take("k").ok_or_else(|| bad(format!("missing {prefix}k")))?,
                v: take("v").ok_or_else(|| bad(format!("missing {prefix}v")))?,
                q: take("q"),
            };
            entries.insert(key, entry);
        }
        Ok(Self::from_entries(entries))
    }
}

/// Copies source visual segments out of an inversion pass.
///
/// Only inversion-phase sites selected by the schedule are recorded;
/// sampling-phase calls pass straight through.
#[derive(Debug)]
pub struct CacheRecorder {
    schedule: InjectionSchedule,
    record_q: bool,
    entries: BTreeMap<SiteKey, CacheEntry>,
}

impl CacheRecorder {
    pub fn new(schedule: InjectionSchedule, record_q: bool) -> Self {
        Self {
            schedule,
            record_q,
            entries: BTreeMap::new(),
        }
    }

    /// Recorder for a schedule whose mode decides whether Q is kept.
    pub fn for_schedule(schedule: InjectionSchedule) -> Self {
        let q = schedule.mode.uses_q();
        Self::new(schedule, q)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finish(self) -> KvCache {
        KvCache::from_entries(self.entries)
    }
}

impl AttentionController for CacheRecorder {
    fn on_attention(&mut self, site: &AttentionSite, inputs: &AttentionInputs<'_>) -> Result<AttentionOverride> {
        if site.phase != Phase::Inversion || !self.schedule.is_active(site.step_index, site.block_kind) {
            return Ok(AttentionOverride::default());
        }
        let key = SiteKey::of(site);
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateCacheEntry(*site));
        }
        let entry = CacheEntry {
            interval: site.interval,
            k: inputs.visual_k()?.copy()?,
            v: inputs.visual_v()?.copy()?,
            q: if self.record_q { Some(inputs.visual_q()?.copy()?) } else { None },
        };
        self.entries.insert(key, entry);
        Ok(AttentionOverride::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(phase: Phase, step: usize, kind: BlockKind, layer: usize) -> AttentionSite {
        AttentionSite {
            phase,
            step_index: step,
            interval: (step as f64 / 4.0, (step + 1) as f64 / 4.0),
            stage: 0,
            layer_index: layer,
            block_kind: kind,
            num_heads: 1,
            num_text_tokens: 1,
            num_visual_tokens: 2,
        }
    }

    fn qkv(seed: f64) -> Tensor {
        Tensor::from_vec((0..6).map(|i| seed + i as f64).collect::<Vec<_>>(), (1, 1, 3, 2), &Device::Cpu).unwrap()
    }

    fn record(rec: &mut CacheRecorder, s: &AttentionSite, seed: f64) -> Result<AttentionOverride> {
        let (q, k, v) = (qkv(seed), qkv(seed + 10.0), qkv(seed + 20.0));
        rec.on_attention(s, &AttentionInputs::new(&q, &k, &v, 1))
    }

    #[test]
    fn records_visual_segments_of_inversion_only() {
        let mut rec = CacheRecorder::for_schedule(InjectionSchedule::default());
        assert!(record(&mut rec, &site(Phase::Sampling, 0, BlockKind::Double, 0), 0.0).unwrap().is_empty());
        assert!(rec.is_empty());
        record(&mut rec, &site(Phase::Inversion, 2, BlockKind::Single, 1), 0.0).unwrap();
        let cache = rec.finish();
        assert_eq!(cache.len(), 1);
        let e = cache.lookup(&site(Phase::Sampling, 2, BlockKind::Single, 1)).unwrap();
        assert_eq!(e.k.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![12.0, 13.0, 14.0, 15.0]);
        assert!(e.q.is_none());
        assert!(matches!(
            cache.lookup(&site(Phase::Sampling, 2, BlockKind::Single, 0)),
            Err(Error::MissingCacheEntry(_))
        ));
        assert!(matches!(
            cache.lookup(&site(Phase::Sampling, 1, BlockKind::Single, 1)),
            Err(Error::TimestepMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_write_rejected() {
        let mut rec = CacheRecorder::for_schedule(InjectionSchedule::default());
        let s = site(Phase::Inversion, 0, BlockKind::Double, 0);
        record(&mut rec, &s, 0.0).unwrap();
        assert!(matches!(record(&mut rec, &s, 1.0), Err(Error::DuplicateCacheEntry(_))));
    }

    #[test]
    fn schedule_filters_and_q_follows_mode() {
        let schedule = InjectionSchedule {
            active_steps: Some(vec![1]),
            block_kinds: vec![BlockKind::Double],
            mode: super::super::AttentionMode::QV,
        };
        let mut rec = CacheRecorder::for_schedule(schedule);
        for step in 0..3 {
            for kind in [BlockKind::Double, BlockKind::Single] {
                record(&mut rec, &site(Phase::Inversion, step, kind, 0), 0.0).unwrap();
            }
        }
        let cache = rec.finish();
        assert_eq!(cache.keys().copied().collect::<Vec<_>>(), vec![SiteKey {
            step_index: 1,
            stage: 0,
            block_kind: BlockKind::Double,
            layer_index: 0
        }]);
        assert!(cache.lookup(&site(Phase::Sampling, 1, BlockKind::Double, 0)).unwrap().q.is_some());
    }

    #[test]
    fn spill_round_trip() {
        let mut rec = CacheRecorder::new(InjectionSchedule::default(), true);
        record(&mut rec, &site(Phase::Inversion, 0, BlockKind::Double, 0), 0.5).unwrap();
        record(&mut rec, &site(Phase::Inversion, 3, BlockKind::Single, 2), 1.5).unwrap();
        let cache = rec.finish();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.safetensors");
        cache.save(&p).unwrap();
        let back = KvCache::load(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.fingerprint().unwrap(), cache.fingerprint().unwrap());
        assert_eq!(back.step_for_interval((0.75, 1.0)), Some(3));
    }

    #[test]
    fn grid_check() {
        let mut rec = CacheRecorder::for_schedule(InjectionSchedule::default());
        for step in 0..4 {
            record(&mut rec, &site(Phase::Inversion, step, BlockKind::Double, 0), 0.0).unwrap();
        }
        let cache = rec.finish();
        let sched = InjectionSchedule::default();
        assert!(cache.check_grid(&crate::flow::make_schedule(4, Default::default()).unwrap(), &sched).is_ok());
        assert!(matches!(
            cache.check_grid(&crate::flow::make_schedule(5, Default::default()).unwrap(), &sched),
            Err(Error::TimestepMismatch { .. })
        ));
        assert!(cache
            .check_grid(&crate::flow::make_schedule(5, Default::default()).unwrap(), &InjectionSchedule::inactive())
            .is_ok());
    }
}
