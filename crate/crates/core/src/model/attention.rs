//! Instrumentation points inside joint attention.
//!
//! Every Double and Single block calls the active [`AttentionController`]
//! once per forward pass, after Q/K/V are projected and before the softmax.
//! The controller sees the projections split into text and visual segments
//! and may hand back replacement visual segments. Text segments are never
//! replaceable.

use std::cell::OnceCell;
use std::fmt;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Double,
    Single,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Double => "double",
            BlockKind::Single => "single",
        })
    }
}

/// One attention call inside one velocity evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSite {
    pub phase: Phase,
    pub step_index: usize,
    /// Ascending `(t_i, t_{i+1})` of the interval being crossed.
    pub interval: (f64, f64),
    /// Evaluation within the step, see [`crate::flow::StepContext::stage`].
    pub stage: usize,
    /// Index within blocks of the same kind.
    pub layer_index: usize,
    pub block_kind: BlockKind,
    pub num_heads: usize,
    /// Text tokens come first in the joint sequence, visual tokens after.
    pub num_text_tokens: usize,
    pub num_visual_tokens: usize,
}

impl AttentionSite {
    pub fn num_tokens(&self) -> usize {
        self.num_text_tokens + self.num_visual_tokens
    }
}

impl fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} step {}.{} {} block {}",
            self.phase, self.step_index, self.stage, self.block_kind, self.layer_index
        )
    }
}

/// Q/K/V of one attention call, each `(batch, heads, tokens, head_dim)`.
pub struct AttentionInputs<'a> {
    q: &'a Tensor,
    k: &'a Tensor,
    v: &'a Tensor,
    num_text: usize,
    probs: OnceCell<Tensor>,
}

impl<'a> AttentionInputs<'a> {
    pub fn new(q: &'a Tensor, k: &'a Tensor, v: &'a Tensor, num_text: usize) -> Self {
        Self {
            q,
            k,
            v,
            num_text,
            probs: OnceCell::new(),
        }
    }

    fn visual(&self, t: &Tensor) -> Result<Tensor> {
        let total = t.dim(2)?;
        Ok(t.narrow(2, self.num_text, total - self.num_text)?)
    }

    fn text(&self, t: &Tensor) -> Result<Tensor> {
        Ok(t.narrow(2, 0, self.num_text)?)
    }

    pub fn visual_q(&self) -> Result<Tensor> {
        self.visual(self.q)
    }
    pub fn visual_k(&self) -> Result<Tensor> {
        self.visual(self.k)
    }
    pub fn visual_v(&self) -> Result<Tensor> {
        self.visual(self.v)
    }
    pub fn text_q(&self) -> Result<Tensor> {
        self.text(self.q)
    }
    pub fn text_k(&self) -> Result<Tensor> {
        self.text(self.k)
    }
    pub fn text_v(&self) -> Result<Tensor> {
        self.text(self.v)
    }

    /// Softmax attention of the unmodified projections,
    /// `(batch, heads, tokens, tokens)`. Computed on first request.
    pub fn probabilities(&self) -> Result<Tensor> {
        if let Some(p) = self.probs.get() {
            return Ok(p.clone());
        }
        let p = attention_probs(self.q, self.k)?;
        Ok(self.probs.get_or_init(|| p).clone())
    }
}

/// `softmax(q k^T / sqrt(d))` over the last axis.
pub(crate) fn attention_probs(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (q.dim(D::Minus1)? as f64).sqrt();
    let scores = (q.matmul(&k.t()?)? * scale)?;
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

/// Replacement visual segments, `(batch, heads, visual_tokens, head_dim)`.
#[derive(Debug, Clone, Default)]
pub struct AttentionOverride {
    pub q: Option<Tensor>,
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl AttentionOverride {
    pub fn is_empty(&self) -> bool {
        self.q.is_none() && self.k.is_none() && self.v.is_none()
    }
}

pub trait AttentionController {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        inputs: &AttentionInputs<'_>,
    ) -> Result<AttentionOverride>;
}

/// Leaves every site untouched.
#[derive(Debug, Default)]
pub struct NoopController;

impl AttentionController for NoopController {
    fn on_attention(&mut self, _: &AttentionSite, _: &AttentionInputs<'_>) -> Result<AttentionOverride> {
        Ok(AttentionOverride::default())
    }
}

/// Runs several controllers at each site. Each sees the original inputs;
/// for every tensor the last controller that overrides it wins.
pub struct ControllerChain<'a>(pub Vec<&'a mut dyn AttentionController>);

impl AttentionController for ControllerChain<'_> {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        inputs: &AttentionInputs<'_>,
    ) -> Result<AttentionOverride> {
        let mut merged = AttentionOverride::default();
        for c in self.0.iter_mut() {
            let o = c.on_attention(site, inputs)?;
            merged.q = o.q.or(merged.q);
            merged.k = o.k.or(merged.k);
            merged.v = o.v.or(merged.v);
        }
        Ok(merged)
    }
}

/// Which attention site a probe should capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteSelector {
    pub phase: Phase,
    pub step_index: usize,
    pub block_kind: BlockKind,
    pub layer_index: usize,
}

impl SiteSelector {
    pub fn matches(&self, site: &AttentionSite) -> bool {
        site.phase == self.phase
            && site.step_index == self.step_index
            && site.block_kind == self.block_kind
            && site.layer_index == self.layer_index
    }
}

/// Captures the attention probabilities at one selected site.
#[derive(Debug)]
pub struct AttentionProbe {
    selector: SiteSelector,
    captured: Option<(AttentionSite, Tensor)>,
}

impl AttentionProbe {
    pub fn new(selector: SiteSelector) -> Self {
        Self {
            selector,
            captured: None,
        }
    }

    pub fn selector(&self) -> SiteSelector {
        self.selector
    }

    /// Probabilities `(batch, heads, tokens, tokens)` captured at the selected
    /// site; errors if no forward pass has reached it.
    pub fn probabilities(&self) -> Result<&Tensor> {
        self.captured
            .as_ref()
            .map(|(_, p)| p)
            .ok_or_else(|| Error::ProbabilitiesUnavailable(format!("{:?}", self.selector)))
    }

    pub fn site(&self) -> Option<&AttentionSite> {
        self.captured.as_ref().map(|(s, _)| s)
    }
}

impl AttentionController for AttentionProbe {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        inputs: &AttentionInputs<'_>,
    ) -> Result<AttentionOverride> {
        if self.selector.matches(site) {
            self.captured = Some((*site, inputs.probabilities()?));
        }
        Ok(AttentionOverride::default())
    }
}

/// Records every site it sees together with copies of its visual K/V.
#[derive(Debug, Default)]
pub struct SiteLog {
    pub sites: Vec<AttentionSite>,
}

impl AttentionController for SiteLog {
    fn on_attention(&mut self, site: &AttentionSite, inputs: &AttentionInputs<'_>) -> Result<AttentionOverride> {
        // touch the segments so recording has the same cost profile as a cache
        let _ = (inputs.visual_k()?, inputs.visual_v()?);
        self.sites.push(*site);
        Ok(AttentionOverride::default())
    }
}
