//! Head ablation, minority-label amplification and positional-term removal.
//!
//! All three act inside one forward pass. Ablation zeroes a head's
//! contribution to the residual stream. Strip and amplification do not
//! re-run any layer: each produces a vector that is added to the last
//! position's hidden state right before the final layer norm.
//!
//! Order of effects: ablation, then strip, then amplification. An ablated
//! head contributes nothing to either later step.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::InContextHeads;
use crate::error::{Error, Result};
use crate::icl::{Label, PromptInstance};
use crate::kernels;
use crate::model::{self, HeadId, ModelConfig};

pub const DEFAULT_GAIN: f32 = 0.03;

/// Boost of the minority label's weighted value-output vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Amplification {
    /// Constant gain `a_c`.
    pub a_c: f32,
    /// Demonstration-count ratio `a_v` (larger / smaller), at least 1.
    pub a_v: f32,
    pub heads: BTreeSet<HeadId>,
    pub minority: Label,
    /// Token positions of the minority label in the prompt.
    pub positions: Vec<usize>,
}

impl Amplification {
    /// The applied scale `a = a_c · a_v`.
    pub fn amplitude(&self) -> f32 {
        self.a_c * self.a_v
    }
}

/// Declarative description of what to change in a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionPlan {
    ablate: BTreeSet<HeadId>,
    strip: BTreeSet<HeadId>,
    amplify: Option<Amplification>,
}

/// Build a validated plan.
pub fn build_plan(
    ablate: impl IntoIterator<Item = HeadId>,
    amplify: Option<Amplification>,
    strip: impl IntoIterator<Item = HeadId>,
) -> Result<InterventionPlan> {
    let ablate: BTreeSet<HeadId> = ablate.into_iter().collect();
    let strip: BTreeSet<HeadId> = strip.into_iter().collect();
    if let Some(h) = ablate.intersection(&strip).next() {
        return Err(Error::Conflict {
            layer: h.layer,
            head: h.head,
        });
    }
    if let Some(a) = &amplify {
        if !(a.a_c >= 0.0 && a.a_c.is_finite()) {
            return Err(Error::Intervention(format!("gain a_c = {} must be ≥ 0", a.a_c)));
        }
        if !(a.a_v >= 1.0 && a.a_v.is_finite()) {
            return Err(Error::Intervention(format!("ratio a_v = {} must be ≥ 1", a.a_v)));
        }
        if a.positions.is_empty() {
            return Err(Error::Intervention("amplification needs at least one position".into()));
        }
    }
    Ok(InterventionPlan {
        ablate,
        strip,
        amplify,
    })
}

impl InterventionPlan {
    pub fn ablating(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self {
            ablate: heads.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ablate.is_empty() && self.strip.is_empty() && self.amplify.is_none()
    }

    pub fn ablated(&self) -> &BTreeSet<HeadId> {
        &self.ablate
    }

    pub fn stripped(&self) -> &BTreeSet<HeadId> {
        &self.strip
    }

    pub fn amplification(&self) -> Option<&Amplification> {
        self.amplify.as_ref()
    }

    pub fn is_ablated(&self, id: HeadId) -> bool {
        self.ablate.contains(&id)
    }

    pub fn is_stripped(&self, id: HeadId) -> bool {
        self.strip.contains(&id)
    }

    pub(crate) fn amplifies(&self, id: HeadId) -> bool {
        self.amplify.as_ref().is_some_and(|a| a.heads.contains(&id))
    }

    pub(crate) fn has_strip(&self) -> bool {
        !self.strip.is_empty()
    }

    pub(crate) fn adjusts_readout(&self) -> bool {
        self.has_strip() || self.amplify.is_some()
    }

    /// Copy with one more head ablated.
    pub fn with_ablated(&self, id: HeadId) -> Result<Self> {
        let mut ablate = self.ablate.clone();
        ablate.insert(id);
        build_plan(ablate, self.amplify.clone(), self.strip.iter().copied())
    }

    /// Check indices against a model and a sequence length.
    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        let amp_heads = self.amplify.iter().flat_map(|a| a.heads.iter());
        for &h in self.ablate.iter().chain(&self.strip).chain(amp_heads) {
            cfg.check_head(h)?;
        }
        if let Some(a) = &self.amplify {
            if let Some(&p) = a.positions.iter().find(|&&p| p >= seq_len) {
                return Err(Error::PositionOutOfRange {
                    position: p,
                    len: seq_len,
                });
            }
        }
        Ok(())
    }
}

/// `Σ_p w^p · vo^p` over rows of a `T × d` matrix, in position order.
pub(crate) fn weighted_sum(weights: &[f32], vo: &[f32], d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; d];
    for (p, &w) in weights.iter().enumerate() {
        kernels::axpy(&mut out, w, &vo[p * d..(p + 1) * d]);
    }
    out
}

/// Last-row attention recomputed from Q/K of the position-stripped stream.
pub(crate) fn stripped_attention_row(
    qkv: &[f32],
    t: usize,
    d: usize,
    q_off: usize,
    k_off: usize,
    dh: usize,
) -> Result<Vec<f32>> {
    let scores = model::attention_scores_last(qkv, t, d, q_off, k_off, dh);
    kernels::softmax_row(&scores, None)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplifySpec {
    #[serde(default = "default_gain")]
    pub a_c: f32,
    /// Label to boost; defaults to whichever label has fewer demonstrations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minority: Option<Label>,
    /// Also amplify balanced prompts (with `a_v = 1`).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub balanced: bool,
}

fn default_gain() -> f32 {
    DEFAULT_GAIN
}

/// Serializable plan, resolved against a concrete prompt before use.
///
/// `{"ablate":[[l,h],...],"amplify":{"a_c":0.03,"minority":"foo"},"strip":[[l,h],...]}`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    #[serde(default)]
    pub ablate: Vec<HeadId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplify: Option<AmplifySpec>,
    #[serde(default)]
    pub strip: Vec<HeadId>,
}

impl PlanSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Concrete plan for one prompt. Amplification targets every in-context
    /// head and is skipped for balanced prompts unless `balanced` is set, and
    /// whenever the minority label has no positions in the prompt.
    pub fn resolve(&self, prompt: &PromptInstance, heads: &InContextHeads) -> Result<InterventionPlan> {
        let amplify = match &self.amplify {
            Some(spec) => amplification_for(prompt, heads, spec)?,
            None => None,
        };
        build_plan(self.ablate.iter().copied(), amplify, self.strip.iter().copied())
    }
}

fn amplification_for(
    prompt: &PromptInstance,
    heads: &InContextHeads,
    spec: &AmplifySpec,
) -> Result<Option<Amplification>> {
    let n_foo = prompt.foo_positions.len();
    let n_bar = prompt.bar_positions.len();
    let minority = spec.minority.unwrap_or(if n_foo <= n_bar { Label::Foo } else { Label::Bar });
    let (small, large) = (n_foo.min(n_bar), n_foo.max(n_bar));
    if small == 0 || (small == large && !spec.balanced) {
        return Ok(None);
    }
    let positions = prompt.label_positions(minority).to_vec();
    if positions.is_empty() {
        return Ok(None);
    }
    Ok(Some(Amplification {
        a_c: spec.a_c,
        a_v: large as f32 / small as f32,
        heads: heads.all(),
        minority,
        positions,
    }))
}
