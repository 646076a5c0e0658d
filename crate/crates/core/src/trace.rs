//! Per-head internals captured during a forward pass.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::{HeadId, ModelConfig};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Which heads a capture applies to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    #[default]
    None,
    All,
    /// Every head in layers `start..end`.
    Layers { start: usize, end: usize },
    Heads(BTreeSet<HeadId>),
}

impl HeadSelection {
    pub fn contains(&self, id: HeadId) -> bool {
        match self {
            HeadSelection::None => false,
            HeadSelection::All => true,
            HeadSelection::Layers { start, end } => (*start..*end).contains(&id.layer),
            HeadSelection::Heads(set) => set.contains(&id),
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        match self {
            HeadSelection::Layers { start, end } if *start > *end || *end > cfg.n_layers => {
                Err(Error::LayerOutOfRange(*end))
            }
            HeadSelection::Heads(set) => set.iter().try_for_each(|&h| cfg.check_head(h)),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSelection {
    #[default]
    All,
    Positions(BTreeSet<usize>),
}

impl PositionSelection {
    pub fn contains(&self, p: usize) -> bool {
        match self {
            PositionSelection::All => true,
            PositionSelection::Positions(set) => set.contains(&p),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Heads whose last-row attention and output are captured.
    pub attention: HeadSelection,
    /// Heads whose value-output vectors are captured (at `positions`).
    pub values: HeadSelection,
    pub positions: PositionSelection,
    /// Store the full `T × T` pattern instead of just the last row.
    pub full_attention: bool,
    /// Residual stream entering each layer, last position.
    pub layer_inputs: bool,
    /// Attention block output (including `b_O`) of each layer, last position.
    pub block_outputs: bool,
    /// Hidden state at the last position just before the final layer norm.
    pub final_hidden: bool,
}

impl TraceConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    /// Everything, every head, every position.
    pub fn all() -> Self {
        Self {
            attention: HeadSelection::All,
            values: HeadSelection::All,
            positions: PositionSelection::All,
            full_attention: true,
            layer_inputs: true,
            block_outputs: true,
            final_hidden: true,
        }
    }

    /// The memory-bounded default: last-row attention and outputs for all
    /// heads, value-output vectors only for heads in `deep` and only at the
    /// given label positions plus the last position.
    pub fn for_prompt(
        deep: std::ops::Range<usize>,
        label_positions: impl IntoIterator<Item = usize>,
        seq_len: usize,
    ) -> Self {
        let mut positions: BTreeSet<usize> = label_positions.into_iter().collect();
        if seq_len > 0 {
            positions.insert(seq_len - 1);
        }
        Self {
            attention: HeadSelection::All,
            values: HeadSelection::Layers {
                start: deep.start,
                end: deep.end,
            },
            positions: PositionSelection::Positions(positions),
            full_attention: false,
            layer_inputs: true,
            block_outputs: false,
            final_hidden: false,
        }
    }

    /// Upper bound on the captured floats, in bytes, for a sequence of
    /// `seq_len` tokens.
    pub fn estimated_bytes(&self, cfg: &ModelConfig, seq_len: usize) -> usize {
        let (t, d) = (seq_len, cfg.d_model);
        let positions = match &self.positions {
            PositionSelection::All => t,
            PositionSelection::Positions(p) => p.iter().filter(|&&p| p < t).count(),
        };
        let mut floats = 0;
        for id in cfg.heads() {
            if self.wants_head(id) {
                floats += t + d;
                if self.full_attention {
                    floats += t * t;
                }
            }
            if self.values.contains(id) {
                floats += positions * d;
            }
        }
        let per_layer = usize::from(self.layer_inputs) + usize::from(self.block_outputs);
        floats += cfg.n_layers * per_layer * d + usize::from(self.final_hidden) * d;
        floats * std::mem::size_of::<f32>()
    }

    pub(crate) fn wants_head(&self, id: HeadId) -> bool {
        self.attention.contains(id) || self.values.contains(id)
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.attention.validate(cfg)?;
        self.values.validate(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    /// Attention of the last query position over all keys.
    pub attention: Vec<f32>,
    pub full_attention: Option<Tensor>,
    /// Value-output vectors keyed by position.
    pub values: BTreeMap<usize, Vec<f32>>,
    /// Head output at the last position, without `b_O`.
    pub output: Vec<f32>,
    /// Last-row attention after position stripping, when stripped.
    pub stripped_attention: Option<Vec<f32>>,
}

/// Immutable snapshot of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub tokens: Vec<u32>,
    pub(crate) heads: BTreeMap<HeadId, HeadTrace>,
    pub(crate) layer_inputs: BTreeMap<usize, Vec<f32>>,
    pub(crate) block_outputs: BTreeMap<usize, Vec<f32>>,
    pub(crate) final_hidden: Option<Vec<f32>>,
}

fn missing(what: impl Into<String>) -> Error {
    Error::NotCaptured(what.into())
}

impl Trace {
    pub(crate) fn new(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            ..Self::default()
        }
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn heads(&self) -> impl Iterator<Item = (HeadId, &HeadTrace)> {
        self.heads.iter().map(|(k, v)| (*k, v))
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<&HeadTrace> {
        self.heads
            .get(&HeadId::new(layer, head))
            .ok_or_else(|| missing(format!("head {layer}.{head}")))
    }

    /// Last-row attention `α` of a head.
    pub fn attention(&self, layer: usize, head: usize) -> Result<&[f32]> {
        Ok(&self.head(layer, head)?.attention)
    }

    pub fn full_attention(&self, layer: usize, head: usize) -> Result<&Tensor> {
        self.head(layer, head)?
            .full_attention
            .as_ref()
            .ok_or_else(|| missing(format!("full attention of head {layer}.{head}")))
    }

    pub fn stripped_attention(&self, layer: usize, head: usize) -> Result<&[f32]> {
        self.head(layer, head)?
            .stripped_attention
            .as_deref()
            .ok_or_else(|| missing(format!("stripped attention of head {layer}.{head}")))
    }

    /// Value-output vector `vo^p`.
    pub fn value_output(&self, layer: usize, head: usize, position: usize) -> Result<&[f32]> {
        self.head(layer, head)?
            .values
            .get(&position)
            .map(Vec::as_slice)
            .ok_or_else(|| missing(format!("value-output of head {layer}.{head} at position {position}")))
    }

    /// `α^p · vo^p`.
    pub fn weighted_value_output(
        &self,
        layer: usize,
        head: usize,
        position: usize,
    ) -> Result<Vec<f32>> {
        let a = *self
            .attention(layer, head)?
            .get(position)
            .ok_or(Error::PositionOutOfRange {
                position,
                len: self.seq_len(),
            })?;
        Ok(self
            .value_output(layer, head, position)?
            .iter()
            .map(|v| a * v)
            .collect())
    }

    /// Head output `o` at the last position.
    pub fn head_output(&self, layer: usize, head: usize) -> Result<&[f32]> {
        Ok(&self.head(layer, head)?.output)
    }

    /// Residual stream entering `layer`, last position.
    pub fn layer_input(&self, layer: usize) -> Result<&[f32]> {
        self.layer_inputs
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| missing(format!("input of layer {layer}")))
    }

    /// Attention block output including `b_O`, last position.
    pub fn block_output(&self, layer: usize) -> Result<&[f32]> {
        self.block_outputs
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| missing(format!("attention output of layer {layer}")))
    }

    /// Last-position hidden state before the final layer norm.
    pub fn final_hidden(&self) -> Result<&[f32]> {
        self.final_hidden
            .as_deref()
            .ok_or_else(|| missing("final hidden state"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TraceDump::from(self))?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize)]
struct TraceDump<'a> {
    schema_version: u32,
    tokens: &'a [u32],
    seq_len: usize,
    heads: Vec<HeadDump<'a>>,
    layer_inputs: Vec<LayerDump<'a>>,
    block_outputs: Vec<LayerDump<'a>>,
    final_hidden: Option<&'a [f32]>,
}

#[derive(Serialize)]
struct HeadDump<'a> {
    layer: usize,
    head: usize,
    attention: &'a [f32],
    #[serde(skip_serializing_if = "Option::is_none")]
    full_attention: Option<&'a Tensor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stripped_attention: Option<&'a [f32]>,
    output: &'a [f32],
    values: Vec<PositionDump<'a>>,
}

#[derive(Serialize)]
struct PositionDump<'a> {
    position: usize,
    vector: &'a [f32],
}

#[derive(Serialize)]
struct LayerDump<'a> {
    layer: usize,
    vector: &'a [f32],
}

impl<'a> From<&'a Trace> for TraceDump<'a> {
    fn from(t: &'a Trace) -> Self {
        let layers = |m: &'a BTreeMap<usize, Vec<f32>>| {
            m.iter()
                .map(|(&layer, v)| LayerDump { layer, vector: v })
                .collect()
        };
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            tokens: &t.tokens,
            seq_len: t.seq_len(),
            heads: t
                .heads
                .iter()
                .map(|(id, h)| HeadDump {
                    layer: id.layer,
                    head: id.head,
                    attention: &h.attention,
                    full_attention: h.full_attention.as_ref(),
                    stripped_attention: h.stripped_attention.as_deref(),
                    output: &h.output,
                    values: h
                        .values
                        .iter()
                        .map(|(&position, v)| PositionDump { position, vector: v })
                        .collect(),
                })
                .collect(),
            layer_inputs: layers(&t.layer_inputs),
            block_outputs: layers(&t.block_outputs),
            final_hidden: t.final_hidden.as_deref(),
        }
    }
}
