//! GPT-2 forward pass with per-head hook points.
//!
//! The residual stream is computed the conventional way: per-head context
//! vectors are concatenated and multiplied by the output projection. Per-head
//! value-output vectors and head outputs are computed on a separate path,
//! only for heads that are traced or intervened on, so the decomposition
//! `Σ_h o_h + b_O == attention block output` compares two independent routes.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{self, InterventionPlan};
use crate::kernels::{self, dot, Tensor};
use crate::safetensors::{self, SafeTensors};
use crate::trace::{HeadTrace, Trace, TraceConfig};

/// An attention head, addressed by layer and head index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<(usize, usize)> for HeadId {
    fn from((layer, head): (usize, usize)) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for (usize, usize) {
    fn from(h: HeadId) -> Self {
        (h.layer, h.head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    /// Learned absolute position table (`wpe`), as in every GPT-2 checkpoint.
    Learned,
    /// No positional embedding at all.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub ln_eps: f32,
    pub positional: Positional,
}

impl ModelConfig {
    fn gpt2(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            vocab_size: 50257,
            n_ctx: 1024,
            ln_eps: 1e-5,
            positional: Positional::Learned,
        }
    }

    pub fn gpt2_small() -> Self {
        Self::gpt2(12, 12, 768)
    }

    pub fn gpt2_medium() -> Self {
        Self::gpt2(24, 16, 1024)
    }

    pub fn gpt2_large() -> Self {
        Self::gpt2(36, 20, 1280)
    }

    pub fn gpt2_xl() -> Self {
        Self::gpt2(48, 25, 1600)
    }

    /// The 2-layer, 2-head, width-8 test configuration.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 50,
            n_ctx: 32,
            ln_eps: 1e-5,
            positional: Positional::Learned,
        }
    }

    /// GPT-2 vocabulary and context with 4 layers of width 16 and 2 heads;
    /// small enough to run random-weight demos in seconds.
    pub fn mini() -> Self {
        Self {
            n_layers: 4,
            n_heads: 2,
            d_model: 16,
            ..Self::gpt2_small()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_heads_total(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("layer, head and width counts must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_ctx == 0 {
            return Err(Error::Config("vocab_size and n_ctx must be positive".into()));
        }
        Ok(())
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.n_layers || head.head >= self.n_heads {
            return Err(Error::HeadOutOfRange {
                layer: head.layer,
                head: head.head,
            });
        }
        Ok(())
    }

    /// Infer the architecture from tensor shapes. The head count is not
    /// recoverable from shapes; it falls back to the GPT-2 family value for
    /// the detected width.
    pub fn infer(st: &SafeTensors, n_heads: Option<usize>) -> Result<Self> {
        let wte = find_name(st, "wte").ok_or_else(|| Error::MissingTensor("wte".into()))?;
        let wte = &st.info(&wte).expect("listed").shape;
        let (vocab_size, d_model) = match wte.as_slice() {
            [v, d] => (*v, *d),
            other => {
                return Err(Error::TensorShape {
                    name: "wte".into(),
                    expected: vec![0, 0],
                    got: other.to_vec(),
                })
            }
        };
        let (n_ctx, positional) = match find_name(st, "wpe") {
            Some(name) => (st.info(&name).expect("listed").shape[0], Positional::Learned),
            None => (1024, Positional::None),
        };
        let n_layers = (0..)
            .take_while(|i| find_name(st, &format!("h.{i}.ln_1.weight")).is_some())
            .count();
        let n_heads = match n_heads {
            Some(h) => h,
            None => match d_model {
                768 => 12,
                1024 => 16,
                1280 => 20,
                1600 => 25,
                8 | 16 => 2,
                other => {
                    return Err(Error::Config(format!(
                        "cannot infer the head count for width {other}; pass it explicitly"
                    )))
                }
            },
        };
        let cfg = Self {
            n_layers,
            n_heads,
            d_model,
            vocab_size,
            n_ctx,
            ln_eps: 1e-5,
            positional,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Accepts canonical names plus the `.weight` / `transformer.` spellings used
/// by exported GPT-2 checkpoints.
fn find_name(st: &SafeTensors, canonical: &str) -> Option<String> {
    let candidates = [
        canonical.to_string(),
        format!("{canonical}.weight"),
        format!("transformer.{canonical}"),
        format!("transformer.{canonical}.weight"),
    ];
    candidates.into_iter().find(|n| st.info(n).is_some())
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// Fused QKV, input-major: `d_model × 3·d_model`.
    pub qkv_weight: Tensor,
    pub qkv_bias: Vec<f32>,
    /// Output projection, input-major: `d_model × d_model`. Rows
    /// `h·d_head .. (h+1)·d_head` belong to head `h`.
    pub out_weight: Tensor,
    pub out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub fc_weight: Tensor,
    pub fc_bias: Vec<f32>,
    pub proj_weight: Tensor,
    pub proj_bias: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Weights {
    /// Token embedding `vocab × d_model`; also the (tied) unembedding.
    pub token_embedding: Tensor,
    pub position_embedding: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
}

fn layer_tensor_names(i: usize) -> [String; 12] {
    let p = format!("h.{i}.");
    [
        format!("{p}ln_1.weight"),
        format!("{p}ln_1.bias"),
        format!("{p}attn.c_attn.weight"),
        format!("{p}attn.c_attn.bias"),
        format!("{p}attn.c_proj.weight"),
        format!("{p}attn.c_proj.bias"),
        format!("{p}ln_2.weight"),
        format!("{p}ln_2.bias"),
        format!("{p}mlp.c_fc.weight"),
        format!("{p}mlp.c_fc.bias"),
        format!("{p}mlp.c_proj.weight"),
        format!("{p}mlp.c_proj.bias"),
    ]
}

impl Weights {
    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let check = |name: &str, got: &[usize], expected: &[usize]| {
            if got != expected {
                Err(Error::TensorShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    got: got.to_vec(),
                })
            } else {
                Ok(())
            }
        };
        check("wte", self.token_embedding.shape(), &[cfg.vocab_size, d])?;
        match (&self.position_embedding, cfg.positional) {
            (Some(p), Positional::Learned) => check("wpe", p.shape(), &[cfg.n_ctx, d])?,
            (None, Positional::None) => {}
            (None, Positional::Learned) => return Err(Error::MissingTensor("wpe".into())),
            (Some(_), Positional::None) => {
                return Err(Error::Config("wpe present but config has no positions".into()))
            }
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} layers in weights, {} in config",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (i, lw) in self.layers.iter().enumerate() {
            let n = layer_tensor_names(i);
            check(&n[0], &[lw.ln1_gain.len()], &[d])?;
            check(&n[1], &[lw.ln1_bias.len()], &[d])?;
            check(&n[2], lw.qkv_weight.shape(), &[d, 3 * d])?;
            check(&n[3], &[lw.qkv_bias.len()], &[3 * d])?;
            check(&n[4], lw.out_weight.shape(), &[d, d])?;
            check(&n[5], &[lw.out_bias.len()], &[d])?;
            check(&n[6], &[lw.ln2_gain.len()], &[d])?;
            check(&n[7], &[lw.ln2_bias.len()], &[d])?;
            check(&n[8], lw.fc_weight.shape(), &[d, 4 * d])?;
            check(&n[9], &[lw.fc_bias.len()], &[4 * d])?;
            check(&n[10], lw.proj_weight.shape(), &[4 * d, d])?;
            check(&n[11], &[lw.proj_bias.len()], &[d])?;
        }
        check("ln_f.weight", &[self.final_ln_gain.len()], &[d])?;
        check("ln_f.bias", &[self.final_ln_bias.len()], &[d])
    }

    /// Seeded random weights, for examples and tests that need no checkpoint.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let mut mat = |rows: usize, cols: usize, scale: f32| {
            let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(vec![rows, cols], data).expect("consistent shape")
        };
        let token_embedding = mat(cfg.vocab_size, d, 1.0);
        let position_embedding =
            (cfg.positional == Positional::Learned).then(|| mat(cfg.n_ctx, d, 0.5));
        let s = 1.0 / (d as f32).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                qkv_weight: mat(d, 3 * d, 2.0 * s),
                qkv_bias: mat(1, 3 * d, 0.1).into_data(),
                out_weight: mat(d, d, s),
                out_bias: mat(1, d, 0.1).into_data(),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                fc_weight: mat(d, 4 * d, s),
                fc_bias: vec![0.0; 4 * d],
                proj_weight: mat(4 * d, d, s / 2.0),
                proj_bias: vec![0.0; d],
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
        }
    }
}

/// An immutable, validated model.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

/// Logits and the trace of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `T × vocab` for [`Model::forward`], `1 × vocab` for [`Model::forward_last`].
    pub logits: Tensor,
    pub trace: Trace,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }
}

#[derive(Clone, Debug)]
pub struct HeadVectors {
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LogitRows {
    All,
    Last,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::random(&config, seed);
        Self::new(config, weights)
    }

    /// Load GPT-2 weights in the canonical safetensors layout. Conv1D weights
    /// are stored input-major (`in × out`) and used as stored.
    pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let st = SafeTensors::open(path)?;
        let get = |name: &str| -> Result<Tensor> {
            let found = find_name(&st, name).ok_or_else(|| Error::MissingTensor(name.into()))?;
            st.tensor(&found)
        };
        let vec = |name: &str| -> Result<Vec<f32>> {
            let t = get(name)?;
            if t.shape().len() != 1 {
                return Err(Error::TensorShape {
                    name: name.into(),
                    expected: vec![t.len()],
                    got: t.shape().to_vec(),
                });
            }
            Ok(t.into_data())
        };
        let token_embedding = get("wte")?;
        let position_embedding = match config.positional {
            Positional::Learned => Some(get("wpe")?),
            Positional::None => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let n = layer_tensor_names(i);
            layers.push(LayerWeights {
                ln1_gain: vec(&n[0])?,
                ln1_bias: vec(&n[1])?,
                qkv_weight: get(&n[2])?,
                qkv_bias: vec(&n[3])?,
                out_weight: get(&n[4])?,
                out_bias: vec(&n[5])?,
                ln2_gain: vec(&n[6])?,
                ln2_bias: vec(&n[7])?,
                fc_weight: get(&n[8])?,
                fc_bias: vec(&n[9])?,
                proj_weight: get(&n[10])?,
                proj_bias: vec(&n[11])?,
            });
        }
        let weights = Weights {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: vec("ln_f.weight")?,
            final_ln_bias: vec("ln_f.bias")?,
        };
        Self::new(config, weights)
    }

    /// Load with the configuration inferred from the file.
    pub fn load_inferred(path: impl AsRef<Path>, n_heads: Option<usize>) -> Result<Self> {
        let config = ModelConfig::infer(&SafeTensors::open(path.as_ref())?, n_heads)?;
        Self::load(path, config)
    }

    /// Write the weights under canonical tensor names.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = &self.weights;
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        let v = |x: &Vec<f32>| Tensor::vector(x.clone());
        owned.push(("wte".into(), w.token_embedding.clone()));
        if let Some(p) = &w.position_embedding {
            owned.push(("wpe".into(), p.clone()));
        }
        for (i, lw) in w.layers.iter().enumerate() {
            let n = layer_tensor_names(i);
            let ts = [
                v(&lw.ln1_gain),
                v(&lw.ln1_bias),
                lw.qkv_weight.clone(),
                v(&lw.qkv_bias),
                lw.out_weight.clone(),
                v(&lw.out_bias),
                v(&lw.ln2_gain),
                v(&lw.ln2_bias),
                lw.fc_weight.clone(),
                v(&lw.fc_bias),
                lw.proj_weight.clone(),
                v(&lw.proj_bias),
            ];
            owned.extend(n.into_iter().zip(ts));
        }
        owned.push(("ln_f.weight".into(), v(&w.final_ln_gain)));
        owned.push(("ln_f.bias".into(), v(&w.final_ln_bias)));
        safetensors::write(path, owned.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Copy with the positional table zeroed.
    pub fn with_zero_positions(&self) -> Self {
        let mut m = self.clone();
        if let Some(p) = m.weights.position_embedding.as_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    /// Tied unembedding: `E_u · v` over the whole vocabulary.
    pub fn unembed(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "unembed",
                expected: vec![self.config.d_model],
                got: vec![v.len()],
            });
        }
        let a = Tensor::new(vec![1, v.len()], v.to_vec())?;
        Ok(kernels::matmul_transposed(&a, &self.weights.token_embedding)?.into_data())
    }

    pub fn final_layer_norm(&self, v: &[f32]) -> Result<Vec<f32>> {
        kernels::layer_norm(
            v,
            &self.weights.final_ln_gain,
            &self.weights.final_ln_bias,
            self.config.ln_eps,
        )
    }

    /// Logits for every position, no tracing, no interventions.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        Ok(self
            .forward(ids, &TraceConfig::disabled(), &InterventionPlan::default())?
            .logits)
    }

    pub fn forward(
        &self,
        ids: &[u32],
        trace: &TraceConfig,
        plan: &InterventionPlan,
    ) -> Result<ForwardOutput> {
        let x = self.embed(ids)?;
        self.run(ids, 0, x, trace, plan, LogitRows::All)
    }

    /// Like [`forward`](Self::forward) but only projects the last position.
    pub fn forward_last(
        &self,
        ids: &[u32],
        trace: &TraceConfig,
        plan: &InterventionPlan,
    ) -> Result<ForwardOutput> {
        let x = self.embed(ids)?;
        self.run(ids, 0, x, trace, plan, LogitRows::Last)
    }

    /// Residual stream entering every layer (`T × d_model` each), from an
    /// unmodified forward pass.
    pub fn residual_stream(&self, ids: &[u32]) -> Result<Vec<Vec<f32>>> {
        let mut x = self.embed(ids)?;
        let plan = InterventionPlan::default();
        let cfg = TraceConfig::disabled();
        let mut trace = Trace::new(ids.to_vec());
        let mut adjust = vec![0.0; self.config.d_model];
        let mut out = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            out.push(x.clone());
            x = self.block(l, ids.len(), x, &cfg, &plan, &mut trace, &mut adjust)?;
        }
        Ok(out)
    }

    /// Query, key and value vectors (`T × d_head` each) of one head.
    pub fn head_qkv(&self, ids: &[u32], layer: usize, head: usize) -> Result<HeadVectors> {
        self.config.check_head(HeadId::new(layer, head))?;
        let t = ids.len();
        let mut x = self.embed(ids)?;
        let (plan, cfg) = (InterventionPlan::default(), TraceConfig::disabled());
        let mut trace = Trace::new(ids.to_vec());
        let mut adjust = vec![0.0; self.config.d_model];
        for l in 0..layer {
            x = self.block(l, t, x, &cfg, &plan, &mut trace, &mut adjust)?;
        }
        let qkv = self.qkv(&self.weights.layers[layer], &x, t)?;
        let (d, dh) = (self.config.d_model, self.config.d_head());
        let slice = |off: usize| -> Result<Tensor> {
            let data = (0..t)
                .flat_map(|p| qkv[p * 3 * d + off..p * 3 * d + off + dh].iter().copied())
                .collect();
            Tensor::new(vec![t, dh], data)
        };
        Ok(HeadVectors {
            queries: slice(head * dh)?,
            keys: slice(d + head * dh)?,
            values: slice(2 * d + head * dh)?,
        })
    }

    /// Map a head-space query (`part = 0`) or key (`part = 1`) vector back to
    /// model width through the transpose of that head's projection slice.
    fn lift(&self, layer: usize, head: usize, part: usize, v: &[f32]) -> Result<Vec<f32>> {
        self.config.check_head(HeadId::new(layer, head))?;
        let (d, dh) = (self.config.d_model, self.config.d_head());
        if v.len() != dh {
            return Err(Error::ShapeMismatch {
                op: "lift",
                expected: vec![dh],
                got: vec![v.len()],
            });
        }
        let w = self.weights.layers[layer].qkv_weight.data();
        let col = part * d + head * dh;
        Ok((0..d).map(|i| dot(&w[i * 3 * d + col..i * 3 * d + col + dh], v)).collect())
    }

    pub fn lift_query(&self, layer: usize, head: usize, q: &[f32]) -> Result<Vec<f32>> {
        self.lift(layer, head, 0, q)
    }

    pub fn lift_key(&self, layer: usize, head: usize, k: &[f32]) -> Result<Vec<f32>> {
        self.lift(layer, head, 1, k)
    }

    /// Resume a forward pass at `layer` from a residual captured by
    /// [`residual_stream`](Self::residual_stream). Returns last-position logits.
    pub fn forward_last_from(
        &self,
        ids: &[u32],
        layer: usize,
        residual: Vec<f32>,
        trace: &TraceConfig,
        plan: &InterventionPlan,
    ) -> Result<ForwardOutput> {
        if layer > self.config.n_layers {
            return Err(Error::LayerOutOfRange(layer));
        }
        if residual.len() != ids.len() * self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "forward_last_from",
                expected: vec![ids.len(), self.config.d_model],
                got: vec![residual.len()],
            });
        }
        self.check_ids(ids)?;
        self.run(ids, layer, residual, trace, plan, LogitRows::Last)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.n_ctx {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                n_ctx: self.config.n_ctx,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Result<Vec<f32>> {
        self.check_ids(ids)?;
        let d = self.config.d_model;
        let mut x = vec![0.0f32; ids.len() * d];
        for (p, &id) in ids.iter().enumerate() {
            let row = &mut x[p * d..(p + 1) * d];
            row.copy_from_slice(self.weights.token_embedding.row(id as usize));
            if let Some(pe) = &self.weights.position_embedding {
                for (r, v) in row.iter_mut().zip(pe.row(p)) {
                    *r += v;
                }
            }
        }
        Ok(x)
    }

    fn run(
        &self,
        ids: &[u32],
        start_layer: usize,
        mut x: Vec<f32>,
        cfg: &TraceConfig,
        plan: &InterventionPlan,
        rows: LogitRows,
    ) -> Result<ForwardOutput> {
        let t = ids.len();
        let d = self.config.d_model;
        plan.validate(&self.config, t)?;
        cfg.validate(&self.config)?;
        if plan.has_strip() && self.weights.position_embedding.is_none() {
            return Err(Error::NoAbsolutePositions);
        }

        let mut trace = Trace::new(ids.to_vec());
        let mut adjust = vec![0.0f32; d];
        for l in start_layer..self.config.n_layers {
            x = self.block(l, t, x, cfg, plan, &mut trace, &mut adjust)?;
        }
        if plan.adjusts_readout() {
            for (v, a) in x[(t - 1) * d..].iter_mut().zip(&adjust) {
                *v += a;
            }
        }
        if cfg.final_hidden {
            trace.final_hidden = Some(x[(t - 1) * d..].to_vec());
        }

        let first = match rows {
            LogitRows::All => 0,
            LogitRows::Last => t - 1,
        };
        let mut normed = Vec::with_capacity((t - first) * d);
        for p in first..t {
            normed.extend(self.final_layer_norm(&x[p * d..(p + 1) * d])?);
        }
        let normed = Tensor::new(vec![t - first, d], normed)?;
        let logits = kernels::matmul_transposed(&normed, &self.weights.token_embedding)?;
        Ok(ForwardOutput { logits, trace })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        l: usize,
        t: usize,
        mut x: Vec<f32>,
        cfg: &TraceConfig,
        plan: &InterventionPlan,
        trace: &mut Trace,
        adjust: &mut [f32],
    ) -> Result<Vec<f32>> {
        let c = &self.config;
        let (d, dh, nh) = (c.d_model, c.d_head(), c.n_heads);
        let lw = &self.weights.layers[l];
        let last = t - 1;

        if cfg.layer_inputs {
            trace
                .layer_inputs
                .insert(l, x[last * d..(last + 1) * d].to_vec());
        }

        let qkv = self.qkv(lw, &x, t)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let alphas: Vec<Vec<f32>> = (0..nh)
            .into_par_iter()
            .map(|h| attention_pattern(&qkv, t, d, h * dh, d + h * dh, dh, scale))
            .collect::<Result<_>>()?;

        // concatenated per-head contexts, ablated heads left at zero
        let mut ctx = vec![0.0f32; t * d];
        for (h, alpha) in alphas.iter().enumerate() {
            if plan.is_ablated(HeadId::new(l, h)) {
                continue;
            }
            let v_off = 2 * d + h * dh;
            for i in 0..t {
                let out = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..=i {
                    let a = alpha[i * t + j];
                    let v = &qkv[j * 3 * d + v_off..j * 3 * d + v_off + dh];
                    kernels::axpy(out, a, v);
                }
            }
        }
        let mut attn_out = kernels::matmul_slices(&ctx, t, d, lw.out_weight.data(), d);
        for row in attn_out.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(&lw.out_bias) {
                *v += b;
            }
        }
        if cfg.block_outputs {
            trace
                .block_outputs
                .insert(l, attn_out[last * d..(last + 1) * d].to_vec());
        }

        self.head_internals(l, t, &x, &qkv, &alphas, cfg, plan, trace, adjust)?;

        for (v, a) in x.iter_mut().zip(&attn_out) {
            *v += a;
        }
        self.mlp(lw, &mut x, t)?;
        Ok(x)
    }

    fn qkv(&self, lw: &LayerWeights, x: &[f32], t: usize) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let mut h = vec![0.0f32; t * d];
        for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
            kernels::layer_norm_into(xr, &lw.ln1_gain, &lw.ln1_bias, self.config.ln_eps, hr)?;
        }
        let mut qkv = kernels::matmul_slices(&h, t, d, lw.qkv_weight.data(), 3 * d);
        for row in qkv.chunks_mut(3 * d) {
            for (v, b) in row.iter_mut().zip(&lw.qkv_bias) {
                *v += b;
            }
        }
        Ok(qkv)
    }

    fn mlp(&self, lw: &LayerWeights, x: &mut [f32], t: usize) -> Result<()> {
        let d = self.config.d_model;
        let mut h = vec![0.0f32; t * d];
        for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
            kernels::layer_norm_into(xr, &lw.ln2_gain, &lw.ln2_bias, self.config.ln_eps, hr)?;
        }
        let mut f = kernels::matmul_slices(&h, t, d, lw.fc_weight.data(), 4 * d);
        for row in f.chunks_mut(4 * d) {
            for (v, b) in row.iter_mut().zip(&lw.fc_bias) {
                *v += b;
            }
        }
        kernels::gelu_in_place(&mut f);
        let m = kernels::matmul_slices(&f, t, 4 * d, lw.proj_weight.data(), d);
        for (row, xr) in m.chunks(d).zip(x.chunks_mut(d)) {
            for ((xv, mv), b) in xr.iter_mut().zip(row).zip(&lw.proj_bias) {
                *xv += mv + b;
            }
        }
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "forward" })
        }
    }

    /// Value-output vectors, head outputs, tracing, strip and amplification
    /// for the heads that need them.
    #[allow(clippy::too_many_arguments)]
    fn head_internals(
        &self,
        l: usize,
        t: usize,
        x: &[f32],
        qkv: &[f32],
        alphas: &[Vec<f32>],
        cfg: &TraceConfig,
        plan: &InterventionPlan,
        trace: &mut Trace,
        adjust: &mut [f32],
    ) -> Result<()> {
        let c = &self.config;
        let (d, dh) = (c.d_model, c.d_head());
        let lw = &self.weights.layers[l];
        let last = t - 1;

        let needed: Vec<usize> = (0..c.n_heads)
            .filter(|&h| {
                let id = HeadId::new(l, h);
                cfg.wants_head(id) || plan.is_stripped(id) || plan.amplifies(id)
            })
            .collect();
        if needed.is_empty() {
            return Ok(());
        }

        // stripped Q/K come from ln1(x − P); computed once per layer
        let stripped_qkv = if needed.iter().any(|&h| plan.is_stripped(HeadId::new(l, h))) {
            let pe = self
                .weights
                .position_embedding
                .as_ref()
                .ok_or(Error::NoAbsolutePositions)?;
            let mut xs = x.to_vec();
            for (p, row) in xs.chunks_mut(d).enumerate() {
                for (v, e) in row.iter_mut().zip(pe.row(p)) {
                    *v -= e;
                }
            }
            Some(self.qkv(lw, &xs, t)?)
        } else {
            None
        };

        for h in needed {
            let id = HeadId::new(l, h);
            let alpha = &alphas[h];
            let alpha_last = &alpha[last * t..(last + 1) * t];
            let ablated = plan.is_ablated(id);

            // vo^p = v_h^p · W_O[h rows]; zero when the head's value path is ablated
            let mut vo = vec![0.0f32; t * d];
            if !ablated {
                let w_rows = &lw.out_weight.data()[h * dh * d..(h + 1) * dh * d];
                let v_off = 2 * d + h * dh;
                let mut v = Vec::with_capacity(t * dh);
                for p in 0..t {
                    v.extend_from_slice(&qkv[p * 3 * d + v_off..p * 3 * d + v_off + dh]);
                }
                vo = kernels::matmul_slices(&v, t, dh, w_rows, d);
            }
            let output = interventions::weighted_sum(alpha_last, &vo, d);

            let mut stripped = None;
            if let (true, Some(sq)) = (plan.is_stripped(id), stripped_qkv.as_ref()) {
                let row = interventions::stripped_attention_row(
                    sq,
                    t,
                    d,
                    h * dh,
                    d + h * dh,
                    dh,
                )?;
                let shifted = interventions::weighted_sum(&row, &vo, d);
                for ((a, s), o) in adjust.iter_mut().zip(&shifted).zip(&output) {
                    *a += s - o;
                }
                stripped = Some(row);
            }

            // amplification sees the stripped pattern when both apply
            if let Some(amp) = plan.amplification() {
                if amp.heads.contains(&id) && !ablated {
                    let a = amp.amplitude();
                    let weights = stripped.as_deref().unwrap_or(alpha_last);
                    for &p in &amp.positions {
                        kernels::axpy(adjust, a * weights[p], &vo[p * d..(p + 1) * d]);
                    }
                }
            }

            if cfg.wants_head(id) {
                let values = (0..t)
                    .filter(|&p| cfg.values.contains(id) && cfg.positions.contains(p))
                    .map(|p| (p, vo[p * d..(p + 1) * d].to_vec()))
                    .collect();
                let full_attention = if cfg.full_attention {
                    Some(Tensor::new(vec![t, t], alpha.clone())?)
                } else {
                    None
                };
                trace.heads.insert(
                    id,
                    HeadTrace {
                        attention: alpha_last.to_vec(),
                        full_attention,
                        values,
                        output,
                        stripped_attention: stripped,
                    },
                );
            }
        }
        Ok(())
    }
}

/// Causal attention pattern of one head: row `i` is
/// `softmax(q_i · k_j / sqrt(d_head))` over `j ≤ i`, zero for `j > i`.
fn attention_pattern(
    qkv: &[f32],
    t: usize,
    d: usize,
    q_off: usize,
    k_off: usize,
    dh: usize,
    scale: f32,
) -> Result<Vec<f32>> {
    let stride = 3 * d;
    let mut alpha = vec![0.0f32; t * t];
    let mut scores = vec![0.0f32; t];
    for i in 0..t {
        let q = &qkv[i * stride + q_off..i * stride + q_off + dh];
        for j in 0..=i {
            scores[j] = dot(q, &qkv[j * stride + k_off..j * stride + k_off + dh]) * scale;
        }
        let row = kernels::softmax_row(&scores[..=i], None)?;
        alpha[i * t..i * t + i + 1].copy_from_slice(&row);
    }
    Ok(alpha)
}

pub(crate) fn attention_scores_last(
    qkv: &[f32],
    t: usize,
    d: usize,
    q_off: usize,
    k_off: usize,
    dh: usize,
) -> Vec<f32> {
    let stride = 3 * d;
    let scale = 1.0 / (dh as f32).sqrt();
    let last = t - 1;
    let q = &qkv[last * stride + q_off..last * stride + q_off + dh];
    (0..t)
        .map(|j| dot(q, &qkv[j * stride + k_off..j * stride + k_off + dh]) * scale)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::random(ModelConfig::tiny(), 7).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!(ModelConfig::gpt2_large().d_head(), 64);
        assert_eq!(ModelConfig::tiny().heads().count(), 4);
    }

    #[test]
    fn rejects_bad_sequences() {
        let m = tiny();
        assert!(matches!(m.logits(&[]), Err(Error::EmptySequence)));
        assert!(matches!(m.logits(&[50]), Err(Error::UnknownToken(50))));
        let long = vec![1u32; 33];
        assert!(matches!(
            m.logits(&long),
            Err(Error::ContextOverflow { len: 33, n_ctx: 32 })
        ));
    }

    #[test]
    fn last_row_matches_full_forward() {
        let m = tiny();
        let ids = [3, 9, 4, 1, 22];
        let full = m.logits(&ids).unwrap();
        let last = m
            .forward_last(&ids, &TraceConfig::disabled(), &InterventionPlan::default())
            .unwrap();
        assert_eq!(last.logits.row(0), full.row(4));
    }

    #[test]
    fn resume_from_residual_matches() {
        let m = tiny();
        let ids = [3, 9, 4, 1, 22, 8];
        let res = m.residual_stream(&ids).unwrap();
        let plan = InterventionPlan::default();
        let cfg = TraceConfig::disabled();
        let direct = m.forward_last(&ids, &cfg, &plan).unwrap();
        let resumed = m.forward_last_from(&ids, 1, res[1].clone(), &cfg, &plan).unwrap();
        assert_eq!(direct.logits, resumed.logits);
    }

    #[test]
    fn save_and_reload() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        m.save(&path).unwrap();
        let back = Model::load_inferred(&path, None).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.logits(&[1, 2, 3]).unwrap(), m.logits(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn head_id_serializes_as_pair() {
        let h = HeadId::new(22, 0);
        assert_eq!(serde_json::to_string(&h).unwrap(), "[22,0]");
        let back: HeadId = serde_json::from_str("[3,1]").unwrap();
        assert_eq!(back, HeadId::new(3, 1));
    }
}
