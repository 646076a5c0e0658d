//! Vocabulary-space readout of hidden vectors: `D_v = softmax(E_u · v)`.
//!
//! By default vectors are projected as-is. [`Lens::with_final_ln`] applies
//! the model's final layer norm first.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{self, dot};
use crate::model::Model;
use crate::tokenizer::Tokenizer;
use crate::trace::Trace;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VocabEntry {
    pub id: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub prob: f32,
}

/// Top-k of a vocabulary distribution, most probable first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VocabProjection {
    pub entries: Vec<VocabEntry>,
    pub applied_final_ln: bool,
}

impl VocabProjection {
    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// Attach token strings.
    pub fn label(mut self, tok: &Tokenizer) -> Self {
        for e in &mut self.entries {
            e.token = Some(tok.token_text(e.id));
        }
        self
    }

    /// Token strings with surrounding whitespace removed.
    pub fn trimmed_tokens(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter_map(|e| e.token.as_deref().map(|t| t.trim().to_string()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Lens<'m> {
    model: &'m Model,
    final_ln: bool,
}

impl<'m> Lens<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            final_ln: false,
        }
    }

    pub fn with_final_ln(self, final_ln: bool) -> Self {
        Self { final_ln, ..self }
    }

    pub fn applies_final_ln(&self) -> bool {
        self.final_ln
    }

    fn prepare(&self, v: &[f32]) -> Result<Vec<f32>> {
        let d = self.model.config().d_model;
        if v.len() != d {
            return Err(Error::ShapeMismatch {
                op: "lens",
                expected: vec![d],
                got: vec![v.len()],
            });
        }
        if self.final_ln {
            self.model.final_layer_norm(v)
        } else {
            Ok(v.to_vec())
        }
    }

    /// Unembedding logits `E_u · v′`.
    pub fn logits(&self, v: &[f32]) -> Result<Vec<f32>> {
        let v = self.prepare(v)?;
        self.model.unembed(&v)
    }

    /// The full distribution over the vocabulary.
    pub fn distribution(&self, v: &[f32]) -> Result<Vec<f32>> {
        kernels::softmax_row(&self.logits(v)?, None)
    }

    /// Top-k tokens by probability; ties go to the lower id.
    pub fn project(&self, v: &[f32], k: usize) -> Result<VocabProjection> {
        let vocab = self.model.config().vocab_size;
        if k > vocab {
            return Err(Error::TopKTooLarge { k, vocab });
        }
        let probs = self.distribution(v)?;
        let mut order: Vec<u32> = (0..vocab as u32).collect();
        let cmp = |a: &u32, b: &u32| {
            probs[*b as usize]
                .total_cmp(&probs[*a as usize])
                .then(a.cmp(b))
        };
        if k < vocab && k > 0 {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        order.truncate(k);
        Ok(VocabProjection {
            entries: order
                .into_iter()
                .map(|id| VocabEntry {
                    id,
                    token: None,
                    prob: probs[id as usize],
                })
                .collect(),
            applied_final_ln: self.final_ln,
        })
    }

    /// `log p(token | v)`.
    pub fn log_prob(&self, v: &[f32], token: u32) -> Result<f32> {
        let vocab = self.model.config().vocab_size;
        if token as usize >= vocab {
            return Err(Error::UnknownToken(token));
        }
        Ok(kernels::log_softmax_row(&self.logits(v)?)?[token as usize])
    }

    /// `log p(a | w) − log p(b | w)`. The normalizer cancels, so only the two
    /// unembedding rows are touched.
    pub fn minus(&self, w: &[f32], a: u32, b: u32) -> Result<f32> {
        let vocab = self.model.config().vocab_size;
        for id in [a, b] {
            if id as usize >= vocab {
                return Err(Error::UnknownToken(id));
            }
        }
        let w = self.prepare(w)?;
        let e = &self.model.weights().token_embedding;
        Ok(dot(e.row(a as usize), &w) - dot(e.row(b as usize), &w))
    }

    /// Head score: `log p(b | o + Lin) − log p(b | Lin)` for the last position.
    pub fn head_score(&self, trace: &Trace, layer: usize, head: usize, label: u32) -> Result<f32> {
        let lin = trace.layer_input(layer)?;
        let o = trace.head_output(layer, head)?;
        let with: Vec<f32> = lin.iter().zip(o).map(|(a, b)| a + b).collect();
        Ok(self.log_prob(&with, label)? - self.log_prob(lin, label)?)
    }

    /// Logit minus of a head's (weighted) value-output vector at `position`.
    #[allow(clippy::too_many_arguments)]
    pub fn logit_minus(
        &self,
        trace: &Trace,
        layer: usize,
        head: usize,
        position: usize,
        foo: u32,
        bar: u32,
        weighted: bool,
    ) -> Result<f32> {
        let w = if weighted {
            trace.weighted_value_output(layer, head, position)?
        } else {
            trace.value_output(layer, head, position)?.to_vec()
        };
        self.minus(&w, foo, bar)
    }
}

/// Which vector of a head a case-study row projects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Value,
    Key,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseRow {
    /// `"<position>-<probe>"`, e.g. `"2-value"`.
    pub name: String,
    pub position: usize,
    pub probe: Probe,
    pub top: VocabProjection,
}

/// Locate-and-project readout of one head on one prompt.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseStudy {
    pub text: String,
    pub tokens: Vec<String>,
    pub layer: usize,
    pub head: usize,
    pub foo_positions: Vec<usize>,
    pub bar_positions: Vec<usize>,
    pub logit_foo: f32,
    pub logit_bar: f32,
    /// `"foo"` or `"bar"`, whichever label logit is larger.
    pub prediction: String,
    /// The head's attention from the last position.
    pub attention: Vec<f32>,
    pub rows: Vec<CaseRow>,
}

/// Value-output and key vectors at every label position and the query at
/// the last position, each projected to its top-`k` tokens. Label positions
/// are wherever `foo_id` or `bar_id` occurs before the last token. Key and
/// query vectors are mapped back to the residual width through the
/// transpose of their projection before the readout.
#[allow(clippy::too_many_arguments)]
pub fn case_study(
    lens: &Lens<'_>,
    tok: &Tokenizer,
    text: &str,
    layer: usize,
    head: usize,
    k: usize,
    foo_id: u32,
    bar_id: u32,
) -> Result<CaseStudy> {
    use crate::interventions::InterventionPlan;
    use crate::model::HeadId;
    use crate::trace::{HeadSelection, PositionSelection, TraceConfig};

    let model = lens.model;
    model.config().check_head(HeadId::new(layer, head))?;
    let ids = tok.encode(text);
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let last = ids.len() - 1;
    let find = |id: u32| -> Vec<usize> { (0..last).filter(|&i| ids[i] == id).collect() };
    let (foo_positions, bar_positions) = (find(foo_id), find(bar_id));
    let mut labels: Vec<usize> = foo_positions.iter().chain(&bar_positions).copied().collect();
    labels.sort_unstable();

    let one = HeadSelection::Heads([HeadId::new(layer, head)].into());
    let cfg = TraceConfig {
        attention: one.clone(),
        values: one,
        positions: PositionSelection::Positions(labels.iter().copied().collect()),
        ..TraceConfig::default()
    };
    let out = model.forward_last(&ids, &cfg, &InterventionPlan::default())?;
    let logits = out.last_logits();
    let (logit_foo, logit_bar) = (logits[foo_id as usize], logits[bar_id as usize]);
    let hv = model.head_qkv(&ids, layer, head)?;

    let row = |position: usize, probe: Probe, v: Vec<f32>| -> Result<CaseRow> {
        let name = match probe {
            Probe::Value => "value",
            Probe::Key => "key",
            Probe::Query => "query",
        };
        Ok(CaseRow {
            name: format!("{position}-{name}"),
            position,
            probe,
            top: lens.project(&v, k)?.label(tok),
        })
    };
    let mut rows = Vec::new();
    for &p in &labels {
        rows.push(row(p, Probe::Value, out.trace.value_output(layer, head, p)?.to_vec())?);
    }
    for &p in &labels {
        rows.push(row(p, Probe::Key, model.lift_key(layer, head, hv.keys.row(p))?)?);
    }
    rows.push(row(last, Probe::Query, model.lift_query(layer, head, hv.queries.row(last))?)?);

    Ok(CaseStudy {
        text: text.to_string(),
        tokens: ids.iter().map(|&i| tok.token_text(i)).collect(),
        layer,
        head,
        foo_positions,
        bar_positions,
        logit_foo,
        logit_bar,
        prediction: if logit_foo > logit_bar { "foo" } else { "bar" }.to_string(),
        attention: out.trace.attention(layer, head)?.to_vec(),
        rows,
    })
}
