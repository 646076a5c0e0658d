//! In-context prompts with the two placeholder labels, dataset variants,
//! accuracy and the bias metrics.
//!
//! Template: `"<text> : <label> "` per demonstration, then `"<query> :"`,
//! with labels rendered as the single tokens `" foo"` and `" bar"`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::InContextHeads;
use crate::error::{Error, Result};
use crate::interventions::InterventionPlan;
use crate::model::{HeadId, Model};
use crate::tokenizer::Tokenizer;
use crate::trace::{HeadSelection, PositionSelection, TraceConfig};

pub const MAX_TEXT_TOKENS: usize = 48;
pub const DEFAULT_PROMPTS: usize = 50;
pub const DATASET_NAMES: [&str; 5] = ["financ", "agnews", "amazon", "ethos", "sst2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Foo,
    Bar,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Foo, Label::Bar];

    /// Rendered form inside a prompt, leading space included.
    pub fn text(self) -> &'static str {
        match self {
            Label::Foo => " foo",
            Label::Bar => " bar",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Foo => Label::Bar,
            Label::Bar => Label::Foo,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Foo => "foo",
            Label::Bar => "bar",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "foo" => Ok(Label::Foo),
            "bar" => Ok(Label::Bar),
            other => Err(Error::Dataset(format!("unknown label `{other}`"))),
        }
    }
}

/// One dataset sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    #[serde(rename = "class")]
    pub class_id: i64,
}

impl LabeledExample {
    /// Collapses whitespace to single spaces; rejects empty text.
    pub fn new(text: &str, class_id: i64) -> Result<Self> {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(Error::Dataset("empty example text".into()));
        }
        Ok(Self { text, class_id })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub example: LabeledExample,
    pub label: Label,
}

/// An untokenized prompt: demonstrations, query and the expected label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub demos: Vec<Demo>,
    pub query: LabeledExample,
    pub correct: Label,
}

impl PromptSpec {
    pub fn count(&self, label: Label) -> usize {
        self.demos.iter().filter(|d| d.label == label).count()
    }
}

/// A tokenized prompt with its label positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub ids: Vec<u32>,
    pub text: String,
    pub demos: Vec<Demo>,
    pub query: LabeledExample,
    pub correct: Label,
    pub correct_token_id: u32,
    pub other_token_id: u32,
    pub foo_positions: Vec<usize>,
    pub bar_positions: Vec<usize>,
}

impl PromptInstance {
    /// A prompt given directly as token ids, for models without a tokenizer.
    pub fn from_ids(
        ids: Vec<u32>,
        foo_positions: Vec<usize>,
        bar_positions: Vec<usize>,
        correct: Label,
        foo_id: u32,
        bar_id: u32,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        for (positions, id) in [(&foo_positions, foo_id), (&bar_positions, bar_id)] {
            for &p in positions.iter() {
                match ids.get(p) {
                    Some(&x) if x == id => {}
                    Some(_) => return Err(Error::Dataset(format!("position {p} does not hold label id {id}"))),
                    None => return Err(Error::PositionOutOfRange { position: p, len: ids.len() }),
                }
            }
        }
        let (correct_token_id, other_token_id) = match correct {
            Label::Foo => (foo_id, bar_id),
            Label::Bar => (bar_id, foo_id),
        };
        Ok(Self {
            ids,
            text: String::new(),
            demos: Vec::new(),
            query: LabeledExample {
                text: String::new(),
                class_id: -1,
            },
            correct,
            correct_token_id,
            other_token_id,
            foo_positions,
            bar_positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn last(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn label_positions(&self, label: Label) -> &[usize] {
        match label {
            Label::Foo => &self.foo_positions,
            Label::Bar => &self.bar_positions,
        }
    }

    pub fn all_label_positions(&self) -> BTreeSet<usize> {
        self.foo_positions
            .iter()
            .chain(&self.bar_positions)
            .copied()
            .collect()
    }

    pub fn token_id(&self, label: Label) -> u32 {
        if label == self.correct {
            self.correct_token_id
        } else {
            self.other_token_id
        }
    }

    /// `logit(correct) > logit(other)`; a tie is a miss.
    pub fn is_correct(&self, last_logits: &[f32]) -> bool {
        last_logits[self.correct_token_id as usize] > last_logits[self.other_token_id as usize]
    }
}

/// Tokenizes prompts segment by segment so label positions are known
/// without searching.
#[derive(Clone, Debug)]
pub struct PromptBuilder<'t> {
    tok: &'t Tokenizer,
    foo_id: u32,
    bar_id: u32,
    colon: Vec<u32>,
    max_text_tokens: usize,
    n_ctx: Option<usize>,
}

impl<'t> PromptBuilder<'t> {
    pub fn new(tok: &'t Tokenizer) -> Result<Self> {
        Ok(Self {
            tok,
            foo_id: tok.single_token_id(Label::Foo.text())?,
            bar_id: tok.single_token_id(Label::Bar.text())?,
            colon: tok.encode(" :"),
            max_text_tokens: MAX_TEXT_TOKENS,
            n_ctx: None,
        })
    }

    pub fn with_context_limit(mut self, n_ctx: usize) -> Self {
        self.n_ctx = Some(n_ctx);
        self
    }

    pub fn with_max_text_tokens(mut self, n: usize) -> Self {
        self.max_text_tokens = n;
        self
    }

    pub fn label_id(&self, label: Label) -> u32 {
        match label {
            Label::Foo => self.foo_id,
            Label::Bar => self.bar_id,
        }
    }

    fn push_text(&self, text: &str, lead: bool, ids: &mut Vec<u32>, rendered: &mut String) {
        let piece = if lead { format!(" {text}") } else { text.to_string() };
        let mut t = self.tok.encode(&piece);
        if t.len() > self.max_text_tokens {
            t.truncate(self.max_text_tokens);
            rendered.push_str(&self.tok.decode(&t).unwrap_or_default());
        } else {
            rendered.push_str(&piece);
        }
        ids.extend(t);
    }

    /// Build from `(text, label)` pairs and a query.
    pub fn build(&self, demos: &[(&str, Label)], query: &str, correct: Label) -> Result<PromptInstance> {
        let demos = demos
            .iter()
            .map(|(t, l)| {
                Ok(Demo {
                    example: LabeledExample::new(t, -1)?,
                    label: *l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.build_spec(&PromptSpec {
            demos,
            query: LabeledExample::new(query, -1)?,
            correct,
        })
    }

    pub fn build_spec(&self, spec: &PromptSpec) -> Result<PromptInstance> {
        let mut ids = Vec::new();
        let mut text = String::new();
        let mut foo_positions = Vec::new();
        let mut bar_positions = Vec::new();
        for (i, demo) in spec.demos.iter().enumerate() {
            self.push_text(&demo.example.text, i > 0, &mut ids, &mut text);
            ids.extend(&self.colon);
            text.push_str(" :");
            match demo.label {
                Label::Foo => foo_positions.push(ids.len()),
                Label::Bar => bar_positions.push(ids.len()),
            }
            ids.push(self.label_id(demo.label));
            text.push_str(demo.label.text());
        }
        self.push_text(&spec.query.text, !spec.demos.is_empty(), &mut ids, &mut text);
        ids.extend(&self.colon);
        text.push_str(" :");
        if let Some(n_ctx) = self.n_ctx {
            if ids.len() > n_ctx {
                return Err(Error::ContextOverflow {
                    len: ids.len(),
                    n_ctx,
                });
            }
        }
        Ok(PromptInstance {
            ids,
            text,
            demos: spec.demos.clone(),
            query: spec.query.clone(),
            correct: spec.correct,
            correct_token_id: self.label_id(spec.correct),
            other_token_id: self.label_id(spec.correct.other()),
            foo_positions,
            bar_positions,
        })
    }

    pub fn build_all(&self, specs: &[PromptSpec]) -> Result<Vec<PromptInstance>> {
        specs.iter().map(|s| self.build_spec(s)).collect()
    }
}

/// Sentences of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    /// One JSON object `{"text": str, "class": int}` per line; blank lines skipped.
    pub fn from_jsonl(name: &str, body: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: LabeledExample = serde_json::from_str(line)
                .map_err(|e| Error::Dataset(format!("{name}:{}: {e}", i + 1)))?;
            let ex = LabeledExample::new(&raw.text, raw.class_id)
                .map_err(|_| Error::Dataset(format!("{name}:{}: empty text", i + 1)))?;
            examples.push(ex);
        }
        if examples.is_empty() {
            return Err(Error::Dataset(format!("{name} has no examples")));
        }
        Ok(Self {
            name: name.to_string(),
            examples,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_jsonl(&name, &body)
    }

    /// Every `*.jsonl` file in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Self>> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no .jsonl datasets in {}", dir.display())));
        }
        paths.iter().map(Self::load).collect()
    }

    pub fn classes(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self.examples.iter().map(|e| e.class_id).collect();
        set.into_iter().collect()
    }

    fn by_class(&self, class: i64) -> Vec<&LabeledExample> {
        self.examples.iter().filter(|e| e.class_id == class).collect()
    }

    /// `n` balanced prompts: two classes mapped to the two labels, two
    /// demonstrations each (bar block first), query drawn from a third
    /// sentence of the correct class. Correct labels alternate foo, bar.
    pub fn sample_prompts(&self, n: usize, seed: u64) -> Result<Vec<PromptSpec>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<i64> = self
            .classes()
            .into_iter()
            .filter(|&c| self.by_class(c).len() >= 3)
            .collect();
        if classes.len() < 2 {
            return Err(Error::Dataset(format!(
                "{} needs two classes with at least 3 sentences",
                self.name
            )));
        }
        (0..n)
            .map(|i| {
                let pair: Vec<i64> = classes.choose_multiple(&mut rng, 2).copied().collect();
                let (foo_class, bar_class) = if rng.random_bool(0.5) {
                    (pair[0], pair[1])
                } else {
                    (pair[1], pair[0])
                };
                let correct = if i % 2 == 0 { Label::Foo } else { Label::Bar };
                let mut draw = |class: i64, k: usize| -> Vec<LabeledExample> {
                    self.by_class(class)
                        .choose_multiple(&mut rng, k)
                        .map(|e| (*e).clone())
                        .collect()
                };
                let mut foo = draw(foo_class, if correct == Label::Foo { 3 } else { 2 });
                let mut bar = draw(bar_class, if correct == Label::Bar { 3 } else { 2 });
                let query = match correct {
                    Label::Foo => foo.pop(),
                    Label::Bar => bar.pop(),
                }
                .expect("three drawn");
                let demos = bar
                    .into_iter()
                    .map(|e| Demo { example: e, label: Label::Bar })
                    .chain(foo.into_iter().map(|e| Demo { example: e, label: Label::Foo }))
                    .collect();
                Ok(PromptSpec { demos, query, correct })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Original,
    Imbalanced,
    Lackfoo,
    Lackbar,
    Reverse,
    Reorder1,
    Reorder2,
    Flipped,
}

impl VariantKind {
    pub const ALL: [VariantKind; 8] = [
        VariantKind::Original,
        VariantKind::Imbalanced,
        VariantKind::Lackfoo,
        VariantKind::Lackbar,
        VariantKind::Reverse,
        VariantKind::Reorder1,
        VariantKind::Reorder2,
        VariantKind::Flipped,
    ];

    /// The four orderings compared for recency bias.
    pub const ORDERINGS: [VariantKind; 4] = [
        VariantKind::Original,
        VariantKind::Reorder1,
        VariantKind::Reorder2,
        VariantKind::Reverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Original => "original",
            VariantKind::Imbalanced => "imbalanced",
            VariantKind::Lackfoo => "lackfoo",
            VariantKind::Lackbar => "lackbar",
            VariantKind::Reverse => "reverse",
            VariantKind::Reorder1 => "reorder1",
            VariantKind::Reorder2 => "reorder2",
            VariantKind::Flipped => "flipped",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variants {
    pub original: PromptSpec,
    /// Last demonstration removed.
    pub imbalanced: PromptSpec,
    pub lackfoo: PromptSpec,
    pub lackbar: PromptSpec,
    /// Label blocks swapped.
    pub reverse: PromptSpec,
    /// `[b0, a0, a1, .., b1, ..]`
    pub reorder1: PromptSpec,
    /// `[a0, b0, b1, .., a1, ..]`
    pub reorder2: PromptSpec,
    /// Same order, labels exchanged, so the expected answer flips.
    pub flipped: PromptSpec,
}

impl Variants {
    pub fn get(&self, kind: VariantKind) -> &PromptSpec {
        match kind {
            VariantKind::Original => &self.original,
            VariantKind::Imbalanced => &self.imbalanced,
            VariantKind::Lackfoo => &self.lackfoo,
            VariantKind::Lackbar => &self.lackbar,
            VariantKind::Reverse => &self.reverse,
            VariantKind::Reorder1 => &self.reorder1,
            VariantKind::Reorder2 => &self.reorder2,
            VariantKind::Flipped => &self.flipped,
        }
    }
}

fn remove_random(spec: &PromptSpec, label: Label, rng: &mut ChaCha8Rng) -> PromptSpec {
    let idx: Vec<usize> = (0..spec.demos.len())
        .filter(|&i| spec.demos[i].label == label)
        .collect();
    let drop = *idx.choose(rng).expect("checked nonempty");
    let mut out = spec.clone();
    out.demos.remove(drop);
    out
}

/// All variants of a balanced two-block prompt. The original must be one
/// contiguous block of each label with at least two demonstrations each.
pub fn make_variants(base: &PromptSpec, seed: u64) -> Result<Variants> {
    let d = &base.demos;
    let first = d.first().map(|x| x.label).ok_or(Error::TooFewDemos { needed: 2, found: 0 })?;
    let split = d.iter().position(|x| x.label != first).unwrap_or(d.len());
    let (a, b) = d.split_at(split);
    if b.iter().any(|x| x.label == first) {
        return Err(Error::Dataset("demonstrations are not two label blocks".into()));
    }
    let found = a.len().min(b.len());
    if found < 2 {
        return Err(Error::TooFewDemos { needed: 2, found });
    }
    let with = |demos: Vec<Demo>| PromptSpec {
        demos,
        ..base.clone()
    };
    let cat = |parts: &[&[Demo]]| parts.concat();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imbalanced = base.clone();
    imbalanced.demos.pop();
    let lackfoo = remove_random(base, Label::Foo, &mut rng);
    let lackbar = remove_random(base, Label::Bar, &mut rng);
    let flipped = PromptSpec {
        demos: d
            .iter()
            .map(|x| Demo {
                example: x.example.clone(),
                label: x.label.other(),
            })
            .collect(),
        query: base.query.clone(),
        correct: base.correct.other(),
    };

    Ok(Variants {
        original: base.clone(),
        imbalanced,
        lackfoo,
        lackbar,
        reverse: with(cat(&[b, a])),
        reorder1: with(cat(&[&b[..1], a, &b[1..]])),
        reorder2: with(cat(&[&a[..1], b, &a[1..]])),
        flipped,
    })
}

/// Variant sets of many prompts, aligned by index.
pub fn variant_sets(specs: &[PromptSpec], seed: u64) -> Result<Vec<Variants>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| make_variants(s, seed.wrapping_add(i as u64)))
        .collect()
}

/// Per-prompt correctness under a plan chosen per prompt.
pub fn predictions<F>(model: &Model, prompts: &[PromptInstance], plan_for: F) -> Result<Vec<bool>>
where
    F: Fn(&PromptInstance) -> Result<InterventionPlan> + Sync,
{
    prompts
        .par_iter()
        .map(|p| {
            let plan = plan_for(p)?;
            let out = model.forward_last(&p.ids, &TraceConfig::disabled(), &plan)?;
            Ok(p.is_correct(out.last_logits()))
        })
        .collect()
}

fn fraction(hits: &[bool]) -> f32 {
    hits.iter().filter(|&&h| h).count() as f32 / hits.len() as f32
}

/// Fraction of prompts where the correct label outscores the other one.
pub fn evaluate_accuracy(model: &Model, prompts: &[PromptInstance], plan: &InterventionPlan) -> Result<f32> {
    evaluate_accuracy_with(model, prompts, |_| Ok(plan.clone()))
}

pub fn evaluate_accuracy_with<F>(model: &Model, prompts: &[PromptInstance], plan_for: F) -> Result<f32>
where
    F: Fn(&PromptInstance) -> Result<InterventionPlan> + Sync,
{
    if prompts.is_empty() {
        return Err(Error::NoPrompts);
    }
    Ok(fraction(&predictions(model, prompts, plan_for)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajorityBias {
    pub acc_balanced: f32,
    pub acc_lackfoo: f32,
    pub acc_lackbar: f32,
    pub bias: f32,
}

/// `|acc_bal − acc_lackfoo| + |acc_bal − acc_lackbar|`.
pub fn majority_bias(acc_balanced: f32, acc_lackfoo: f32, acc_lackbar: f32) -> f32 {
    (acc_balanced - acc_lackfoo).abs() + (acc_balanced - acc_lackbar).abs()
}

fn check_aligned(sets: &[&[PromptInstance]]) -> Result<()> {
    let n = sets[0].len();
    if n == 0 {
        return Err(Error::NoPrompts);
    }
    if let Some(bad) = sets.iter().find(|s| s.len() != n) {
        return Err(Error::Misaligned(format!("{} prompts vs {}", bad.len(), n)));
    }
    for i in 0..n {
        let q = &sets[0][i].query;
        if sets.iter().any(|s| &s[i].query != q) {
            return Err(Error::Misaligned(format!("prompt {i} has differing queries")));
        }
    }
    Ok(())
}

pub fn majority_bias_metric<F>(
    model: &Model,
    balanced: &[PromptInstance],
    lackfoo: &[PromptInstance],
    lackbar: &[PromptInstance],
    plan_for: F,
) -> Result<MajorityBias>
where
    F: Fn(&PromptInstance) -> Result<InterventionPlan> + Sync,
{
    check_aligned(&[balanced, lackfoo, lackbar])?;
    let acc_balanced = evaluate_accuracy_with(model, balanced, &plan_for)?;
    let acc_lackfoo = evaluate_accuracy_with(model, lackfoo, &plan_for)?;
    let acc_lackbar = evaluate_accuracy_with(model, lackbar, &plan_for)?;
    Ok(MajorityBias {
        acc_balanced,
        acc_lackfoo,
        acc_lackbar,
        bias: majority_bias(acc_balanced, acc_lackfoo, acc_lackbar),
    })
}

/// Population standard deviation.
pub fn population_std(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMass {
    pub layer: usize,
    pub head: usize,
    pub label: Label,
    /// Mean over prompts of the summed attention at that label's positions.
    pub mass: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    /// Fooheads at foo positions, then barheads at bar positions.
    pub per_head: Vec<HeadMass>,
    /// Mean over prompts of the foohead-averaged foo mass; `None` without fooheads.
    pub foo: Option<f32>,
    pub bar: Option<f32>,
    /// Prompts contributing 0 because they have no positions of that label.
    pub absent_foo: usize,
    pub absent_bar: usize,
}

/// Summed attention of the last position on label positions, within the
/// matching head group. A stripped head reports its stripped pattern.
pub fn attention_mass_report<F>(
    model: &Model,
    prompts: &[PromptInstance],
    heads: &InContextHeads,
    plan_for: F,
) -> Result<AttentionMass>
where
    F: Fn(&PromptInstance) -> Result<InterventionPlan> + Sync,
{
    if prompts.is_empty() {
        return Err(Error::NoPrompts);
    }
    let groups: Vec<(HeadId, Label)> = heads
        .fooheads
        .iter()
        .map(|&h| (h, Label::Foo))
        .chain(heads.barheads.iter().map(|&h| (h, Label::Bar)))
        .collect();
    let cfg = TraceConfig {
        attention: HeadSelection::Heads(heads.all()),
        positions: PositionSelection::Positions(BTreeSet::new()),
        ..TraceConfig::default()
    };
    // per prompt: one mass per head in `groups` order
    let rows: Vec<Vec<f32>> = prompts
        .par_iter()
        .map(|p| {
            let out = model.forward_last(&p.ids, &cfg, &plan_for(p)?)?;
            groups
                .iter()
                .map(|&(h, label)| {
                    let ht = out.trace.head(h.layer, h.head)?;
                    let row = ht.stripped_attention.as_deref().unwrap_or(&ht.attention);
                    Ok(p.label_positions(label).iter().map(|&q| row[q]).sum())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = prompts.len() as f32;
    let per_head = groups
        .iter()
        .enumerate()
        .map(|(j, &(h, label))| HeadMass {
            layer: h.layer,
            head: h.head,
            label,
            mass: rows.iter().map(|r| r[j]).sum::<f32>() / n,
        })
        .collect::<Vec<_>>();
    let group_mean = |label: Label| -> Option<f32> {
        let idx: Vec<usize> = (0..groups.len()).filter(|&j| groups[j].1 == label).collect();
        if idx.is_empty() {
            return None;
        }
        let per_prompt = rows
            .iter()
            .map(|r| idx.iter().map(|&j| r[j]).sum::<f32>() / idx.len() as f32);
        Some(per_prompt.sum::<f32>() / n)
    };
    Ok(AttentionMass {
        foo: group_mean(Label::Foo),
        bar: group_mean(Label::Bar),
        per_head,
        absent_foo: prompts.iter().filter(|p| p.foo_positions.is_empty()).count(),
        absent_bar: prompts.iter().filter(|p| p.bar_positions.is_empty()).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecencyBias {
    /// Original, reorder1, reorder2, reverse.
    pub accuracies: [f32; 4],
    pub foo_mass: [Option<f32>; 4],
    pub bar_mass: [Option<f32>; 4],
    pub acc_std: f32,
    pub attn_std_foo: Option<f32>,
    pub attn_std_bar: Option<f32>,
}

/// Spread of accuracy and label attention across the four orderings.
pub fn recency_bias_metric<F>(
    model: &Model,
    orderings: [&[PromptInstance]; 4],
    heads: &InContextHeads,
    plan_for: F,
) -> Result<RecencyBias>
where
    F: Fn(&PromptInstance) -> Result<InterventionPlan> + Sync,
{
    check_aligned(&orderings)?;
    let mut accuracies = [0.0; 4];
    let mut foo_mass = [None; 4];
    let mut bar_mass = [None; 4];
    for (i, set) in orderings.iter().enumerate() {
        accuracies[i] = evaluate_accuracy_with(model, set, &plan_for)?;
        if !heads.is_empty() {
            let m = attention_mass_report(model, set, heads, &plan_for)?;
            foo_mass[i] = m.foo;
            bar_mass[i] = m.bar;
        }
    }
    let spread = |m: &[Option<f32>; 4]| -> Option<f32> {
        let v: Option<Vec<f32>> = m.iter().copied().collect();
        v.map(|v| population_std(&v))
    };
    Ok(RecencyBias {
        accuracies,
        acc_std: population_std(&accuracies),
        attn_std_foo: spread(&foo_mass),
        attn_std_bar: spread(&bar_mass),
        foo_mass,
        bar_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(labels: &[(&str, Label)], query: &str, correct: Label) -> PromptSpec {
        PromptSpec {
            demos: labels
                .iter()
                .map(|(t, l)| Demo {
                    example: LabeledExample::new(t, 0).unwrap(),
                    label: *l,
                })
                .collect(),
            query: LabeledExample::new(query, 0).unwrap(),
            correct,
        }
    }

    fn texts(s: &PromptSpec) -> Vec<&str> {
        s.demos.iter().map(|d| d.example.text.as_str()).collect()
    }

    fn base() -> PromptSpec {
        use Label::*;
        spec(&[("S0", Bar), ("S1", Bar), ("S2", Foo), ("S3", Foo)], "S4", Foo)
    }

    #[test]
    fn orderings_follow_the_demonstration_table() {
        let v = make_variants(&base(), 0).unwrap();
        assert_eq!(texts(&v.imbalanced), ["S0", "S1", "S2"]);
        assert_eq!(texts(&v.reverse), ["S2", "S3", "S0", "S1"]);
        assert_eq!(texts(&v.reorder1), ["S2", "S0", "S1", "S3"]);
        assert_eq!(texts(&v.reorder2), ["S0", "S2", "S3", "S1"]);
        assert_eq!(v.reorder1.demos[0].label, Label::Foo);
        assert_eq!(v.lackfoo.count(Label::Foo), 1);
        assert_eq!(v.lackbar.count(Label::Bar), 1);
        assert_eq!(v.flipped.correct, Label::Bar);
        assert_eq!(v.flipped.count(Label::Foo), 2);
        let rr = make_variants(&v.reverse, 0).unwrap().reverse;
        assert_eq!(rr, v.original);
        assert_eq!(make_variants(&base(), 9).unwrap(), make_variants(&base(), 9).unwrap());
    }

    #[test]
    fn variants_need_two_blocks() {
        use Label::*;
        let few = spec(&[("a", Bar), ("b", Foo), ("c", Foo)], "q", Foo);
        assert!(matches!(make_variants(&few, 0), Err(Error::TooFewDemos { needed: 2, found: 1 })));
        let mixed = spec(&[("a", Bar), ("b", Foo), ("c", Bar), ("d", Foo)], "q", Foo);
        assert!(matches!(make_variants(&mixed, 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn metric_arithmetic() {
        assert!((majority_bias(0.8, 0.9, 0.95) - 0.25).abs() < 1e-6);
        assert!((majority_bias(0.9, 0.8, 0.95) - 0.15).abs() < 1e-6);
        assert_eq!(majority_bias(0.5, 0.5, 0.5), 0.0);
        assert!((population_std(&[0.5, 0.5, 0.5, 0.9]) - 0.1732).abs() < 1e-4);
        assert_eq!(population_std(&[0.3; 4]), 0.0);
    }

    #[test]
    fn examples_are_normalized() {
        let e = LabeledExample::new("  two\nlines\there ", 1).unwrap();
        assert_eq!(e.text, "two lines here");
        assert!(LabeledExample::new(" \n ", 1).is_err());
        let d = Dataset::from_jsonl("x", "{\"text\":\"a\",\"class\":0}\n\n{\"text\":\"b\",\"class\":1}\n").unwrap();
        assert_eq!(d.classes(), vec![0, 1]);
        assert!(Dataset::from_jsonl("x", "{\"text\":\"a\"}").is_err());
        assert!(Dataset::from_jsonl("x", "").is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!("foo".parse::<Label>().unwrap(), Label::Foo);
        assert!("baz".parse::<Label>().is_err());
        assert_eq!(Label::Bar.other(), Label::Foo);
        assert_eq!(serde_json::to_string(&Label::Bar).unwrap(), "\"bar\"");
    }
}
