//! Locating in-context heads.
//!
//! Two rankings are intersected: the accuracy drop when a head is ablated,
//! and the mean log-probability increase of the correct label when the
//! head's output is added to its layer input. A head in the top-k of both
//! for a label is a foohead or barhead.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icl::{Label, PromptInstance};
use crate::interventions::InterventionPlan;
use crate::lens::Lens;
use crate::model::{HeadId, Model, ModelConfig};
use crate::trace::{HeadSelection, PositionSelection, TraceConfig};

pub const DEFAULT_TOP_K: usize = 10;
pub const NEAR_MISS_K: usize = 15;

/// Default analysis range: the second half of the layers.
pub fn deep_layers(cfg: &ModelConfig) -> Range<usize> {
    cfg.n_layers / 2..cfg.n_layers
}

fn check_range(cfg: &ModelConfig, layers: &Range<usize>) -> Result<()> {
    if layers.start > layers.end || layers.end > cfg.n_layers {
        return Err(Error::LayerOutOfRange(layers.end));
    }
    Ok(())
}

fn heads_in(cfg: &ModelConfig, layers: &Range<usize>) -> Vec<HeadId> {
    layers
        .clone()
        .flat_map(|l| (0..cfg.n_heads).map(move |h| HeadId::new(l, h)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextHeads {
    pub fooheads: BTreeSet<HeadId>,
    pub barheads: BTreeSet<HeadId>,
}

impl InContextHeads {
    pub fn all(&self) -> BTreeSet<HeadId> {
        self.fooheads.union(&self.barheads).copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.fooheads.is_empty() && self.barheads.is_empty()
    }

    pub fn group(&self, label: Label) -> &BTreeSet<HeadId> {
        match label {
            Label::Foo => &self.fooheads,
            Label::Bar => &self.barheads,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(h) = self.fooheads.intersection(&self.barheads).next() {
            return Err(Error::Intervention(format!("head {h} is both a foohead and a barhead")));
        }
        self.all().into_iter().try_for_each(|h| cfg.check_head(h))
    }

    /// Reads either a bare `{"fooheads":..,"barheads":..}` object or a report
    /// with an `in_context_heads` field.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&s)?;
        let inner = v.get("in_context_heads").cloned().unwrap_or(v);
        Ok(serde_json::from_value(inner)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAccuracy {
    pub all: f32,
    pub foo: Option<f32>,
    pub bar: Option<f32>,
    pub n_foo: usize,
    pub n_bar: usize,
}

impl LabelAccuracy {
    fn from_hits(prompts: &[PromptInstance], hits: &[bool]) -> Self {
        let acc = |f: &dyn Fn(&PromptInstance) -> bool| -> (Option<f32>, usize) {
            let sel: Vec<bool> = prompts
                .iter()
                .zip(hits)
                .filter(|(p, _)| f(p))
                .map(|(_, &h)| h)
                .collect();
            let n = sel.len();
            let hit = sel.iter().filter(|&&h| h).count();
            ((n > 0).then(|| hit as f32 / n as f32), n)
        };
        let (all, _) = acc(&|_| true);
        let (foo, n_foo) = acc(&|p| p.correct == Label::Foo);
        let (bar, n_bar) = acc(&|p| p.correct == Label::Bar);
        Self {
            all: all.unwrap_or(0.0),
            foo,
            bar,
            n_foo,
            n_bar,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layer: usize,
    pub head: usize,
    /// Accuracy drop over all prompts.
    pub effect: f32,
    /// Drop over prompts whose correct label is foo (0 without such prompts).
    pub effect_foo: f32,
    pub effect_bar: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSweep {
    pub base: LabelAccuracy,
    pub rows: Vec<AblationRow>,
}

/// Accuracy drop when each head in `layers` is ablated on its own.
///
/// Layers below the ablated one are shared with the clean run, so each
/// ablated pass resumes from the cached residual stream.
pub fn ablation_sweep(model: &Model, prompts: &[PromptInstance], layers: Range<usize>) -> Result<AblationSweep> {
    if prompts.is_empty() {
        return Err(Error::NoPrompts);
    }
    check_range(model.config(), &layers)?;
    let heads = heads_in(model.config(), &layers);
    let cfg = TraceConfig::disabled();
    let clean = InterventionPlan::default();

    let mut base_hits = Vec::with_capacity(prompts.len());
    // hits[head][prompt]
    let mut hits = vec![Vec::with_capacity(prompts.len()); heads.len()];
    for p in prompts {
        let base = model.forward_last(&p.ids, &cfg, &clean)?;
        base_hits.push(p.is_correct(base.last_logits()));
        if heads.is_empty() {
            continue;
        }
        let stream = model.residual_stream(&p.ids)?;
        let row: Vec<bool> = heads
            .par_iter()
            .map(|&h| {
                let plan = InterventionPlan::ablating([h]);
                let out = model.forward_last_from(&p.ids, h.layer, stream[h.layer].clone(), &cfg, &plan)?;
                Ok(p.is_correct(out.last_logits()))
            })
            .collect::<Result<_>>()?;
        for (acc, hit) in hits.iter_mut().zip(row) {
            acc.push(hit);
        }
    }

    let base = LabelAccuracy::from_hits(prompts, &base_hits);
    let drop = |b: Option<f32>, a: Option<f32>| match (b, a) {
        (Some(b), Some(a)) => b - a,
        _ => 0.0,
    };
    let rows = heads
        .iter()
        .zip(&hits)
        .map(|(h, hs)| {
            let acc = LabelAccuracy::from_hits(prompts, hs);
            AblationRow {
                layer: h.layer,
                head: h.head,
                effect: base.all - acc.all,
                effect_foo: drop(base.foo, acc.foo),
                effect_bar: drop(base.bar, acc.bar),
            }
        })
        .collect();
    Ok(AblationSweep { base, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer: usize,
    pub head: usize,
    /// Mean head score for foo on foo-correct prompts; `None` without any.
    #[serde(rename = "mean_S_foo")]
    pub mean_s_foo: Option<f32>,
    #[serde(rename = "mean_S_bar")]
    pub mean_s_bar: Option<f32>,
    pub n_foo: usize,
    pub n_bar: usize,
}

/// Mean head score per head, each prompt scored on its own correct label.
pub fn score_sweep(model: &Model, prompts: &[PromptInstance], layers: Range<usize>) -> Result<Vec<ScoreRow>> {
    if prompts.is_empty() {
        return Err(Error::NoPrompts);
    }
    check_range(model.config(), &layers)?;
    let heads = heads_in(model.config(), &layers);
    let cfg = TraceConfig {
        attention: HeadSelection::Layers {
            start: layers.start,
            end: layers.end,
        },
        positions: PositionSelection::Positions(BTreeSet::new()),
        layer_inputs: true,
        ..TraceConfig::default()
    };
    let lens = Lens::new(model);
    let per_prompt: Vec<Vec<f32>> = prompts
        .par_iter()
        .map(|p| {
            let out = model.forward_last(&p.ids, &cfg, &InterventionPlan::default())?;
            heads
                .iter()
                .map(|h| lens.head_score(&out.trace, h.layer, h.head, p.correct_token_id))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mean = |label: Label, j: usize| -> (Option<f32>, usize) {
        let vals: Vec<f64> = prompts
            .iter()
            .zip(&per_prompt)
            .filter(|(p, _)| p.correct == label)
            .map(|(_, s)| s[j] as f64)
            .collect();
        let n = vals.len();
        ((n > 0).then(|| (vals.iter().sum::<f64>() / n as f64) as f32), n)
    };
    Ok(heads
        .iter()
        .enumerate()
        .map(|(j, h)| {
            let (mean_s_foo, n_foo) = mean(Label::Foo, j);
            let (mean_s_bar, n_bar) = mean(Label::Bar, j);
            ScoreRow {
                layer: h.layer,
                head: h.head,
                mean_s_foo,
                mean_s_bar,
                n_foo,
                n_bar,
            }
        })
        .collect())
}

/// One head's statistics and 1-based ranks (descending; ties by head id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub ablation_effect: f32,
    #[serde(rename = "mean_S_foo")]
    pub mean_s_foo: Option<f32>,
    #[serde(rename = "mean_S_bar")]
    pub mean_s_bar: Option<f32>,
    pub rank_ablation: usize,
    /// Rank by the larger of the two mean scores.
    pub rank_score: usize,
    pub ablation_effect_foo: f32,
    pub ablation_effect_bar: f32,
    pub rank_ablation_foo: usize,
    pub rank_ablation_bar: usize,
    pub rank_score_foo: usize,
    pub rank_score_bar: usize,
}

impl HeadStats {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }

    fn mean_s(&self, label: Label) -> Option<f32> {
        match label {
            Label::Foo => self.mean_s_foo,
            Label::Bar => self.mean_s_bar,
        }
    }

    fn ranks(&self, label: Label) -> (usize, usize) {
        match label {
            Label::Foo => (self.rank_ablation_foo, self.rank_score_foo),
            Label::Bar => (self.rank_ablation_bar, self.rank_score_bar),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub heads: Vec<HeadStats>,
}

/// 1-based ranks, larger value first, missing values last, ties by head id.
fn ranks(values: &[(HeadId, Option<f32>)]) -> BTreeMap<HeadId, usize> {
    let mut order: Vec<&(HeadId, Option<f32>)> = values.iter().collect();
    order.sort_by(|a, b| {
        let key = |v: Option<f32>| v.unwrap_or(f32::NEG_INFINITY);
        key(b.1).total_cmp(&key(a.1)).then(a.0.cmp(&b.0))
    });
    order.iter().enumerate().map(|(i, (h, _))| (*h, i + 1)).collect()
}

impl HeadRanking {
    pub fn new(ablation: &AblationSweep, scores: &[ScoreRow]) -> Result<Self> {
        let by_head: BTreeMap<HeadId, &ScoreRow> =
            scores.iter().map(|s| (HeadId::new(s.layer, s.head), s)).collect();
        let abl: BTreeMap<HeadId, &AblationRow> =
            ablation.rows.iter().map(|r| (HeadId::new(r.layer, r.head), r)).collect();
        if by_head.len() != abl.len() || by_head.keys().ne(abl.keys()) {
            return Err(Error::Misaligned("ablation and score sweeps cover different heads".into()));
        }
        let col = |f: &dyn Fn(HeadId) -> Option<f32>| -> Vec<(HeadId, Option<f32>)> {
            abl.keys().map(|&h| (h, f(h))).collect()
        };
        let r_abl = ranks(&col(&|h| Some(abl[&h].effect)));
        let r_abl_foo = ranks(&col(&|h| Some(abl[&h].effect_foo)));
        let r_abl_bar = ranks(&col(&|h| Some(abl[&h].effect_bar)));
        let r_s_foo = ranks(&col(&|h| by_head[&h].mean_s_foo));
        let r_s_bar = ranks(&col(&|h| by_head[&h].mean_s_bar));
        let r_s = ranks(&col(&|h| {
            let s = by_head[&h];
            match (s.mean_s_foo, s.mean_s_bar) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            }
        }));
        let heads = abl
            .iter()
            .map(|(&h, a)| {
                let s = by_head[&h];
                HeadStats {
                    layer: h.layer,
                    head: h.head,
                    ablation_effect: a.effect,
                    mean_s_foo: s.mean_s_foo,
                    mean_s_bar: s.mean_s_bar,
                    rank_ablation: r_abl[&h],
                    rank_score: r_s[&h],
                    ablation_effect_foo: a.effect_foo,
                    ablation_effect_bar: a.effect_bar,
                    rank_ablation_foo: r_abl_foo[&h],
                    rank_ablation_bar: r_abl_bar[&h],
                    rank_score_foo: r_s_foo[&h],
                    rank_score_bar: r_s_bar[&h],
                }
            })
            .collect();
        Ok(Self { heads })
    }

    fn candidates(&self, label: Label, k: usize) -> BTreeSet<HeadId> {
        self.heads
            .iter()
            .filter(|s| s.mean_s(label).is_some())
            .filter(|s| {
                let (ra, rs) = s.ranks(label);
                ra <= k && rs <= k
            })
            .map(HeadStats::id)
            .collect()
    }
}

/// Heads in the top-k of both rankings for a label. A head qualifying for
/// both labels goes to the one with the larger mean score; equal scores
/// exclude it.
pub fn select_in_context_heads(ranking: &HeadRanking, k: usize) -> InContextHeads {
    let foo = ranking.candidates(Label::Foo, k);
    let bar = ranking.candidates(Label::Bar, k);
    let stats: BTreeMap<HeadId, &HeadStats> = ranking.heads.iter().map(|s| (s.id(), s)).collect();
    let mut out = InContextHeads::default();
    for &h in foo.union(&bar) {
        let label = match (foo.contains(&h), bar.contains(&h)) {
            (true, false) => Label::Foo,
            (false, true) => Label::Bar,
            _ => {
                let s = stats[&h];
                let (f, b) = (s.mean_s_foo.unwrap_or(f32::NEG_INFINITY), s.mean_s_bar.unwrap_or(f32::NEG_INFINITY));
                if f > b {
                    Label::Foo
                } else if b > f {
                    Label::Bar
                } else {
                    continue;
                }
            }
        };
        match label {
            Label::Foo => out.fooheads.insert(h),
            Label::Bar => out.barheads.insert(h),
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearMiss {
    pub layer: usize,
    pub head: usize,
    pub label: Label,
    pub rank_ablation: usize,
    pub rank_score: usize,
}

/// Heads inside the wider `wide` cut for a label but not selected at `k`.
pub fn near_misses(ranking: &HeadRanking, k: usize, wide: usize) -> Vec<NearMiss> {
    let selected = select_in_context_heads(ranking, k).all();
    let mut out = Vec::new();
    for label in Label::ALL {
        let wide_set = ranking.candidates(label, wide);
        for s in &ranking.heads {
            if wide_set.contains(&s.id()) && !selected.contains(&s.id()) {
                let (rank_ablation, rank_score) = s.ranks(label);
                out.push(NearMiss {
                    layer: s.layer,
                    head: s.head,
                    label,
                    rank_ablation,
                    rank_score,
                });
            }
        }
    }
    out
}

/// Pooled means over (prompt, head, position) for one grid cell. All fields
/// are `None` when no position contributed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub minus_weighted: Option<f32>,
    pub minus: Option<f32>,
    pub attn: Option<f32>,
    pub n: usize,
}

#[derive(Default)]
struct CellSum {
    mw: f64,
    mu: f64,
    at: f64,
    n: usize,
}

impl CellSum {
    fn finish(&self) -> GridCell {
        let m = |s: f64| (self.n > 0).then(|| (s / self.n as f64) as f32);
        GridCell {
            minus_weighted: m(self.mw),
            minus: m(self.mu),
            attn: m(self.at),
            n: self.n,
        }
    }
}

/// Label positions inside head groups: `fh`/`bh` × `fp`/`bp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionGrid {
    pub foohead_foo: GridCell,
    pub foohead_bar: GridCell,
    pub barhead_foo: GridCell,
    pub barhead_bar: GridCell,
    /// Σ|weighted logit minus| at label positions over Σ at all positions,
    /// across all in-context heads.
    pub label_share: Option<f32>,
    pub n_prompts: usize,
}

impl PositionGrid {
    pub fn cells(&self) -> [(&'static str, &GridCell); 4] {
        [
            ("fh-fp", &self.foohead_foo),
            ("fh-bp", &self.foohead_bar),
            ("bh-fp", &self.barhead_foo),
            ("bh-bp", &self.barhead_bar),
        ]
    }
}

/// Logit minus and attention at label positions within head groups.
pub fn position_report(
    model: &Model,
    prompts: &[PromptInstance],
    heads: &InContextHeads,
    foo_id: u32,
    bar_id: u32,
) -> Result<PositionGrid> {
    if heads.is_empty() {
        return Err(Error::Intervention("position report needs at least one in-context head".into()));
    }
    heads.validate(model.config())?;
    let all = heads.all();
    let cfg = TraceConfig {
        attention: HeadSelection::Heads(all.clone()),
        values: HeadSelection::Heads(all.clone()),
        positions: PositionSelection::All,
        ..TraceConfig::default()
    };
    let lens = Lens::new(model);

    // per prompt: [cell][(mw, mu, at)] contributions and label-share parts
    type Contrib = (Vec<Vec<(f32, f32, f32)>>, f64, f64);
    let contribs: Vec<Contrib> = prompts
        .par_iter()
        .map(|p| {
            let out = model.forward_last(&p.ids, &cfg, &InterventionPlan::default())?;
            let t = &out.trace;
            let mut cells = vec![Vec::new(); 4];
            for (g, group) in [Label::Foo, Label::Bar].into_iter().enumerate() {
                for h in heads.group(group) {
                    for (k, kind) in [Label::Foo, Label::Bar].into_iter().enumerate() {
                        for &q in p.label_positions(kind) {
                            let a = t.attention(h.layer, h.head)?[q];
                            let mw = lens.logit_minus(t, h.layer, h.head, q, foo_id, bar_id, true)?;
                            let mu = lens.logit_minus(t, h.layer, h.head, q, foo_id, bar_id, false)?;
                            cells[g * 2 + k].push((mw, mu, a));
                        }
                    }
                }
            }
            let labels = p.all_label_positions();
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for h in &all {
                for q in 0..p.len() {
                    let m = lens.logit_minus(t, h.layer, h.head, q, foo_id, bar_id, true)?.abs() as f64;
                    den += m;
                    if labels.contains(&q) {
                        num += m;
                    }
                }
            }
            Ok((cells, num, den))
        })
        .collect::<Result<_>>()?;

    let mut sums: [CellSum; 4] = Default::default();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (cells, n, d) in &contribs {
        for (sum, cell) in sums.iter_mut().zip(cells) {
            for &(mw, mu, at) in cell {
                sum.mw += mw as f64;
                sum.mu += mu as f64;
                sum.at += at as f64;
                sum.n += 1;
            }
        }
        num += n;
        den += d;
    }
    Ok(PositionGrid {
        foohead_foo: sums[0].finish(),
        foohead_bar: sums[1].finish(),
        barhead_foo: sums[2].finish(),
        barhead_bar: sums[3].finish(),
        label_share: (den > 0.0).then(|| (num / den) as f32),
        n_prompts: prompts.len(),
    })
}

/// Percentage change of absolute values between two grids, per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridChange {
    pub cell: String,
    pub minus_weighted_pct: Option<f32>,
    pub minus_pct: Option<f32>,
    pub attn_pct: Option<f32>,
}

pub fn grid_change(before: &PositionGrid, after: &PositionGrid) -> Vec<GridChange> {
    let pct = |b: Option<f32>, a: Option<f32>| match (b, a) {
        (Some(b), Some(a)) if b != 0.0 => Some((a.abs() - b.abs()) / b.abs() * 100.0),
        _ => None,
    };
    before
        .cells()
        .iter()
        .zip(after.cells())
        .map(|((name, b), (_, a))| GridChange {
            cell: name.to_string(),
            minus_weighted_pct: pct(b.minus_weighted, a.minus_weighted),
            minus_pct: pct(b.minus, a.minus),
            attn_pct: pct(b.attn, a.attn),
        })
        .collect()
}
