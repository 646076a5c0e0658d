//! Command-line experiment runner. Exit codes: 0 ok, 1 runtime failure,
//! 2 usage error.

use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attribution::{
    ablation_sweep, deep_layers, grid_change, near_misses, position_report, score_sweep,
    select_in_context_heads, GridChange, HeadRanking, InContextHeads, LabelAccuracy, NearMiss,
    PositionGrid, DEFAULT_TOP_K, NEAR_MISS_K,
};
use crate::error::Error;
use crate::icl::{
    attention_mass_report, majority_bias_metric, recency_bias_metric, variant_sets, AttentionMass,
    Dataset, Label, MajorityBias, PromptBuilder, PromptInstance, RecencyBias, VariantKind,
    DEFAULT_PROMPTS,
};
use crate::interventions::{AmplifySpec, PlanSpec, DEFAULT_GAIN};
use crate::lens::{case_study, CaseStudy, Lens};
use crate::model::Model;
use crate::report::{self, fmt_opt, Header, RunConfig};
use crate::tokenizer::Tokenizer;

pub const CASE_STUDY_PROMPT: &str = "love : bar like : bar eight : foo two : foo one :";

#[derive(Parser, Debug)]
#[command(name = "icl-scope", version, about = "In-context head analysis and bias fixes for GPT-2 models")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model weights (.safetensors).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Tokenizer vocabulary; defaults to vocab.json next to the model.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Tokenizer merges; defaults to merges.txt next to the model.
    #[arg(long, global = true)]
    pub merges: Option<PathBuf>,
    /// Heads per layer, when the width alone does not determine it.
    #[arg(long, global = true)]
    pub n_heads: Option<usize>,
    /// Directory of dataset *.jsonl files.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "reports")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Layers swept for head identification, `start:end` (end exclusive);
    /// defaults to the upper half of the model.
    #[arg(long, global = true, value_parser = parse_layers)]
    pub deep_layers: Option<Range<usize>>,
    #[arg(long, global = true, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
    #[arg(long = "ac", global = true, default_value_t = DEFAULT_GAIN)]
    pub a_c: f32,
    /// Prompts per dataset and condition.
    #[arg(long, global = true, default_value_t = DEFAULT_PROMPTS)]
    pub n_prompts: usize,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Project one head's value, key and query vectors to the vocabulary.
    CaseStudy {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long, default_value = CASE_STUDY_PROMPT)]
        prompt: String,
        /// Tokens per row.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Apply the final layer norm before projecting.
        #[arg(long)]
        final_ln: bool,
    },
    /// Rank heads by ablation effect and direct score; select in-context heads.
    IdentifyHeads,
    /// Logit-minus and attention grids at label positions.
    Analyze {
        /// Heads report; defaults to <out>/heads.json.
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Majority and recency bias before and after a fix.
    BiasEval {
        #[arg(long)]
        heads: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Fix::Amplify)]
        fix: Fix,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fix {
    Amplify,
    Strip,
    None,
}

impl Fix {
    fn name(self) -> &'static str {
        match self {
            Fix::Amplify => "amplify",
            Fix::Strip => "strip",
            Fix::None => "none",
        }
    }
}

fn parse_layers(s: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected L:H, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad start layer: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad end layer: {e}"))?;
    if a > b {
        return Err(format!("empty layer range {a}:{b}"));
    }
    Ok(a..b)
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Caps the global thread pool from `ICL_SCOPE_THREADS`.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("ICL_SCOPE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| usage(format!("ICL_SCOPE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(usage("ICL_SCOPE_THREADS must be positive"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` and runs; returns the report paths written.
pub fn run_from<I, T>(args: I) -> CliResult<Vec<PathBuf>>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| usage(e.to_string()))?;
    run(&cli)
}

struct Session {
    model: Model,
    tok: Tokenizer,
    config: RunConfig,
    sha: String,
    layers: Range<usize>,
}

impl Session {
    fn open(c: &Common, fix: Option<Fix>) -> CliResult<Self> {
        let model_path = c.model.clone().ok_or_else(|| usage("--model is required"))?;
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(usage(format!("{what} not found: {}", p.display())))
            }
        };
        exists(&model_path, "model")?;
        let beside = |name: &str| model_path.parent().unwrap_or(Path::new(".")).join(name);
        let vocab = c.vocab.clone().unwrap_or_else(|| beside("vocab.json"));
        let merges = c.merges.clone().unwrap_or_else(|| beside("merges.txt"));
        exists(&vocab, "vocabulary")?;
        exists(&merges, "merges")?;
        if let Some(d) = &c.data_dir {
            if !d.is_dir() {
                return Err(usage(format!("data dir not found: {}", d.display())));
            }
        }
        if c.a_c.is_nan() || c.a_c < 0.0 {
            return Err(usage("--ac must be non-negative"));
        }

        let model = Model::load_inferred(&model_path, c.n_heads)?;
        let tok = Tokenizer::from_files(&vocab, &merges)?;
        if tok.vocab_size() != model.config().vocab_size {
            return Err(usage(format!(
                "tokenizer has {} tokens, model expects {}",
                tok.vocab_size(),
                model.config().vocab_size
            )));
        }
        let layers = c.deep_layers.clone().unwrap_or_else(|| deep_layers(model.config()));
        if layers.end > model.config().n_layers {
            return Err(usage(format!(
                "--deep-layers {}:{} exceeds the model's {} layers",
                layers.start,
                layers.end,
                model.config().n_layers
            )));
        }
        let config = RunConfig {
            model: model_path.clone(),
            vocab,
            merges,
            data_dir: c.data_dir.clone(),
            seed: c.seed,
            deep_layers: [layers.start, layers.end],
            topk: c.topk,
            a_c: c.a_c,
            n_prompts: c.n_prompts,
            fix: fix.map(|f| f.name().to_string()),
            model_config: model.config().clone(),
        };
        let sha = report::sha256_file(&model_path)?;
        Ok(Session {
            model,
            tok,
            config,
            sha,
            layers,
        })
    }

    fn header(&self, command: &str) -> Header {
        Header::new(command, self.sha.clone(), self.config.clone())
    }

    fn builder(&self) -> CliResult<PromptBuilder<'_>> {
        Ok(PromptBuilder::new(&self.tok)?.with_context_limit(self.model.config().n_ctx))
    }

    fn datasets(&self) -> CliResult<Vec<Dataset>> {
        let dir = self
            .config
            .data_dir
            .as_ref()
            .ok_or_else(|| usage("--data-dir is required"))?;
        let sets = Dataset::load_dir(dir)?;
        if sets.is_empty() {
            return Err(Error::Dataset(format!("no *.jsonl datasets in {}", dir.display())).into());
        }
        Ok(sets)
    }

    /// Seeded prompt specs per dataset; dataset `i` uses `seed + i`.
    fn specs(&self) -> CliResult<Vec<(String, Vec<crate::icl::PromptSpec>)>> {
        self.datasets()?
            .into_iter()
            .enumerate()
            .map(|(i, ds)| {
                let specs = ds.sample_prompts(self.config.n_prompts, self.config.seed.wrapping_add(i as u64))?;
                Ok((ds.name, specs))
            })
            .collect()
    }

    fn heads(&self, path: Option<&PathBuf>, out: &Path) -> CliResult<InContextHeads> {
        let path = path.cloned().unwrap_or_else(|| out.join("heads.json"));
        if !path.is_file() {
            return Err(usage(format!("heads report not found: {} (run identify-heads first)", path.display())));
        }
        let heads = InContextHeads::load(&path)?;
        heads
            .validate(self.model.config())
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(heads)
    }
}

pub fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let c = &cli.common;
    let out = &c.out;
    match &cli.command {
        Command::CaseStudy {
            layer,
            head,
            prompt,
            k,
            final_ln,
        } => {
            let s = Session::open(c, None)?;
            let cfg = s.model.config();
            if *layer >= cfg.n_layers || *head >= cfg.n_heads {
                return Err(usage(format!(
                    "head {layer}.{head} is out of range for {} layers × {} heads",
                    cfg.n_layers, cfg.n_heads
                )));
            }
            if *k == 0 || *k > cfg.vocab_size {
                return Err(usage(format!("-k must be in 1..={}", cfg.vocab_size)));
            }
            let b = s.builder()?;
            let lens = Lens::new(&s.model).with_final_ln(*final_ln);
            let study = case_study(&lens, &s.tok, prompt, *layer, *head, *k, b.label_id(Label::Foo), b.label_id(Label::Bar))?;
            write_case_study(&s, &study, out)
        }
        Command::IdentifyHeads => {
            let s = Session::open(c, None)?;
            identify_heads(&s, out)
        }
        Command::Analyze { heads } => {
            let s = Session::open(c, None)?;
            let heads = s.heads(heads.as_ref(), out)?;
            analyze(&s, &heads, out)
        }
        Command::BiasEval { heads, fix } => {
            let s = Session::open(c, Some(*fix))?;
            let heads = s.heads(heads.as_ref(), out)?;
            bias_eval(&s, &heads, *fix, out)
        }
    }
}

fn write_case_study(s: &Session, study: &CaseStudy, out: &Path) -> CliResult<Vec<PathBuf>> {
    let header = s.header("case-study");
    let json = out.join("case_study.json");
    let csv = out.join("case_study.csv");
    report::write_json(&json, &header, study)?;
    let rows = study.rows.iter().map(|r| {
        let cell = |e: &crate::lens::VocabEntry| format!("{} ({:.4})", e.token.as_deref().unwrap_or(""), e.prob);
        let mut row = vec![r.name.clone()];
        row.extend(r.top.entries.iter().map(cell));
        row
    });
    let k = study.rows.first().map_or(0, |r| r.top.entries.len());
    let mut columns = vec!["row".to_string()];
    columns.extend((1..=k).map(|i| format!("top{i}")));
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    report::write_csv(&csv, &header, &columns, rows)?;
    Ok(vec![json, csv])
}

#[derive(Serialize)]
struct HeadsReport<'a> {
    in_context_heads: &'a InContextHeads,
    n_prompts: usize,
    datasets: Vec<DatasetCount>,
    base_accuracy: &'a LabelAccuracy,
    near_misses: &'a [NearMiss],
    ranking: &'a HeadRanking,
}

#[derive(Serialize)]
struct DatasetCount {
    name: String,
    prompts: usize,
}

fn identify_heads(s: &Session, out: &Path) -> CliResult<Vec<PathBuf>> {
    let b = s.builder()?;
    let mut prompts = Vec::new();
    let mut datasets = Vec::new();
    for (name, specs) in s.specs()? {
        datasets.push(DatasetCount {
            name,
            prompts: specs.len(),
        });
        prompts.extend(b.build_all(&specs)?);
    }
    if prompts.is_empty() {
        return Err(Error::NoPrompts.into());
    }
    let ablation = ablation_sweep(&s.model, &prompts, s.layers.clone())?;
    let scores = score_sweep(&s.model, &prompts, s.layers.clone())?;
    let ranking = HeadRanking::new(&ablation, &scores)?;
    let k = s.config.topk;
    let selected = select_in_context_heads(&ranking, k);
    let misses = near_misses(&ranking, k, NEAR_MISS_K.max(k));

    let header = s.header("identify-heads");
    let json = out.join("heads.json");
    let csv = out.join("ranking.csv");
    report::write_json(
        &json,
        &header,
        &HeadsReport {
            in_context_heads: &selected,
            n_prompts: prompts.len(),
            datasets,
            base_accuracy: &ablation.base,
            near_misses: &misses,
            ranking: &ranking,
        },
    )?;
    let columns = [
        "layer",
        "head",
        "ablation_effect",
        "ablation_effect_foo",
        "ablation_effect_bar",
        "mean_S_foo",
        "mean_S_bar",
        "rank_ablation",
        "rank_score",
        "rank_ablation_foo",
        "rank_ablation_bar",
        "rank_score_foo",
        "rank_score_bar",
        "group",
    ];
    let group = |id| {
        if selected.fooheads.contains(&id) {
            "foohead"
        } else if selected.barheads.contains(&id) {
            "barhead"
        } else {
            ""
        }
    };
    let rows = ranking.heads.iter().map(|h| {
        vec![
            h.layer.to_string(),
            h.head.to_string(),
            h.ablation_effect.to_string(),
            h.ablation_effect_foo.to_string(),
            h.ablation_effect_bar.to_string(),
            fmt_opt(h.mean_s_foo),
            fmt_opt(h.mean_s_bar),
            h.rank_ablation.to_string(),
            h.rank_score.to_string(),
            h.rank_ablation_foo.to_string(),
            h.rank_ablation_bar.to_string(),
            h.rank_score_foo.to_string(),
            h.rank_score_bar.to_string(),
            group(h.id()).to_string(),
        ]
    });
    report::write_csv(&csv, &header, &columns, rows)?;
    Ok(vec![json, csv])
}

#[derive(Serialize)]
struct AnalyzeReport {
    /// Balanced prompts as sampled.
    original: PositionGrid,
    /// Same demonstrations with the two labels exchanged.
    flipped: PositionGrid,
    change: Vec<GridChange>,
}

fn analyze(s: &Session, heads: &InContextHeads, out: &Path) -> CliResult<Vec<PathBuf>> {
    if heads.is_empty() {
        return Err(usage("the heads report selects no in-context heads"));
    }
    let b = s.builder()?;
    let (foo, bar) = (b.label_id(Label::Foo), b.label_id(Label::Bar));
    let mut original = Vec::new();
    let mut flipped = Vec::new();
    for (_, specs) in s.specs()? {
        for v in variant_sets(&specs, s.config.seed)? {
            original.push(b.build_spec(v.get(VariantKind::Original))?);
            flipped.push(b.build_spec(v.get(VariantKind::Flipped))?);
        }
    }
    let before = position_report(&s.model, &original, heads, foo, bar)?;
    let after = position_report(&s.model, &flipped, heads, foo, bar)?;
    let change = grid_change(&before, &after);

    let header = s.header("analyze");
    let json = out.join("analyze.json");
    let grid_csv = out.join("grid.csv");
    let change_csv = out.join("grid_change.csv");
    let mut rows = Vec::new();
    for (set, grid) in [("original", &before), ("flipped", &after)] {
        for (cell, g) in grid.cells() {
            rows.push(vec![
                set.to_string(),
                cell.to_string(),
                fmt_opt(g.minus_weighted),
                fmt_opt(g.minus),
                fmt_opt(g.attn),
                g.n.to_string(),
            ]);
        }
        rows.push(vec![set.into(), "label_share".into(), fmt_opt(grid.label_share), String::new(), String::new(), String::new()]);
    }
    report::write_json(
        &json,
        &header,
        &AnalyzeReport {
            original: before,
            flipped: after,
            change: change.clone(),
        },
    )?;
    report::write_csv(&grid_csv, &header, &["set", "cell", "minus_weighted", "minus", "attn", "n"], rows)?;
    let change_rows = change.iter().map(|c| {
        vec![
            c.cell.clone(),
            fmt_opt(c.minus_weighted_pct),
            fmt_opt(c.minus_pct),
            fmt_opt(c.attn_pct),
        ]
    });
    report::write_csv(&change_csv, &header, &["cell", "minus_weighted_pct", "minus_pct", "attn_pct"], change_rows)?;
    Ok(vec![json, grid_csv, change_csv])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeforeAfter<T> {
    pub before: T,
    pub after: T,
}

/// One dataset's bias metrics without and with the fix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasRow {
    pub dataset: String,
    pub majority: BeforeAfter<MajorityBias>,
    pub recency: BeforeAfter<RecencyBias>,
    /// Label attention mass on balanced prompts.
    pub mass_original: BeforeAfter<AttentionMass>,
    /// Label attention mass with the last demonstration removed.
    pub mass_imbalanced: BeforeAfter<AttentionMass>,
}

#[derive(Serialize)]
struct BiasReport<'a> {
    fix: &'static str,
    plan: &'a PlanSpec,
    datasets: &'a [BiasRow],
}

/// The plan applied by `--fix`, resolved per prompt.
pub fn fix_plan(fix: Fix, heads: &InContextHeads, a_c: f32) -> PlanSpec {
    match fix {
        Fix::Amplify => PlanSpec {
            amplify: Some(AmplifySpec {
                a_c,
                ..AmplifySpec::default()
            }),
            ..PlanSpec::default()
        },
        Fix::Strip => PlanSpec {
            strip: heads.all().into_iter().collect(),
            ..PlanSpec::default()
        },
        Fix::None => PlanSpec::default(),
    }
}

/// Bias metrics for one prompt family before and after `plan`.
pub fn bias_row(
    model: &Model,
    builder: &PromptBuilder<'_>,
    name: &str,
    specs: &[crate::icl::PromptSpec],
    heads: &InContextHeads,
    plan: &PlanSpec,
    seed: u64,
) -> crate::Result<BiasRow> {
    let variants = variant_sets(specs, seed)?;
    let set = |kind: VariantKind| -> crate::Result<Vec<PromptInstance>> {
        variants.iter().map(|v| builder.build_spec(v.get(kind))).collect()
    };
    let original = set(VariantKind::Original)?;
    let lackfoo = set(VariantKind::Lackfoo)?;
    let lackbar = set(VariantKind::Lackbar)?;
    let imbalanced = set(VariantKind::Imbalanced)?;
    let orderings = VariantKind::ORDERINGS.map(set);
    let [o0, o1, o2, o3] = orderings;
    let (o0, o1, o2, o3) = (o0?, o1?, o2?, o3?);

    let sets = Sets {
        original,
        lackfoo,
        lackbar,
        imbalanced,
        orderings: [o0, o1, o2, o3],
    };
    let before = measure(model, &sets, heads, |_| Ok(crate::InterventionPlan::default()))?;
    let after = measure(model, &sets, heads, |p| plan.resolve(p, heads))?;
    Ok(BiasRow {
        dataset: name.to_string(),
        majority: BeforeAfter {
            before: before.0,
            after: after.0,
        },
        recency: BeforeAfter {
            before: before.1,
            after: after.1,
        },
        mass_original: BeforeAfter {
            before: before.2,
            after: after.2,
        },
        mass_imbalanced: BeforeAfter {
            before: before.3,
            after: after.3,
        },
    })
}

struct Sets {
    original: Vec<PromptInstance>,
    lackfoo: Vec<PromptInstance>,
    lackbar: Vec<PromptInstance>,
    imbalanced: Vec<PromptInstance>,
    orderings: [Vec<PromptInstance>; 4],
}

fn measure<F>(
    model: &Model,
    sets: &Sets,
    heads: &InContextHeads,
    plan_for: F,
) -> crate::Result<(MajorityBias, RecencyBias, AttentionMass, AttentionMass)>
where
    F: Fn(&PromptInstance) -> crate::Result<crate::InterventionPlan> + Sync,
{
    let o = &sets.orderings;
    let ords: [&[PromptInstance]; 4] = [&o[0], &o[1], &o[2], &o[3]];
    Ok((
        majority_bias_metric(model, &sets.original, &sets.lackfoo, &sets.lackbar, &plan_for)?,
        recency_bias_metric(model, ords, heads, &plan_for)?,
        attention_mass_report(model, &sets.original, heads, &plan_for)?,
        attention_mass_report(model, &sets.imbalanced, heads, &plan_for)?,
    ))
}

fn bias_eval(s: &Session, heads: &InContextHeads, fix: Fix, out: &Path) -> CliResult<Vec<PathBuf>> {
    if heads.is_empty() && fix != Fix::None {
        return Err(usage("the heads report selects no in-context heads"));
    }
    let b = s.builder()?;
    let plan = fix_plan(fix, heads, s.config.a_c);
    let rows = s
        .specs()?
        .iter()
        .map(|(name, specs)| bias_row(&s.model, &b, name, specs, heads, &plan, s.config.seed))
        .collect::<crate::Result<Vec<_>>>()?;

    let header = s.header("bias-eval");
    let json = out.join("bias_eval.json");
    let csv = out.join("bias_eval.csv");
    report::write_json(
        &json,
        &header,
        &BiasReport {
            fix: fix.name(),
            plan: &plan,
            datasets: &rows,
        },
    )?;
    let mut lines = Vec::new();
    for r in &rows {
        let mut push = |metric: &str, before: Option<f32>, after: Option<f32>| {
            lines.push(vec![r.dataset.clone(), metric.to_string(), fmt_opt(before), fmt_opt(after)]);
        };
        let (mb, ma) = (&r.majority.before, &r.majority.after);
        push("acc_balanced", Some(mb.acc_balanced), Some(ma.acc_balanced));
        push("acc_lackfoo", Some(mb.acc_lackfoo), Some(ma.acc_lackfoo));
        push("acc_lackbar", Some(mb.acc_lackbar), Some(ma.acc_lackbar));
        push("majority_bias", Some(mb.bias), Some(ma.bias));
        let (rb, ra) = (&r.recency.before, &r.recency.after);
        for (i, kind) in VariantKind::ORDERINGS.iter().enumerate() {
            push(&format!("acc_{}", kind.name()), Some(rb.accuracies[i]), Some(ra.accuracies[i]));
        }
        push("acc_std", Some(rb.acc_std), Some(ra.acc_std));
        push("attn_std_foo", rb.attn_std_foo, ra.attn_std_foo);
        push("attn_std_bar", rb.attn_std_bar, ra.attn_std_bar);
        push("mass_foo_original", r.mass_original.before.foo, r.mass_original.after.foo);
        push("mass_bar_original", r.mass_original.before.bar, r.mass_original.after.bar);
        push("mass_foo_imbalanced", r.mass_imbalanced.before.foo, r.mass_imbalanced.after.foo);
        push("mass_bar_imbalanced", r.mass_imbalanced.before.bar, r.mass_imbalanced.after.bar);
    }
    report::write_csv(&csv, &header, &["dataset", "metric", "before", "after"], lines)?;
    Ok(vec![json, csv])
}
