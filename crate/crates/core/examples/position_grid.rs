//! Logit minus and attention at foo and bar positions inside the two head
//! groups, and how the grid moves when the labels are exchanged.
//!
//! `cargo run --release --example position_grid [-- weights.safetensors heads.json]`

use icl_scope::attribution::{grid_change, position_report, InContextHeads};
use icl_scope::icl::{variant_sets, Dataset, VariantKind};
use icl_scope::{HeadId, Label, Model, ModelConfig, PromptBuilder, Tokenizer};

fn main() -> icl_scope::Result<()> {
    let root = env!("CARGO_MANIFEST_DIR");
    let tok = Tokenizer::from_files(format!("{root}/assets/gpt2/vocab.json"), format!("{root}/assets/gpt2/merges.txt"))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.first() {
        Some(path) => Model::load_inferred(path, None)?,
        None => Model::random(ModelConfig::mini(), 0)?,
    };
    // without a heads report, use one head of each group in the last layer
    let heads = match args.get(1) {
        Some(path) => InContextHeads::load(path)?,
        None => {
            let last = model.config().n_layers - 1;
            InContextHeads {
                fooheads: [HeadId::new(last, 0)].into(),
                barheads: [HeadId::new(last, 1)].into(),
            }
        }
    };
    let b = PromptBuilder::new(&tok)?.with_context_limit(model.config().n_ctx);
    let sst2 = Dataset::load(format!("{root}/assets/data/sst2.jsonl"))?;
    let variants = variant_sets(&sst2.sample_prompts(8, 1)?, 1)?;
    let build = |kind| variants.iter().map(|v| b.build_spec(v.get(kind))).collect::<icl_scope::Result<Vec<_>>>();

    let (foo, bar) = (b.label_id(Label::Foo), b.label_id(Label::Bar));
    let original = position_report(&model, &build(VariantKind::Original)?, &heads, foo, bar)?;
    let flipped = position_report(&model, &build(VariantKind::Flipped)?, &heads, foo, bar)?;

    println!("{:6} {:>14} {:>10} {:>8}", "cell", "minus·α", "minus", "attn");
    for (name, cell) in original.cells() {
        let f = |v: Option<f32>| v.map_or("-".into(), |x| format!("{x:.4}"));
        println!("{name:6} {:>14} {:>10} {:>8}", f(cell.minus_weighted), f(cell.minus), f(cell.attn));
    }
    println!("label-position share of |minus·α|: {:?}", original.label_share);
    for c in grid_change(&original, &flipped) {
        println!("{} after exchanging labels: attn {:?}%", c.cell, c.attn_pct);
    }
    Ok(())
}
