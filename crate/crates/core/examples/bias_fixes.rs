//! Majority-label bias under minority amplification, and recency bias under
//! positional stripping.
//!
//! `cargo run --release --example bias_fixes [-- weights.safetensors heads.json]`

use icl_scope::attribution::InContextHeads;
use icl_scope::cli::{bias_row, fix_plan, Fix};
use icl_scope::icl::Dataset;
use icl_scope::{HeadId, Model, ModelConfig, PromptBuilder, Tokenizer};

fn main() -> icl_scope::Result<()> {
    let root = env!("CARGO_MANIFEST_DIR");
    let tok = Tokenizer::from_files(format!("{root}/assets/gpt2/vocab.json"), format!("{root}/assets/gpt2/merges.txt"))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.first() {
        Some(path) => Model::load_inferred(path, None)?,
        None => Model::random(ModelConfig::mini(), 0)?,
    };
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
    let words = Dataset::load(format!("{root}/assets/words/words.jsonl"))?;
    let specs = words.sample_prompts(10, 0)?;

    let amplify = bias_row(&model, &b, "words", &specs, &heads, &fix_plan(Fix::Amplify, &heads, 0.5), 0)?;
    let (before, after) = (&amplify.majority.before, &amplify.majority.after);
    println!(
        "majority bias, amplify a_c=0.5: {:.3} -> {:.3} (lackfoo {:.2} -> {:.2}, lackbar {:.2} -> {:.2})",
        before.bias, after.bias, before.acc_lackfoo, after.acc_lackfoo, before.acc_lackbar, after.acc_lackbar
    );

    let strip = bias_row(&model, &b, "words", &specs, &heads, &fix_plan(Fix::Strip, &heads, 0.0), 0)?;
    let (before, after) = (&strip.recency.before, &strip.recency.after);
    println!("recency, strip: accuracy std {:.3} -> {:.3}", before.acc_std, after.acc_std);
    println!(
        "recency, strip: attention std foo {:?} -> {:?}, bar {:?} -> {:?}",
        before.attn_std_foo, after.attn_std_foo, before.attn_std_bar, after.attn_std_bar
    );
    Ok(())
}
