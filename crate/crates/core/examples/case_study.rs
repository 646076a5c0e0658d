//! Locate-and-project readout of one head: value-output and key vectors at
//! the label positions and the query at the last position, each projected
//! onto the vocabulary.
//!
//! `cargo run --example case_study [-- gpt2-large.safetensors [layer head]]`

use icl_scope::cli::CASE_STUDY_PROMPT;
use icl_scope::lens::case_study;
use icl_scope::{Lens, Model, ModelConfig, Tokenizer};

fn main() -> icl_scope::Result<()> {
    let assets = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/gpt2");
    let tok = Tokenizer::from_files(format!("{assets}/vocab.json"), format!("{assets}/merges.txt"))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.first() {
        Some(path) => Model::load_inferred(path, None)?,
        None => Model::random(ModelConfig::mini(), 0)?,
    };
    let cfg = model.config();
    let layer = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(cfg.n_layers * 2 / 3);
    let head = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let (foo, bar) = (tok.single_token_id(" foo")?, tok.single_token_id(" bar")?);
    let study = case_study(&Lens::new(&model), &tok, CASE_STUDY_PROMPT, layer, head, 8, foo, bar)?;
    println!("{}", study.text);
    println!("prediction: {} (foo {:.3}, bar {:.3})", study.prediction, study.logit_foo, study.logit_bar);
    println!("head {layer}.{head}");
    for row in &study.rows {
        println!("{:>9}  {}", row.name, row.top.trimmed_tokens().join(", "));
    }
    Ok(())
}
