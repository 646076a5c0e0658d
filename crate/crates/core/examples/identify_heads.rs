//! Ablation and direct-score sweeps over the deep layers, then the top-k
//! intersection that picks fooheads and barheads.
//!
//! `cargo run --release --example identify_heads [-- weights.safetensors]`

use icl_scope::attribution::{
    ablation_sweep, deep_layers, near_misses, score_sweep, select_in_context_heads, HeadRanking,
};
use icl_scope::icl::Dataset;
use icl_scope::{Model, ModelConfig, PromptBuilder, Tokenizer};

fn main() -> icl_scope::Result<()> {
    let root = env!("CARGO_MANIFEST_DIR");
    let tok = Tokenizer::from_files(format!("{root}/assets/gpt2/vocab.json"), format!("{root}/assets/gpt2/merges.txt"))?;
    let model = match std::env::args().nth(1) {
        Some(path) => Model::load_inferred(path, None)?,
        None => Model::random(ModelConfig::mini(), 0)?,
    };
    let builder = PromptBuilder::new(&tok)?.with_context_limit(model.config().n_ctx);

    let mut prompts = Vec::new();
    for (i, ds) in Dataset::load_dir(format!("{root}/assets/data"))?.iter().enumerate() {
        prompts.extend(builder.build_all(&ds.sample_prompts(6, i as u64)?)?);
    }
    let layers = deep_layers(model.config());
    println!("{} prompts, sweeping layers {layers:?}", prompts.len());

    let ablation = ablation_sweep(&model, &prompts, layers.clone())?;
    println!("base accuracy: foo {:?}, bar {:?}", ablation.base.foo, ablation.base.bar);
    let scores = score_sweep(&model, &prompts, layers)?;
    let ranking = HeadRanking::new(&ablation, &scores)?;

    let k = 3;
    let heads = select_in_context_heads(&ranking, k);
    let show = |s: &std::collections::BTreeSet<icl_scope::HeadId>| {
        s.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" ")
    };
    println!("fooheads: {}", show(&heads.fooheads));
    println!("barheads: {}", show(&heads.barheads));
    for m in near_misses(&ranking, k, k + 2) {
        println!(
            "near miss {}.{} for {}: ablation rank {}, score rank {}",
            m.layer, m.head, m.label, m.rank_ablation, m.rank_score
        );
    }
    Ok(())
}
