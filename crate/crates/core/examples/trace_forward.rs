//! Forward pass with per-head tracing, and the head decomposition of one
//! attention block.
//!
//! `cargo run --example trace_forward [-- weights.safetensors]`

use icl_scope::{InterventionPlan, Model, ModelConfig, Tokenizer, TraceConfig};

fn main() -> icl_scope::Result<()> {
    let assets = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/gpt2");
    let tok = Tokenizer::from_files(format!("{assets}/vocab.json"), format!("{assets}/merges.txt"))?;
    let model = match std::env::args().nth(1) {
        Some(path) => Model::load_inferred(path, None)?,
        None => Model::random(ModelConfig::mini(), 0)?,
    };
    let cfg = model.config().clone();
    let ids = tok.encode("love : bar like : bar eight : foo two : foo one :");

    let trace_cfg = TraceConfig::all();
    println!(
        "capturing about {} KiB for {} tokens",
        trace_cfg.estimated_bytes(&cfg, ids.len()) / 1024,
        ids.len()
    );
    let out = model.forward(&ids, &trace_cfg, &InterventionPlan::default())?;

    let layer = cfg.n_layers - 1;
    let mut sum = model.weights().layers[layer].out_bias.clone();
    for h in 0..cfg.n_heads {
        let o = out.trace.head_output(layer, h)?;
        let alpha = out.trace.attention(layer, h)?;
        let peak = (0..alpha.len()).max_by(|&a, &b| alpha[a].total_cmp(&alpha[b])).unwrap();
        println!("head {layer}.{h}: strongest attention on position {peak} ({:.3})", alpha[peak]);
        sum.iter_mut().zip(o).for_each(|(s, v)| *s += v);
    }
    let block = out.trace.block_output(layer)?;
    let gap = sum.iter().zip(block).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("sum of head outputs + bias vs block output: max abs diff {gap:.2e}");

    let path = std::env::temp_dir().join("icl_scope_trace.json");
    out.trace.write_json(&path)?;
    println!("trace written to {}", path.display());
    Ok(())
}
