//! Intervention plans: JSON specs resolved against a prompt, and their
//! effect on the label logits.
//!
//! `cargo run --example interventions [-- weights.safetensors]`

use icl_scope::attribution::InContextHeads;
use icl_scope::{HeadId, Label, Model, ModelConfig, PlanSpec, PromptBuilder, Tokenizer, TraceConfig};

fn main() -> icl_scope::Result<()> {
    let root = env!("CARGO_MANIFEST_DIR");
    let tok = Tokenizer::from_files(format!("{root}/assets/gpt2/vocab.json"), format!("{root}/assets/gpt2/merges.txt"))?;
    let model = match std::env::args().nth(1) {
        Some(path) => Model::load_inferred(path, None)?,
        None => Model::random(ModelConfig::mini(), 0)?,
    };
    let last = model.config().n_layers - 1;
    let heads = InContextHeads {
        fooheads: [HeadId::new(last, 0)].into(),
        barheads: [HeadId::new(last, 1)].into(),
    };
    // one foo demonstration against two bar demonstrations
    let b = PromptBuilder::new(&tok)?;
    let prompt = b.build(&[("love", Label::Bar), ("like", Label::Bar), ("eight", Label::Foo)], "one", Label::Foo)?;

    let specs = [
        ("none", "{}".to_string()),
        ("ablate", format!(r#"{{"ablate": [[{last}, 0]]}}"#)),
        ("strip", format!(r#"{{"strip": [[{last}, 0], [{last}, 1]]}}"#)),
        ("amplify", r#"{"amplify": {"a_c": 0.5}}"#.to_string()),
    ];
    for (name, json) in specs {
        let plan = PlanSpec::from_json(&json)?.resolve(&prompt, &heads)?;
        let out = model.forward_last(&prompt.ids, &TraceConfig::disabled(), &plan)?;
        let l = out.last_logits();
        let gap = l[prompt.token_id(Label::Foo) as usize] - l[prompt.token_id(Label::Bar) as usize];
        println!("{name:8} foo - bar logit gap {gap:+.4}   {json}");
    }
    Ok(())
}
