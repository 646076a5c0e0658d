#![allow(dead_code)]

pub mod identities;
pub mod oracle;

use std::path::PathBuf;

use icl_scope::icl::{Label, PromptInstance};
use icl_scope::{Model, Tokenizer};
use serde_json::Value;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

pub fn bundle() -> Value {
    let s = std::fs::read_to_string(fixture("tiny_expected.json")).unwrap();
    serde_json::from_str(&s).unwrap()
}

pub fn tiny_model() -> Model {
    Model::load_inferred(fixture("tiny_model.safetensors"), None).unwrap()
}

pub fn gpt2_tokenizer() -> Tokenizer {
    Tokenizer::from_files(asset("gpt2/vocab.json"), asset("gpt2/merges.txt")).unwrap()
}

pub fn floats(v: &Value) -> Vec<f32> {
    v.as_array()
        .unwrap()
        .iter()
        .flat_map(|x| match x {
            Value::Array(_) => floats(x),
            _ => vec![x.as_f64().unwrap() as f32],
        })
        .collect()
}

pub fn ids(v: &Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

pub fn usizes(v: &Value) -> Vec<usize> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[track_caller]
pub fn assert_close(got: &[f32], want: &[f32], tol: f32, what: &str) {
    let d = max_abs_diff(got, want);
    assert!(d <= tol, "{what}: max abs diff {d} > {tol}");
}

/// The four symbolic sweep prompts of the fixture bundle.
pub fn sweep_prompts(b: &Value) -> Vec<PromptInstance> {
    let foo = b["foo_id"].as_u64().unwrap() as u32;
    let bar = b["bar_id"].as_u64().unwrap() as u32;
    b["sweep"]["prompts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let correct: Label = p["correct"].as_str().unwrap().parse().unwrap();
            PromptInstance::from_ids(
                ids(&p["ids"]),
                usizes(&p["foo_positions"]),
                usizes(&p["bar_positions"]),
                correct,
                foo,
                bar,
            )
            .unwrap()
        })
        .collect()
}
