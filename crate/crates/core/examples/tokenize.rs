//! Byte-level BPE encoding and the in-context prompt layout.
//!
//! `cargo run --example tokenize`

use icl_scope::{Label, PromptBuilder, Tokenizer};

fn main() -> icl_scope::Result<()> {
    let assets = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/gpt2");
    let tok = Tokenizer::from_files(format!("{assets}/vocab.json"), format!("{assets}/merges.txt"))?;

    for text in [" foo", " bar", "antidisestablishment", "naïve café 🙂"] {
        let ids = tok.encode(text);
        let pieces: Vec<String> = ids.iter().map(|&i| tok.token_text(i)).collect();
        println!("{text:?} -> {ids:?} {pieces:?}");
    }

    let b = PromptBuilder::new(&tok)?;
    let demos = [("love", Label::Bar), ("like", Label::Bar), ("eight", Label::Foo), ("two", Label::Foo)];
    let p = b.build(&demos, "one", Label::Foo)?;
    println!("{}", p.text);
    println!("bar at {:?}, foo at {:?}, last at {}", p.bar_positions, p.foo_positions, p.last());
    Ok(())
}
