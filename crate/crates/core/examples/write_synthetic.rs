//! Write a seeded synthetic checkpoint plus a random-token corpus.
//!
//! `cargo run --example write_synthetic -- <dir> [seed]`

use std::io::Write;
use std::path::PathBuf;

use circuit_lens::synthetic::{write_safetensors, StoreDtype, ToyConfig, ToyModel};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    std::fs::create_dir_all(&dir)?;
    let cfg = ToyConfig::medium();
    let toy = ToyModel::random(&cfg, seed);
    write_safetensors(&toy.raw, &dir.join("model.safetensors"), StoreDtype::F32)?;
    let mut corpus = std::fs::File::create(dir.join("corpus.jsonl"))?;
    for i in 0..8u64 {
        let ids = toy.random_tokens(cfg.n_ctx, seed * 1000 + i);
        writeln!(
            corpus,
            "{}",
            serde_json::json!({"label": format!("text-{i}"), "tokens": ids})
        )?;
    }
    println!("{}", dir.display());
    Ok(())
}
