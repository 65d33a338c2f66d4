#![allow(dead_code)]

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use circuit_lens::checkpoint::{fold_model, FoldedModel};
use circuit_lens::synthetic::{write_safetensors, StoreDtype, ToyConfig, ToyModel};
use ndarray::ArrayD;

pub fn toy(cfg: &ToyConfig, seed: u64) -> (ToyModel, FoldedModel) {
    let t = ToyModel::random(cfg, seed);
    let m = fold_model(&t.raw).unwrap();
    (t, m)
}

/// Serialize arbitrary `f64` tensors under the given keys.
pub fn write_raw_safetensors(path: &Path, tensors: &[(String, ArrayD<f64>)]) {
    let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, a)| {
            let bytes = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.clone(), a.shape().to_vec(), bytes)
        })
        .collect();
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = encoded
        .iter()
        .map(|(k, s, b)| {
            let v = safetensors::tensor::TensorView::new(safetensors::Dtype::F64, s.clone(), b).unwrap();
            (k.clone(), v)
        })
        .collect();
    let bytes = safetensors::serialize(views, &None::<HashMap<String, String>>).unwrap();
    std::fs::write(path, bytes).unwrap();
}

/// A toy checkpoint plus a random-token corpus and calibration file.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub toy: ToyModel,
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub calibration_text: PathBuf,
}

pub fn fixture(cfg: &ToyConfig, seed: u64, texts: usize, len: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let toy = ToyModel::random(cfg, seed);
    let checkpoint = dir.path().join("model.safetensors");
    write_safetensors(&toy.raw, &checkpoint, StoreDtype::F32).unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &toy, texts, len, seed * 1000);
    let calibration_text = dir.path().join("calibration.jsonl");
    write_corpus(&calibration_text, &toy, 1, len, seed * 1000 + 999);
    Fixture {
        dir,
        toy,
        checkpoint,
        corpus,
        calibration_text,
    }
}

pub fn write_corpus(path: &Path, toy: &ToyModel, texts: usize, len: usize, seed: u64) {
    let mut f = std::fs::File::create(path).unwrap();
    for i in 0..texts {
        let ids = toy.random_tokens(len, seed + i as u64);
        let line = serde_json::json!({"label": format!("text-{i:03}"), "tokens": ids});
        writeln!(f, "{line}").unwrap();
    }
}

pub fn vocab_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/gpt2_vocab.json")
}
