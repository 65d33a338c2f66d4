//! Seeded synthetic first-layer checkpoints.
//!
//! Used by the test suites and by `inspect --synthetic` for smoke runs when no
//! published checkpoint is at hand. The weights loosely mimic GPT-2's first
//! layer: uncentered token embeddings with a spread of norms, smooth position
//! embeddings, non-trivial LayerNorm affines.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{names, NameMap, RawArrayEntry, RawArrayManifest, RawCheckpoint, DIRECTORY_MANIFEST};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_voc: usize,
    pub n_ctx: usize,
    pub d_mlp: usize,
    /// Scale of the query/key projections; larger values sharpen attention.
    pub qk_scale: f64,
    /// Amplitude of the position embedding relative to token embeddings.
    pub pos_scale: f64,
}

impl ToyConfig {
    /// The 2-head toy used throughout the unit tests.
    pub fn small() -> Self {
        ToyConfig {
            d_model: 8,
            n_heads: 2,
            d_voc: 11,
            n_ctx: 16,
            d_mlp: 12,
            qk_scale: 1.0,
            pos_scale: 0.6,
        }
    }

    /// A wider toy with GPT-2's head count, long enough for kernel
    /// classification.
    pub fn medium() -> Self {
        ToyConfig {
            d_model: 48,
            n_heads: 12,
            d_voc: 97,
            n_ctx: 256,
            d_mlp: 64,
            qk_scale: 1.0,
            pos_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub raw: RawCheckpoint,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, mean: f64, sd: f64) -> Array1<f64> {
    let normal = Normal::new(mean, sd).expect("finite sd");
    Array1::from_shape_fn(len, |_| normal.sample(rng))
}

impl ToyModel {
    pub fn random(cfg: &ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let mut w_e = gaussian_matrix(&mut rng, cfg.d_voc, d, inv_sqrt_d);
        for mut row in w_e.rows_mut() {
            let norm = row.dot(&row).sqrt();
            let target = rng.random_range(2.5..4.5);
            row.mapv_inplace(|x| x * target / norm);
        }
        // Shared offset: removed by centering, invisible to LayerNorm.
        let offset = gaussian_vector(&mut rng, d, 0.0, 0.3);
        w_e += &offset;

        let freqs: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.2..3.0) / cfg.n_ctx as f64 * std::f64::consts::PI)
            .collect();
        let phases: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let amp = 3.5 * cfg.pos_scale * inv_sqrt_d * 1.41;
        let w_pos = Array2::from_shape_fn((cfg.n_ctx, d), |(i, k)| {
            amp * (freqs[k] * i as f64 + phases[k]).sin() + 0.1
        });

        let qk_sd = cfg.qk_scale * inv_sqrt_d;
        let mut t = BTreeMap::new();
        let mut put = |n: &str, a: ArrayD<f64>| {
            t.insert(n.to_string(), a);
        };
        put(names::TOKEN_EMBEDDING, w_e.into_dyn());
        put(names::POS_EMBEDDING, w_pos.into_dyn());
        put(names::LN1_WEIGHT, gaussian_vector(&mut rng, d, 1.0, 0.1).into_dyn());
        put(names::LN1_BIAS, gaussian_vector(&mut rng, d, 0.0, 0.05).into_dyn());
        put(names::Q_WEIGHT, gaussian_matrix(&mut rng, d, d, qk_sd).into_dyn());
        put(names::K_WEIGHT, gaussian_matrix(&mut rng, d, d, qk_sd).into_dyn());
        put(names::V_WEIGHT, gaussian_matrix(&mut rng, d, d, inv_sqrt_d).into_dyn());
        put(names::Q_BIAS, gaussian_vector(&mut rng, d, 0.0, 0.1).into_dyn());
        put(names::K_BIAS, gaussian_vector(&mut rng, d, 0.0, 0.1).into_dyn());
        put(names::V_BIAS, gaussian_vector(&mut rng, d, 0.0, 0.1).into_dyn());
        put(
            names::ATTN_OUT_WEIGHT,
            gaussian_matrix(&mut rng, d, d, inv_sqrt_d).into_dyn(),
        );
        put(names::ATTN_OUT_BIAS, gaussian_vector(&mut rng, d, 0.0, 0.1).into_dyn());
        put(names::LN2_WEIGHT, gaussian_vector(&mut rng, d, 1.0, 0.1).into_dyn());
        put(names::LN2_BIAS, gaussian_vector(&mut rng, d, 0.0, 0.05).into_dyn());
        put(
            names::MLP_IN_WEIGHT,
            gaussian_matrix(&mut rng, d, cfg.d_mlp, inv_sqrt_d).into_dyn(),
        );
        put(
            names::MLP_IN_BIAS,
            gaussian_vector(&mut rng, cfg.d_mlp, 0.0, 0.1).into_dyn(),
        );

        let digest = format!("synthetic-{seed:016x}");
        let raw = RawCheckpoint::from_tensors(t, cfg.n_heads, digest).expect("synthetic tensors are consistent");
        ToyModel { config: *cfg, raw }
    }

    /// Random token sequence of length `len`.
    pub fn random_tokens(&self, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(0..self.config.d_voc)).collect()
    }
}

/// Element type used when writing containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreDtype {
    F32,
    F64,
}

impl StoreDtype {
    fn tag(self) -> &'static str {
        match self {
            StoreDtype::F32 => "F32",
            StoreDtype::F64 => "F64",
        }
    }

    fn encode(self, values: impl Iterator<Item = f64>) -> Vec<u8> {
        match self {
            StoreDtype::F32 => values.flat_map(|v| (v as f32).to_le_bytes()).collect(),
            StoreDtype::F64 => values.flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

/// Container-keyed tensors in the Hugging Face GPT-2 layout (packed qkv).
fn gpt2_style_tensors(raw: &RawCheckpoint) -> Vec<(String, ArrayD<f64>)> {
    let map = NameMap::gpt2_hf();
    let mut out = Vec::new();
    for name in map.required() {
        let key = map.tensors[name].clone();
        let value = match name {
            names::QKV_WEIGHT => {
                let parts: Vec<_> = [names::Q_WEIGHT, names::K_WEIGHT, names::V_WEIGHT]
                    .iter()
                    .map(|n| raw.matrix(n).expect("canonical"))
                    .collect();
                concatenate(Axis(1), &parts).expect("same rows").into_dyn()
            }
            names::QKV_BIAS => {
                let parts: Vec<_> = [names::Q_BIAS, names::K_BIAS, names::V_BIAS]
                    .iter()
                    .map(|n| raw.vector(n).expect("canonical"))
                    .collect();
                concatenate(Axis(0), &parts).expect("vectors").into_dyn()
            }
            other => raw.tensors[other].clone(),
        };
        out.push((key, value));
    }
    out
}

/// Name map matching [`write_safetensors`] / [`write_directory`] output.
pub fn gpt2_style_name_map(n_heads: usize) -> NameMap {
    NameMap {
        n_heads,
        ..NameMap::gpt2_hf()
    }
}

/// Write `raw` as a safetensors file with GPT-2 key names and packed qkv.
pub fn write_safetensors(raw: &RawCheckpoint, path: &Path, dtype: StoreDtype) -> Result<()> {
    let tensors = gpt2_style_tensors(raw);
    let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, a)| (k.clone(), a.shape().to_vec(), dtype.encode(a.iter().copied())))
        .collect();
    let st_dtype = match dtype {
        StoreDtype::F32 => safetensors::Dtype::F32,
        StoreDtype::F64 => safetensors::Dtype::F64,
    };
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = encoded
        .iter()
        .map(|(k, shape, bytes)| {
            let view = safetensors::tensor::TensorView::new(st_dtype, shape.clone(), bytes).expect("consistent view");
            (k.clone(), view)
        })
        .collect();
    let bytes =
        safetensors::serialize(views, &None::<HashMap<String, String>>).map_err(|e| Error::UnreadableContainer {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `raw` in the directory-of-raw-arrays layout.
pub fn write_directory(raw: &RawCheckpoint, dir: &Path, dtype: StoreDtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = RawArrayManifest::default();
    for (i, (key, arr)) in gpt2_style_tensors(raw).into_iter().enumerate() {
        let file = format!("t{i:02}.bin");
        let path = dir.join(&file);
        fs::write(&path, dtype.encode(arr.iter().copied())).map_err(|e| Error::io(&path, e))?;
        manifest.tensors.insert(
            key,
            RawArrayEntry {
                dtype: dtype.tag().to_string(),
                shape: arr.shape().to_vec(),
                file,
            },
        );
    }
    let path = dir.join(DIRECTORY_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
