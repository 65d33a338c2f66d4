//! Checkpoint loading and LayerNorm folding.
//!
//! A checkpoint is read from a named-tensor container (a safetensors file, or
//! a directory of raw little-endian arrays described by `shapes.json`). The
//! [`NameMap`] translates container keys into canonical names and tells the
//! loader how the query/key/value projection is packed. Only the first-layer
//! tensors are read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Canonical tensor names held by a [`RawCheckpoint`] after loading.
pub mod names {
    pub const TOKEN_EMBEDDING: &str = "token_embedding";
    pub const POS_EMBEDDING: &str = "pos_embedding";
    pub const LN1_WEIGHT: &str = "h0.ln1_weight";
    pub const LN1_BIAS: &str = "h0.ln1_bias";
    pub const Q_WEIGHT: &str = "h0.q_weight";
    pub const K_WEIGHT: &str = "h0.k_weight";
    pub const V_WEIGHT: &str = "h0.v_weight";
    pub const Q_BIAS: &str = "h0.q_bias";
    pub const K_BIAS: &str = "h0.k_bias";
    pub const V_BIAS: &str = "h0.v_bias";
    pub const QKV_WEIGHT: &str = "h0.qkv_weight";
    pub const QKV_BIAS: &str = "h0.qkv_bias";
    pub const ATTN_OUT_WEIGHT: &str = "h0.attn_out_weight";
    pub const ATTN_OUT_BIAS: &str = "h0.attn_out_bias";
    pub const LN2_WEIGHT: &str = "h0.ln2_weight";
    pub const LN2_BIAS: &str = "h0.ln2_bias";
    pub const MLP_IN_WEIGHT: &str = "h0.mlp_in_weight";
    pub const MLP_IN_BIAS: &str = "h0.mlp_in_bias";

    /// Names every loaded checkpoint carries (query/key/value always split).
    pub const CANONICAL: [&str; 16] = [
        TOKEN_EMBEDDING,
        POS_EMBEDDING,
        LN1_WEIGHT,
        LN1_BIAS,
        Q_WEIGHT,
        K_WEIGHT,
        V_WEIGHT,
        Q_BIAS,
        K_BIAS,
        V_BIAS,
        ATTN_OUT_WEIGHT,
        ATTN_OUT_BIAS,
        LN2_WEIGHT,
        LN2_BIAS,
        MLP_IN_WEIGHT,
        MLP_IN_BIAS,
    ];

    pub(crate) const SHARED: [&str; 10] = [
        TOKEN_EMBEDDING,
        POS_EMBEDDING,
        LN1_WEIGHT,
        LN1_BIAS,
        ATTN_OUT_WEIGHT,
        ATTN_OUT_BIAS,
        LN2_WEIGHT,
        LN2_BIAS,
        MLP_IN_WEIGHT,
        MLP_IN_BIAS,
    ];
    pub(crate) const PACKED: [&str; 2] = [QKV_WEIGHT, QKV_BIAS];
    pub(crate) const SPLIT: [&str; 6] = [Q_WEIGHT, K_WEIGHT, V_WEIGHT, Q_BIAS, K_BIAS, V_BIAS];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_model: usize,
    pub d_voc: usize,
    pub n_ctx: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
}

impl Dims {
    fn validate(&self) -> Result<()> {
        let all_positive = [
            self.d_model,
            self.d_voc,
            self.n_ctx,
            self.n_heads,
            self.d_head,
            self.d_mlp,
        ]
        .iter()
        .all(|&x| x > 0);
        if !all_positive || self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidNameMap(format!("inconsistent dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightLayout {
    /// `[in, out]`, multiplied as `x · W` (GPT-2 `Conv1D`).
    #[default]
    InOut,
    /// `[out, in]`, multiplied as `x · Wᵀ` (torch `Linear`).
    OutIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QkvPart {
    Q,
    K,
    V,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "packing", rename_all = "snake_case")]
pub enum QkvPacking {
    /// One `[d_model, 3·d_model]` tensor sliced along the output axis.
    Packed {
        order: [QkvPart; 3],
    },
    Split,
}

/// Maps canonical tensor names to container keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameMap {
    pub n_heads: usize,
    #[serde(default)]
    pub weight_layout: WeightLayout,
    pub qkv: QkvPacking,
    pub tensors: BTreeMap<String, String>,
}

impl NameMap {
    /// Key names used by the Hugging Face `gpt2` safetensors export.
    pub fn gpt2_hf() -> Self {
        let pairs = [
            (names::TOKEN_EMBEDDING, "wte.weight"),
            (names::POS_EMBEDDING, "wpe.weight"),
            (names::LN1_WEIGHT, "h.0.ln_1.weight"),
            (names::LN1_BIAS, "h.0.ln_1.bias"),
            (names::QKV_WEIGHT, "h.0.attn.c_attn.weight"),
            (names::QKV_BIAS, "h.0.attn.c_attn.bias"),
            (names::ATTN_OUT_WEIGHT, "h.0.attn.c_proj.weight"),
            (names::ATTN_OUT_BIAS, "h.0.attn.c_proj.bias"),
            (names::LN2_WEIGHT, "h.0.ln_2.weight"),
            (names::LN2_BIAS, "h.0.ln_2.bias"),
            (names::MLP_IN_WEIGHT, "h.0.mlp.c_fc.weight"),
            (names::MLP_IN_BIAS, "h.0.mlp.c_fc.bias"),
        ];
        NameMap {
            n_heads: 12,
            weight_layout: WeightLayout::InOut,
            qkv: QkvPacking::Packed {
                order: [QkvPart::Q, QkvPart::K, QkvPart::V],
            },
            tensors: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Identity map over the canonical split names.
    pub fn canonical(n_heads: usize) -> Self {
        NameMap {
            n_heads,
            weight_layout: WeightLayout::InOut,
            qkv: QkvPacking::Split,
            tensors: names::CANONICAL
                .iter()
                .map(|n| (n.to_string(), n.to_string()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Canonical names this map must provide.
    pub fn required(&self) -> Vec<&'static str> {
        let mut req: Vec<&'static str> = names::SHARED.to_vec();
        match self.qkv {
            QkvPacking::Packed { .. } => req.extend(names::PACKED),
            QkvPacking::Split => req.extend(names::SPLIT),
        }
        req
    }

    fn key(&self, canonical: &str) -> Result<&str> {
        self.tensors
            .get(canonical)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingTensor(canonical.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::InvalidNameMap("n_heads must be positive".into()));
        }
        if let QkvPacking::Packed { order } = &self.qkv {
            let mut seen = [false; 3];
            for part in order {
                seen[*part as usize] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::InvalidNameMap("qkv order must name q, k and v once each".into()));
            }
        }
        Ok(())
    }
}

/// Unprocessed first-layer tensors, keyed by canonical name, in 64-bit.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub dims: Dims,
    /// Hex SHA-256 of the container bytes.
    pub digest: String,
}

impl RawCheckpoint {
    /// Build from canonical split tensors, checking names and shapes.
    pub fn from_tensors(tensors: BTreeMap<String, ArrayD<f64>>, n_heads: usize, digest: String) -> Result<Self> {
        for name in names::CANONICAL {
            if !tensors.contains_key(name) {
                return Err(Error::MissingTensor(name.to_string()));
            }
        }
        let dims = infer_dims(&tensors, n_heads)?;
        let raw = RawCheckpoint { tensors, dims, digest };
        raw.check_shapes()?;
        Ok(raw)
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        t.view().into_dimensionality().map_err(|_| Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![0, 0],
            found: t.shape().to_vec(),
        })
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        t.view().into_dimensionality().map_err(|_| Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![0],
            found: t.shape().to_vec(),
        })
    }

    fn expected_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.dims;
        vec![
            (names::TOKEN_EMBEDDING, vec![d.d_voc, d.d_model]),
            (names::POS_EMBEDDING, vec![d.n_ctx, d.d_model]),
            (names::LN1_WEIGHT, vec![d.d_model]),
            (names::LN1_BIAS, vec![d.d_model]),
            (names::Q_WEIGHT, vec![d.d_model, d.d_model]),
            (names::K_WEIGHT, vec![d.d_model, d.d_model]),
            (names::V_WEIGHT, vec![d.d_model, d.d_model]),
            (names::Q_BIAS, vec![d.d_model]),
            (names::K_BIAS, vec![d.d_model]),
            (names::V_BIAS, vec![d.d_model]),
            (names::ATTN_OUT_WEIGHT, vec![d.d_model, d.d_model]),
            (names::ATTN_OUT_BIAS, vec![d.d_model]),
            (names::LN2_WEIGHT, vec![d.d_model]),
            (names::LN2_BIAS, vec![d.d_model]),
            (names::MLP_IN_WEIGHT, vec![d.d_model, d.d_mlp]),
            (names::MLP_IN_BIAS, vec![d.d_mlp]),
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        for (name, expected) in self.expected_shapes() {
            let found = self.tensors[name].shape().to_vec();
            if found != expected {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

fn infer_dims(tensors: &BTreeMap<String, ArrayD<f64>>, n_heads: usize) -> Result<Dims> {
    let shape_of = |name: &str, rank: usize| -> Result<Vec<usize>> {
        let shape = tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?
            .shape()
            .to_vec();
        if shape.len() != rank {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![0; rank],
                found: shape,
            });
        }
        Ok(shape)
    };
    let te = shape_of(names::TOKEN_EMBEDDING, 2)?;
    let pe = shape_of(names::POS_EMBEDDING, 2)?;
    let mlp = shape_of(names::MLP_IN_WEIGHT, 2)?;
    let d_model = te[1];
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::InvalidNameMap(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    let dims = Dims {
        d_model,
        d_voc: te[0],
        n_ctx: pe[0],
        n_heads,
        d_head: d_model / n_heads,
        d_mlp: mlp[1],
    };
    dims.validate()?;
    Ok(dims)
}

/// Supported element types of container payloads.
fn decode_le(dtype: &str, bytes: &[u8], name: &str) -> Result<Vec<f64>> {
    let bad = |reason: String| Error::UnreadableContainer {
        path: name.into(),
        reason,
    };
    match dtype {
        "F32" => {
            if !bytes.len().is_multiple_of(4) {
                return Err(bad("payload length not a multiple of 4".into()));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }
        "F64" => {
            if !bytes.len().is_multiple_of(8) {
                return Err(bad("payload length not a multiple of 8".into()));
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        }
        other => Err(bad(format!("unsupported dtype {other}"))),
    }
}

/// Per-tensor entry of a directory layout's `shapes.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawArrayEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// `shapes.json` of the directory-of-raw-arrays layout.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawArrayManifest {
    pub tensors: BTreeMap<String, RawArrayEntry>,
}

pub const DIRECTORY_MANIFEST: &str = "shapes.json";

/// Reads tensors by container key.
trait TensorReader {
    fn read(&self, key: &str) -> Result<Option<ArrayD<f64>>>;
}

struct SafetensorsReader<'a> {
    st: safetensors::SafeTensors<'a>,
}

impl TensorReader for SafetensorsReader<'_> {
    fn read(&self, key: &str) -> Result<Option<ArrayD<f64>>> {
        let view = match self.st.tensor(key) {
            Ok(v) => v,
            Err(safetensors::SafeTensorError::TensorNotFound(_)) => return Ok(None),
            Err(e) => {
                return Err(Error::UnreadableContainer {
                    path: key.into(),
                    reason: e.to_string(),
                })
            }
        };
        let dtype = match view.dtype() {
            safetensors::Dtype::F32 => "F32",
            safetensors::Dtype::F64 => "F64",
            other => {
                return Err(Error::UnreadableContainer {
                    path: key.into(),
                    reason: format!("unsupported dtype {other:?}"),
                })
            }
        };
        let data = decode_le(dtype, view.data(), key)?;
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| Error::UnreadableContainer {
            path: key.into(),
            reason: e.to_string(),
        })?;
        Ok(Some(arr))
    }
}

struct DirectoryReader<'a> {
    root: &'a Path,
    manifest: RawArrayManifest,
}

impl TensorReader for DirectoryReader<'_> {
    fn read(&self, key: &str) -> Result<Option<ArrayD<f64>>> {
        let Some(entry) = self.manifest.tensors.get(key) else {
            return Ok(None);
        };
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::UnreadableContainer {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let data = decode_le(&entry.dtype, &bytes, key)?;
        let expected: usize = entry.shape.iter().product();
        if data.len() != expected {
            return Err(Error::UnreadableContainer {
                path,
                reason: format!("{} elements, shape implies {expected}", data.len()),
            });
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("length checked");
        Ok(Some(arr))
    }
}

/// Load the first-layer tensors of a checkpoint.
///
/// `path` is either a safetensors file or a directory holding
/// [`DIRECTORY_MANIFEST`] plus one raw array file per tensor.
pub fn load_checkpoint(path: &Path, name_map: &NameMap) -> Result<RawCheckpoint> {
    name_map.validate()?;
    for name in name_map.required() {
        name_map.key(name)?;
    }
    if path.is_dir() {
        let manifest_path = path.join(DIRECTORY_MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::UnreadableContainer {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let manifest: RawArrayManifest = serde_json::from_str(&text).map_err(|e| Error::UnreadableContainer {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        for entry in manifest.tensors.values() {
            let p = path.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::UnreadableContainer {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            hasher.update(&bytes);
        }
        let digest = hex::encode(hasher.finalize());
        let reader = DirectoryReader { root: path, manifest };
        assemble(&reader, name_map, digest)
    } else {
        let bytes = fs::read(path).map_err(|e| Error::UnreadableContainer {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::UnreadableContainer {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        assemble(&SafetensorsReader { st }, name_map, digest)
    }
}

fn assemble(reader: &dyn TensorReader, map: &NameMap, digest: String) -> Result<RawCheckpoint> {
    let mut tensors = BTreeMap::new();
    for name in map.required() {
        let key = map.key(name)?;
        let mut arr = reader
            .read(key)?
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let is_projection = matches!(
            name,
            names::QKV_WEIGHT
                | names::Q_WEIGHT
                | names::K_WEIGHT
                | names::V_WEIGHT
                | names::ATTN_OUT_WEIGHT
                | names::MLP_IN_WEIGHT
        );
        if is_projection && map.weight_layout == WeightLayout::OutIn && arr.ndim() == 2 {
            arr = arr.reversed_axes().as_standard_layout().into_owned();
        }
        tensors.insert(name.to_string(), arr);
    }
    if let QkvPacking::Packed { order } = &map.qkv {
        let w = tensors.remove(names::QKV_WEIGHT).expect("required");
        let b = tensors.remove(names::QKV_BIAS).expect("required");
        let w: Array2<f64> = w.into_dimensionality().map_err(|_| Error::ShapeMismatch {
            name: names::QKV_WEIGHT.into(),
            expected: vec![0, 0],
            found: vec![],
        })?;
        let b: Array1<f64> = b.into_dimensionality().map_err(|_| Error::ShapeMismatch {
            name: names::QKV_BIAS.into(),
            expected: vec![0],
            found: vec![],
        })?;
        let d = w.nrows();
        if w.ncols() != 3 * d || b.len() != 3 * d {
            return Err(Error::ShapeMismatch {
                name: names::QKV_WEIGHT.into(),
                expected: vec![d, 3 * d],
                found: w.shape().to_vec(),
            });
        }
        for (slot, part) in order.iter().enumerate() {
            let (wn, bn) = match part {
                QkvPart::Q => (names::Q_WEIGHT, names::Q_BIAS),
                QkvPart::K => (names::K_WEIGHT, names::K_BIAS),
                QkvPart::V => (names::V_WEIGHT, names::V_BIAS),
            };
            let cols = slot * d..(slot + 1) * d;
            tensors.insert(wn.to_string(), w.slice(s![.., cols.clone()]).to_owned().into_dyn());
            tensors.insert(bn.to_string(), b.slice(s![cols]).to_owned().into_dyn());
        }
    }
    RawCheckpoint::from_tensors(tensors, map.n_heads, digest)
}

/// Query/key/value/output weights of one head after folding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `[d_model, d_head]`
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_q: Array1<f64>,
    pub b_k: Array1<f64>,
    pub b_v: Array1<f64>,
    /// `[d_head, d_model]`, output rows centered.
    pub w_o: Array2<f64>,
}

/// Centered, LayerNorm-folded first layer.
///
/// With this weight set the first LayerNorm reduces to `√d · r / ‖r‖` on the
/// (already centered) residual and the second to division by the RMS of the
/// centered post-attention residual.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedModel {
    pub dims: Dims,
    /// `[d_voc, d_model]`, rows sum to zero.
    pub w_e: Array2<f64>,
    /// `[n_ctx, d_model]`, rows sum to zero.
    pub w_pos: Array2<f64>,
    pub heads: Vec<HeadWeights>,
    /// Attention output bias, centered.
    pub b_o: Array1<f64>,
    /// `[d_model, d_mlp]` with the second LayerNorm gain folded in.
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub digest: String,
}

fn check_finite(raw: &RawCheckpoint) -> Result<()> {
    for (name, t) in &raw.tensors {
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteWeight(name.clone()));
        }
    }
    Ok(())
}

fn center_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let means = m.mean_axis(Axis(1)).expect("non-empty rows");
    let mut out = m.to_owned();
    for (mut row, mean) in out.rows_mut().into_iter().zip(means.iter()) {
        row.mapv_inplace(|x| x - mean);
    }
    out
}

/// `diag(gain) · W` and `bias · W + b`.
fn fold_affine(
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let mut folded = w.to_owned();
    for (mut row, g) in folded.rows_mut().into_iter().zip(gain.iter()) {
        row.mapv_inplace(|x| x * g);
    }
    let b_new = bias.dot(&w) + b;
    (folded, b_new)
}

/// Center the embeddings and absorb both LayerNorm affines.
pub fn fold_model(raw: &RawCheckpoint) -> Result<FoldedModel> {
    check_finite(raw)?;
    let dims = raw.dims;
    let dh = dims.d_head;

    let w_e = center_rows(raw.matrix(names::TOKEN_EMBEDDING)?);
    let w_pos = center_rows(raw.matrix(names::POS_EMBEDDING)?);

    let g1 = raw.vector(names::LN1_WEIGHT)?;
    let b1 = raw.vector(names::LN1_BIAS)?;
    let (w_q, b_q) = fold_affine(g1, b1, raw.matrix(names::Q_WEIGHT)?, raw.vector(names::Q_BIAS)?);
    let (w_k, b_k) = fold_affine(g1, b1, raw.matrix(names::K_WEIGHT)?, raw.vector(names::K_BIAS)?);
    let (w_v, b_v) = fold_affine(g1, b1, raw.matrix(names::V_WEIGHT)?, raw.vector(names::V_BIAS)?);
    // Writing weights only matter through the centered residual.
    let w_o_all = center_rows(raw.matrix(names::ATTN_OUT_WEIGHT)?);
    let b_o = crate::numeric::center(raw.vector(names::ATTN_OUT_BIAS)?);

    let heads = (0..dims.n_heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            HeadWeights {
                w_q: w_q.slice(s![.., cols.clone()]).to_owned(),
                w_k: w_k.slice(s![.., cols.clone()]).to_owned(),
                w_v: w_v.slice(s![.., cols.clone()]).to_owned(),
                b_q: b_q.slice(s![cols.clone()]).to_owned(),
                b_k: b_k.slice(s![cols.clone()]).to_owned(),
                b_v: b_v.slice(s![cols.clone()]).to_owned(),
                w_o: w_o_all.slice(s![cols, ..]).to_owned(),
            }
        })
        .collect();

    let (w_in, b_in) = fold_affine(
        raw.vector(names::LN2_WEIGHT)?,
        raw.vector(names::LN2_BIAS)?,
        raw.matrix(names::MLP_IN_WEIGHT)?,
        raw.vector(names::MLP_IN_BIAS)?,
    );

    Ok(FoldedModel {
        dims,
        w_e,
        w_pos,
        heads,
        b_o,
        w_in,
        b_in,
        digest: raw.digest.clone(),
    })
}

impl FoldedModel {
    /// Express the folded weights as a checkpoint with unit gains and zero
    /// LayerNorm biases.
    pub fn to_raw(&self) -> RawCheckpoint {
        let d = self.dims;
        let concat_cols = |f: &dyn Fn(&HeadWeights) -> &Array2<f64>| {
            let views: Vec<_> = self.heads.iter().map(|h| f(h).view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("matching rows")
        };
        let concat_vec = |f: &dyn Fn(&HeadWeights) -> &Array1<f64>| {
            let views: Vec<_> = self.heads.iter().map(|h| f(h).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("vectors")
        };
        let w_o_views: Vec<_> = self.heads.iter().map(|h| h.w_o.view()).collect();
        let w_o = ndarray::concatenate(Axis(0), &w_o_views).expect("matching cols");

        let mut t = BTreeMap::new();
        let mut put = |n: &str, a: ArrayD<f64>| {
            t.insert(n.to_string(), a);
        };
        put(names::TOKEN_EMBEDDING, self.w_e.clone().into_dyn());
        put(names::POS_EMBEDDING, self.w_pos.clone().into_dyn());
        put(names::LN1_WEIGHT, Array1::ones(d.d_model).into_dyn());
        put(names::LN1_BIAS, Array1::zeros(d.d_model).into_dyn());
        put(names::Q_WEIGHT, concat_cols(&|h| &h.w_q).into_dyn());
        put(names::K_WEIGHT, concat_cols(&|h| &h.w_k).into_dyn());
        put(names::V_WEIGHT, concat_cols(&|h| &h.w_v).into_dyn());
        put(names::Q_BIAS, concat_vec(&|h| &h.b_q).into_dyn());
        put(names::K_BIAS, concat_vec(&|h| &h.b_k).into_dyn());
        put(names::V_BIAS, concat_vec(&|h| &h.b_v).into_dyn());
        put(names::ATTN_OUT_WEIGHT, w_o.into_dyn());
        put(names::ATTN_OUT_BIAS, self.b_o.clone().into_dyn());
        put(names::LN2_WEIGHT, Array1::ones(d.d_model).into_dyn());
        put(names::LN2_BIAS, Array1::zeros(d.d_model).into_dyn());
        put(names::MLP_IN_WEIGHT, self.w_in.clone().into_dyn());
        put(names::MLP_IN_BIAS, self.b_in.clone().into_dyn());
        RawCheckpoint {
            tensors: t,
            dims: d,
            digest: self.digest.clone(),
        }
    }

    pub fn check_head(&self, h: usize) -> Result<()> {
        if h >= self.dims.n_heads {
            return Err(Error::HeadOutOfRange {
                head: h,
                n_heads: self.dims.n_heads,
            });
        }
        Ok(())
    }

    pub fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.dims.d_voc {
            return Err(Error::IdOutOfRange {
                id: t,
                d_voc: self.dims.d_voc,
            });
        }
        Ok(())
    }

    pub fn check_position(&self, n: usize) -> Result<()> {
        if n >= self.dims.n_ctx {
            return Err(Error::PositionOutOfRange {
                pos: n,
                limit: self.dims.n_ctx,
            });
        }
        Ok(())
    }

    pub fn check_neuron(&self, j: usize) -> Result<()> {
        if j >= self.dims.d_mlp {
            return Err(Error::NeuronOutOfRange {
                neuron: j,
                d_mlp: self.dims.d_mlp,
            });
        }
        Ok(())
    }

    /// Largest `|row sum| / ‖row‖` over the token and position embeddings.
    pub fn max_relative_row_sum(&self) -> f64 {
        self.w_e
            .rows()
            .into_iter()
            .chain(self.w_pos.rows())
            .map(|r| {
                let norm = r.dot(&r).sqrt();
                if norm == 0.0 {
                    0.0
                } else {
                    r.sum().abs() / norm
                }
            })
            .fold(0.0, f64::max)
    }

    /// `√d · (W_E[t] + W_pos[n]) / ‖W_E[t] + W_pos[n]‖`, the first-layer
    /// LayerNorm output of token `t` at position `n`.
    pub fn normalized_embedding(&self, t: usize, n: usize) -> Array1<f64> {
        let r = &self.w_e.row(t) + &self.w_pos.row(n);
        crate::numeric::scale_to_sqrt_d(r.view())
    }
}
