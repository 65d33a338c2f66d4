//! Calibration-anchored contextual circuit.
//!
//! For a set of slowly-decaying heads `H`, the combined OV contribution of
//! the heads to neuron `j` at the anchor position is approximated as
//!
//! ```text
//! Σ_i pos_i · contribution[j, x_i]
//! contribution[j, t] = Σ_{h∈H} content_h(t) · VO^h(n, t) · W_in[:, j] / (ln · denom_h)
//! ```
//!
//! with the per-head denominators and the MLP LayerNorm scale frozen at the
//! values measured on one calibration text, and `pos` the elementwise median
//! of the heads' positional kernels.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::FoldedModel;
use crate::decomp::{classify_kernel, Decomposer, KernelClass, NormConstant, PositionalKernel};
use crate::error::{Error, Result};
use crate::numeric::median;
use crate::reference::{check_position_in, check_sequence, ln_mlp_scale};
use crate::tokens::{StopWords, TokenSeq};

/// The slowly-decaying heads of GPT-2-Small's first layer.
pub const GPT2_SLOW_HEADS: [usize; 6] = [0, 2, 6, 8, 9, 10];

/// Sorted, duplicate-free set of head indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadSet(Vec<usize>);

impl Default for HeadSet {
    fn default() -> Self {
        HeadSet(GPT2_SLOW_HEADS.to_vec())
    }
}

impl HeadSet {
    pub fn new(heads: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = heads.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        HeadSet(v)
    }

    pub fn empty() -> Self {
        HeadSet(Vec::new())
    }

    /// Parse a comma-separated list such as `0,2,6`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(HeadSet::empty());
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad head index `{p}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(HeadSet::new)
    }

    pub fn heads(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, h: usize) -> bool {
        self.0.binary_search(&h).is_ok()
    }

    pub fn check(&self, m: &FoldedModel) -> Result<()> {
        self.0.iter().try_for_each(|&h| m.check_head(h))
    }

    /// Heads whose kernel at `(n, t_n)` is not slowly decaying, with their
    /// class. Callers treat a non-empty result as a warning.
    pub fn not_slowly_decaying(&self, d: &Decomposer, n: usize, t_n: usize) -> Result<Vec<(usize, KernelClass)>> {
        let mut out = Vec::new();
        for &h in &self.0 {
            let class = classify_kernel(&d.kernel(h, n, t_n)?)?.class;
            if class != KernelClass::SlowlyDecaying {
                out.push((h, class));
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for HeadSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|h| h.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Normalizers frozen from one calibration text at one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub text: TokenSeq,
    /// Anchor position (0-based).
    pub n: usize,
    /// Anchor token written at `n`.
    pub token: usize,
    pub heads: HeadSet,
    /// `denom_{h,n,t_n}(y)` in the order of `heads`.
    pub denominators: Vec<f64>,
    pub ln_mlp: f64,
    pub median_kernel: PositionalKernel,
    pub stop_word_density: Option<f64>,
    pub c: NormConstant,
    pub checkpoint_digest: String,
}

impl Calibration {
    pub fn denominator(&self, h: usize) -> Result<f64> {
        self.heads
            .heads()
            .iter()
            .position(|&g| g == h)
            .map(|k| self.denominators[k])
            .ok_or(Error::UncalibratedHead { head: h })
    }

    pub fn record_stop_words(&mut self, stop: &StopWords) {
        self.stop_word_density = Some(stop.density(&self.text.ids));
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("calibration serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.denominators.len() != self.heads.len() {
            return Err(Error::LengthMismatch {
                left: self.denominators.len(),
                right: self.heads.len(),
            });
        }
        if let Some(k) = self.denominators.iter().position(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::NonFinite {
                head: self.heads.heads()[k],
                token: self.token,
            });
        }
        if !(self.ln_mlp > 0.0 && self.ln_mlp.is_finite()) {
            return Err(Error::Config(format!("ln_mlp must be positive, got {}", self.ln_mlp)));
        }
        let sum: f64 = self.median_kernel.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.median_kernel.len() != self.n + 1 {
            return Err(Error::NotNormalized { sum });
        }
        Ok(())
    }

    /// Multiply every denominator by `s`.
    pub fn scale_denominators(&mut self, s: f64) {
        self.denominators.iter_mut().for_each(|d| *d *= s);
    }
}

/// `√d (W_E[t] + W_pos[n]) / ‖·‖ · W_V^h W_O^h · W_in[:, j]`, biases excluded.
pub fn vo_dot(m: &FoldedModel, h: usize, n: usize, t: usize, j: usize) -> Result<f64> {
    m.check_head(h)?;
    m.check_position(n)?;
    m.check_token(t)?;
    m.check_neuron(j)?;
    let head = &m.heads[h];
    let u = m.normalized_embedding(t, n);
    Ok(u.dot(&head.w_v).dot(&head.w_o.dot(&m.w_in.column(j))))
}

/// Elementwise median across heads, renormalized to sum to one.
pub fn median_kernel(kernels: &[PositionalKernel]) -> Result<PositionalKernel> {
    let first = kernels.first().ok_or(Error::MixedAnchors)?;
    if kernels
        .iter()
        .any(|k| k.n != first.n || k.token != first.token || k.len() != first.len())
    {
        return Err(Error::MixedAnchors);
    }
    let mut column = vec![0.0; kernels.len()];
    let mut weights: Vec<f64> = (0..first.len())
        .map(|i| {
            for (slot, k) in column.iter_mut().zip(kernels) {
                *slot = k.weights[i];
            }
            median(&mut column)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(PositionalKernel {
        head: first.head,
        n: first.n,
        token: first.token,
        weights,
    })
}

/// Median kernel of `heads` at `(n, t_n)`.
pub fn median_kernel_at(d: &Decomposer, heads: &HeadSet, n: usize, t_n: usize) -> Result<PositionalKernel> {
    let kernels = heads
        .heads()
        .iter()
        .map(|&h| d.kernel(h, n, t_n))
        .collect::<Result<Vec<_>>>()?;
    median_kernel(&kernels)
}

/// Calibrate on `y` with `t_n` written at `n`; `ln` sampled at the anchor.
pub fn calibrate(
    m: &FoldedModel,
    c: NormConstant,
    heads: &HeadSet,
    y: &TokenSeq,
    n: usize,
    t_n: usize,
) -> Result<Calibration> {
    calibrate_with(m, c, heads, y, n, t_n, &[])
}

/// As [`calibrate`], averaging the `ln` estimate over the anchor and
/// `extra_ln_positions` (each with `t_n` substituted there).
pub fn calibrate_with(
    m: &FoldedModel,
    c: NormConstant,
    heads: &HeadSet,
    y: &TokenSeq,
    n: usize,
    t_n: usize,
    extra_ln_positions: &[usize],
) -> Result<Calibration> {
    if heads.is_empty() {
        return Err(Error::Config("calibration needs at least one head".into()));
    }
    heads.check(m)?;
    m.check_token(t_n)?;
    m.check_position(n)?;
    if y.len() <= n {
        return Err(Error::TooShort {
            need: n + 1,
            have: y.len(),
        });
    }
    check_sequence(m, &y.ids)?;
    let d = Decomposer::new(m, c);
    let denominators = heads
        .heads()
        .iter()
        .map(|&h| {
            let v = d.log_denom(h, n, t_n, &y.ids)?.exp();
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { head: h, token: t_n })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ln_sum = 0.0;
    for &p in std::iter::once(&n).chain(extra_ln_positions) {
        check_position_in(&y.ids, p)?;
        ln_sum += ln_mlp_scale(m, &y.substituted(p, t_n).ids[..=p], p)?;
    }
    let ln_mlp = ln_sum / (1 + extra_ln_positions.len()) as f64;
    let median_kernel = median_kernel_at(&d, heads, n, t_n)?;
    let cal = Calibration {
        text: y.clone(),
        n,
        token: t_n,
        heads: heads.clone(),
        denominators,
        ln_mlp,
        median_kernel,
        stop_word_density: None,
        c,
        checkpoint_digest: m.digest.clone(),
    };
    cal.validate()?;
    Ok(cal)
}

pub const TABLE_MAGIC: [u8; 8] = *b"CLTABLE\0";
pub const TABLE_VERSION: u32 = 1;

/// Provenance carried by a contribution table and its file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableHeader {
    pub d_mlp: usize,
    pub d_voc: usize,
    pub anchor_n: usize,
    pub anchor_token: usize,
    pub heads: HeadSet,
    pub calibration_digest: String,
}

/// `contribution[j, t]` for every neuron and vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTable {
    pub header: TableHeader,
    /// `[d_mlp, d_voc]`
    pub values: Array2<f64>,
}

/// Vocabulary columns handled per parallel task. Fixed so the result does
/// not depend on the number of workers.
const VOCAB_BLOCK: usize = 512;

pub fn contribution_table(
    m: &FoldedModel,
    c: NormConstant,
    heads: &HeadSet,
    cal: &Calibration,
) -> Result<ContributionTable> {
    heads.check(m)?;
    let dims = m.dims;
    let (n, t_n) = (cal.n, cal.token);
    let header = TableHeader {
        d_mlp: dims.d_mlp,
        d_voc: dims.d_voc,
        anchor_n: n,
        anchor_token: t_n,
        heads: heads.clone(),
        calibration_digest: cal.digest(),
    };
    let mut values = Array2::<f64>::zeros((dims.d_mlp, dims.d_voc));
    if heads.is_empty() {
        return Ok(ContributionTable { header, values });
    }

    let d = Decomposer::new(m, c);
    let dh = dims.d_head;
    let k = heads.len() * dh;
    // Per-token weight of each head: content / (ln · denom).
    let mut head_weights = Array2::<f64>::zeros((dims.d_voc, heads.len()));
    for (slot, &h) in heads.heads().iter().enumerate() {
        let denom = cal.denominator(h)?;
        let logs = d.log_content_vocab(h, n, t_n)?;
        for (t, l) in logs.iter().enumerate() {
            let w = l.exp() / (cal.ln_mlp * denom);
            if !w.is_finite() {
                return Err(Error::NonFinite { head: h, token: t });
            }
            head_weights[[t, slot]] = w;
        }
    }
    // Value projections side by side, and the matching `W_O^h W_in` stacked.
    let mut w_v = Array2::<f64>::zeros((dims.d_model, k));
    let mut out_in = Array2::<f64>::zeros((k, dims.d_mlp));
    for (slot, &h) in heads.heads().iter().enumerate() {
        let head = &m.heads[h];
        let cols = slot * dh..(slot + 1) * dh;
        w_v.slice_mut(s![.., cols.clone()]).assign(&head.w_v);
        out_in.slice_mut(s![cols, ..]).assign(&head.w_o.dot(&m.w_in));
    }
    let out_in_t = out_in.t();
    let pos = m.w_pos.row(n);
    let sqrt_d = (dims.d_model as f64).sqrt();

    values
        .axis_chunks_iter_mut(Axis(1), VOCAB_BLOCK)
        .into_par_iter()
        .enumerate()
        .for_each(|(b, mut chunk)| {
            let t0 = b * VOCAB_BLOCK;
            let width = chunk.ncols();
            let mut u = m.w_e.slice(s![t0..t0 + width, ..]).to_owned();
            for mut row in u.rows_mut() {
                row += &pos;
                let norm = row.dot(&row).sqrt();
                row.mapv_inplace(|x| sqrt_d * x / norm);
            }
            let mut z = u.dot(&w_v);
            for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                for slot in 0..heads.len() {
                    let w = head_weights[[t0 + r, slot]];
                    row.slice_mut(s![slot * dh..(slot + 1) * dh]).mapv_inplace(|x| x * w);
                }
            }
            chunk.assign(&out_in_t.dot(&z.t()));
        });

    if let Some(((_, t), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            head: heads.heads()[0],
            token: t,
        });
    }
    Ok(ContributionTable { header, values })
}

impl ContributionTable {
    pub fn row(&self, j: usize) -> Result<ArrayView1<'_, f64>> {
        if j >= self.header.d_mlp {
            return Err(Error::NeuronOutOfRange {
                neuron: j,
                d_mlp: self.header.d_mlp,
            });
        }
        Ok(self.values.row(j))
    }

    /// Fail unless this table was built from `cal`.
    pub fn check_calibration(&self, cal: &Calibration) -> Result<()> {
        let digest = cal.digest();
        if self.header.calibration_digest != digest {
            return Err(Error::StaleTable(format!(
                "table {} vs calibration {}",
                self.header.calibration_digest, digest
            )));
        }
        Ok(())
    }

    /// `Σ_i weights_i · contribution[j, y_i]` over `i < weights.len()`.
    pub fn kernel_sum(&self, j: usize, weights: &[f64], y: &[usize]) -> Result<f64> {
        let row = self.row(j)?;
        if y.len() < weights.len() {
            return Err(Error::TooShort {
                need: weights.len(),
                have: y.len(),
            });
        }
        let mut acc = 0.0;
        for (w, &t) in weights.iter().zip(y) {
            if t >= self.header.d_voc {
                return Err(Error::IdOutOfRange {
                    id: t,
                    d_voc: self.header.d_voc,
                });
            }
            acc += w * row[t];
        }
        Ok(acc)
    }

    /// Write the binary header and row-major `f32` payload atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::artifact::write_atomic(path, |w| self.write_to(w))
    }

    fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let h = &self.header;
        w.write_all(&TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        for v in [h.d_mlp, h.d_voc, h.anchor_n, h.anchor_token] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&(h.heads.len() as u32).to_le_bytes())?;
        for &head in h.heads.heads() {
            w.write_all(&(head as u32).to_le_bytes())?;
        }
        w.write_all(&(h.calibration_digest.len() as u32).to_le_bytes())?;
        w.write_all(h.calibration_digest.as_bytes())?;
        for v in self.values.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::TableFormat(format!("{}: truncated", path.display()))
            } else {
                Error::io(path, e)
            }
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != TABLE_MAGIC {
            return Err(Error::TableFormat(format!("{}: bad magic", path.display())));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != TABLE_VERSION {
            return Err(Error::TableFormat(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(&mut r).map_err(io)? as usize;
        }
        let [d_mlp, d_voc, anchor_n, anchor_token] = dims;
        let n_heads = read_u32(&mut r).map_err(io)? as usize;
        let heads = (0..n_heads)
            .map(|_| read_u32(&mut r).map(|h| h as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let len = read_u32(&mut r).map_err(io)? as usize;
        let mut digest = vec![0u8; len];
        r.read_exact(&mut digest).map_err(io)?;
        let calibration_digest =
            String::from_utf8(digest).map_err(|_| Error::TableFormat("calibration digest is not UTF-8".into()))?;
        let total = d_mlp
            .checked_mul(d_voc)
            .ok_or_else(|| Error::TableFormat("table dimensions overflow".into()))?;
        let mut data = Vec::with_capacity(total);
        let mut buf = vec![0u8; 4 * 65536];
        while data.len() < total {
            let want = (total - data.len()).min(65536);
            r.read_exact(&mut buf[..4 * want]).map_err(io)?;
            data.extend(
                buf[..4 * want]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::TableFormat(format!("{}: trailing bytes", path.display())));
        }
        let values = Array2::from_shape_vec((d_mlp, d_voc), data).map_err(|e| Error::TableFormat(e.to_string()))?;
        Ok(ContributionTable {
            header: TableHeader {
                d_mlp,
                d_voc,
                anchor_n,
                anchor_token,
                heads: HeadSet::new(heads),
                calibration_digest,
            },
            values,
        })
    }

    /// The same table after the `f32` round trip of the file format.
    pub fn to_stored_precision(&self) -> Self {
        ContributionTable {
            header: self.header.clone(),
            values: self.values.mapv(|v| v as f32 as f64),
        }
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// `Σ_{i≤n} median_kernel_i · contribution[j, y_i]` where `y` is `x` with the
/// anchor token written at the anchor position.
pub fn approx_contribution(table: &ContributionTable, cal: &Calibration, x: &TokenSeq, j: usize) -> Result<f64> {
    if x.len() <= cal.n {
        return Err(Error::TooShort {
            need: cal.n + 1,
            have: x.len(),
        });
    }
    let y = x.substituted(cal.n, cal.token);
    table.kernel_sum(j, &cal.median_kernel.weights, &y.ids)
}
