//! Positional/content decomposition of first-layer attention.
//!
//! Keys are approximated as a content part that depends on the key token and
//! the attending position, plus a positional part that depends only on the two
//! positions:
//!
//! ```text
//! E[n, t] = √d · (W_E[t] + W_pos[n]) W_K / ‖W_E[t] + W_pos[n]‖
//! P[n, i] = √d · (W_pos[i] − W_pos[n]) W_K / √(‖W_pos[i]‖² + C²)
//! ```
//!
//! Softmaxing `q · P / √d_head` over `i` gives the positional kernel; the
//! exponential of `q · E / √d_head` is the content factor, and the
//! approximate attention row is their normalized product. The key bias is
//! left out of both parts: it adds the same score to every key and cancels in
//! the softmax.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::checkpoint::FoldedModel;
use crate::error::{Error, Result};
use crate::numeric::{log_softmax, logsumexp, softmax};
use crate::reference::{check_position_in, check_sequence};

/// Midpoint of the range of token-embedding norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConstant(pub f64);

impl NormConstant {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn compute_c(m: &FoldedModel) -> NormConstant {
    let (lo, hi) = m
        .w_e
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    NormConstant(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyParts {
    /// Content part `E[n, t_i]`, `d_head` long.
    pub content: Array1<f64>,
    /// Positional part `P[n, i]`, `d_head` long.
    pub positional: Array1<f64>,
}

impl KeyParts {
    pub fn key(&self) -> Array1<f64> {
        &self.content + &self.positional
    }
}

/// Exact folded query of head `h` for token `t` at position `n`.
pub fn query(m: &FoldedModel, h: usize, n: usize, t: usize) -> Array1<f64> {
    let head = &m.heads[h];
    m.normalized_embedding(t, n).dot(&head.w_q) + &head.b_q
}

fn check_pair(m: &FoldedModel, h: usize, n: usize, t: usize) -> Result<()> {
    m.check_head(h)?;
    m.check_position(n)?;
    m.check_token(t)
}

pub fn key_parts(m: &FoldedModel, c: NormConstant, h: usize, n: usize, i: usize, t_i: usize) -> Result<KeyParts> {
    check_pair(m, h, n, t_i)?;
    if i > n {
        return Err(Error::PositionOutOfRange { pos: i, limit: n + 1 });
    }
    let w_k = &m.heads[h].w_k;
    let sqrt_d = (m.dims.d_model as f64).sqrt();
    let content = m.normalized_embedding(t_i, n).dot(w_k);
    let pos_i = m.w_pos.row(i);
    let diff = &pos_i - &m.w_pos.row(n);
    let denom = (pos_i.dot(&pos_i) + c.0 * c.0).sqrt();
    let positional = diff.dot(w_k) * (sqrt_d / denom);
    Ok(KeyParts { content, positional })
}

/// Softmax of positional scores over key positions `0..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalKernel {
    pub head: usize,
    /// Attending position (0-based); `weights` has `n + 1` entries.
    pub n: usize,
    /// Attending token.
    pub token: usize,
    pub weights: Vec<f64>,
}

impl PositionalKernel {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.weights.iter().map(|p| p * p).sum()
    }

    /// `Σ_{i<n} pos_i²`, the spread term of the concentration bounds.
    pub fn sum_of_squares_before_last(&self) -> f64 {
        let k = self.weights.len().saturating_sub(1);
        self.weights[..k].iter().map(|p| p * p).sum()
    }

    pub fn participation_ratio(&self) -> f64 {
        1.0 / self.sum_of_squares()
    }
}

/// Precomputed norms shared by every decomposition query on one model.
///
/// The free functions in this module build one per call; loops over many
/// positions should build it once.
pub struct Decomposer<'m> {
    pub model: &'m FoldedModel,
    pub c: NormConstant,
    /// `√(‖W_pos[i]‖² + C²)` per position.
    pos_denoms: Vec<f64>,
    scale: f64,
    sqrt_d: f64,
}

/// Per-position pieces of one approximate attention row, in log space.
#[derive(Debug, Clone)]
pub struct RowLogits {
    /// Log positional kernel (log-softmax of positional scores).
    pub log_pos: Vec<f64>,
    /// Log content factor of each key token.
    pub log_content: Vec<f64>,
}

impl<'m> Decomposer<'m> {
    pub fn new(model: &'m FoldedModel, c: NormConstant) -> Self {
        let pos_denoms = model
            .w_pos
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r) + c.0 * c.0).sqrt())
            .collect();
        Decomposer {
            model,
            c,
            pos_denoms,
            scale: 1.0 / (model.dims.d_head as f64).sqrt(),
            sqrt_d: (model.dims.d_model as f64).sqrt(),
        }
    }

    /// `W_K q`, the query pulled back into the residual space.
    fn pulled_query(&self, h: usize, n: usize, t_n: usize) -> Array1<f64> {
        let q = query(self.model, h, n, t_n);
        self.model.heads[h].w_k.dot(&q)
    }

    fn positional_scores(&self, kq: ArrayView1<f64>, n: usize) -> Vec<f64> {
        let w_pos = &self.model.w_pos;
        let anchor = w_pos.row(n).dot(&kq);
        (0..=n)
            .map(|i| self.sqrt_d * (w_pos.row(i).dot(&kq) - anchor) / self.pos_denoms[i] * self.scale)
            .collect()
    }

    fn log_content_with(&self, kq: ArrayView1<f64>, n: usize, t: usize) -> f64 {
        let r = &self.model.w_e.row(t) + &self.model.w_pos.row(n);
        let norm = r.dot(&r).sqrt();
        self.sqrt_d * r.dot(&kq) / norm * self.scale
    }

    pub fn kernel(&self, h: usize, n: usize, t_n: usize) -> Result<PositionalKernel> {
        check_pair(self.model, h, n, t_n)?;
        let kq = self.pulled_query(h, n, t_n);
        Ok(PositionalKernel {
            head: h,
            n,
            token: t_n,
            weights: softmax(&self.positional_scores(kq.view(), n)),
        })
    }

    /// `q · E[n, t] / √d_head` for the attending token `t_n`.
    pub fn log_content(&self, h: usize, n: usize, t: usize, t_n: usize) -> Result<f64> {
        check_pair(self.model, h, n, t_n)?;
        self.model.check_token(t)?;
        let kq = self.pulled_query(h, n, t_n);
        Ok(self.log_content_with(kq.view(), n, t))
    }

    /// Log content factor of every vocabulary token in one pass.
    pub fn log_content_vocab(&self, h: usize, n: usize, t_n: usize) -> Result<Vec<f64>> {
        check_pair(self.model, h, n, t_n)?;
        let kq = self.pulled_query(h, n, t_n);
        let m = self.model;
        let p = m.w_pos.row(n);
        let p_sq = p.dot(&p);
        let p_kq = p.dot(&kq);
        let e_kq = m.w_e.dot(&kq);
        let e_p = m.w_e.dot(&p);
        Ok(m.w_e
            .rows()
            .into_iter()
            .enumerate()
            .map(|(t, row)| {
                let norm = (row.dot(&row) + 2.0 * e_p[t] + p_sq).sqrt();
                self.sqrt_d * (e_kq[t] + p_kq) / norm * self.scale
            })
            .collect())
    }

    /// Log kernel and log content factors for attending from `n` with the
    /// key tokens `keys[0..=n]` and attending token `t_n`.
    pub fn row_logits(&self, h: usize, n: usize, t_n: usize, keys: &[usize]) -> Result<RowLogits> {
        check_pair(self.model, h, n, t_n)?;
        check_position_in(keys, n)?;
        let kq = self.pulled_query(h, n, t_n);
        let log_pos = log_softmax(&self.positional_scores(kq.view(), n));
        let log_content = keys[..=n]
            .iter()
            .map(|&t| self.log_content_with(kq.view(), n, t))
            .collect();
        Ok(RowLogits { log_pos, log_content })
    }

    /// Factorized approximate attention row at `n` for sequence `x`.
    pub fn approx_row(&self, h: usize, n: usize, x: &[usize]) -> Result<Vec<f64>> {
        check_sequence(self.model, x)?;
        check_position_in(x, n)?;
        let logits = self.row_logits(h, n, x[n], x)?;
        let combined: Vec<f64> = logits
            .log_pos
            .iter()
            .zip(&logits.log_content)
            .map(|(p, c)| p + c)
            .collect();
        Ok(softmax(&combined))
    }

    /// `Σ_i pos_i · content_{y_i}` where `y = x` with `t` written at `n`,
    /// evaluated in log space.
    pub fn log_denom(&self, h: usize, n: usize, t: usize, x: &[usize]) -> Result<f64> {
        check_position_in(x, n)?;
        let mut y = x[..=n].to_vec();
        y[n] = t;
        check_sequence(self.model, &y)?;
        let logits = self.row_logits(h, n, t, &y)?;
        let terms: Vec<f64> = logits
            .log_pos
            .iter()
            .zip(&logits.log_content)
            .map(|(p, c)| p + c)
            .collect();
        Ok(logsumexp(&terms))
    }
}

pub fn positional_kernel(m: &FoldedModel, c: NormConstant, h: usize, n: usize, t_n: usize) -> Result<PositionalKernel> {
    Decomposer::new(m, c).kernel(h, n, t_n)
}

/// `exp(q(n, t_n) · E[n, t_i] / √d_head)`.
pub fn content_factor(m: &FoldedModel, c: NormConstant, h: usize, n: usize, t_i: usize, t_n: usize) -> Result<f64> {
    let log = Decomposer::new(m, c).log_content(h, n, t_i, t_n)?;
    let value = log.exp();
    if !value.is_finite() {
        return Err(Error::NonFinite { head: h, token: t_i });
    }
    Ok(value)
}

/// `pos_i · content_{x_i} / Σ_j pos_j · content_{x_j}`.
pub fn attn_approx_row(m: &FoldedModel, c: NormConstant, h: usize, n: usize, x: &[usize]) -> Result<Vec<f64>> {
    Decomposer::new(m, c).approx_row(h, n, x)
}

/// Softmax over `q · (E + P) / √d_head` with the key parts built explicitly.
/// Same value as [`attn_approx_row`], different algebraic route.
pub fn attn_approx_row_direct(m: &FoldedModel, c: NormConstant, h: usize, n: usize, x: &[usize]) -> Result<Vec<f64>> {
    check_sequence(m, x)?;
    check_position_in(x, n)?;
    let q = query(m, h, n, x[n]);
    let scale = 1.0 / (m.dims.d_head as f64).sqrt();
    let scores = (0..=n)
        .map(|i| Ok(key_parts(m, c, h, n, i, x[i])?.key().dot(&q) * scale))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&scores))
}

/// Half the L1 distance between two probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    for v in [p, q] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| *x < 0.0) {
            return Err(Error::NotNormalized { sum });
        }
    }
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelClass {
    SlowlyDecaying,
    Local,
    Uniform,
}

impl std::fmt::Display for KernelClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelClass::SlowlyDecaying => "slowly-decaying",
            KernelClass::Local => "local",
            KernelClass::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    pub len: usize,
    /// `1 / Σ pos_i²`
    pub participation_ratio: f64,
    /// Mass on the last [`LOCAL_WINDOW`] positions.
    pub tail_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelClassification {
    pub class: KernelClass,
    pub diagnostics: KernelDiagnostics,
}

/// Window (positions ending at the attending one) used for the local test.
pub const LOCAL_WINDOW: usize = 50;
/// Kernels with participation ratio above this fraction of their length are
/// uniform.
pub const UNIFORM_PR_FRACTION: f64 = 0.8;
/// Kernels with more than this mass in the local window are local.
pub const LOCAL_MASS: f64 = 0.9;

/// Uniform if `PR > 0.8·len`, else local if the last 50 positions hold more
/// than 90% of the mass, else slowly decaying.
pub fn classify_kernel(k: &PositionalKernel) -> Result<KernelClassification> {
    let len = k.weights.len();
    if len < LOCAL_WINDOW {
        return Err(Error::ContextTooShort { len, min: LOCAL_WINDOW });
    }
    let participation_ratio = k.participation_ratio();
    let tail_mass: f64 = k.weights[len - LOCAL_WINDOW..].iter().sum();
    let class = if participation_ratio > UNIFORM_PR_FRACTION * len as f64 {
        KernelClass::Uniform
    } else if tail_mass > LOCAL_MASS {
        KernelClass::Local
    } else {
        KernelClass::SlowlyDecaying
    };
    Ok(KernelClassification {
        class,
        diagnostics: KernelDiagnostics {
            len,
            participation_ratio,
            tail_mass,
        },
    })
}

/// TV between the kernel at `(n, t)` and the kernel at `(n + delta, t)`,
/// both indexed by distance from the attending position over the shared
/// window of `n + 1` offsets (the longer kernel truncated and renormalized).
pub fn kernel_translation_tv(d: &Decomposer, h: usize, n: usize, delta: usize, t: usize) -> Result<f64> {
    let a = d.kernel(h, n, t)?;
    let b = d.kernel(h, n + delta, t)?;
    let tail = &b.weights[delta..];
    let mass: f64 = tail.iter().sum();
    let aligned: Vec<f64> = tail.iter().map(|p| p / mass).collect();
    tv_distance(&a.weights, &aligned)
}

/// Largest `|cos(W_E[t], W_pos[i])|` over the given tokens and all positions.
pub fn max_embedding_cosine(m: &FoldedModel, tokens: &[usize]) -> Result<f64> {
    let pos_norms: Vec<f64> = m.w_pos.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut worst: f64 = 0.0;
    for &t in tokens {
        m.check_token(t)?;
        let e = m.w_e.row(t);
        let e_norm = e.dot(&e).sqrt();
        let dots = m.w_pos.dot(&e);
        for (dot, pn) in dots.iter().zip(&pos_norms) {
            if e_norm > 0.0 && *pn > 0.0 {
                worst = worst.max((dot / (e_norm * pn)).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::fold_model;
    use crate::synthetic::{ToyConfig, ToyModel};

    fn toy(seed: u64) -> (ToyModel, FoldedModel) {
        let t = ToyModel::random(&ToyConfig::small(), seed);
        let f = fold_model(&t.raw).unwrap();
        (t, f)
    }

    #[test]
    fn c_is_midpoint_of_norm_range() {
        let (_, mut m) = toy(1);
        m.w_e = ndarray::Array2::zeros((3, 8));
        m.w_e[[0, 0]] = 1.0;
        m.w_e[[1, 1]] = -2.0;
        m.w_e[[2, 2]] = 5.0;
        assert_eq!(compute_c(&m).value(), 3.0);
        for r in 0..3 {
            m.w_e.row_mut(r).fill(0.0);
            m.w_e[[r, r]] = 2.5;
        }
        assert_eq!(compute_c(&m).value(), 2.5);
    }

    #[test]
    fn positional_part_vanishes_on_the_diagonal() {
        let (_, m) = toy(2);
        let c = compute_c(&m);
        let parts = key_parts(&m, c, 1, 6, 6, 3).unwrap();
        assert!(parts.positional.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn diagonal_key_differs_from_exact_only_by_bias() {
        let (_, m) = toy(2);
        let c = compute_c(&m);
        let (n, t) = (9, 4);
        let parts = key_parts(&m, c, 0, n, n, t).unwrap();
        let exact = m.normalized_embedding(t, n).dot(&m.heads[0].w_k) + &m.heads[0].b_k;
        let diff = exact - parts.key() - &m.heads[0].b_k;
        assert!(diff.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn key_parts_rejects_future_position() {
        let (_, m) = toy(2);
        let c = compute_c(&m);
        assert!(key_parts(&m, c, 0, 3, 4, 0).is_err());
    }

    #[test]
    fn kernel_at_first_position() {
        let (_, m) = toy(3);
        let k = positional_kernel(&m, compute_c(&m), 0, 0, 5).unwrap();
        assert_eq!(k.weights, vec![1.0]);
    }

    #[test]
    fn zero_position_embedding_gives_uniform_kernel() {
        let (_, mut m) = toy(3);
        m.w_pos.fill(0.0);
        let k = positional_kernel(&m, compute_c(&m), 1, 9, 5).unwrap();
        for p in &k.weights {
            assert!((p - 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_query_gives_unit_content() {
        let (_, mut m) = toy(3);
        m.heads[0].w_q.fill(0.0);
        m.heads[0].b_q.fill(0.0);
        let c = compute_c(&m);
        for t in 0..m.dims.d_voc {
            assert_eq!(content_factor(&m, c, 0, 4, t, 2).unwrap(), 1.0);
        }
    }

    #[test]
    fn doubling_key_weights_squares_content() {
        let (_, m) = toy(4);
        let c = compute_c(&m);
        let base = content_factor(&m, c, 1, 7, 3, 2).unwrap();
        let mut m2 = m.clone();
        m2.heads[1].w_k.mapv_inplace(|x| 2.0 * x);
        let doubled = content_factor(&m2, c, 1, 7, 3, 2).unwrap();
        assert!((doubled - base * base).abs() < 1e-12 * doubled.max(1.0));
    }

    #[test]
    fn vocab_sweep_matches_pointwise() {
        let (_, m) = toy(5);
        let d = Decomposer::new(&m, compute_c(&m));
        let all = d.log_content_vocab(0, 11, 4).unwrap();
        for t in 0..m.dims.d_voc {
            let one = d.log_content(0, 11, t, 4).unwrap();
            assert!((all[t] - one).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_content_returns_kernel() {
        let (t, mut m) = toy(6);
        // Content scores vanish when every token embedding is zero.
        m.w_e.fill(0.0);
        let c = NormConstant(1.0);
        let x = t.random_tokens(10, 3);
        let row = attn_approx_row(&m, c, 0, 9, &x).unwrap();
        let k = positional_kernel(&m, c, 0, 9, x[9]).unwrap();
        for (a, b) in row.iter().zip(&k.weights) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn factorized_equals_direct() {
        let (t, m) = toy(7);
        let c = compute_c(&m);
        let x = t.random_tokens(16, 11);
        for h in 0..2 {
            for n in 0..16 {
                let a = attn_approx_row(&m, c, h, n, &x).unwrap();
                let b = attn_approx_row_direct(&m, c, h, n, &x).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tv_basics() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            tv_distance(&[1.0], &[0.5, 0.5]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            tv_distance(&[0.2, 0.2], &[0.5, 0.5]),
            Err(Error::NotNormalized { .. })
        ));
    }

    fn kernel_of(weights: Vec<f64>) -> PositionalKernel {
        PositionalKernel {
            head: 0,
            n: weights.len() - 1,
            token: 0,
            weights,
        }
    }

    #[test]
    fn classify_uniform() {
        let k = kernel_of(vec![1.0 / 500.0; 500]);
        let cls = classify_kernel(&k).unwrap();
        assert_eq!(cls.class, KernelClass::Uniform);
        assert!((cls.diagnostics.participation_ratio - 500.0).abs() < 1e-6);
    }

    #[test]
    fn classify_local() {
        let mut w = vec![0.05 / 490.0; 500];
        for p in &mut w[490..] {
            *p = 0.95 / 10.0;
        }
        assert_eq!(classify_kernel(&kernel_of(w)).unwrap().class, KernelClass::Local);
    }

    #[test]
    fn classify_slowly_decaying() {
        let raw: Vec<f64> = (0..500).map(|i| (-(499 - i) as f64 / 120.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        let w = raw.into_iter().map(|x| x / s).collect();
        assert_eq!(
            classify_kernel(&kernel_of(w)).unwrap().class,
            KernelClass::SlowlyDecaying
        );
    }

    #[test]
    fn classify_short_context() {
        assert!(matches!(
            classify_kernel(&kernel_of(vec![0.1; 10])),
            Err(Error::ContextTooShort { len: 10, .. })
        ));
    }

    #[test]
    fn translation_tv_zero_for_static_positions() {
        let (_, mut m) = toy(8);
        m.w_pos.fill(0.0);
        let d = Decomposer::new(&m, compute_c(&m));
        // Uniform kernels of different lengths, truncated: uniform again.
        assert!(kernel_translation_tv(&d, 0, 5, 3, 1).unwrap() < 1e-12);
    }
}
