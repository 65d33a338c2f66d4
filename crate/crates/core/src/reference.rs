//! Exact first-layer forward pass.
//!
//! Everything the approximations produce is checked against these
//! functions. Positions are 0-based: attending from `n` sees keys `0..=n`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::checkpoint::FoldedModel;
use crate::error::{Error, Result};
use crate::numeric::softmax;

/// Full first-layer activations for a sequence.
#[derive(Debug, Clone)]
pub struct LayerOneState {
    /// `[len, d_model]` token + position embedding.
    pub residual: Array2<f64>,
    /// `[len, d_model]` first LayerNorm output (gain folded away).
    pub normed: Array2<f64>,
    pub queries: Vec<Array2<f64>>,
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
    /// Per head `[len, len]`, lower triangular, rows sum to one.
    pub attn: Vec<Array2<f64>>,
    /// Per head `[len, d_model]`, value bias included.
    pub head_out: Vec<Array2<f64>>,
    /// RMS of the centered post-attention residual at each position.
    pub ln_mlp_scale: Array1<f64>,
}

pub(crate) fn check_sequence(m: &FoldedModel, x: &[usize]) -> Result<()> {
    if x.len() > m.dims.n_ctx {
        return Err(Error::PositionOutOfRange {
            pos: x.len() - 1,
            limit: m.dims.n_ctx,
        });
    }
    for &t in x {
        m.check_token(t)?;
    }
    Ok(())
}

pub(crate) fn check_position_in(x: &[usize], n: usize) -> Result<()> {
    if n >= x.len() {
        return Err(Error::PositionOutOfRange { pos: n, limit: x.len() });
    }
    Ok(())
}

/// First LayerNorm output for positions `0..=n`.
fn normed_prefix(m: &FoldedModel, x: &[usize], n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n + 1, m.dims.d_model));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&m.normalized_embedding(x[i], i));
    }
    out
}

fn attention_row_from_normed(m: &FoldedModel, normed: &Array2<f64>, h: usize, n: usize) -> Vec<f64> {
    let head = &m.heads[h];
    let q = normed.row(n).dot(&head.w_q) + &head.b_q;
    let keys = normed.slice(s![..=n, ..]).dot(&head.w_k) + &head.b_k;
    let scale = 1.0 / (m.dims.d_head as f64).sqrt();
    let scores: Vec<f64> = keys.rows().into_iter().map(|k| k.dot(&q) * scale).collect();
    softmax(&scores)
}

/// Softmax over exact `query · key / √d_head` scores for keys `0..=n`.
pub fn exact_attention_row(m: &FoldedModel, x: &[usize], h: usize, n: usize) -> Result<Vec<f64>> {
    m.check_head(h)?;
    check_sequence(m, x)?;
    check_position_in(x, n)?;
    let normed = normed_prefix(m, x, n);
    Ok(attention_row_from_normed(m, &normed, h, n))
}

/// Everything the exact pass knows about one attending position.
#[derive(Debug, Clone)]
pub struct PositionState {
    pub n: usize,
    /// `[n + 1, d_model]`
    pub normed: Array2<f64>,
    /// Attention row of every head.
    pub attn: Vec<Vec<f64>>,
    /// Centered post-attention residual at `n`.
    pub post_residual: Array1<f64>,
    pub ln_mlp_scale: f64,
}

/// Exact state at position `n`, computed from the prefix `x[..=n]` only.
pub fn position_state(m: &FoldedModel, x: &[usize], n: usize) -> Result<PositionState> {
    check_sequence(m, x)?;
    check_position_in(x, n)?;
    let normed = normed_prefix(m, x, n);
    let mut post = m.w_e.row(x[n]).to_owned() + m.w_pos.row(n) + &m.b_o;
    let mut attn = Vec::with_capacity(m.dims.n_heads);
    for (h, head) in m.heads.iter().enumerate() {
        let row = attention_row_from_normed(m, &normed, h, n);
        let weights = ArrayView1::from(&row[..]);
        let mixed = weights.dot(&normed);
        let value = mixed.dot(&head.w_v) + &head.b_v;
        post += &value.dot(&head.w_o);
        attn.push(row);
    }
    let post = crate::numeric::center(post.view());
    let scale = (post.dot(&post) / m.dims.d_model as f64).sqrt();
    Ok(PositionState {
        n,
        normed,
        attn,
        post_residual: post,
        ln_mlp_scale: scale,
    })
}

/// RMS of the centered post-attention residual at `n` (all heads plus the
/// attention output bias).
pub fn ln_mlp_scale(m: &FoldedModel, x: &[usize], n: usize) -> Result<f64> {
    Ok(position_state(m, x, n)?.ln_mlp_scale)
}

/// Full MLP pre-activations at `n`, bias included.
pub fn mlp_pre_activation(m: &FoldedModel, x: &[usize], n: usize) -> Result<Array1<f64>> {
    let st = position_state(m, x, n)?;
    Ok((&st.post_residual / st.ln_mlp_scale).dot(&m.w_in) + &m.b_in)
}

/// `Σ_{h∈heads} Σ_i attn[n,i] · normed_i W_V^h W_O^h / ln_mlp_scale(n)`,
/// value bias excluded. Dot with a column of `W_in` to get a neuron's
/// contribution.
pub fn heads_ov_vector(state: &PositionState, m: &FoldedModel, heads: &[usize]) -> Result<Array1<f64>> {
    let mut acc = Array1::zeros(m.dims.d_model);
    for &h in heads {
        m.check_head(h)?;
        let head = &m.heads[h];
        let weights = ArrayView1::from(&state.attn[h][..]);
        let mixed = weights.dot(&state.normed);
        acc += &mixed.dot(&head.w_v).dot(&head.w_o);
    }
    Ok(acc / state.ln_mlp_scale)
}

/// Combined OV contribution of `heads` to neuron `j` at position `n`.
pub fn heads_ov_contribution(m: &FoldedModel, x: &[usize], n: usize, heads: &[usize], j: usize) -> Result<f64> {
    m.check_neuron(j)?;
    for &h in heads {
        m.check_head(h)?;
    }
    if heads.is_empty() {
        check_sequence(m, x)?;
        check_position_in(x, n)?;
        return Ok(0.0);
    }
    let st = position_state(m, x, n)?;
    let v = heads_ov_vector(&st, m, heads)?;
    Ok(v.dot(&m.w_in.column(j)))
}

/// Exact pass over the whole sequence.
pub fn forward(m: &FoldedModel, x: &[usize]) -> Result<LayerOneState> {
    check_sequence(m, x)?;
    if x.is_empty() {
        return Err(Error::TooShort { need: 1, have: 0 });
    }
    let len = x.len();
    let d = m.dims;
    let mut residual = Array2::zeros((len, d.d_model));
    for (i, mut row) in residual.rows_mut().into_iter().enumerate() {
        row.assign(&(&m.w_e.row(x[i]) + &m.w_pos.row(i)));
    }
    let normed = normed_prefix(m, x, len - 1);
    let scale = 1.0 / (d.d_head as f64).sqrt();
    let mut post = residual.clone() + &m.b_o;
    let (mut queries, mut keys, mut values, mut attn, mut head_out) = (vec![], vec![], vec![], vec![], vec![]);
    for head in &m.heads {
        let q = normed.dot(&head.w_q) + &head.b_q;
        let k = normed.dot(&head.w_k) + &head.b_k;
        let v = normed.dot(&head.w_v) + &head.b_v;
        let raw_scores = q.dot(&k.t());
        let mut a = Array2::zeros((len, len));
        for n in 0..len {
            let scores: Vec<f64> = (0..=n).map(|i| raw_scores[[n, i]] * scale).collect();
            for (i, p) in softmax(&scores).into_iter().enumerate() {
                a[[n, i]] = p;
            }
        }
        let out = a.dot(&v).dot(&head.w_o);
        post += &out;
        queries.push(q);
        keys.push(k);
        values.push(v);
        attn.push(a);
        head_out.push(out);
    }
    let means = post.mean_axis(Axis(1)).expect("non-empty");
    let ln_mlp_scale = Array1::from_shape_fn(len, |i| {
        let c = post.row(i).mapv(|x| x - means[i]);
        (c.dot(&c) / d.d_model as f64).sqrt()
    });
    Ok(LayerOneState {
        residual,
        normed,
        queries,
        keys,
        values,
        attn,
        head_out,
        ln_mlp_scale,
    })
}

/// Output-vector contribution `VO^h(i, t) · W_in[:, j]` with the exact
/// normalization of token `t` at position `i`.
pub fn vo_dot_exact(m: &FoldedModel, h: usize, i: usize, t: usize, j: usize) -> f64 {
    let head = &m.heads[h];
    let u = m.normalized_embedding(t, i);
    u.dot(&head.w_v).dot(&head.w_o.dot(&m.w_in.column(j)))
}

/// Straight-line forward on an unfolded checkpoint with LayerNorm applied
/// explicitly, written with plain loops so it shares no code with the
/// folded path.
pub mod explicit {
    use crate::checkpoint::{names, RawCheckpoint};
    use crate::error::Result;

    fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let d = v.len() as f64;
        let mean = v.iter().sum::<f64>() / d;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
        let rms = var.sqrt();
        v.iter()
            .zip(gain)
            .zip(bias)
            .map(|((x, g), b)| (x - mean) / rms * g + b)
            .collect()
    }

    fn vec_mat(v: &[f64], w: &[f64], cols: usize, col_range: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; col_range.len()];
        for (r, &vr) in v.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(col_range.clone()) {
                *o += vr * w[r * cols + c];
            }
        }
        out
    }

    struct Weights<'a> {
        te: &'a [f64],
        pe: &'a [f64],
        g1: &'a [f64],
        b1: &'a [f64],
        wq: &'a [f64],
        wk: &'a [f64],
        wv: &'a [f64],
        bq: &'a [f64],
        bk: &'a [f64],
        bv: &'a [f64],
        wo: &'a [f64],
        bo: &'a [f64],
        g2: &'a [f64],
        b2: &'a [f64],
        win: &'a [f64],
        bin: &'a [f64],
    }

    fn weights(raw: &RawCheckpoint) -> Weights<'_> {
        let get = |n: &str| raw.tensors[n].as_slice().expect("standard layout tensors");
        Weights {
            te: get(names::TOKEN_EMBEDDING),
            pe: get(names::POS_EMBEDDING),
            g1: get(names::LN1_WEIGHT),
            b1: get(names::LN1_BIAS),
            wq: get(names::Q_WEIGHT),
            wk: get(names::K_WEIGHT),
            wv: get(names::V_WEIGHT),
            bq: get(names::Q_BIAS),
            bk: get(names::K_BIAS),
            bv: get(names::V_BIAS),
            wo: get(names::ATTN_OUT_WEIGHT),
            bo: get(names::ATTN_OUT_BIAS),
            g2: get(names::LN2_WEIGHT),
            b2: get(names::LN2_BIAS),
            win: get(names::MLP_IN_WEIGHT),
            bin: get(names::MLP_IN_BIAS),
        }
    }

    fn ln1_rows(raw: &RawCheckpoint, w: &Weights, x: &[usize], n: usize) -> Vec<Vec<f64>> {
        let d = raw.dims.d_model;
        (0..=n)
            .map(|i| {
                let r: Vec<f64> = (0..d).map(|k| w.te[x[i] * d + k] + w.pe[i * d + k]).collect();
                layer_norm(&r, w.g1, w.b1)
            })
            .collect()
    }

    fn head_row(raw: &RawCheckpoint, w: &Weights, ln: &[Vec<f64>], h: usize, n: usize) -> Vec<f64> {
        let d = raw.dims.d_model;
        let dh = raw.dims.d_head;
        let cols = h * dh..(h + 1) * dh;
        let mut q = vec_mat(&ln[n], w.wq, d, cols.clone());
        for (qi, c) in q.iter_mut().zip(cols.clone()) {
            *qi += w.bq[c];
        }
        let mut scores = Vec::with_capacity(n + 1);
        for row in ln.iter().take(n + 1) {
            let mut k = vec_mat(row, w.wk, d, cols.clone());
            for (ki, c) in k.iter_mut().zip(cols.clone()) {
                *ki += w.bk[c];
            }
            let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            scores.push(s / (dh as f64).sqrt());
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Attention row of head `h` at position `n`.
    pub fn attention_row(raw: &RawCheckpoint, x: &[usize], h: usize, n: usize) -> Result<Vec<f64>> {
        let w = weights(raw);
        let ln = ln1_rows(raw, &w, x, n);
        Ok(head_row(raw, &w, &ln, h, n))
    }

    /// MLP pre-activations at position `n`, computed with explicit
    /// LayerNorms on uncentered weights.
    pub fn mlp_pre_activation(raw: &RawCheckpoint, x: &[usize], n: usize) -> Result<Vec<f64>> {
        let w = weights(raw);
        let d = raw.dims.d_model;
        let dh = raw.dims.d_head;
        let d_mlp = raw.dims.d_mlp;
        let ln = ln1_rows(raw, &w, x, n);
        let mut z = vec![0.0; d];
        for h in 0..raw.dims.n_heads {
            let a = head_row(raw, &w, &ln, h, n);
            let cols = h * dh..(h + 1) * dh;
            let mut mixed = vec![0.0; dh];
            for (i, ai) in a.iter().enumerate() {
                let mut v = vec_mat(&ln[i], w.wv, d, cols.clone());
                for (vi, c) in v.iter_mut().zip(cols.clone()) {
                    *vi += w.bv[c];
                }
                for (m, vi) in mixed.iter_mut().zip(&v) {
                    *m += ai * vi;
                }
            }
            for (r, mr) in mixed.iter().enumerate() {
                let row = h * dh + r;
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk += mr * w.wo[row * d + k];
                }
            }
        }
        let post: Vec<f64> = (0..d)
            .map(|k| w.te[x[n] * d + k] + w.pe[n * d + k] + z[k] + w.bo[k])
            .collect();
        let ln2 = layer_norm(&post, w.g2, w.b2);
        let mut out = vec_mat(&ln2, w.win, d_mlp, 0..d_mlp);
        for (o, b) in out.iter_mut().zip(w.bin) {
            *o += b;
        }
        Ok(out)
    }
}
