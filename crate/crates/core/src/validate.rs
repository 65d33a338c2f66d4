//! Approximation-versus-oracle comparisons.
//!
//! Two regimes are supported: per-position substitution series within one
//! text, and one value per text at the calibration anchor across a corpus.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::FoldedModel;
use crate::circuit::{median_kernel_at, Calibration, ContributionTable, HeadSet};
use crate::decomp::{tv_distance, Decomposer, NormConstant};
use crate::error::{Error, Result};
use crate::reference::{
    check_sequence, exact_attention_row, heads_ov_vector, ln_mlp_scale, position_state, vo_dot_exact,
};
use crate::tokens::{Corpus, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// Pearson correlation; `None` when the approximate series is constant.
    pub r: Option<f64>,
    /// Mean squared error over the variance of the true values.
    pub fvu: f64,
    pub count: usize,
    /// `mean(approx − true)`
    pub bias: f64,
}

pub fn fit_stats(truth: &[f64], approx: &[f64]) -> Result<FitStats> {
    if truth.len() != approx.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: approx.len(),
        });
    }
    let k = truth.len();
    if k < 2 {
        return Err(Error::TooShort { need: 2, have: k });
    }
    let kf = k as f64;
    let mt = truth.iter().sum::<f64>() / kf;
    let ma = approx.iter().sum::<f64>() / kf;
    let (mut vt, mut va, mut cov, mut mse) = (0.0, 0.0, 0.0, 0.0);
    for (t, a) in truth.iter().zip(approx) {
        vt += (t - mt) * (t - mt);
        va += (a - ma) * (a - ma);
        cov += (t - mt) * (a - ma);
        mse += (a - t) * (a - t);
    }
    if vt == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let r = (va > 0.0).then(|| (cov / (vt.sqrt() * va.sqrt())).clamp(-1.0, 1.0));
    Ok(FitStats {
        r,
        fvu: mse / vt,
        count: k,
        bias: ma - mt,
    })
}

/// True and approximate contributions of one neuron at a grid of positions
/// of one text, each with its own single-token substitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionSeries {
    pub text: String,
    pub neuron: usize,
    pub positions: Vec<usize>,
    pub true_values: Vec<f64>,
    pub approx_values: Vec<f64>,
}

impl SubstitutionSeries {
    pub fn fit(&self) -> Result<FitStats> {
        fit_stats(&self.true_values, &self.approx_values)
    }

    /// CSV lines `text,neuron,position,true,approx`, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("text,neuron,position,true,approx\n");
        for ((p, t), a) in self.positions.iter().zip(&self.true_values).zip(&self.approx_values) {
            out.push_str(&format!("{},{},{p},{t},{a}\n", csv_field(&self.text), self.neuron));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `stride, 2·stride, …` below `len`.
pub fn series_grid(len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (stride..len).step_by(stride).collect()
}

fn check_grid(x: &[usize], grid: &[usize]) -> Result<()> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("grid positions must be strictly increasing".into()));
    }
    if let Some(&last) = grid.last() {
        if last >= x.len() {
            return Err(Error::PositionOutOfRange {
                pos: last,
                limit: x.len(),
            });
        }
    }
    Ok(())
}

/// Exact OV contribution of `heads` to `j` at each `n` in `grid`, with
/// `t_sub` written at `n`.
pub fn true_series(
    m: &FoldedModel,
    heads: &HeadSet,
    x: &[usize],
    j: usize,
    grid: &[usize],
    t_sub: usize,
) -> Result<Vec<f64>> {
    m.check_neuron(j)?;
    m.check_token(t_sub)?;
    heads.check(m)?;
    check_sequence(m, x)?;
    check_grid(x, grid)?;
    grid.par_iter()
        .map(|&n| {
            let mut y = x[..=n].to_vec();
            y[n] = t_sub;
            let st = position_state(m, &y, n)?;
            Ok(heads_ov_vector(&st, m, heads.heads())?.dot(&m.w_in.column(j)))
        })
        .collect()
}

/// Table-based approximation at each `n` in `grid`, with the median kernel
/// re-anchored at `(n, t_sub)`.
pub fn approx_series(
    d: &Decomposer,
    table: &ContributionTable,
    x: &[usize],
    j: usize,
    grid: &[usize],
    t_sub: usize,
) -> Result<Vec<f64>> {
    table.row(j)?;
    check_grid(x, grid)?;
    let heads = &table.header.heads;
    grid.par_iter()
        .map(|&n| {
            if heads.is_empty() {
                return Ok(0.0);
            }
            let kernel = median_kernel_at(d, heads, n, t_sub)?;
            let mut y = x[..=n].to_vec();
            y[n] = t_sub;
            table.kernel_sum(j, &kernel.weights, &y)
        })
        .collect()
}

pub fn substitution_series(
    m: &FoldedModel,
    c: NormConstant,
    table: &ContributionTable,
    x: &TokenSeq,
    j: usize,
    grid: &[usize],
    t_sub: usize,
) -> Result<SubstitutionSeries> {
    let true_values = true_series(m, &table.header.heads, &x.ids, j, grid, t_sub)?;
    let approx_values = approx_series(&Decomposer::new(m, c), table, &x.ids, j, grid, t_sub)?;
    Ok(SubstitutionSeries {
        text: x.label.clone(),
        neuron: j,
        positions: grid.to_vec(),
        true_values,
        approx_values,
    })
}

/// One value per text at the calibration anchor, for several neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusValues {
    pub labels: Vec<String>,
    pub neurons: Vec<usize>,
    /// `true_values[k][text]` for `neurons[k]`.
    pub true_values: Vec<Vec<f64>>,
    pub approx_values: Vec<Vec<f64>>,
}

impl CorpusValues {
    pub fn fit(&self, k: usize) -> Result<FitStats> {
        fit_stats(&self.true_values[k], &self.approx_values[k])
    }
}

pub fn corpus_values(
    m: &FoldedModel,
    table: &ContributionTable,
    cal: &Calibration,
    corpus: &Corpus,
    neurons: &[usize],
) -> Result<CorpusValues> {
    table.check_calibration(cal)?;
    for &j in neurons {
        table.row(j)?;
    }
    let heads = table.header.heads.heads();
    let n = cal.n;
    let per_text: Vec<(Vec<f64>, Vec<f64>)> = corpus
        .sequences
        .par_iter()
        .map(|x| {
            if x.len() <= n {
                return Err(Error::TooShort {
                    need: n + 1,
                    have: x.len(),
                });
            }
            let y = x.substituted(n, cal.token);
            let st = position_state(m, &y.ids[..=n], n)?;
            let ov = heads_ov_vector(&st, m, heads)?;
            let mut tv = Vec::with_capacity(neurons.len());
            let mut av = Vec::with_capacity(neurons.len());
            for &j in neurons {
                tv.push(ov.dot(&m.w_in.column(j)));
                av.push(table.kernel_sum(j, &cal.median_kernel.weights, &y.ids)?);
            }
            Ok((tv, av))
        })
        .collect::<Result<_>>()?;
    let pick = |side: usize| -> Vec<Vec<f64>> {
        (0..neurons.len())
            .map(|k| {
                per_text
                    .iter()
                    .map(|p| if side == 0 { p.0[k] } else { p.1[k] })
                    .collect()
            })
            .collect()
    };
    Ok(CorpusValues {
        labels: corpus.sequences.iter().map(|s| s.label.clone()).collect(),
        neurons: neurons.to_vec(),
        true_values: pick(0),
        approx_values: pick(1),
    })
}

/// TV distance between exact and approximate attention rows, per head and
/// attending position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub text: String,
    pub heads: Vec<usize>,
    pub positions: Vec<usize>,
    /// `tv[k][p]` for `heads[k]` at `positions[p]`.
    pub tv: Vec<Vec<f64>>,
}

impl TvReport {
    pub fn median(&self, k: usize) -> f64 {
        let mut v = self.tv[k].clone();
        crate::numeric::median(&mut v)
    }
}

pub fn tv_report(m: &FoldedModel, c: NormConstant, x: &TokenSeq, heads: &HeadSet) -> Result<TvReport> {
    if x.len() < 2 {
        return Err(Error::TooShort { need: 2, have: x.len() });
    }
    heads.check(m)?;
    check_sequence(m, &x.ids)?;
    let d = Decomposer::new(m, c);
    let positions: Vec<usize> = (0..x.len()).collect();
    let tv = heads
        .heads()
        .iter()
        .map(|&h| {
            positions
                .par_iter()
                .map(|&n| {
                    let exact = exact_attention_row(m, &x.ids, h, n)?;
                    let approx = d.approx_row(h, n, &x.ids)?;
                    tv_distance(&exact, &approx)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TvReport {
        text: x.label.clone(),
        heads: heads.heads().to_vec(),
        positions,
        tv,
    })
}

/// `tv · (sup_i − inf_i of VO^h(i, x_i) · W_in[:, j]) / ln_mlp_scale(n)` over
/// `i ≤ n`.
pub fn ov_error_bound(m: &FoldedModel, x: &[usize], h: usize, n: usize, j: usize, tv: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tv) {
        return Err(Error::Config(format!("tv must lie in [0, 1], got {tv}")));
    }
    m.check_head(h)?;
    m.check_neuron(j)?;
    let ln = ln_mlp_scale(m, x, n)?;
    let (lo, hi) = (0..=n)
        .map(|i| vo_dot_exact(m, h, i, x[i], j))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Ok(tv * (hi - lo) / ln)
}

/// Relative slack granted to [`OvInequality::holds`] for rounding in the two
/// expectation sums.
pub const OV_ROUNDING: f64 = 1e-12;

/// Both sides of the OV error inequality for one `(text, head, position,
/// neuron)` tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvInequality {
    /// `Σ_i attn_i · VO^h(i, x_i) · W_in[:, j] / ln` with exact attention.
    pub exact: f64,
    /// The same expectation under the approximate attention row.
    pub approx: f64,
    pub tv: f64,
    pub bound: f64,
}

impl OvInequality {
    /// True when the gap is within the bound, up to summation rounding
    /// relative to the magnitudes involved (the bound itself is zero when
    /// the rows agree to within a few ulps).
    pub fn holds(&self) -> bool {
        let scale = self.exact.abs().max(self.approx.abs()).max(self.bound);
        (self.exact - self.approx).abs() <= self.bound + OV_ROUNDING * scale
    }
}

pub fn ov_inequality(
    m: &FoldedModel,
    c: NormConstant,
    x: &[usize],
    h: usize,
    n: usize,
    j: usize,
) -> Result<OvInequality> {
    m.check_neuron(j)?;
    let exact_row = exact_attention_row(m, x, h, n)?;
    let approx_row = Decomposer::new(m, c).approx_row(h, n, x)?;
    let tv = tv_distance(&exact_row, &approx_row)?.clamp(0.0, 1.0);
    let ln = ln_mlp_scale(m, x, n)?;
    let vo: Vec<f64> = (0..=n).map(|i| vo_dot_exact(m, h, i, x[i], j)).collect();
    let expect = |row: &[f64]| row.iter().zip(&vo).map(|(p, v)| p * v).sum::<f64>() / ln;
    Ok(OvInequality {
        exact: expect(&exact_row),
        approx: expect(&approx_row),
        tv,
        bound: ov_error_bound(m, x, h, n, j, tv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::fold_model;
    use crate::circuit::{calibrate, contribution_table};
    use crate::decomp::compute_c;
    use crate::reference::heads_ov_contribution;
    use crate::synthetic::{ToyConfig, ToyModel};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn toy(seed: u64) -> (ToyModel, FoldedModel) {
        let t = ToyModel::random(&ToyConfig::small(), seed);
        let f = fold_model(&t.raw).unwrap();
        (t, f)
    }

    #[test]
    fn perfect_fit() {
        let s = fit_stats(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.r, Some(1.0));
        assert_eq!(s.fvu, 0.0);
        assert_eq!(s.bias, 0.0);
        assert!(matches!(
            fit_stats(&[1.0, 1.0], &[0.0, 2.0]),
            Err(Error::DegenerateVariance)
        ));
        assert!(fit_stats(&[1.0], &[1.0]).is_err());
        assert_eq!(fit_stats(&[1.0, 2.0], &[3.0, 3.0]).unwrap().r, None);
    }

    #[test]
    fn fit_against_closed_form() {
        // truth = (0, 1, 2, 3), approx = truth + (1, -1, 1, -1)
        let s = fit_stats(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.0, 3.0, 2.0]).unwrap();
        assert!((s.fvu - 4.0 / 5.0).abs() < 1e-15);
        assert!((s.r.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(s.bias, 0.0);
    }

    proptest! {
        #[test]
        fn fit_affine_invariances(
            truth in prop::collection::vec(-10.0f64..10.0, 3..40),
            noise_seed in 0u64..1000,
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -10.0f64..10.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
            let approx: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-1.0..1.0)).collect();
            let base = fit_stats(&truth, &approx);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            let ta: Vec<f64> = truth.iter().map(|t| a * t + b).collect();
            let aa: Vec<f64> = approx.iter().map(|t| a * t + b).collect();
            let moved = fit_stats(&ta, &aa).unwrap();
            prop_assert!((moved.fvu - base.fvu).abs() < 1e-8 * (1.0 + base.fvu));
            if a > 0.0 {
                let shifted: Vec<f64> = approx.iter().map(|t| 2.5 * t - 7.0).collect();
                let r2 = fit_stats(&truth, &shifted).unwrap();
                if let (Some(r0), Some(r1)) = (base.r, r2.r) {
                    prop_assert!((r0 - r1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_position_series() {
        let (t, m) = toy(2);
        let x = t.random_tokens(10, 5);
        let heads = HeadSet::new([0, 1]);
        let got = true_series(&m, &heads, &x, 4, &[0], 7).unwrap()[0];
        let want = heads_ov_contribution(&m, &[7], 0, heads.heads(), 4).unwrap();
        assert!((got - want).abs() < 1e-12);
        // With all attention on position 0, the value is that token's VO sum.
        let ln = ln_mlp_scale(&m, &[7], 0).unwrap();
        let direct: f64 = (0..2).map(|h| vo_dot_exact(&m, h, 0, 7, 4)).sum::<f64>() / ln;
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn substituting_existing_token_is_identity() {
        let (t, m) = toy(4);
        let x = t.random_tokens(12, 5);
        let heads = HeadSet::new([1]);
        let got = true_series(&m, &heads, &x, 2, &[9], x[9]).unwrap()[0];
        let want = heads_ov_contribution(&m, &x, 9, &[1], 2).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn suffix_does_not_leak() {
        let (t, m) = toy(6);
        let heads = HeadSet::new([0, 1]);
        let mut x = t.random_tokens(16, 1);
        let a = true_series(&m, &heads, &x, 3, &[4, 8], 2).unwrap();
        for (k, v) in t.random_tokens(7, 77).into_iter().enumerate() {
            x[9 + k] = v;
        }
        let b = true_series(&m, &heads, &x, 3, &[4, 8], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_table_gives_zero_series() {
        let (t, m) = toy(8);
        let c = compute_c(&m);
        let y = TokenSeq::new("y", t.random_tokens(14, 3));
        let cal = calibrate(&m, c, &HeadSet::new([0, 1]), &y, 8, 2).unwrap();
        let mut table = contribution_table(&m, c, &HeadSet::new([0, 1]), &cal).unwrap();
        table.values = Array2::zeros(table.values.dim());
        let s = approx_series(&Decomposer::new(&m, c), &table, &y.ids, 1, &[3, 7, 13], 2).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    /// Toy where every approximation premise holds at every position: zero
    /// position embeddings (position-independent VO and uniform kernels),
    /// zero keys (denominators are 1), and a second head that cancels the
    /// first head's output so the MLP LayerNorm scale depends only on the
    /// substituted token.
    pub(crate) fn series_ladder(seed: u64) -> (ToyModel, FoldedModel) {
        let (t, mut m) = toy(seed);
        m.w_pos.fill(0.0);
        for h in 0..2 {
            m.heads[h].w_k.fill(0.0);
        }
        m.heads[1].w_v = -&m.heads[0].w_v;
        m.heads[1].b_v = -&m.heads[0].b_v;
        m.heads[1].w_o = m.heads[0].w_o.clone();
        (t, m)
    }

    #[test]
    fn series_ladder_is_exact() {
        let (t, m) = series_ladder(10);
        let c = compute_c(&m);
        let t_sub = 5;
        let cal_text = TokenSeq::new("cal", t.random_tokens(16, 1));
        let cal = calibrate(&m, c, &HeadSet::new([0]), &cal_text, 8, t_sub).unwrap();
        let table = contribution_table(&m, c, &HeadSet::new([0]), &cal).unwrap();
        for seed in 0..4 {
            let x = TokenSeq::new("x", t.random_tokens(16, 50 + seed));
            for j in [0, 3, 7, 11] {
                let s = substitution_series(&m, c, &table, &x, j, &[1, 4, 9, 15], t_sub).unwrap();
                for (a, b) in s.true_values.iter().zip(&s.approx_values) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn tv_report_ranges_and_exact_case() {
        let (t, m) = toy(12);
        let c = compute_c(&m);
        let x = TokenSeq::new("x", t.random_tokens(16, 3));
        let r = tv_report(&m, c, &x, &HeadSet::new([0, 1])).unwrap();
        assert!(r.tv.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        // A single key position has both rows equal to [1].
        assert!(r.tv.iter().all(|row| row[0] == 0.0));

        let mut exact = m.clone();
        exact.w_pos.fill(0.0);
        let r = tv_report(&exact, compute_c(&exact), &x, &HeadSet::new([0, 1])).unwrap();
        assert!(r.tv.iter().flatten().all(|v| *v < 1e-12));
        assert!(tv_report(&m, c, &TokenSeq::new("s", vec![1]), &HeadSet::new([0])).is_err());
    }

    #[test]
    fn error_bound_trivial_cases() {
        let (t, m) = toy(14);
        let x = t.random_tokens(12, 3);
        assert_eq!(ov_error_bound(&m, &x, 0, 9, 2, 0.0).unwrap(), 0.0);
        let same = vec![4; 12];
        let mut flat = m.clone();
        flat.w_pos.fill(0.0);
        assert_eq!(ov_error_bound(&flat, &same, 0, 9, 2, 0.7).unwrap(), 0.0);
        assert!(ov_error_bound(&m, &x, 0, 9, 2, 1.5).is_err());
    }

    #[test]
    fn inequality_holds_on_toy() {
        let (t, m) = toy(16);
        let c = compute_c(&m);
        for seed in 0..10 {
            let x = t.random_tokens(16, seed);
            for (h, n, j) in [(0, 15, 1), (1, 7, 3), (0, 3, 11), (1, 12, 0)] {
                let q = ov_inequality(&m, c, &x, h, n, j).unwrap();
                assert!(q.holds(), "{q:?}");
            }
        }
    }

    #[test]
    fn corpus_mode_at_anchor_matches_pieces() {
        let (t, m) = toy(18);
        let c = compute_c(&m);
        let heads = HeadSet::new([0, 1]);
        let y = TokenSeq::new("cal", t.random_tokens(14, 2));
        let cal = calibrate(&m, c, &heads, &y, 9, 3).unwrap();
        let table = contribution_table(&m, c, &heads, &cal).unwrap();
        let corpus = Corpus {
            sequences: (0..4)
                .map(|s| TokenSeq::new(format!("t{s}"), t.random_tokens(14, 10 + s)))
                .collect(),
            source: "mem".into(),
            warnings: vec![],
        };
        let cv = corpus_values(&m, &table, &cal, &corpus, &[2, 5]).unwrap();
        for (k, &j) in [2usize, 5].iter().enumerate() {
            for (i, x) in corpus.sequences.iter().enumerate() {
                let sub = x.substituted(9, 3);
                let want = heads_ov_contribution(&m, &sub.ids, 9, heads.heads(), j).unwrap();
                assert!((cv.true_values[k][i] - want).abs() < 1e-12);
                let approx = crate::circuit::approx_contribution(&table, &cal, x, j).unwrap();
                assert_eq!(cv.approx_values[k][i], approx);
            }
        }
    }

    #[test]
    fn grid_helpers() {
        assert_eq!(series_grid(50, 16), vec![16, 32, 48]);
        let s = SubstitutionSeries {
            text: "a,b".into(),
            neuron: 1,
            positions: vec![2],
            true_values: vec![0.5],
            approx_values: vec![0.25],
        };
        assert_eq!(s.to_csv(), "text,neuron,position,true,approx\n\"a,b\",1,2,0.5,0.25\n");
        assert!(check_grid(&[1, 2, 3], &[2, 1]).is_err());
    }
}
