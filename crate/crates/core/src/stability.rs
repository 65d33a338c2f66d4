//! Positionally-normalized softmax denominators and their concentration.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::FoldedModel;
use crate::decomp::{Decomposer, NormConstant, PositionalKernel};
use crate::error::{Error, Result};
use crate::tokens::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenomSample {
    pub head: usize,
    pub n: usize,
    pub token: usize,
    pub value: f64,
}

/// `Σ_{i≤n} pos_i · content_{y_i}` with `y = x` except `y_n = t`.
pub fn denom(m: &FoldedModel, c: NormConstant, h: usize, n: usize, t: usize, x: &[usize]) -> Result<DenomSample> {
    let d = Decomposer::new(m, c);
    denom_with(&d, h, n, t, x)
}

pub fn denom_with(d: &Decomposer, h: usize, n: usize, t: usize, x: &[usize]) -> Result<DenomSample> {
    let value = d.log_denom(h, n, t, x)?.exp();
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::NonFinite { head: h, token: t });
    }
    Ok(DenomSample {
        head: h,
        n,
        token: t,
        value,
    })
}

/// Denominators of one text at each of `positions`.
pub fn denom_series(d: &Decomposer, h: usize, t: usize, x: &[usize], positions: &[usize]) -> Result<Vec<f64>> {
    positions
        .iter()
        .map(|&n| Ok(denom_with(d, h, n, t, x)?.value))
        .collect()
}

/// Every `stride`-th position in `start..end`.
pub fn strided_positions(start: usize, end: usize, stride: usize) -> Vec<usize> {
    (start..end).step_by(stride.max(1)).collect()
}

/// Input-independent per-position normalization: the corpus mean of the
/// denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenomNormalizer {
    pub head: usize,
    pub token: usize,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    pub corpus_size: usize,
}

impl DenomNormalizer {
    pub fn value_at(&self, n: usize) -> Option<f64> {
        self.positions.iter().position(|&p| p == n).map(|k| self.values[k])
    }
}

pub fn denom_normalizer(
    m: &FoldedModel,
    c: NormConstant,
    h: usize,
    t: usize,
    corpus: &Corpus,
    positions: &[usize],
) -> Result<DenomNormalizer> {
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let need = positions.iter().max().map_or(0, |p| p + 1);
    for seq in &corpus.sequences {
        if seq.len() < need {
            return Err(Error::TooShort { need, have: seq.len() });
        }
    }
    let d = Decomposer::new(m, c);
    let per_text: Vec<Vec<f64>> = corpus
        .sequences
        .par_iter()
        .map(|seq| denom_series(&d, h, t, &seq.ids, positions))
        .collect::<Result<_>>()?;
    let k = corpus.sequences.len() as f64;
    let values = (0..positions.len())
        .map(|p| per_text.iter().map(|s| s[p]).sum::<f64>() / k)
        .collect();
    Ok(DenomNormalizer {
        head: h,
        token: t,
        positions: positions.to_vec(),
        values,
        corpus_size: corpus.sequences.len(),
    })
}

/// Population standard deviation divided by the mean.
pub fn relative_std(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    var.sqrt() / mean.abs()
}

/// Inputs to the concentration inequalities for
/// `Σ_{i<n} pos_i · content_{x_i}` with `x_i` i.i.d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationInputs {
    /// `Σ_{i<n} pos_i²`
    pub kernel_sq_sum: f64,
    /// Content bounds `A ≤ content ≤ B`.
    pub bounds: Option<(f64, f64)>,
    pub variance: Option<f64>,
    /// Expected content factor.
    pub mean: f64,
    /// Deviation threshold, `> 0`.
    pub t: f64,
}

impl ConcentrationInputs {
    pub fn from_kernel(kernel: &PositionalKernel, stats: &ContentStats, t: f64) -> Self {
        ConcentrationInputs {
            kernel_sq_sum: kernel.sum_of_squares_before_last(),
            bounds: Some((stats.min, stats.max)),
            variance: Some(stats.variance),
            mean: stats.mean,
            t,
        }
    }

    fn check_t(&self) -> Result<()> {
        if self.t.is_nan() || self.t <= 0.0 {
            return Err(Error::InvalidConcentration(format!(
                "deviation t must be positive, got {}",
                self.t
            )));
        }
        Ok(())
    }
}

/// `min(1, exp(−2t² / (Σ_{i<n} pos_i² · (B − A)²)))`.
pub fn hoeffding_bound(ci: &ConcentrationInputs) -> Result<f64> {
    ci.check_t()?;
    let (a, b) = ci.bounds.ok_or(Error::MissingBounds)?;
    if a > b {
        return Err(Error::MissingBounds);
    }
    if ci.mean < a || ci.mean > b {
        return Err(Error::InvalidConcentration(format!(
            "mean {} outside [{a}, {b}]",
            ci.mean
        )));
    }
    let spread = ci.kernel_sq_sum * (b - a) * (b - a);
    if spread == 0.0 {
        return Ok(0.0);
    }
    Ok((-2.0 * ci.t * ci.t / spread).exp().min(1.0))
}

/// `min(1, Σ_{i<n} pos_i² · σ² / t²)`.
pub fn chebyshev_bound(ci: &ConcentrationInputs) -> Result<f64> {
    ci.check_t()?;
    let var = ci.variance.ok_or(Error::MissingVariance)?;
    if var < 0.0 {
        return Err(Error::InvalidConcentration(format!("negative variance {var}")));
    }
    Ok((ci.kernel_sq_sum * var / (ci.t * ci.t)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentStats {
    pub mean: f64,
    pub variance: f64,
    /// Smallest factor over the support of the token distribution.
    pub min: f64,
    pub max: f64,
}

/// Moments and range of a discrete distribution over values.
pub fn discrete_stats(values: &[f64], probs: &[f64]) -> Result<ContentStats> {
    if values.len() != probs.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: probs.len(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::NotNormalized { sum });
    }
    let mean: f64 = values.iter().zip(probs).map(|(v, p)| v * p).sum();
    let variance: f64 = values.iter().zip(probs).map(|(v, p)| p * (v - mean) * (v - mean)).sum();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, p) in values.iter().zip(probs) {
        if *p > 0.0 {
            min = min.min(*v);
            max = max.max(*v);
        }
    }
    Ok(ContentStats {
        mean,
        variance,
        min,
        max,
    })
}

/// Content-factor statistics of a token drawn from `dist` (one probability
/// per vocabulary entry), by full-vocabulary sweep.
pub fn content_stats(
    m: &FoldedModel,
    c: NormConstant,
    h: usize,
    n: usize,
    t_n: usize,
    dist: &[f64],
) -> Result<ContentStats> {
    if dist.len() != m.dims.d_voc {
        return Err(Error::LengthMismatch {
            left: dist.len(),
            right: m.dims.d_voc,
        });
    }
    let logs = Decomposer::new(m, c).log_content_vocab(h, n, t_n)?;
    let factors: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    discrete_stats(&factors, dist)
}

/// Unigram frequencies of a corpus over `0..d_voc`.
pub fn unigram_distribution(corpus: &Corpus, d_voc: usize) -> Vec<f64> {
    let mut counts = vec![0.0; d_voc];
    let mut total = 0.0;
    for seq in &corpus.sequences {
        for &t in &seq.ids {
            counts[t] += 1.0;
            total += 1.0;
        }
    }
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

/// One cell of the Monte-Carlo check of the concentration bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCell {
    /// Full kernel over `0..=n`; the last entry belongs to the fixed token.
    pub kernel: Vec<f64>,
    /// Content factor of each token of the synthetic vocabulary.
    pub factors: Vec<f64>,
    pub probs: Vec<f64>,
    pub t: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub empirical: f64,
    pub hoeffding: f64,
    pub chebyshev: f64,
    /// Observed range of the sampled factors (for checking `A ≤ · ≤ B`).
    pub observed_min: f64,
    pub observed_max: f64,
    pub stats: ContentStats,
}

/// Frequency of `|Σ_{i<n} pos_i c_i − (1 − pos_n) μ| ≥ t` over i.i.d. draws,
/// alongside both bounds.
pub fn simulate_cell(cell: &SimulationCell, rng: &mut ChaCha8Rng) -> Result<SimulationResult> {
    let stats = discrete_stats(&cell.factors, &cell.probs)?;
    let k = cell.kernel.len();
    if k < 2 {
        return Err(Error::InvalidConcentration("kernel needs n ≥ 1".into()));
    }
    let head = &cell.kernel[..k - 1];
    let kernel_sq_sum: f64 = head.iter().map(|p| p * p).sum();
    let center = (1.0 - cell.kernel[k - 1]) * stats.mean;
    let sampler = WeightedIndex::new(&cell.probs).map_err(|e| Error::InvalidConcentration(e.to_string()))?;
    let mut hits = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..cell.trials {
        let mut s = 0.0;
        for p in head {
            let v = cell.factors[sampler.sample(rng)];
            lo = lo.min(v);
            hi = hi.max(v);
            s += p * v;
        }
        if (s - center).abs() >= cell.t {
            hits += 1;
        }
    }
    let ci = ConcentrationInputs {
        kernel_sq_sum,
        bounds: Some((stats.min, stats.max)),
        variance: Some(stats.variance),
        mean: stats.mean,
        t: cell.t,
    };
    Ok(SimulationResult {
        empirical: hits as f64 / cell.trials as f64,
        hoeffding: hoeffding_bound(&ci)?,
        chebyshev: chebyshev_bound(&ci)?,
        observed_min: lo,
        observed_max: hi,
        stats,
    })
}

/// Run every cell on its own ChaCha stream of `seed`; results do not depend
/// on the thread schedule.
pub fn simulate_grid(cells: &[SimulationCell], seed: u64) -> Result<Vec<SimulationResult>> {
    cells
        .par_iter()
        .enumerate()
        .map(|(idx, cell)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            simulate_cell(cell, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::fold_model;
    use crate::decomp::compute_c;
    use crate::synthetic::{ToyConfig, ToyModel};
    use crate::tokens::TokenSeq;
    use std::path::PathBuf;

    fn toy() -> (ToyModel, FoldedModel) {
        let t = ToyModel::random(&ToyConfig::small(), 21);
        let f = fold_model(&t.raw).unwrap();
        (t, f)
    }

    #[test]
    fn single_term_denominator() {
        let (_, m) = toy();
        let c = compute_c(&m);
        let s = denom(&m, c, 0, 0, 4, &[9]).unwrap();
        let f = crate::decomp::content_factor(&m, c, 0, 0, 4, 4).unwrap();
        assert!((s.value - f).abs() < 1e-12);
    }

    #[test]
    fn zero_query_denominator_is_one() {
        let (t, mut m) = toy();
        m.heads[1].w_q.fill(0.0);
        m.heads[1].b_q.fill(0.0);
        let x = t.random_tokens(12, 4);
        let s = denom(&m, compute_c(&m), 1, 11, 3, &x).unwrap();
        assert!((s.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn denominator_matches_direct_sum() {
        let (t, m) = toy();
        let c = compute_c(&m);
        let x = t.random_tokens(14, 8);
        let (h, n, tok) = (1, 13, 2);
        let k = crate::decomp::positional_kernel(&m, c, h, n, tok).unwrap();
        let mut y = x.clone();
        y[n] = tok;
        let direct: f64 = (0..=n)
            .map(|i| k.weights[i] * crate::decomp::content_factor(&m, c, h, n, y[i], tok).unwrap())
            .sum();
        let s = denom(&m, c, h, n, tok, &x).unwrap();
        assert!((s.value - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn normalizer_of_single_text() {
        let (t, m) = toy();
        let c = compute_c(&m);
        let x = t.random_tokens(16, 1);
        let corpus = Corpus {
            sequences: vec![TokenSeq::new("a", x.clone())],
            source: PathBuf::from("mem"),
            warnings: vec![],
        };
        let norm = denom_normalizer(&m, c, 0, 3, &corpus, &[4, 9, 15]).unwrap();
        for (k, &n) in [4, 9, 15].iter().enumerate() {
            let v = denom(&m, c, 0, n, 3, &x).unwrap().value;
            assert_eq!(norm.values[k], v);
        }
        assert_eq!(norm.value_at(9), Some(norm.values[1]));
    }

    #[test]
    fn normalizer_errors() {
        let (t, m) = toy();
        let c = compute_c(&m);
        let corpus = Corpus {
            sequences: vec![TokenSeq::new("a", t.random_tokens(5, 1))],
            source: PathBuf::from("mem"),
            warnings: vec![],
        };
        assert!(matches!(
            denom_normalizer(&m, c, 0, 3, &corpus, &[9]),
            Err(Error::TooShort { .. })
        ));
        let empty = Corpus {
            sequences: vec![],
            ..corpus
        };
        assert!(matches!(
            denom_normalizer(&m, c, 0, 3, &empty, &[1]),
            Err(Error::EmptyCorpus)
        ));
    }

    fn inputs(sq: f64, t: f64) -> ConcentrationInputs {
        ConcentrationInputs {
            kernel_sq_sum: sq,
            bounds: Some((0.5, 2.0)),
            variance: Some(0.2),
            mean: 1.0,
            t,
        }
    }

    #[test]
    fn hoeffding_decays_in_t() {
        let mut prev = 1.0;
        for k in 1..20 {
            let b = hoeffding_bound(&inputs(0.05, k as f64 * 0.05)).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn hoeffding_uniform_kernel_closed_form() {
        let n_minus_1 = 40.0;
        let (a, b, t) = (0.5, 2.0, 0.3);
        let got = hoeffding_bound(&inputs(1.0 / n_minus_1, t)).unwrap();
        let want = (-2.0 * t * t * n_minus_1 / ((b - a) * (b - a))).exp();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_laws() {
        let mut ci = inputs(0.05, 0.2);
        ci.variance = Some(0.0);
        assert_eq!(chebyshev_bound(&ci).unwrap(), 0.0);
        let b1 = chebyshev_bound(&inputs(0.05, 0.4)).unwrap();
        let b2 = chebyshev_bound(&inputs(0.05, 0.8)).unwrap();
        assert!((b1 - 4.0 * b2).abs() < 1e-15);
    }

    #[test]
    fn bound_input_errors() {
        let mut ci = inputs(0.05, 0.2);
        ci.bounds = None;
        assert!(matches!(hoeffding_bound(&ci), Err(Error::MissingBounds)));
        let mut ci = inputs(0.05, 0.2);
        ci.variance = None;
        assert!(matches!(chebyshev_bound(&ci), Err(Error::MissingVariance)));
        assert!(hoeffding_bound(&inputs(0.05, 0.0)).is_err());
    }

    #[test]
    fn stats_of_point_mass_and_pair() {
        let s = discrete_stats(&[3.0, 7.0], &[1.0, 0.0]).unwrap();
        assert_eq!((s.mean, s.variance, s.min, s.max), (3.0, 0.0, 3.0, 3.0));
        let s = discrete_stats(&[2.0, 5.0], &[0.5, 0.5]).unwrap();
        assert_eq!(s.mean, 3.5);
        assert!((s.variance - 9.0 / 4.0).abs() < 1e-15);
        assert!(matches!(
            discrete_stats(&[1.0], &[0.4]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn content_stats_point_mass_on_model() {
        let (_, m) = toy();
        let c = compute_c(&m);
        let mut dist = vec![0.0; m.dims.d_voc];
        dist[6] = 1.0;
        let s = content_stats(&m, c, 0, 7, 2, &dist).unwrap();
        let f = crate::decomp::content_factor(&m, c, 0, 7, 6, 2).unwrap();
        assert!((s.mean - f).abs() < 1e-12);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.min, s.max);
    }

    #[test]
    fn grid_is_reproducible() {
        let cell = SimulationCell {
            kernel: vec![0.25; 4],
            factors: vec![0.5, 1.5],
            probs: vec![0.5, 0.5],
            t: 0.1,
            trials: 500,
        };
        let a = simulate_grid(&[cell.clone(), cell.clone()], 7).unwrap();
        let b = simulate_grid(&[cell.clone(), cell], 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].empirical, -1.0);
    }
}
