//! Context-sensitive neuron discovery over a contribution table.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::ContributionTable;
use crate::error::{Error, Result};
use crate::tokens::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    /// Acceptance threshold on `top[j]`.
    pub theta: f64,
    /// Rank of the order statistic.
    pub k: usize,
    /// Tokens per side in a report.
    pub width: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            theta: 5.0,
            k: 20,
            width: 50,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_nan() || self.theta <= 0.0 || self.k == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "need theta > 0, k >= 1, width >= 1 (got {}, {}, {})",
                self.theta, self.k, self.width
            )));
        }
        Ok(())
    }
}

/// `k`-th largest `|value|` of `row`, by selection.
pub fn top_stat(row: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > row.len() {
        return Err(Error::RankOutOfRange {
            rank: k,
            len: row.len(),
        });
    }
    let mut abs: Vec<f64> = row.iter().map(|v| v.abs()).collect();
    let (_, kth, _) = abs.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// Neurons with `top[j] ≥ θ`, by `top[j]` descending then neuron id.
pub fn select_neurons(table: &ContributionTable, cfg: &DiscoveryConfig) -> Result<Vec<(usize, f64)>> {
    let mut stats = (0..table.header.d_mlp)
        .into_par_iter()
        .map(|j| {
            let row = table.values.row(j);
            let row = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
            top_stat(&row, cfg.k).map(|s| (j, s))
        })
        .collect::<Result<Vec<_>>>()?;
    stats.retain(|(_, s)| *s >= cfg.theta);
    stats.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(stats)
}

/// Token ids kept out of reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DenyList(BTreeSet<usize>);

impl DenyList {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        DenyList(ids.into_iter().collect())
    }

    /// One entry per line: a token id, a JSON string literal such as
    /// `" UK"`, or bare token text.
    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ids = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let id = if let Ok(id) = line.trim().parse::<usize>() {
                Some(id)
            } else if let Ok(s) = serde_json::from_str::<String>(line.trim()) {
                vocab.lookup(&s)
            } else {
                vocab.lookup(line)
            };
            let id = id.ok_or_else(|| Error::MalformedLine {
                line: i + 1,
                reason: format!("unknown token {line:?}"),
            })?;
            ids.insert(id);
        }
        Ok(DenyList(ids))
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.contains(&id)
    }
}

/// A `(token text, value)` pair, serialized as a two-element array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry(pub String, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub neuron: usize,
    pub top_stat: f64,
    /// Most positive tokens, descending.
    pub top: Vec<ReportEntry>,
    /// Most negative tokens, ascending.
    pub bottom: Vec<ReportEntry>,
    pub top_ids: Vec<usize>,
    pub bottom_ids: Vec<usize>,
}

/// Signed top and bottom `width` tokens of neuron `j`; equal values are
/// ordered by token id.
pub fn neuron_report(
    table: &ContributionTable,
    vocab: &Vocab,
    j: usize,
    cfg: &DiscoveryConfig,
    deny: Option<&DenyList>,
) -> Result<NeuronReport> {
    let row = table.row(j)?;
    let values = row.to_vec();
    let top_stat = top_stat(&values, cfg.k.min(values.len()))?;
    let mut ids: Vec<usize> = (0..values.len())
        .filter(|t| deny.is_none_or(|d| !d.contains(*t)))
        .collect();
    ids.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top_ids: Vec<usize> = ids.iter().copied().take(cfg.width).collect();
    ids.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let bottom_ids: Vec<usize> = ids.iter().copied().take(cfg.width).collect();
    let entries = |list: &[usize]| -> Result<Vec<ReportEntry>> {
        list.iter()
            .map(|&t| Ok(ReportEntry(vocab.decode_token(t)?, values[t])))
            .collect()
    };
    Ok(NeuronReport {
        neuron: j,
        top_stat,
        top: entries(&top_ids)?,
        bottom: entries(&bottom_ids)?,
        top_ids,
        bottom_ids,
    })
}

impl NeuronReport {
    /// Two-column plain-text rendering.
    pub fn render(&self) -> String {
        let mut out = format!("neuron {}  top[j] = {:.4}\n", self.neuron, self.top_stat);
        out.push_str(&format!(
            "{:>4}  {:<28} {:>10}    {:<28} {:>10}\n",
            "#", "top", "", "bottom", ""
        ));
        for i in 0..self.top.len().max(self.bottom.len()) {
            let cell = |e: Option<&ReportEntry>| match e {
                Some(ReportEntry(s, v)) => (format!("{s:?}"), format!("{v:.4}")),
                None => (String::new(), String::new()),
            };
            let (ts, tv) = cell(self.top.get(i));
            let (bs, bv) = cell(self.bottom.get(i));
            out.push_str(&format!("{:>4}  {ts:<28} {tv:>10}    {bs:<28} {bv:>10}\n", i + 1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{HeadSet, TableHeader};
    use ndarray::Array2;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn table(values: Array2<f64>) -> ContributionTable {
        let (d_mlp, d_voc) = values.dim();
        ContributionTable {
            header: TableHeader {
                d_mlp,
                d_voc,
                anchor_n: 0,
                anchor_token: 0,
                heads: HeadSet::new([0]),
                calibration_digest: "x".into(),
            },
            values,
        }
    }

    fn vocab(n: usize) -> Vocab {
        let map: HashMap<String, usize> = (0..n).map(|i| (format!("t{i}"), i)).collect();
        Vocab::from_encoder(map).unwrap()
    }

    #[test]
    fn twentieth_of_one_to_twentyfive() {
        let row: Vec<f64> = (1..=25)
            .map(|v| if v % 2 == 0 { -(v as f64) } else { v as f64 })
            .collect();
        assert_eq!(top_stat(&row, 20).unwrap(), 6.0);
    }

    #[test]
    fn constant_row() {
        let row = vec![-2.5; 30];
        for k in [1, 7, 30] {
            assert_eq!(top_stat(&row, k).unwrap(), 2.5);
        }
        assert!(matches!(top_stat(&row, 31), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(top_stat(&row, 0), Err(Error::RankOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn selection_matches_sort(row in prop::collection::vec(-100.0f64..100.0, 1..200), k in 1usize..200) {
            prop_assume!(k <= row.len());
            let mut sorted: Vec<f64> = row.iter().map(|v| v.abs()).collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(top_stat(&row, k).unwrap(), sorted[k - 1]);
        }

        #[test]
        fn filtering_is_monotone(seed in 0u64..1000, t1 in 0.01f64..3.0, dt in 0.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals = Array2::from_shape_fn((12, 30), |_| rng.random_range(-4.0..4.0));
            let tab = table(vals);
            let cfg = |theta| DiscoveryConfig { theta, k: 3, width: 5 };
            let low: BTreeSet<usize> = select_neurons(&tab, &cfg(t1)).unwrap().into_iter().map(|p| p.0).collect();
            let high: BTreeSet<usize> = select_neurons(&tab, &cfg(t1 + dt)).unwrap().into_iter().map(|p| p.0).collect();
            prop_assert!(high.is_subset(&low));
        }
    }

    #[test]
    fn selection_extremes_and_order() {
        let vals = Array2::from_shape_fn((4, 6), |(j, t)| (j as f64 + 1.0) * if t % 2 == 0 { 1.0 } else { -1.0 });
        let tab = table(vals);
        let all = select_neurons(
            &tab,
            &DiscoveryConfig {
                theta: 1e-9,
                k: 2,
                width: 3,
            },
        )
        .unwrap();
        assert_eq!(all.iter().map(|p| p.0).collect::<Vec<_>>(), vec![3, 2, 1, 0]);
        let none = select_neurons(
            &tab,
            &DiscoveryConfig {
                theta: 4.5,
                k: 2,
                width: 3,
            },
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn report_lists_and_round_trip() {
        let vals = Array2::from_shape_vec((1, 6), vec![0.5, -1.0, 2.0, 0.5, -3.0, 0.0]).unwrap();
        let tab = table(vals);
        let v = vocab(6);
        let cfg = DiscoveryConfig {
            theta: 1.0,
            k: 2,
            width: 3,
        };
        let r = neuron_report(&tab, &v, 0, &cfg, None).unwrap();
        assert_eq!(r.top_ids, vec![2, 0, 3]);
        assert_eq!(r.bottom_ids, vec![4, 1, 5]);
        assert_eq!(r.top_stat, 2.0);
        for (e, &id) in r.top.iter().zip(&r.top_ids) {
            assert_eq!(e.1, tab.values[[0, id]]);
            assert_eq!(e.0, format!("t{id}"));
        }
        let deny = DenyList::new([2]);
        let r = neuron_report(&tab, &v, 0, &cfg, Some(&deny)).unwrap();
        assert_eq!(r.top_ids[0], 0);
        assert!(matches!(
            neuron_report(&tab, &v, 1, &cfg, None),
            Err(Error::NeuronOutOfRange { .. })
        ));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["top"][0][0], "t0");
    }

    #[test]
    fn zero_row_report() {
        let tab = table(Array2::zeros((2, 8)));
        let cfg = DiscoveryConfig {
            theta: 1.0,
            k: 2,
            width: 4,
        };
        let r = neuron_report(&tab, &vocab(8), 1, &cfg, None).unwrap();
        assert!(r.top.iter().chain(&r.bottom).all(|e| e.1 == 0.0));
        assert_eq!(r.top_ids, vec![0, 1, 2, 3]);
        assert!(r.render().contains("neuron 1"));
    }

    #[test]
    fn deny_list_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deny.txt");
        std::fs::write(&p, "3\n\"t4\"\nt1\n\n").unwrap();
        let d = DenyList::load(&p, &vocab(6)).unwrap();
        assert_eq!(d, DenyList::new([1, 3, 4]));
        std::fs::write(&p, "nope\n").unwrap();
        assert!(matches!(
            DenyList::load(&p, &vocab(6)),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }
}
