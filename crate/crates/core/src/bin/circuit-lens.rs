use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use circuit_lens::checkpoint::{fold_model, load_checkpoint, FoldedModel, NameMap};
use circuit_lens::circuit::{
    approx_contribution, calibrate_with, contribution_table, Calibration, ContributionTable, HeadSet,
};
use circuit_lens::decomp::{classify_kernel, compute_c, Decomposer};
use circuit_lens::discovery::{neuron_report, select_neurons, DenyList, DiscoveryConfig};
use circuit_lens::reference::{self, explicit};
use circuit_lens::stability::{
    chebyshev_bound, content_stats, denom_series, hoeffding_bound, relative_std, strided_positions,
    unigram_distribution, ConcentrationInputs,
};
use circuit_lens::synthetic::{ToyConfig, ToyModel};
use circuit_lens::tokens::{load_corpus, Corpus, StopWords, Vocab};
use circuit_lens::validate::{corpus_values, series_grid, substitution_series, tv_report, FitStats};
use circuit_lens::Error;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "circuit-lens",
    version,
    about = "First-layer contextual-circuit analysis for GPT-2-Small"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Safetensors file or raw-array directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// JSON name map; defaults to the Hugging Face GPT-2 key names.
    #[arg(long, global = true)]
    name_map: Option<PathBuf>,
    /// GPT-2 `encoder.json` style vocabulary.
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CIRCUIT_LENS_OUT", default_value = "circuit-lens-out")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct Anchor {
    /// Anchor position, 0-based (default n_ctx / 2).
    #[arg(long)]
    anchor_pos: Option<usize>,
    /// Anchor token: decoded text or numeric id.
    #[arg(long, default_value = " the")]
    anchor_token: String,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Mode {
    Series,
    Corpus,
}

#[derive(Subcommand)]
enum Command {
    /// Print dimensions and folding diagnostics.
    Inspect {
        /// Use a seeded synthetic checkpoint instead of `--checkpoint`.
        #[arg(long)]
        synthetic: bool,
    },
    /// Classify the positional kernels at the anchor.
    Kernels {
        #[command(flatten)]
        anchor: Anchor,
        /// Heads to report (default: all).
        #[arg(long)]
        heads: Option<String>,
        /// Include the kernel weights in the output.
        #[arg(long)]
        weights: bool,
    },
    /// TV distance between exact and approximate attention over a corpus.
    Tv {
        /// JSON-lines corpus of `{"label", "tokens"}` records (required)
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "0,2,6,8,9,10")]
        heads: String,
    },
    /// Softmax denominators across positions and texts.
    Denoms {
        /// JSON-lines corpus of `{"label", "tokens"}` records (required)
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "0,2,6,8,9,10")]
        heads: String,
        #[command(flatten)]
        anchor: Anchor,
        #[arg(long, default_value_t = 8)]
        stride: usize,
        /// Deviation threshold for the bounds, relative to the expected denominator.
        #[arg(long, default_value_t = 0.1)]
        deviation: f64,
    },
    /// Freeze denominators and the MLP LayerNorm scale from one text.
    Calibrate {
        /// Corpus file holding the calibration text.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Which record of the calibration file to use.
        #[arg(long, default_value_t = 0)]
        text_index: usize,
        #[command(flatten)]
        anchor: Anchor,
        #[arg(long, default_value = "0,2,6,8,9,10")]
        heads: String,
        /// Extra positions averaged into the LayerNorm-scale estimate.
        #[arg(long, value_delimiter = ',')]
        ln_positions: Vec<usize>,
    },
    /// Build the vocabulary-wide contribution table.
    Table {
        /// Calibration JSON written by `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Subset of the calibrated heads (default: all of them).
        #[arg(long)]
        heads: Option<String>,
    },
    /// List neurons whose k-th largest |contribution| reaches theta.
    Discover {
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        disc: DiscArgs,
    },
    /// Print one neuron's top and bottom tokens.
    Report {
        #[arg(long)]
        neuron: usize,
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        disc: DiscArgs,
    },
    /// Table-based approximate contribution of one neuron for every text.
    Score {
        #[arg(long)]
        neuron: usize,
        /// JSON-lines corpus of `{"label", "tokens"}` records (required)
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        table: TableArgs,
    },
    /// Compare table approximations with the exact forward pass.
    Validate {
        #[arg(long, value_enum, default_value = "corpus")]
        mode: Mode,
        /// JSON-lines corpus of `{"label", "tokens"}` records (required)
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        disc: DiscArgs,
        /// Neurons to validate (default: the discovered ones).
        #[arg(long, value_delimiter = ',')]
        neurons: Vec<usize>,
        /// Grid stride for series mode.
        #[arg(long, default_value_t = 16)]
        stride: usize,
        /// Use at most this many texts, sampled with `--seed`.
        #[arg(long)]
        max_texts: Option<usize>,
        /// Also write per-position series as CSV.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
struct TableArgs {
    /// Table file (default: `<out>/table.bin`).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Calibration JSON; when given, the table must have been built from it.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct DiscArgs {
    #[arg(long, default_value_t = 5.0)]
    theta: f64,
    #[arg(long, default_value_t = 20)]
    rank: usize,
    #[arg(long, default_value_t = 50)]
    width: usize,
    /// File of tokens to leave out of reports.
    #[arg(long)]
    deny: Option<PathBuf>,
}

impl DiscArgs {
    fn config(&self) -> Result<DiscoveryConfig> {
        let cfg = DiscoveryConfig {
            theta: self.theta,
            k: self.rank,
            width: self.width,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn required<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| config_error(format!("`{flag}` is required for this command")))
}

struct Ctx {
    common: Common,
}

impl Ctx {
    fn name_map(&self) -> Result<NameMap> {
        Ok(match &self.common.name_map {
            Some(p) => NameMap::load(p)?,
            None => NameMap::gpt2_hf(),
        })
    }

    fn model(&self) -> Result<FoldedModel> {
        let path = required(&self.common.checkpoint, "--checkpoint")?;
        let raw = load_checkpoint(path, &self.name_map()?)?;
        Ok(fold_model(&raw)?)
    }

    fn vocab(&self) -> Result<Option<Vocab>> {
        self.common
            .vocab
            .as_deref()
            .map(|p| Vocab::load(p).map_err(Into::into))
            .transpose()
    }

    fn require_vocab(&self) -> Result<Vocab> {
        let path = required(&self.common.vocab, "--vocab")?;
        Ok(Vocab::load(path)?)
    }

    fn anchor(&self, m: &FoldedModel, a: &Anchor, vocab: Option<&Vocab>) -> Result<(usize, usize)> {
        let n = a.anchor_pos.unwrap_or(m.dims.n_ctx / 2);
        m.check_position(n)?;
        let t = resolve_token(&a.anchor_token, vocab)?;
        m.check_token(t)?;
        Ok((n, t))
    }

    fn corpus(&self, path: &Option<PathBuf>, flag: &str, min_len: usize, d_voc: usize) -> Result<Corpus> {
        let corpus = load_corpus(required(path, flag)?, min_len, d_voc)?;
        for w in &corpus.warnings {
            eprintln!("warning: {}: {w}", corpus.source.display());
        }
        Ok(corpus)
    }

    fn table_path(&self, t: &TableArgs) -> PathBuf {
        t.table.clone().unwrap_or_else(|| self.common.out.join("table.bin"))
    }

    /// Table plus, when `--calibration` is given, the calibration it must match.
    fn table(&self, t: &TableArgs) -> Result<(ContributionTable, Option<Calibration>)> {
        let table = ContributionTable::read(&self.table_path(t))?;
        let cal = match &t.calibration {
            Some(p) => {
                let cal = read_calibration(p)?;
                table.check_calibration(&cal)?;
                Some(cal)
            }
            None => None,
        };
        Ok((table, cal))
    }

    /// Atomically write `bytes` to `<out>/<name>`.
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let dir = &self.common.out;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        circuit_lens::artifact::write_atomic(&path, |w| w.write_all(bytes))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, kind: &str, mut body: Value) -> Result<PathBuf> {
        let obj = body.as_object_mut().expect("artifact bodies are objects");
        obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
        obj.insert("kind".into(), json!(kind));
        let mut text = serde_json::to_vec_pretty(&body)?;
        text.push(b'\n');
        self.write(name, &text)
    }
}

fn resolve_token(arg: &str, vocab: Option<&Vocab>) -> Result<usize> {
    match vocab {
        Some(v) => Ok(v.resolve(arg)?),
        None if !arg.is_empty() && arg.bytes().all(|b| b.is_ascii_digit()) => Ok(arg.parse()?),
        None => Err(config_error(format!(
            "`--vocab` is needed to resolve token {arg:?} (or pass a numeric id)"
        ))),
    }
}

fn read_calibration(path: &Path) -> Result<Calibration> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let cal: Calibration = serde_json::from_value(v["calibration"].take()).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    cal.validate()?;
    Ok(cal)
}

fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    (!v.is_empty()).then(|| circuit_lens::numeric::median(&mut v))
}

fn inspect(ctx: &Ctx, synthetic: bool) -> Result<()> {
    let (raw, source) = if synthetic {
        let toy = ToyModel::random(&ToyConfig::medium(), ctx.common.seed);
        (toy.raw, format!("synthetic seed {}", ctx.common.seed))
    } else {
        let path = required(&ctx.common.checkpoint, "--checkpoint")?;
        (load_checkpoint(path, &ctx.name_map()?)?, path.display().to_string())
    };
    let m = fold_model(&raw)?;
    let c = compute_c(&m);
    let norms: Vec<f64> = m.w_e.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));

    // Folded pass against the explicit-LayerNorm pass on a few seeded probes.
    let len = m.dims.n_ctx.min(32);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.common.seed);
    let (mut attn_err, mut mlp_err) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        let x: Vec<usize> = (0..len)
            .map(|_| rand::Rng::random_range(&mut rng, 0..m.dims.d_voc))
            .collect();
        let n = len - 1;
        for h in 0..m.dims.n_heads {
            let a = reference::exact_attention_row(&m, &x, h, n)?;
            let b = explicit::attention_row(&raw, &x, h, n)?;
            attn_err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(attn_err, f64::max);
        }
        let a = reference::mlp_pre_activation(&m, &x, n)?;
        let b = explicit::mlp_pre_activation(&raw, &x, n)?;
        mlp_err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(mlp_err, f64::max);
    }

    let d = m.dims;
    println!("source         {source}");
    println!("digest         {}", m.digest);
    println!(
        "dims           d_model={} d_voc={} n_ctx={} n_heads={} d_head={} d_mlp={}",
        d.d_model, d.d_voc, d.n_ctx, d.n_heads, d.d_head, d.d_mlp
    );
    println!("W_E row norms  [{lo:.4}, {hi:.4}]  C = {:.4}", c.0);
    println!("centering      max |row sum| / norm = {:.3e}", m.max_relative_row_sum());
    println!("fold check     attention {attn_err:.3e}  mlp {mlp_err:.3e}");
    let path = ctx.write_json(
        "inspect.json",
        "inspect",
        json!({
            "checkpoint_digest": m.digest,
            "dims": d,
            "embedding_norm_range": [lo, hi],
            "c": c.0,
            "max_relative_row_sum": m.max_relative_row_sum(),
            "fold_check": {"probes": 3, "length": len, "attention_max_abs": attn_err, "mlp_max_abs": mlp_err},
        }),
    )?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn kernels(ctx: &Ctx, anchor: &Anchor, heads: &Option<String>, weights: bool) -> Result<()> {
    let m = ctx.model()?;
    let vocab = ctx.vocab()?;
    let (n, t) = ctx.anchor(&m, anchor, vocab.as_ref())?;
    let heads = match heads {
        Some(s) => HeadSet::parse(s)?,
        None => HeadSet::new(0..m.dims.n_heads),
    };
    heads.check(&m)?;
    let d = Decomposer::new(&m, compute_c(&m));
    let mut rows = Vec::new();
    for &h in heads.heads() {
        let k = d.kernel(h, n, t)?;
        let class = classify_kernel(&k).ok();
        match &class {
            Some(c) => println!(
                "head {h:>2}  {:<16} PR {:>8.2}  last-50 mass {:.4}",
                c.class.to_string(),
                c.diagnostics.participation_ratio,
                c.diagnostics.tail_mass
            ),
            None => println!("head {h:>2}  context too short to classify"),
        }
        let mut row = json!({
            "head": h,
            "class": class.map(|c| c.class),
            "diagnostics": class.map(|c| c.diagnostics),
        });
        if weights {
            row["weights"] = json!(k.weights);
        }
        rows.push(row);
    }
    ctx.write_json(
        "kernels.json",
        "kernels",
        json!({"checkpoint_digest": m.digest, "anchor": {"n": n, "token": t}, "heads": rows}),
    )?;
    Ok(())
}

fn tv(ctx: &Ctx, corpus: &Option<PathBuf>, heads: &str) -> Result<()> {
    let m = ctx.model()?;
    let heads = HeadSet::parse(heads)?;
    heads.check(&m)?;
    let corpus = ctx.corpus(corpus, "--corpus", 2, m.dims.d_voc)?;
    let c = compute_c(&m);
    let mut all: Vec<Vec<f64>> = vec![Vec::new(); heads.len()];
    let mut texts = Vec::new();
    for x in &corpus.sequences {
        let mut x = x.clone();
        x.ids.truncate(m.dims.n_ctx);
        let r = tv_report(&m, c, &x, &heads)?;
        let medians: Vec<f64> = (0..heads.len()).map(|k| r.median(k)).collect();
        for (k, row) in r.tv.iter().enumerate() {
            all[k].extend(row);
        }
        texts.push(json!({"label": x.label, "len": x.len(), "median_tv": medians}));
    }
    let mut summary = Vec::new();
    for (k, &h) in heads.heads().iter().enumerate() {
        let med = median(&all[k]);
        println!("head {h:>2}  median TV {:.4}", med.unwrap_or(f64::NAN));
        summary.push(json!({"head": h, "median_tv": med, "positions": all[k].len()}));
    }
    ctx.write_json(
        "tv.json",
        "tv",
        json!({"checkpoint_digest": m.digest, "heads": summary, "texts": texts}),
    )?;
    Ok(())
}

fn denoms(
    ctx: &Ctx,
    corpus: &Option<PathBuf>,
    heads: &str,
    anchor: &Anchor,
    stride: usize,
    deviation: f64,
) -> Result<()> {
    let m = ctx.model()?;
    let vocab = ctx.vocab()?;
    let (n, t) = ctx.anchor(&m, anchor, vocab.as_ref())?;
    let heads = HeadSet::parse(heads)?;
    heads.check(&m)?;
    let corpus = ctx.corpus(corpus, "--corpus", 2, m.dims.d_voc)?;
    let min_len = corpus.sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    let positions = strided_positions(stride, min_len.min(m.dims.n_ctx), stride);
    if positions.is_empty() {
        return Err(config_error("texts are shorter than one stride"));
    }
    let c = compute_c(&m);
    let d = Decomposer::new(&m, c);
    let unigram = unigram_distribution(&corpus, m.dims.d_voc);
    let mut out = Vec::new();
    for &h in heads.heads() {
        let series: Vec<Vec<f64>> = corpus
            .sequences
            .iter()
            .map(|x| denom_series(&d, h, t, &x.ids, &positions).map_err(Into::into))
            .collect::<Result<_>>()?;
        let normalizer: Vec<f64> = (0..positions.len())
            .map(|p| series.iter().map(|s| s[p]).sum::<f64>() / series.len() as f64)
            .collect();
        let cross_text: Vec<f64> = (0..positions.len())
            .map(|p| relative_std(&series.iter().map(|s| s[p]).collect::<Vec<_>>()))
            .collect();
        let within_text: Vec<f64> = series.iter().map(|s| relative_std(s)).collect();

        let kernel = d.kernel(h, n, t)?;
        let stats = content_stats(&m, c, h, n, t, &unigram)?;
        let expected = (1.0 - kernel.weights[n]) * stats.mean;
        let ci = ConcentrationInputs::from_kernel(&kernel, &stats, deviation * expected);
        let hoeffding = hoeffding_bound(&ci)?;
        let chebyshev = chebyshev_bound(&ci)?;
        println!(
            "head {h:>2}  cross-text rel.std (median) {:.4}  within-text (median) {:.4}  P(dev ≥ {:.0}%) ≤ {:.3e} (H) / {:.3e} (C)",
            median(&cross_text).unwrap_or(f64::NAN),
            median(&within_text).unwrap_or(f64::NAN),
            deviation * 100.0,
            hoeffding,
            chebyshev
        );
        out.push(json!({
            "head": h,
            "normalizer": normalizer,
            "cross_text_relative_std": cross_text,
            "within_text_relative_std": within_text,
            "series": series,
            "concentration": {"anchor_n": n, "content": stats, "kernel_sq_sum": ci.kernel_sq_sum, "t": ci.t, "hoeffding": hoeffding, "chebyshev": chebyshev},
        }));
    }
    let labels: Vec<&str> = corpus.sequences.iter().map(|s| s.label.as_str()).collect();
    ctx.write_json(
        "denoms.json",
        "denoms",
        json!({"checkpoint_digest": m.digest, "token": t, "positions": positions, "labels": labels, "heads": out}),
    )?;
    Ok(())
}

fn calibrate_cmd(
    ctx: &Ctx,
    calibration: &Option<PathBuf>,
    text_index: usize,
    anchor: &Anchor,
    heads: &str,
    ln_positions: &[usize],
) -> Result<()> {
    let m = ctx.model()?;
    let vocab = ctx.vocab()?;
    let (n, t) = ctx.anchor(&m, anchor, vocab.as_ref())?;
    let heads = HeadSet::parse(heads)?;
    heads.check(&m)?;
    let corpus = ctx.corpus(calibration, "--calibration", 1, m.dims.d_voc)?;
    let y = corpus
        .sequences
        .get(text_index)
        .ok_or_else(|| config_error(format!("no text at index {text_index}")))?;
    let c = compute_c(&m);
    if n + 1 >= circuit_lens::decomp::LOCAL_WINDOW {
        let d = Decomposer::new(&m, c);
        for (h, class) in heads.not_slowly_decaying(&d, n, t)? {
            eprintln!("warning: head {h} is {class} at the anchor, not slowly decaying");
        }
    }
    let mut cal = calibrate_with(&m, c, &heads, y, n, t, ln_positions)?;
    if let Some(v) = &vocab {
        cal.record_stop_words(&StopWords::english(v));
    }
    for (h, d) in heads.heads().iter().zip(&cal.denominators) {
        println!("head {h:>2}  denom {d:.6}");
    }
    println!("ln_mlp {:.6}", cal.ln_mlp);
    if let Some(s) = cal.stop_word_density {
        println!("stop-word density {s:.4}");
    }
    let path = ctx.write_json(
        "calibration.json",
        "calibration",
        json!({"digest": cal.digest(), "calibration": cal}),
    )?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn table_cmd(ctx: &Ctx, calibration: &Option<PathBuf>, heads: &Option<String>) -> Result<()> {
    let cal = read_calibration(required(calibration, "--calibration")?)?;
    let m = ctx.model()?;
    if cal.checkpoint_digest != m.digest {
        return Err(Error::StaleTable(format!(
            "calibration was computed on checkpoint {}, not {}",
            cal.checkpoint_digest, m.digest
        ))
        .into());
    }
    let heads = match heads {
        Some(s) => HeadSet::parse(s)?,
        None => cal.heads.clone(),
    };
    let table = contribution_table(&m, cal.c, &heads, &cal)?;
    let path = ctx.common.out.join("table.bin");
    std::fs::create_dir_all(&ctx.common.out)?;
    table.write(&path)?;
    println!(
        "table {} x {}  anchor ({}, {})  heads {}",
        table.header.d_mlp, table.header.d_voc, table.header.anchor_n, table.header.anchor_token, table.header.heads
    );
    ctx.write_json(
        "table.json",
        "table",
        json!({"header": table.header, "checkpoint_digest": m.digest, "file": "table.bin"}),
    )?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn discover(ctx: &Ctx, targs: &TableArgs, dargs: &DiscArgs) -> Result<()> {
    let cfg = dargs.config()?;
    let vocab = ctx.vocab()?;
    let (table, _) = ctx.table(targs)?;
    let deny = match (&dargs.deny, &vocab) {
        (Some(p), Some(v)) => Some(DenyList::load(p, v)?),
        (Some(_), None) => return Err(config_error("`--deny` needs `--vocab`")),
        _ => None,
    };
    let selected = select_neurons(&table, &cfg)?;
    let mut rows = Vec::with_capacity(selected.len());
    for &(j, s) in &selected {
        match &vocab {
            Some(v) => rows.push(serde_json::to_value(neuron_report(&table, v, j, &cfg, deny.as_ref())?)?),
            None => rows.push(json!({"neuron": j, "top_stat": s})),
        }
    }
    println!(
        "{} of {} neurons with top[j] >= {} (k = {})",
        selected.len(),
        table.header.d_mlp,
        cfg.theta,
        cfg.k
    );
    ctx.write_json(
        "neurons.json",
        "neurons",
        json!({"table": table.header, "config": cfg, "neurons": rows}),
    )?;
    Ok(())
}

fn report(ctx: &Ctx, neuron: usize, targs: &TableArgs, dargs: &DiscArgs) -> Result<()> {
    let vocab = ctx.require_vocab()?;
    let cfg = dargs.config()?;
    let deny = dargs.deny.as_deref().map(|p| DenyList::load(p, &vocab)).transpose()?;
    let (table, _) = ctx.table(targs)?;
    let r = neuron_report(&table, &vocab, neuron, &cfg, deny.as_ref())?;
    print!("{}", r.render());
    let mut body = serde_json::to_value(&r)?;
    body["table"] = serde_json::to_value(&table.header)?;
    ctx.write_json(&format!("report-{neuron}.json"), "report", body)?;
    Ok(())
}

fn score(ctx: &Ctx, neuron: usize, corpus: &Option<PathBuf>, targs: &TableArgs) -> Result<()> {
    required(&targs.calibration, "--calibration")?;
    let (table, cal) = ctx.table(targs)?;
    let cal = cal.expect("calibration checked above");
    let corpus = ctx.corpus(corpus, "--corpus", cal.n + 1, table.header.d_voc)?;
    let mut csv = String::from("label,neuron,approx\n");
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    writeln!(lock, "label,neuron,approx")?;
    for x in &corpus.sequences {
        let v = approx_contribution(&table, &cal, x, neuron)?;
        let line = format!("{},{neuron},{v}\n", csv_field(&x.label));
        lock.write_all(line.as_bytes())?;
        csv.push_str(&line);
    }
    ctx.write(&format!("score-{neuron}.csv"), csv.as_bytes())?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fit_json(fit: std::result::Result<FitStats, Error>) -> Value {
    match fit {
        Ok(f) => serde_json::to_value(f).expect("serializable"),
        Err(e) => json!({"error": e.kind(), "message": e.to_string()}),
    }
}

#[allow(clippy::too_many_arguments)]
fn validate_cmd(
    ctx: &Ctx,
    mode: Mode,
    corpus: &Option<PathBuf>,
    targs: &TableArgs,
    dargs: &DiscArgs,
    neurons: &[usize],
    stride: usize,
    max_texts: Option<usize>,
    csv: bool,
) -> Result<()> {
    required(&targs.calibration, "--calibration")?;
    let cfg = dargs.config()?;
    let m = ctx.model()?;
    let (table, cal) = ctx.table(targs)?;
    let cal = cal.expect("calibration checked above");
    let min_len = match mode {
        Mode::Corpus => cal.n + 1,
        Mode::Series => stride + 1,
    };
    let mut corpus = ctx.corpus(corpus, "--corpus", min_len, m.dims.d_voc)?;
    if let Some(k) = max_texts {
        if k < corpus.sequences.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.common.seed);
            corpus.sequences.shuffle(&mut rng);
            corpus.sequences.truncate(k);
            corpus.sequences.sort_by(|a, b| a.label.cmp(&b.label));
        }
    }
    let neurons: Vec<usize> = if neurons.is_empty() {
        select_neurons(&table, &cfg)?.into_iter().map(|p| p.0).collect()
    } else {
        neurons.to_vec()
    };
    if neurons.is_empty() {
        return Err(config_error("no neurons to validate"));
    }
    let c = compute_c(&m);
    let mut per_neuron = Vec::new();
    let (mut rs, mut fvus) = (Vec::new(), Vec::new());
    match mode {
        Mode::Corpus => {
            let cv = corpus_values(&m, &table, &cal, &corpus, &neurons)?;
            for (k, &j) in neurons.iter().enumerate() {
                let fit = cv.fit(k);
                if let Ok(f) = &fit {
                    rs.extend(f.r);
                    fvus.push(f.fvu);
                }
                per_neuron.push(json!({"neuron": j, "fit": fit_json(fit)}));
            }
        }
        Mode::Series => {
            let mut rows = String::from("text,neuron,position,true,approx\n");
            for &j in &neurons {
                let mut texts = Vec::new();
                for x in &corpus.sequences {
                    let len = x.len().min(m.dims.n_ctx);
                    let grid = series_grid(len, stride);
                    let s = substitution_series(&m, c, &table, x, j, &grid, cal.token)?;
                    let fit = s.fit();
                    if let Ok(f) = &fit {
                        rs.extend(f.r);
                        fvus.push(f.fvu);
                    }
                    if csv {
                        rows.push_str(s.to_csv().split_once('\n').map_or("", |p| p.1));
                    }
                    texts.push(json!({"label": x.label, "fit": fit_json(fit)}));
                }
                per_neuron.push(json!({"neuron": j, "texts": texts}));
            }
            if csv {
                ctx.write("series.csv", rows.as_bytes())?;
            }
        }
    }
    let (mr, mf) = (median(&rs), median(&fvus));
    println!(
        "{} neurons, {} texts: median r {:.4}, median FVU {:.4}",
        neurons.len(),
        corpus.sequences.len(),
        mr.unwrap_or(f64::NAN),
        mf.unwrap_or(f64::NAN)
    );
    ctx.write_json(
        "validate.json",
        "validate",
        json!({
            "mode": match mode { Mode::Corpus => "corpus", Mode::Series => "series" },
            "table": table.header,
            "texts": corpus.sequences.len(),
            "median_r": mr,
            "median_fvu": mf,
            "neurons": per_neuron,
        }),
    )?;
    Ok(())
}

fn dispatch(ctx: &Ctx, command: &Command) -> Result<()> {
    match command {
        Command::Inspect { synthetic } => inspect(ctx, *synthetic),
        Command::Kernels { anchor, heads, weights } => kernels(ctx, anchor, heads, *weights),
        Command::Tv { corpus, heads } => tv(ctx, corpus, heads),
        Command::Denoms {
            corpus,
            heads,
            anchor,
            stride,
            deviation,
        } => denoms(ctx, corpus, heads, anchor, *stride, *deviation),
        Command::Calibrate {
            calibration,
            text_index,
            anchor,
            heads,
            ln_positions,
        } => calibrate_cmd(ctx, calibration, *text_index, anchor, heads, ln_positions),
        Command::Table { calibration, heads } => table_cmd(ctx, calibration, heads),
        Command::Discover { table, disc } => discover(ctx, table, disc),
        Command::Report { neuron, table, disc } => report(ctx, *neuron, table, disc),
        Command::Score { neuron, corpus, table } => score(ctx, *neuron, corpus, table),
        Command::Validate {
            mode,
            corpus,
            table,
            disc,
            neurons,
            stride,
            max_texts,
            csv,
        } => validate_cmd(ctx, *mode, corpus, table, disc, neurons, *stride, *max_texts, *csv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { common: cli.common };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = ctx.common.workers {
        pool = pool.num_threads(w.max(1));
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&ctx, &cli.command)),
        Err(e) => Err(e.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let lib = err.chain().find_map(|e| e.downcast_ref::<Error>());
            let (kind, code) = lib.map_or(("Other", 1), |e| (e.kind(), e.exit_code()));
            let record = json!({
                "schema_version": SCHEMA_VERSION,
                "error": kind,
                "message": format!("{err:#}"),
                "exit_code": code,
            });
            eprintln!("{record}");
            ExitCode::from(code as u8)
        }
    }
}
