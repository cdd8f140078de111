//! Metrics, the variant ablation, source retention and embedding export.
//!
//! ## Output schemas
//!
//! * Ablation TSV: header `model, variant, n_ok, mean, std, per_seed` (tab separated), one
//!   row per variant in the order source_only, gan_only, gan_center, full.
//!   Accuracies are target-test percentages with four decimals; `per_seed`
//!   is a comma-separated list with `failed` for aborted runs.
//! * Embedding CSV: `f0..f{d-1},label,domain,split`, with `label = -1` for
//!   target training rows, `domain` in `S`/`T` and `split` one of
//!   `source_train`, `source_test`, `target_train`, `target_test`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, OptimizerConfig, OptimizerKind, OptimizerState, Tape};
use crate::config::{TrainConfig, Variant};
use crate::data::{feature_header, normalize, push_row, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::filter_target;
use crate::models::{Mlp, MlpSpec, ModelParams};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor2;
use crate::trainer::{train, TrainOutcome};

const PROBE_STREAM: u64 = 0x9b0e;

/// Fraction of rows of `x` classified as their label.
pub fn accuracy(params: &ModelParams, x: &Tensor2, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty split".into()));
    }
    let pred = params.predict(x)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Label(format!("class pair ({y}, {p}) outside [0, {num_classes})")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Held-out result of a freshly trained domain classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub bce: f64,
    pub train_rows: usize,
    pub heldout_rows: usize,
}

/// Fits a small MLP to tell source rows from target rows and scores it on
/// a held-out 20%.
///
/// Both domains are subsampled to the same size first, so chance level is
/// exactly one half.
pub fn probe_domain(source: &Tensor2, target: &Tensor2, seed: u64) -> Result<ProbeResult> {
    if source.cols() != target.cols() {
        return Err(Error::Dimension(format!("probe on widths {} and {}", source.cols(), target.cols())));
    }
    let n = source.rows().min(target.rows());
    if n < 5 {
        return Err(Error::Data(format!("domain probe needs at least 5 rows per domain, got {n}")));
    }
    let mut rng = SeededRng::new(derive_seed(seed, PROBE_STREAM));
    let mut pick = |x: &Tensor2| {
        let mut idx = rng.permutation(x.rows());
        idx.truncate(n);
        x.select_rows(&idx)
    };
    let all = pick(source)?.concat_rows(&pick(target)?)?;
    let mut y: Vec<f64> = vec![1.0; n];
    y.extend(std::iter::repeat_n(0.0, n));

    // stratified split keeps both held-out halves the same size
    let cut = n - n / 5;
    let mut src_order = rng.permutation(n);
    let mut tgt_order: Vec<usize> = rng.permutation(n).into_iter().map(|i| i + n).collect();
    let mut train_idx: Vec<usize> = src_order.drain(..cut).chain(tgt_order.drain(..cut)).collect();
    let held_idx: Vec<usize> = src_order.into_iter().chain(tgt_order).collect();
    rng.shuffle(&mut train_idx);

    let raw_train = all.select_rows(&train_idx)?;
    let x_train = normalize(&raw_train, &raw_train)?;
    let x_held = normalize(&all.select_rows(&held_idx)?, &raw_train)?;
    let y_train: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
    let y_held: Vec<f64> = held_idx.iter().map(|&i| y[i]).collect();

    let d = all.cols();
    let mut probe = Mlp::init(&MlpSpec::new([d, 32, 1]), &mut rng)?;
    let mut opt = OptimizerState::new(OptimizerConfig {
        kind: OptimizerKind::RmsProp,
        lr: 0.003,
        decay: 1.0,
        decay_period: 1,
        ..OptimizerConfig::default()
    })?;
    let batch = 64;
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    for _ in 0..60 {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let xb = x_train.select_rows(chunk)?;
            let yb: Vec<f64> = chunk.iter().map(|&i| y_train[i]).collect();
            let mut tape = Tape::new();
            let vars = probe.bind(&mut tape, true);
            let xv = tape.constant(xb);
            let logits = vars.forward(&mut tape, xv)?;
            let loss = tape.bce_with_logits(logits, &yb)?;
            tape.backward(loss)?;
            probe.collect_grads(&tape, &vars)?;
            let mut params: Vec<(String, &mut Tensor2)> = probe
                .layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, l)| [(format!("{i}.weight"), &mut l.weight), (format!("{i}.bias"), &mut l.bias)])
                .collect();
            opt.step(&mut params, 0)?;
        }
    }

    let logits = probe.forward(&x_held)?;
    let (mut correct, mut bce) = (0usize, 0.0);
    for (&z, &t) in logits.values().iter().zip(&y_held) {
        if (sigmoid(z) >= 0.5) == (t == 1.0) {
            correct += 1;
        }
        bce += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    let m = y_held.len() as f64;
    Ok(ProbeResult { accuracy: correct as f64 / m, bce: bce / m, train_rows: train_idx.len(), heldout_rows: y_held.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub source_test_acc: f64,
    pub target_test_acc: f64,
    /// Target-test accuracy per class; `None` for classes without samples.
    pub per_class_acc: Vec<Option<f64>>,
    /// Target-test confusion matrix, `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub domain_probe_acc: f64,
    pub domain_probe_bce: f64,
    /// Share of target training rows whose top probability reaches the threshold.
    pub phi_kept_fraction: f64,
}

/// Accuracies, confusion matrix, domain probe on frozen training features
/// and pseudo-label coverage.
pub fn evaluate(params: &ModelParams, dataset: &DomainDataset, threshold: f64, probe_seed: u64) -> Result<EvalSummary> {
    if dataset.source_test.is_empty() || dataset.target_test.is_empty() {
        return Err(Error::Data("evaluation needs non-empty test splits".into()));
    }
    let k = dataset.num_classes;
    let source_test_acc = accuracy(params, &dataset.source_test.features, &dataset.source_test.labels)?;
    let pred = params.predict(&dataset.target_test.features)?;
    let confusion = confusion_matrix(&pred, &dataset.target_test.labels, k)?;
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class_acc = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();

    let target_train = dataset.target_train.features();
    let probe = probe_domain(&params.encode(&dataset.source_train.features)?, &params.encode(target_train)?, probe_seed)?;
    let probs = params.classify(&params.encode(target_train)?)?.softmax_rows();
    let phi = filter_target(&probs, threshold)?;

    Ok(EvalSummary {
        source_test_acc,
        target_test_acc: trace as f64 / total as f64,
        per_class_acc,
        confusion,
        domain_probe_acc: probe.accuracy,
        domain_probe_bce: probe.bce,
        phi_kept_fraction: phi.kept_fraction(),
    })
}

/// One trained (variant, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub summary: Option<EvalSummary>,
    /// Error line of an aborted run.
    pub error: Option<String>,
    pub epochs: usize,
}

/// Trains `variant` with `seed` on `dataset` and evaluates it.
pub fn run_variant(dataset: &DomainDataset, config: &TrainConfig, variant: Variant, seed: u64) -> Result<(TrainOutcome, EvalSummary)> {
    let mut cfg = config.clone();
    cfg.variant = variant;
    cfg.seed = seed;
    let outcome = train(dataset, &cfg)?;
    let summary = evaluate(&outcome.params, dataset, cfg.threshold, seed)?;
    Ok((outcome, summary))
}

/// Trains every (variant, seed) pair, in parallel, and returns the runs
/// grouped by variant in the given orders. Failed runs are kept with
/// their error.
pub fn run_variants(dataset: &DomainDataset, config: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Vec<(Variant, Vec<SeedRun>)> {
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(variant, seed)| match run_variant(dataset, config, variant, seed) {
            Ok((out, summary)) => SeedRun { seed, summary: Some(summary), error: None, epochs: out.report.records.len() },
            Err(e) => {
                log::warn!("{} seed {seed} failed: {e}", variant.name());
                SeedRun { seed, summary: None, error: Some(e.to_string()), epochs: 0 }
            }
        })
        .collect();
    let mut runs = runs.into_iter();
    variants.iter().map(|&v| (v, runs.by_ref().take(seeds.len()).collect())).collect()
}

/// Mean and sample standard deviation (n - 1 denominator; `None` below two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub model: String,
    pub runs: Vec<SeedRun>,
    /// Mean target-test accuracy of the successful runs.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn seeds_check(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("need at least 2 seeds for a standard deviation, got {}", seeds.len())));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("seeds must be distinct".into()));
    }
    Ok(())
}

fn target_accs(runs: &[SeedRun]) -> Vec<f64> {
    runs.iter().filter_map(|r| r.summary.as_ref().map(|s| s.target_test_acc)).collect()
}

/// The four-variant ladder, source_only, gan_only, gan_center, full.
pub fn run_ablation(dataset: &DomainDataset, config: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationResult>> {
    seeds_check(seeds)?;
    config.validate()?;
    Ok(run_variants(dataset, config, &Variant::ABLATION, seeds)
        .into_iter()
        .map(|(variant, runs)| {
            let (mean, std) = mean_std(&target_accs(&runs));
            AblationResult { variant, model: variant.model_label().to_string(), runs, mean, std }
        })
        .collect())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{:.4}", 100.0 * v))
}

pub fn ablation_tsv(results: &[AblationResult]) -> String {
    let mut out = String::from("model\tvariant\tn_ok\tmean\tstd\tper_seed\n");
    for r in results {
        let per_seed: Vec<String> = r
            .runs
            .iter()
            .map(|s| s.summary.as_ref().map_or_else(|| "failed".into(), |e| pct(Some(e.target_test_acc))))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.model,
            r.variant.name(),
            target_accs(&r.runs).len(),
            pct(r.mean),
            pct(r.std),
            per_seed.join(",")
        ));
    }
    out
}

/// Source-test accuracy of one model column, per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionColumn {
    pub variant: Variant,
    pub model: String,
    pub source_test_acc: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// `after - before` source-test accuracy for one unadapted/adapted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPair {
    pub before: Variant,
    pub after: Variant,
    pub gaps: Vec<Option<f64>>,
    pub mean_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub seeds: Vec<u64>,
    pub columns: Vec<RetentionColumn>,
    pub pairs: Vec<RetentionPair>,
}

/// Source-test accuracy of the models without and with the adversarial
/// term, paired as (source_only, gan_only) and (source_center, gan_center).
pub fn source_retention(dataset: &DomainDataset, config: &TrainConfig, seeds: &[u64]) -> Result<RetentionReport> {
    seeds_check(seeds)?;
    config.validate()?;
    let runs = run_variants(dataset, config, &Variant::RETENTION, seeds);
    let by_variant: BTreeMap<Variant, Vec<Option<f64>>> = runs
        .into_iter()
        .map(|(v, runs)| (v, runs.iter().map(|r| r.summary.as_ref().map(|s| s.source_test_acc)).collect()))
        .collect();
    let mean_of = |xs: &[Option<f64>]| mean_std(&xs.iter().flatten().copied().collect::<Vec<_>>()).0;
    let columns = Variant::RETENTION
        .iter()
        .map(|&v| RetentionColumn {
            variant: v,
            model: v.model_label().to_string(),
            mean: mean_of(&by_variant[&v]),
            source_test_acc: by_variant[&v].clone(),
        })
        .collect();
    let pairs = [(Variant::SourceOnly, Variant::GanOnly), (Variant::SourceCenter, Variant::GanCenter)]
        .into_iter()
        .map(|(before, after)| {
            let gaps: Vec<Option<f64>> = by_variant[&before]
                .iter()
                .zip(&by_variant[&after])
                .map(|(b, a)| Some(a.as_ref()? - b.as_ref()?))
                .collect();
            RetentionPair { before, after, mean_gap: mean_of(&gaps), gaps }
        })
        .collect();
    Ok(RetentionReport { seeds: seeds.to_vec(), columns, pairs })
}

pub fn retention_tsv(report: &RetentionReport) -> String {
    let mut out = String::from("model\tvariant\tmean\tper_seed\n");
    for c in &report.columns {
        let per: Vec<String> = c.source_test_acc.iter().map(|v| pct(*v)).collect();
        out.push_str(&format!("{}\t{}\t{}\t{}\n", c.model, c.variant.name(), pct(c.mean), per.join(",")));
    }
    out.push_str("before\tafter\tmean_gap\tper_seed_gap\n");
    for p in &report.pairs {
        let per: Vec<String> = p.gaps.iter().map(|v| pct(*v)).collect();
        out.push_str(&format!("{}\t{}\t{}\t{}\n", p.before.name(), p.after.name(), pct(p.mean_gap), per.join(",")));
    }
    out
}

/// One row of an embedding export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub features: Vec<f64>,
    /// `None` for target training rows.
    pub label: Option<usize>,
    pub domain: char,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
    pub rows: usize,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Encoded features of every split as CSV; with `d == 2` also an SVG
/// scatter next to it (`.svg` extension).
pub fn export_embeddings(params: &ModelParams, dataset: &DomainDataset, path: &Path) -> Result<EmbeddingExport> {
    let splits: [(&str, &Tensor2, Option<&[usize]>, char); 4] = [
        ("source_train", &dataset.source_train.features, Some(&dataset.source_train.labels), 'S'),
        ("source_test", &dataset.source_test.features, Some(&dataset.source_test.labels), 'S'),
        ("target_train", dataset.target_train.features(), None, 'T'),
        ("target_test", &dataset.target_test.features, Some(&dataset.target_test.labels), 'T'),
    ];
    let d = params.feature_dim();
    let mut csv = feature_header(d) + ",label,domain,split\n";
    let mut rows = Vec::new();
    for (split, x, labels, domain) in splits {
        let f = params.encode(x)?;
        for (i, row) in f.row_iter().enumerate() {
            let label = labels.map(|l| l[i]);
            push_row(&mut csv, row);
            let shown = label.map_or_else(|| "-1".to_string(), |l| l.to_string());
            csv.push_str(&format!(",{shown},{domain},{split}\n"));
            rows.push(EmbeddingRow { features: row.to_vec(), label, domain, split: split.to_string() });
        }
    }
    write(path, &csv)?;
    let svg = if d == 2 {
        let p = path.with_extension("svg");
        write(&p, &scatter_svg(&rows))?;
        Some(p)
    } else {
        None
    };
    Ok(EmbeddingExport { csv: path.to_path_buf(), svg, rows: rows.len() })
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Circles for source rows, squares for target rows, colored by class
/// (grey for unlabelled rows).
pub fn scatter_svg(rows: &[EmbeddingRow]) -> String {
    let (size, pad) = (600.0, 20.0);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in rows {
        for j in 0..2 {
            lo[j] = lo[j].min(r.features[j]);
            hi[j] = hi[j].max(r.features[j]);
        }
    }
    let scale = |v: f64, j: usize| {
        let span = if hi[j] > lo[j] { hi[j] - lo[j] } else { 1.0 };
        let t = (v - lo[j]) / span;
        if j == 0 { pad + t * (size - 2.0 * pad) } else { size - pad - t * (size - 2.0 * pad) }
    };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for r in rows {
        let (x, y) = (scale(r.features[0], 0), scale(r.features[1], 1));
        let color = r.label.map_or("#444444", |l| PALETTE[l % PALETTE.len()]);
        if r.domain == 'S' {
            out.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n"));
        } else {
            out.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"5\" height=\"5\" fill=\"none\" stroke=\"{color}\"/>\n",
                x - 2.5,
                y - 2.5
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Parses a CSV written by [`export_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
    let d = header.split(',').count().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| Error::Format("bad embedding header".into()))?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("embedding line {}: `{line}`", i + 2));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d + 3 {
                return Err(bad());
            }
            let features = cells[..d].iter().map(|c| c.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
            let label: i64 = cells[d].parse().map_err(|_| bad())?;
            Ok(EmbeddingRow {
                features,
                label: usize::try_from(label).ok(),
                domain: cells[d + 1].chars().next().ok_or_else(bad)?,
                split: cells[d + 2].to_string(),
            })
        })
        .collect()
}

/// Mean over classes of the mean squared distance of a class's rows to
/// their class mean. Unlabelled rows are ignored.
pub fn within_class_variance(rows: &[EmbeddingRow]) -> Result<f64> {
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for r in rows {
        if let Some(l) = r.label {
            groups.entry(l).or_default().push(&r.features);
        }
    }
    if groups.is_empty() {
        return Err(Error::Data("no labelled rows".into()));
    }
    let per_class: Vec<f64> = groups
        .values()
        .map(|g| {
            let d = g[0].len();
            let n = g.len() as f64;
            let mean: Vec<f64> = (0..d).map(|j| g.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            g.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum::<f64>() / n
        })
        .collect();
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}
