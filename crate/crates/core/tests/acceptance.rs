//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances are pinned below.

use std::path::Path;
use std::time::{Duration, Instant};

use dial::checkpoint::{encode, load_checkpoint, save_checkpoint};
use dial::config::{ExperimentConfig, Variant};
use dial::data::idx::{encode_images, encode_labels, idx_pair, parse_images, parse_labels, IdxImages};
use dial::data::{DatasetSpec, DomainDataset, ShiftSpec};
use dial::eval::{ablation_tsv, export_embeddings, read_embeddings, run_ablation, run_variant, source_retention, within_class_variance};
use dial::gradcheck::run_suite;
use dial::losses::{filter_target, update_centers, CenterTable};
use dial::rng::SeededRng;
use dial::trainer::train;
use dial::Tensor2;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rayon::prelude::*;

const FIXTURE: &str = include_str!("../../../configs/blobs_shift.toml");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const GRAD_TOL: f64 = 1e-4;
const GRAD_DRAWS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const CENTER_TOL: f64 = 1e-12;
const CENTER_BATCHES: usize = 100;
const FILTER_CASES: u32 = 512;
const FILTER_BUDGET: Duration = Duration::from_secs(5);
const PROBE_ACC_RANGE: (f64, f64) = (0.40, 0.65);
const DISC_BCE_TOL: f64 = 0.1;
const EQUILIBRIUM_BUDGET: Duration = Duration::from_secs(120);
// calibrated: source_only 83.33, full 99.69 mean target accuracy (percent)
const EFFICACY_GAP_PTS: f64 = 10.0;
const EFFICACY_BUDGET: Duration = Duration::from_secs(600);
// calibrated: gan_only 95.58, gan_center 99.00, full 99.69
const FULL_VS_GAN_CENTER_PTS: f64 = -1.0;
const FULL_VS_GAN_ONLY_PTS: f64 = 3.0;
const RETENTION_PTS: f64 = 3.0;
const VARIANCE_RATIO_MAX: f64 = 1.0;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn fixture() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(FIXTURE).expect("fixture config parses")
}

fn criterion_1() -> (bool, String) {
    let start = Instant::now();
    let report = run_suite(GRAD_DRAWS, 2024).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = report.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("cases");
    let entries: usize = report.cases.iter().map(|c| c.entries).sum();
    (
        report.passed(GRAD_TOL) && elapsed < GRAD_BUDGET,
        format!(
            "{} cases x {GRAD_DRAWS} draws, {entries} entries, max rel err {:.2e} ({}), {:.1}s",
            report.cases.len(),
            report.max_rel_err,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

/// Per-class loop straight from the update rule, written without reference
/// to the library implementation.
fn brute_force_update(centers: &[Vec<f64>], features: &[Vec<f64>], labels: &[usize], gamma: f64) -> Vec<Vec<f64>> {
    let mut out = centers.to_vec();
    for (k, c) in centers.iter().enumerate() {
        let members: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, &y)| y == k).map(|(f, _)| f).collect();
        if members.is_empty() {
            continue;
        }
        for j in 0..c.len() {
            let mut delta = 0.0;
            for f in &members {
                delta += c[j] - f[j];
            }
            delta /= 1.0 + members.len() as f64;
            out[k][j] = c[j] - gamma * delta;
        }
    }
    out
}

fn criterion_2() -> (bool, String) {
    let mut rng = SeededRng::new(77);
    let mut worst = 0.0f64;
    let mut empty_cases = 0;
    for _ in 0..CENTER_BATCHES {
        let (k, d, n) = (1 + rng.index(6), 1 + rng.index(5), 1 + rng.index(12));
        // draw labels from a subset so some classes are usually empty
        let used = 1 + rng.index(k);
        let labels: Vec<usize> = (0..n).map(|_| rng.index(used)).collect();
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 3.0 * rng.normal()).collect()).collect();
        let features: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| 3.0 * rng.normal()).collect()).collect();
        let gamma = rng.uniform_range(0.01, 1.0);
        if (0..k).any(|c| !labels.contains(&c)) {
            empty_cases += 1;
        }
        let mut table = CenterTable::from_parts(Tensor2::from_rows(&centers).unwrap(), gamma, true);
        update_centers(&mut table, &Tensor2::from_rows(&features).unwrap(), &labels).unwrap();
        let expected = brute_force_update(&centers, &features, &labels, gamma);
        for (r, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((table.centers().get(r, j) - v).abs());
            }
        }
    }
    let mut hand = CenterTable::from_parts(Tensor2::new(1, 2, vec![0.0, 0.0]).unwrap(), 0.5, true);
    update_centers(&mut hand, &Tensor2::new(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap(), &[0, 0]).unwrap();
    let hand_ok = hand.center(0) == [2.0 / 3.0, 2.0 / 3.0];
    (
        worst <= CENTER_TOL && hand_ok && empty_cases > 0,
        format!(
            "{CENTER_BATCHES} batches ({empty_cases} with empty classes), max abs err {worst:.1e}, hand example {}",
            if hand_ok { "exact" } else { "wrong" }
        ),
    )
}

fn prob_matrix() -> impl Strategy<Value = Tensor2> {
    (1usize..16, 2usize..6).prop_flat_map(|(n, k)| {
        // a coarse logit grid makes exact ties common
        prop::collection::vec(prop_oneof![(-4i32..5).prop_map(f64::from), -6.0f64..6.0], n * k)
            .prop_map(move |logits| Tensor2::new(n, k, logits).unwrap().softmax_rows())
    })
}

fn criterion_3() -> (bool, String) {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: FILTER_CASES, failure_persistence: None, ..PropConfig::default() });
    let strategy = (prob_matrix(), 0.0f64..1.0, 0.0f64..1.0, any::<prop::sample::Index>());
    let result = runner.run(&strategy, |(p, a, b, pick)| {
        let (lo, hi) = (a.min(b).max(1e-9), a.max(b).max(1e-9));
        let f_lo = filter_target(&p, lo).unwrap();
        let f_hi = filter_target(&p, hi).unwrap();
        prop_assert!(f_hi.rows.iter().all(|r| f_lo.rows.contains(r)), "not monotone in the threshold");

        for (i, row) in p.row_iter().enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let kept = row[best] >= lo;
            prop_assert_eq!(f_lo.rows.contains(&i), kept);
            if let Some(pos) = f_lo.rows.iter().position(|&r| r == i) {
                prop_assert_eq!(f_lo.pseudo_labels[pos], best);
                prop_assert_eq!(f_lo.max_probs[pos], row[best]);
            }
        }

        let r = pick.index(p.rows());
        let at = p.row(r).iter().copied().fold(f64::MIN, f64::max);
        let f_at = filter_target(&p, at).unwrap();
        prop_assert!(f_at.rows.contains(&r), "row at the threshold was dropped");
        Ok(())
    });
    let elapsed = start.elapsed();
    let ok = result.is_ok() && elapsed < FILTER_BUDGET;
    let detail = match result {
        Ok(()) => format!("{FILTER_CASES} random probability matrices, {:.2}s", elapsed.as_secs_f64()),
        Err(e) => format!("{e}"),
    };
    (ok, detail)
}

fn criterion_4() -> (bool, String) {
    let start = Instant::now();
    let mut cfg = fixture();
    if let DatasetSpec::Blobs(spec) = &mut cfg.data.spec {
        spec.shift = ShiftSpec::identity();
    }
    let data = cfg.data.build().unwrap();
    let runs: Vec<(f64, f64)> = SEEDS
        .par_iter()
        .map(|&seed| {
            let (out, summary) = run_variant(&data, &cfg.train, Variant::Full, seed).unwrap();
            (summary.domain_probe_acc, out.report.last().unwrap().disc_loss.unwrap())
        })
        .collect();
    let probe = runs.iter().map(|r| r.0).sum::<f64>() / runs.len() as f64;
    let bce = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
    let elapsed = start.elapsed();
    let ok = (PROBE_ACC_RANGE.0..=PROBE_ACC_RANGE.1).contains(&probe)
        && (bce - std::f64::consts::LN_2).abs() <= DISC_BCE_TOL
        && elapsed < EQUILIBRIUM_BUDGET;
    (ok, format!("probe acc {probe:.4}, disc BCE {bce:.4} (ln 2 = 0.6931), {:.1}s", elapsed.as_secs_f64()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance_of_export(dataset: &DomainDataset, cfg: &ExperimentConfig, variant: Variant, seed: u64, dir: &Path) -> f64 {
    let (out, _) = run_variant(dataset, &cfg.train, variant, seed).unwrap();
    let path = dir.join(format!("{}_{seed}.csv", variant.name()));
    export_embeddings(&out.params, dataset, &path).unwrap();
    let rows: Vec<_> = read_embeddings(&path).unwrap().into_iter().filter(|r| r.split == "target_test").collect();
    within_class_variance(&rows).unwrap()
}

fn criteria_5_to_8() -> Vec<Line> {
    let cfg = fixture();
    let data = cfg.data.build().unwrap();

    let start = Instant::now();
    let ablation = run_ablation(&data, &cfg.train, &SEEDS).unwrap();
    let ablation_time = start.elapsed();
    print!("{}", ablation_tsv(&ablation));
    let pct = |v: Variant| 100.0 * ablation.iter().find(|r| r.variant == v).and_then(|r| r.mean).unwrap_or(f64::NAN);
    let failed: usize = ablation.iter().flat_map(|r| &r.runs).filter(|r| r.error.is_some()).count();
    let (so, go, gc, full) = (pct(Variant::SourceOnly), pct(Variant::GanOnly), pct(Variant::GanCenter), pct(Variant::Full));

    let mut lines = vec![
        Line {
            id: 5,
            name: "adaptation efficacy",
            pass: failed == 0 && full - so >= EFFICACY_GAP_PTS && ablation_time < EFFICACY_BUDGET,
            detail: format!(
                "full {full:.2}% vs source_only {so:.2}%, gap {:.2} pts (need >= {EFFICACY_GAP_PTS}), {:.1}s",
                full - so,
                ablation_time.as_secs_f64()
            ),
        },
        Line {
            id: 6,
            name: "ablation ordering",
            pass: full >= gc + FULL_VS_GAN_CENTER_PTS && full >= go + FULL_VS_GAN_ONLY_PTS,
            detail: format!(
                "full {full:.2}% vs gan_center {gc:.2}% (need >= {:+}), vs gan_only {go:.2}% (need >= {:+})",
                FULL_VS_GAN_CENTER_PTS, FULL_VS_GAN_ONLY_PTS
            ),
        },
    ];

    let retention = source_retention(&data, &cfg.train, &SEEDS).unwrap();
    let gaps: Vec<(String, f64)> = retention
        .pairs
        .iter()
        .map(|p| (format!("{}->{}", p.before.name(), p.after.name()), 100.0 * p.mean_gap.unwrap_or(f64::NAN)))
        .collect();
    let means: Vec<String> =
        retention.columns.iter().map(|c| format!("{} {:.2}%", c.variant.name(), 100.0 * c.mean.unwrap_or(f64::NAN))).collect();
    lines.push(Line {
        id: 7,
        name: "source retention",
        pass: gaps.iter().all(|(_, g)| g.abs() <= RETENTION_PTS),
        detail: format!(
            "{}; gaps {}",
            means.join(", "),
            gaps.iter().map(|(n, g)| format!("{n} {g:+.2} pts")).collect::<Vec<_>>().join(", ")
        ),
    });

    let dir = tempfile::tempdir().unwrap();
    let ratios: Vec<f64> = SEEDS
        .par_iter()
        .map(|&seed| {
            variance_of_export(&data, &cfg, Variant::Full, seed, dir.path())
                / variance_of_export(&data, &cfg, Variant::GanOnly, seed, dir.path())
        })
        .collect();
    let ratio = mean(&ratios);
    lines.push(Line {
        id: 8,
        name: "feature compactness",
        pass: ratio < VARIANCE_RATIO_MAX,
        detail: format!(
            "target-test within-class variance full/gan_only {ratio:.4} (per seed {})",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    });
    lines
}

fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
    img.extend_from_slice(&[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255]);
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 3, 4, 0, 9];
    (img, lab)
}

fn idx_rejects(img: &[u8], lab: &[u8]) -> bool {
    match (parse_images(img), parse_labels(lab)) {
        (Ok(i), Ok(l)) => idx_pair(&i, &l, None).is_err(),
        _ => true,
    }
}

fn criterion_9() -> (bool, String) {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut cfg = fixture();
    cfg.train.max_epochs = 6;
    let data = cfg.data.build().unwrap();
    let a = train(&data, &cfg.train).unwrap();
    let b = train(&data, &cfg.train).unwrap();
    let same_report = a.report.to_jsonl() == b.report.to_jsonl();
    ok &= same_report;
    notes.push(format!("report jsonl {}", if same_report { "identical" } else { "DIFFERS" }));

    cfg.train.max_epochs = 2;
    let t1 = ablation_tsv(&run_ablation(&data, &cfg.train, &[5, 6]).unwrap());
    let t2 = ablation_tsv(&run_ablation(&data, &cfg.train, &[5, 6]).unwrap());
    ok &= t1 == t2;
    notes.push(format!("ablation tsv {}", if t1 == t2 { "identical" } else { "DIFFERS" }));

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a.params, &a.centers, &p1).unwrap();
    let (params, centers) = load_checkpoint(&p1).unwrap();
    save_checkpoint(&params, &centers, &p2).unwrap();
    let bytes_equal = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let forward_equal = params.encode(&data.target_test.features).unwrap() == a.params.encode(&data.target_test.features).unwrap();
    ok &= bytes_equal && forward_equal && encode(&params, &centers) == std::fs::read(&p1).unwrap();
    notes.push(format!("checkpoint round trip {}", if bytes_equal && forward_equal { "byte-exact" } else { "BROKEN" }));

    let (img, lab) = idx_fixture();
    let parsed = parse_images(&img).and_then(|i| Ok((i, parse_labels(&lab)?)));
    let valid = matches!(&parsed, Ok((i, l)) if i.count == 3 && l == &[4, 0, 9] && idx_pair(i, l, None).is_ok());
    let roundtrip = matches!(&parsed, Ok((i, l)) if encode_images(i) == img && encode_labels(l) == lab);
    let mut mutations: Vec<(&str, Vec<u8>, Vec<u8>)> = Vec::new();
    let mut m = img.clone();
    m[3] = 0x01;
    mutations.push(("image magic", m, lab.clone()));
    let mut m = lab.clone();
    m[2] = 0x09;
    mutations.push(("label magic", img.clone(), m));
    mutations.push(("image payload truncated", img[..img.len() - 1].to_vec(), lab.clone()));
    mutations.push(("label payload truncated", img.clone(), lab[..lab.len() - 1].to_vec()));
    mutations.push(("image header truncated", img[..10].to_vec(), lab.clone()));
    let mut m = img.clone();
    m.push(0);
    mutations.push(("image trailing byte", m, lab.clone()));
    let fewer = IdxImages { count: 2, rows: 2, cols: 2, pixels: img[16..24].to_vec() };
    mutations.push(("image/label count mismatch", encode_images(&fewer), lab.clone()));
    let mut m = lab.clone();
    m[7] = 5;
    mutations.push(("label count field", img.clone(), m));
    let rejected: Vec<&str> = mutations.iter().filter(|(_, i, l)| idx_rejects(i, l)).map(|(n, _, _)| *n).collect();
    let all_rejected = rejected.len() == mutations.len();
    ok &= valid && roundtrip && all_rejected;
    notes.push(format!(
        "idx fixture {}, {}/{} mutations rejected",
        if valid && roundtrip { "accepted" } else { "REJECTED" },
        rejected.len(),
        mutations.len()
    ));
    (ok, notes.join("; "))
}

fn main() {
    // `cargo test -- --list` and filters from the default harness are not
    // supported; the suite always runs in full.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut lines = Vec::new();
    for (id, name, f) in [
        (1, "gradient correctness", criterion_1 as fn() -> (bool, String)),
        (2, "center update oracle", criterion_2),
        (3, "threshold filter semantics", criterion_3),
        (4, "adversarial equilibrium", criterion_4),
    ] {
        let (pass, detail) = f();
        lines.push(Line { id, name, pass, detail });
    }
    lines.extend(criteria_5_to_8());
    let (pass, detail) = criterion_9();
    lines.push(Line { id: 9, name: "determinism and formats", pass, detail });

    println!();
    for l in &lines {
        println!("criterion {} {:<28} {}  {}", l.id, l.name, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {}/{} passed in {:.1}s", lines.len() - failed, lines.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
