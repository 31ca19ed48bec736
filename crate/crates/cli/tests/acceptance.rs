//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The full experiment trains eight conv models on MNIST (tens of minutes on
//! one core). Trained owners are cached under
//! `target/acceptance-cache/<config-hash>`; set `WMEVADE_ACCEPTANCE_FRESH=1`
//! to retrain.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{smoke_config, stdout, wmevade};
use wmevade::analytics::{self, DieModelConfig};
use wmevade::data::TriggerSet;
use wmevade::ensemble::vote_mode;
use wmevade::nn::{gradient_check, Architecture, Model};
use wmevade::rng;
use wmevade::watermark::{self, Epsilon};
use wmevade_cli::config::ExperimentConfig;
use wmevade_cli::pipeline::{self, Layout};
use wmevade_cli::report::read_csv;

/// Exact die-model value for n = 7, l = 10 (rational enumeration).
const EXACT_7_10: f64 = 0.31717;

struct Criterion {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn crit(id: usize, name: &'static str, checks: &[(bool, String)]) -> Criterion {
    Criterion {
        id,
        name,
        pass: checks.iter().all(|c| c.0),
        detail: checks
            .iter()
            .map(|(ok, what)| format!("{}{what}", if *ok { "" } else { "!! " }))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn eps(v: f64) -> Epsilon {
    Epsilon::new(v).unwrap()
}

fn trained(layout: &Layout, owners: usize) -> bool {
    layout.file("train-owners-timings.json").is_file()
        && layout.baseline_model().is_file()
        && (0..owners).all(|i| layout.owner_model(i).is_file())
}

fn clean_quality(cfg: &ExperimentConfig, layout: &Layout) -> Criterion {
    let (_, header, rows) = read_csv(&layout.file("train-owners.csv")).unwrap();
    assert_eq!(header[1], "test_accuracy");
    let acc = |row: &Vec<String>| row[1].parse::<f64>().unwrap();
    let owners: Vec<f64> = rows
        .iter()
        .filter(|r| r[0] != "baseline")
        .map(acc)
        .collect();
    let baseline = rows.iter().find(|r| r[0] == "baseline").map(acc).unwrap();
    let timings: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(layout.file("train-owners-timings.json")).unwrap(),
    )
    .unwrap();
    let slowest = timings["owners"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["seconds"].as_f64().unwrap())
        .chain(timings["baseline_seconds"].as_f64())
        .fold(0.0, f64::max);
    let floor = match cfg.architecture {
        wmevade_cli::config::ArchChoice::Conv => 0.985,
        wmevade_cli::config::ArchChoice::Dense => 0.970,
    };
    let worst = owners.iter().copied().fold(1.0, f64::min);
    let gap = (owners[0] - baseline).abs();
    crit(
        1,
        "clean-model quality",
        &[
            (
                worst >= floor && baseline >= floor,
                format!("min owner test accuracy {worst:.4}, baseline {baseline:.4} (>= {floor})"),
            ),
            (
                gap <= 0.005,
                format!(
                    "owner-0 vs unwatermarked twin {:.2} points (<= 0.5)",
                    gap * 100.0
                ),
            ),
            (
                slowest <= 15.0 * 60.0,
                format!("slowest model {slowest:.0}s (<= 900s)"),
            ),
        ],
    )
}

fn fidelity(cfg: &ExperimentConfig, layout: &Layout) -> Criterion {
    let owners = pipeline::load_owners(cfg, layout).unwrap();
    let mut checks = Vec::new();
    for (i, o) in owners.iter().enumerate() {
        let report = watermark::verify(&mut &*o.model, &o.triggers, eps(0.9)).unwrap();
        checks.push((
            report.correct == o.triggers.len() && report.claim,
            format!(
                "owner-{i} {}/{} {}",
                report.correct,
                report.queried,
                if report.claim { "CLAIM" } else { "NO-CLAIM" }
            ),
        ));
    }
    crit(2, "watermark fidelity (eps 0.9)", &checks)
}

fn no_claims(res: &wmevade::ensemble::EnsembleExperimentResult, at: f64) -> (bool, String) {
    let k = res.epsilons.iter().position(|&e| e == eps(at)).unwrap();
    let claims = res.claims.iter().filter(|c| c[k]).count();
    (claims == 0, format!("{claims} claims at eps {at}"))
}

/// Chance that no owner reaches the threshold, were triggers independent
/// with the measured mean rate (context for the per-owner NO-CLAIM check).
fn all_quiet(res: &wmevade::ensemble::EnsembleExperimentResult, at: f64, m: usize) -> String {
    let claim = analytics::binomial_tail(m, res.mean_fraction, eps(at).threshold(m));
    format!(
        "P(every owner NO-CLAIM at eps {at} | binomial at the measured rate) = {:.2}",
        (1.0 - claim).powi(res.n as i32)
    )
}

fn ensemble_criteria(
    cfg: &ExperimentConfig,
    layout: &Layout,
) -> (Criterion, Criterion, (bool, String)) {
    let grid = cfg.epsilon_grid().unwrap();
    let rep = pipeline::attack_ensemble(cfg, layout, &grid, &cfg.sizes).unwrap();
    let at = |n: usize| rep.results.iter().find(|r| r.n == n).unwrap();
    let (r7, r3) = (at(7), at(3));
    let exact7 = analytics::exact_ensemble_verification(7, 10).unwrap();
    let exact3 = analytics::exact_ensemble_verification(3, 10).unwrap();
    let c3 = crit(
        3,
        "ensemble evasion n=7",
        &[
            (
                (0.15..=0.40).contains(&r7.mean_fraction),
                format!("mean verified {:.3} in [0.15, 0.40]", r7.mean_fraction),
            ),
            no_claims(r7, 0.5),
            no_claims(r7, 0.8),
            (true, all_quiet(r7, 0.5, cfg.triggers_per_owner)),
            (
                (r7.mean_fraction - exact7).abs() <= 0.10,
                format!(
                    "die model exact {exact7:.5} (oracle {EXACT_7_10}), gap {:.1} points",
                    (r7.mean_fraction - exact7).abs() * 100.0
                ),
            ),
        ],
    );
    let c4 = crit(
        4,
        "ensemble evasion n=3",
        &[
            (
                (0.25..=0.55).contains(&r3.mean_fraction),
                format!("mean verified {:.3} in [0.25, 0.55]", r3.mean_fraction),
            ),
            no_claims(r3, 0.8),
            (
                (exact3 - 0.43).abs() < 1e-12,
                format!("die model exact {exact3:.2} reported alongside"),
            ),
        ],
    );
    // asserted for the deployed n = 7 gateway; a 2-model vote breaks every
    // disagreement by coin flip and is reported only
    let qos_at =
        |s: &pipeline::EnsembleSummary| (s.ensemble_accuracy - s.max_member_accuracy) * 100.0;
    let s7 = rep.summary.iter().find(|s| s.n == 7).unwrap();
    let per_size: Vec<String> = rep
        .summary
        .iter()
        .map(|s| format!("n={} {:+.2}", s.n, qos_at(s)))
        .collect();
    let qos = (
        qos_at(s7) >= -0.2,
        format!(
            "n=7 ensemble minus best member {:+.2} points (>= -0.2); all sizes {}",
            qos_at(s7),
            per_size.join(" ")
        ),
    );
    (c3, c4, qos)
}

fn limit_behaviour() -> Criterion {
    let start = Instant::now();
    let r = analytics::simulate_ensemble_verification(&DieModelConfig {
        n: 7,
        l: 1000,
        trials: 1_000_000,
        seed: 0,
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    crit(
        5,
        "limit behaviour n=7 l=1000",
        &[
            (
                (r.estimate - 0.143).abs() <= 0.01,
                format!("estimate {:.4} (0.143 +- 0.01)", r.estimate),
            ),
            (secs <= 60.0, format!("{secs:.1}s (<= 60s)")),
        ],
    )
}

fn detector_criteria(cfg: &ExperimentConfig, layout: &Layout) -> (Criterion, Criterion) {
    let grid = cfg.epsilon_grid().unwrap();
    let rep = pipeline::attack_detector(cfg, layout, &grid).unwrap();
    let c6 = crit(
        6,
        "detector quality",
        &[
            (
                rep.evaluation.accuracy >= 0.90,
                format!(
                    "held-out accuracy {:.4} (tpr {:.4}, fpr {:.4})",
                    rep.evaluation.accuracy, rep.evaluation.tpr, rep.evaluation.fpr
                ),
            ),
            (
                rep.seconds_per_epoch <= 2.0,
                format!("{:.2}s/epoch (<= 2s)", rep.seconds_per_epoch),
            ),
        ],
    );
    let owner_claim = rep
        .owner_claims
        .iter()
        .find(|(e, _)| *e == eps(0.5))
        .map(|c| c.1)
        .unwrap();
    let t = rep.simulated_tpr;
    let c7 = crit(
        7,
        "detector evasion",
        &[
            ((rep.forced_fraction - 0.10).abs() <= 0.01, format!("TPR forced to 1: verified {:.4} (0.10 +- 0.01)", rep.forced_fraction)),
            (
                (rep.simulated_fraction - rep.simulated_prediction).abs() <= 0.03,
                format!(
                    "measured TPR {t:.4}: verified {:.4} vs (1-t)+t/10 = {:.4} (+- 0.03, {} triggers)",
                    rep.simulated_fraction, rep.simulated_prediction, rep.simulated_triggers
                ),
            ),
            (!owner_claim, format!("{}: {} at eps 0.5 (verified {:.2})", rep.stolen_owner, if owner_claim { "CLAIM" } else { "NO-CLAIM" }, rep.owner_fraction)),
        ],
    );
    (c6, c7)
}

fn oracle_equivalences() -> Criterion {
    // finite differences on twenty seeded dense nets
    let mut worst_grad = 0.0f64;
    for seed in 0..20u64 {
        let inputs = 4 + seed as usize % 5;
        let classes = 2 + seed as usize % 4;
        let model = Model::init(
            Architecture::mlp(inputs, &[6, 5], classes).unwrap(),
            seed,
            "g",
        );
        let mut r = rng::stream(seed, 1);
        let x: Vec<f32> = (0..inputs)
            .map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0))
            .collect();
        worst_grad = worst_grad.max(gradient_check(&model, &x, seed as usize % classes).unwrap());
    }

    // Monte Carlo against exact enumeration
    let mut worst_sigma = 0.0f64;
    for n in 2..=6 {
        for l in [2, 3, 5, 10] {
            let exact = analytics::exact_ensemble_verification(n, l).unwrap();
            let mc = analytics::simulate_ensemble_verification(&DieModelConfig {
                n,
                l,
                trials: 200_000,
                seed: 11,
            })
            .unwrap();
            let sigma = (exact * (1.0 - exact) / mc.trials as f64).sqrt();
            worst_sigma = worst_sigma.max((mc.estimate - exact).abs() / sigma);
        }
    }

    let e22 = analytics::exact_ensemble_verification(2, 2).unwrap();
    let e310 = analytics::exact_ensemble_verification(3, 10).unwrap();

    // every vote vector for n <= 4, l <= 3: a strict plurality wins outright,
    // otherwise the answer lies in the tie set
    let mut vote_violations = 0usize;
    let mut r = rng::stream(5, 0);
    for l in 1..=3usize {
        for n in 1..=4u32 {
            for code in 0..l.pow(n) {
                let votes: Vec<usize> = (0..n).map(|k| code / l.pow(k) % l).collect();
                let counts: Vec<usize> = (0..l)
                    .map(|c| votes.iter().filter(|&&v| v == c).count())
                    .collect();
                let top = *counts.iter().max().unwrap();
                let ties: Vec<usize> = (0..l).filter(|&c| counts[c] == top).collect();
                for _ in 0..if ties.len() > 1 { 8 } else { 1 } {
                    let got = vote_mode(&votes, &mut r).unwrap();
                    if !ties.contains(&got) {
                        vote_violations += 1;
                    }
                }
            }
        }
    }

    crit(
        8,
        "oracle equivalences",
        &[
            (
                worst_grad < 1e-4,
                format!("gradient check worst {worst_grad:.1e} on 20 nets"),
            ),
            (
                worst_sigma <= 3.0,
                format!("MC vs exact worst {worst_sigma:.2} sigma"),
            ),
            (
                (e22 - 0.75).abs() < 1e-12 && (e310 - 0.43).abs() < 1e-12,
                format!("exact(2,2) {e22}, exact(3,10) {e310:.2}"),
            ),
            (
                vote_violations == 0,
                format!("{vote_violations} vote violations (n <= 4, l <= 3)"),
            ),
        ],
    )
}

/// Every file a run writes, except wall-clock timings.
fn artifacts(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else if !p.to_string_lossy().ends_with("-timings.json") {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Criterion {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 3, 17);
    let cfg = cfg.to_str().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let out_s = out.to_str().unwrap();
        let triggers = out.join("owners/owner-1/triggers");
        let paths: String = (0..10)
            .map(|i| format!("{}/trigger-{i:03}.pgm\n", triggers.display()))
            .collect();
        let sim = out.join("simulate.csv");
        let mut outputs = Vec::new();
        let commands: Vec<(Vec<&str>, Vec<u8>)> = vec![
            (
                vec!["train-owners", "--config", cfg, "--out", out_s],
                vec![],
            ),
            (
                vec!["attack-ensemble", "--config", cfg, "--out", out_s],
                vec![],
            ),
            (
                vec!["attack-detector", "--config", cfg, "--out", out_s],
                vec![],
            ),
            (
                vec![
                    "serve-stdin",
                    "--gateway",
                    "ensemble",
                    "--config",
                    cfg,
                    "--out",
                    out_s,
                    "--seed",
                    "4",
                ],
                paths.clone().into_bytes(),
            ),
            (
                vec![
                    "serve-stdin",
                    "--gateway",
                    "detector",
                    "--config",
                    cfg,
                    "--out",
                    out_s,
                    "--seed",
                    "4",
                ],
                paths.clone().into_bytes(),
            ),
            (
                vec![
                    "simulate",
                    "--n",
                    "5",
                    "--trials",
                    "20000",
                    "--seed",
                    "3",
                    "--out",
                    sim.to_str().unwrap(),
                ],
                vec![],
            ),
            (vec!["report", "--out", out_s], vec![]),
        ];
        for (args, input) in &commands {
            let o = wmevade(args, input);
            assert!(
                o.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
            outputs.push(stdout(&o));
        }
        runs.push((outputs, artifacts(&out)));
    }
    let files = runs[0].1.len();
    let differing: Vec<String> = runs[0]
        .1
        .iter()
        .zip(&runs[1].1)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.display().to_string())
        .collect();
    let same_listing = runs[0]
        .1
        .iter()
        .map(|f| &f.0)
        .eq(runs[1].1.iter().map(|f| &f.0));
    crit(
        9,
        "determinism",
        &[
            (
                same_listing && differing.is_empty(),
                format!("{files} artifacts byte-identical across two runs {differing:?}"),
            ),
            (runs[0].0 == runs[1].0, "command outputs identical".into()),
        ],
    )
}

#[test]
fn acceptance_criteria() {
    let cfg = ExperimentConfig::load(workspace().join("configs/acceptance.json")).unwrap();
    let layout = Layout::new(workspace().join("target/acceptance-cache").join(cfg.hash()));
    let fresh = std::env::var_os("WMEVADE_ACCEPTANCE_FRESH").is_some_and(|v| v == "1");
    if fresh || !trained(&layout, cfg.owners) {
        if layout.root.exists() {
            fs::remove_dir_all(&layout.root).unwrap();
        }
        // an accuracy-floor miss still leaves every artifact for criterion 1
        let _ = pipeline::train_owners(&cfg, &layout, &mut std::io::stderr());
    } else {
        eprintln!("reusing trained owners in {}", layout.root.display());
    }
    for i in 0..cfg.owners {
        TriggerSet::load_dir(layout.owner_triggers(i), None)
            .expect("owner triggers reproduce from their manifest");
    }

    let mut all = vec![clean_quality(&cfg, &layout), fidelity(&cfg, &layout)];
    let (c3, c4, qos) = ensemble_criteria(&cfg, &layout);
    all.extend([c3, c4, limit_behaviour()]);
    let (c6, c7) = detector_criteria(&cfg, &layout);
    all.extend([c6, c7, oracle_equivalences(), determinism()]);

    println!();
    for c in &all {
        println!(
            "criterion {}: {} - {} ({})",
            c.id,
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!(
        "quality of service: {} ({})",
        if qos.0 { "PASS" } else { "FAIL" },
        qos.1
    );
    let report = wmevade_cli::report::summarize(&layout).unwrap();
    println!("\n{report}");

    let failed: Vec<usize> = all.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    assert!(failed.is_empty() && qos.0, "failed criteria {failed:?}");
}
