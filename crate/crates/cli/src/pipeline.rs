//! The experiment pipelines behind each CLI verb. Every function writes its
//! CSV report(s) under the output directory and returns the numbers it
//! measured so callers (and the acceptance suite) need not re-parse them.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;
use wmevade::analytics::{self, AnalyticsError, DieModelConfig, Method, SimulationResult};
use wmevade::data::{
    build_detector_dataset, default_delta, generate_trigger_images, load_mnist, DataError, Dataset,
    Image, Split, TriggerSet, TriggerSource,
};
use wmevade::detector::{
    self, AlwaysTrigger, Detector, DetectorError, DetectorEvaluation, DetectorGateway,
};
use wmevade::ensemble::{self, EnsembleError, EnsembleExperimentResult, EnsembleGateway, Owner};
use wmevade::nn::{format, Model, NnError};
use wmevade::rng;
use wmevade::watermark::{self, Epsilon, QueryOracle, WatermarkError};

use crate::config::{ConfigError, ExperimentConfig};
use crate::report::{self, fmt_f};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// A measured result missed the bar the experiment requires.
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error("missing artifact {}: run `{command}` first", .path.display())]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn owner_dir(&self, index: usize) -> PathBuf {
        self.root
            .join("owners")
            .join(ExperimentConfig::owner_id(index))
    }

    pub fn owner_model(&self, index: usize) -> PathBuf {
        self.owner_dir(index).join("model.wmnn")
    }

    pub fn owner_triggers(&self, index: usize) -> PathBuf {
        self.owner_dir(index).join("triggers")
    }

    pub fn baseline_model(&self) -> PathBuf {
        self.root.join("baseline").join("model.wmnn")
    }

    pub fn detector_model(&self) -> PathBuf {
        self.root.join("detector").join("detector.wmnn")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Mnist> {
    let limit = |data: Dataset, n: Option<usize>| -> Result<Dataset> {
        Ok(match n {
            Some(n) if n < data.len() => data.slice(0..n)?,
            _ => data,
        })
    };
    Ok(Mnist {
        train: limit(load_mnist(&cfg.mnist_dir, Split::Train)?, cfg.train_limit)?,
        test: limit(load_mnist(&cfg.mnist_dir, Split::Test)?, cfg.test_limit)?,
    })
}

/// Worker count: `WMEVADE_THREADS` if set, else the available cores.
pub fn threads() -> usize {
    std::env::var("WMEVADE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over independent jobs.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn images_of(data: &Dataset, indices: impl IntoIterator<Item = usize>) -> Vec<Image> {
    indices.into_iter().map(|i| data.image(i)).collect()
}

fn claim_columns(epsilons: &[Epsilon]) -> Vec<String> {
    epsilons.iter().map(|e| format!("claim@{e}")).collect()
}

// ---------------------------------------------------------------------------
// train-owners

#[derive(Debug, Clone, Serialize)]
pub struct OwnerTraining {
    pub owner_id: String,
    pub test_accuracy: f64,
    pub trigger_accuracy: f64,
    /// Self-verification verdicts, one per ε of the grid.
    pub self_claims: Vec<bool>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOwnersOutcome {
    pub owners: Vec<OwnerTraining>,
    pub baseline_accuracy: Option<f64>,
    pub baseline_seconds: Option<f64>,
}

enum Job {
    Owner(usize),
    Baseline,
}

/// Draws tried before giving up on a trigger set that keeps landing within δ of a clean image.
const TRIGGER_ATTEMPTS: usize = 16;

/// Draws an owner's trigger set, re-seeding until it is disjoint from the
/// clean training images. The accepted seed lands in the manifest.
fn owner_triggers(
    cfg: &ExperimentConfig,
    id: &str,
    classes: usize,
    clean: &Dataset,
) -> Result<TriggerSet> {
    let source = TriggerSource::MNIST_ABSTRACT;
    let mut last = None;
    for attempt in 0..TRIGGER_ATTEMPTS {
        let name = if attempt == 0 {
            format!("{id}/triggers")
        } else {
            format!("{id}/triggers/{attempt}")
        };
        let seed = cfg.seed_for(&name);
        let delta = cfg.delta.unwrap_or_else(|| default_delta(&source, seed));
        let set = TriggerSet::generate(id, cfg.triggers_per_owner, classes, seed, delta, &source)?;
        match set.check_disjoint(clean) {
            Ok(()) => return Ok(set),
            Err(e) => last = Some(e),
        }
    }
    Err(PipelineError::Assertion(format!(
        "no trigger set for {id} disjoint from the clean data after {TRIGGER_ATTEMPTS} draws: {}",
        last.expect("at least one attempt")
    )))
}

/// Generates each owner's trigger set, embeds it by training from scratch,
/// and writes models, manifests, `train-owners.csv` and
/// `train-owners-timings.json`.
pub fn train_owners(
    cfg: &ExperimentConfig,
    layout: &Layout,
    log: &mut dyn Write,
) -> Result<TrainOwnersOutcome> {
    let data = load_data(cfg)?;
    let arch = cfg.architecture.architecture();
    let classes = arch.classes();
    let epsilons = cfg.epsilon_grid()?;

    let mut trigger_sets = Vec::with_capacity(cfg.owners);
    for i in 0..cfg.owners {
        let id = ExperimentConfig::owner_id(i);
        trigger_sets.push(owner_triggers(cfg, &id, classes, &data.train)?);
    }
    for (i, a) in trigger_sets.iter().enumerate() {
        for b in &trigger_sets[i + 1..] {
            if a.images.iter().any(|x| b.images.contains(x)) {
                return Err(PipelineError::Assertion(format!(
                    "trigger sets of {} and {} intersect",
                    a.owner_id, b.owner_id
                )));
            }
        }
    }

    let mut jobs: Vec<Job> = (0..cfg.owners).map(Job::Owner).collect();
    if cfg.baseline {
        jobs.push(Job::Baseline);
    }
    let trained = parallel_map(&jobs, threads(), |job| -> Result<(Model, f64)> {
        let start = Instant::now();
        let (triggers, seed) = match *job {
            Job::Owner(i) => (
                trigger_sets[i].clone(),
                cfg.seed_for(&format!("{}/train", ExperimentConfig::owner_id(i))),
            ),
            Job::Baseline => (TriggerSet::empty(classes), cfg.seed_for("owner-0/train")),
        };
        let model =
            watermark::embed_from_scratch(&data.train, &triggers, &arch, &cfg.train_config(seed))?;
        Ok((model, start.elapsed().as_secs_f64()))
    });

    let mut owners = Vec::with_capacity(cfg.owners);
    let mut baseline_accuracy = None;
    let mut baseline_seconds = None;
    for (job, result) in jobs.iter().zip(trained) {
        let (model, seconds) = result?;
        let test_accuracy = model.accuracy(&data.test)?;
        match *job {
            Job::Owner(i) => {
                let triggers = &trigger_sets[i];
                fs::create_dir_all(layout.owner_dir(i))?;
                format::save(&model, layout.owner_model(i))?;
                triggers.save_dir(layout.owner_triggers(i))?;
                let trigger_accuracy = watermark::trigger_accuracy(&model, triggers)?;
                let report = watermark::verify(&mut &model, triggers, epsilons[0])?;
                let self_claims = epsilons
                    .iter()
                    .map(|e| e.admits(report.correct, report.queried))
                    .collect();
                writeln!(
                    log,
                    "{}: test accuracy {:.4}, trigger accuracy {:.2}, {:.1}s",
                    triggers.owner_id, test_accuracy, trigger_accuracy, seconds
                )?;
                owners.push(OwnerTraining {
                    owner_id: triggers.owner_id.clone(),
                    test_accuracy,
                    trigger_accuracy,
                    self_claims,
                    seconds,
                });
            }
            Job::Baseline => {
                fs::create_dir_all(layout.baseline_model().parent().expect("has parent"))?;
                format::save(&model, layout.baseline_model())?;
                writeln!(
                    log,
                    "baseline (no watermark): test accuracy {test_accuracy:.4}, {seconds:.1}s"
                )?;
                baseline_accuracy = Some(test_accuracy);
                baseline_seconds = Some(seconds);
            }
        }
    }

    let mut header = vec![
        "owner".to_string(),
        "test_accuracy".into(),
        "trigger_accuracy".into(),
    ];
    header.extend(claim_columns(&epsilons));
    let mut rows: Vec<Vec<String>> = owners
        .iter()
        .map(|o| {
            let mut row = vec![
                o.owner_id.clone(),
                fmt_f(o.test_accuracy),
                fmt_f(o.trigger_accuracy),
            ];
            row.extend(o.self_claims.iter().map(|c| c.to_string()));
            row
        })
        .collect();
    if let Some(acc) = baseline_accuracy {
        let mut row = vec!["baseline".to_string(), fmt_f(acc), String::new()];
        row.extend(epsilons.iter().map(|_| String::new()));
        rows.push(row);
    }
    report::write_csv(&layout.file("train-owners.csv"), cfg, &header, &rows)?;
    let outcome = TrainOwnersOutcome {
        owners,
        baseline_accuracy,
        baseline_seconds,
    };
    fs::write(
        layout.file("train-owners-timings.json"),
        serde_json::to_string_pretty(&outcome).expect("serialises"),
    )?;

    let floor = cfg.accuracy_floor;
    if let Some(o) = outcome.owners.iter().find(|o| o.test_accuracy < floor) {
        return Err(PipelineError::Assertion(format!(
            "{} test accuracy {:.4} below floor {floor}",
            o.owner_id, o.test_accuracy
        )));
    }
    if let Some(acc) = outcome.baseline_accuracy.filter(|&a| a < floor) {
        return Err(PipelineError::Assertion(format!(
            "baseline test accuracy {acc:.4} below floor {floor}"
        )));
    }
    Ok(outcome)
}

/// Loads every owner written by [`train_owners`].
pub fn load_owners(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<Owner>> {
    (0..cfg.owners)
        .map(|i| {
            let path = layout.owner_model(i);
            if !path.is_file() {
                return Err(PipelineError::MissingArtifact {
                    path,
                    command: "train-owners",
                });
            }
            Ok(Owner {
                model: Arc::new(format::load(&path)?),
                triggers: TriggerSet::load_dir(layout.owner_triggers(i), None)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// attack-ensemble

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub n: usize,
    pub mean_fraction: f64,
    pub die_model: f64,
    pub die_model_method: Method,
    pub ensemble_accuracy: f64,
    pub max_member_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub results: Vec<EnsembleExperimentResult>,
    pub summary: Vec<EnsembleSummary>,
}

/// Die-model prediction: exact where enumerable, otherwise an explicitly
/// labelled Monte Carlo estimate.
pub fn die_model_prediction(n: usize, l: usize, seed: u64) -> Result<SimulationResult> {
    if n == 1 {
        return Ok(SimulationResult {
            estimate: 1.0,
            stderr: 0.0,
            trials: 0,
            method: Method::Exact,
        });
    }
    match analytics::exact_result(n, l) {
        Err(AnalyticsError::TooLarge { .. }) => Ok(analytics::simulate_ensemble_verification(
            &DieModelConfig {
                n,
                l,
                trials: 1_000_000,
                seed,
            },
        )?),
        other => Ok(other?),
    }
}

/// Verifies every owner against gateways built from the first `n` models
/// for each requested size, and scores each gateway on the MNIST test set.
pub fn attack_ensemble(
    cfg: &ExperimentConfig,
    layout: &Layout,
    epsilons: &[Epsilon],
    sizes: &[usize],
) -> Result<EnsembleReport> {
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > cfg.owners) {
        return Err(EnsembleError::SizeOutOfRange {
            size: n,
            owners: cfg.owners,
        }
        .into());
    }
    let owners = load_owners(cfg, layout)?;
    let data = load_data(cfg)?;
    let seed = cfg.seed_for("ensemble");
    let results = ensemble::run_ensemble_experiment(&owners, sizes, epsilons, seed)?;

    let max_n = sizes.iter().copied().max().unwrap_or(0);
    let test = &data.test;
    let member_predictions: Vec<Vec<usize>> = owners[..max_n]
        .iter()
        .map(|o| o.model.predict_many(test.all_pixels(), test.len()))
        .collect::<Result<_, _>>()?;
    let score = |answers: &[usize]| {
        answers
            .iter()
            .zip(test.labels())
            .filter(|(a, l)| a == l)
            .count() as f64
            / test.len() as f64
    };
    let member_accuracy: Vec<f64> = member_predictions.iter().map(|p| score(p)).collect();
    let classes = owners[0].model.classes();

    let mut summary = Vec::with_capacity(results.len());
    for r in &results {
        let n = r.n;
        let ensemble_accuracy = if n == 1 {
            member_accuracy[0]
        } else {
            let mut tie = rng::stream(cfg.seed_for(&format!("ensemble/qos/n{n}")), 0);
            let answers: Vec<usize> = (0..test.len())
                .map(|i| {
                    let votes: Vec<usize> = member_predictions[..n].iter().map(|p| p[i]).collect();
                    ensemble::vote_mode(&votes, &mut tie).expect("nonempty")
                })
                .collect();
            score(&answers)
        };
        let prediction =
            die_model_prediction(n, classes, cfg.seed_for(&format!("ensemble/die/n{n}")))?;
        summary.push(EnsembleSummary {
            n,
            mean_fraction: r.mean_fraction,
            die_model: prediction.estimate,
            die_model_method: prediction.method,
            ensemble_accuracy,
            max_member_accuracy: member_accuracy[..n].iter().copied().fold(0.0, f64::max),
        });
    }

    let mut header = vec!["n".to_string(), "owner".into(), "verified_fraction".into()];
    header.extend(claim_columns(epsilons));
    header.push("die_model_prediction".into());
    let mut rows = Vec::new();
    for (r, s) in results.iter().zip(&summary) {
        for (k, id) in r.owner_ids.iter().enumerate() {
            let mut row = vec![r.n.to_string(), id.clone(), fmt_f(r.fractions[k])];
            row.extend(r.claims[k].iter().map(|c| c.to_string()));
            row.push(fmt_f(s.die_model));
            rows.push(row);
        }
    }
    report::write_csv(&layout.file("attack-ensemble.csv"), cfg, &header, &rows)?;
    let header: Vec<String> = [
        "n",
        "mean_verified_fraction",
        "die_model_prediction",
        "die_model_method",
        "ensemble_test_accuracy",
        "max_member_test_accuracy",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.n.to_string(),
                fmt_f(s.mean_fraction),
                fmt_f(s.die_model),
                s.die_model_method.to_string(),
                fmt_f(s.ensemble_accuracy),
                fmt_f(s.max_member_accuracy),
            ]
        })
        .collect();
    report::write_csv(
        &layout.file("attack-ensemble-summary.csv"),
        cfg,
        &header,
        &rows,
    )?;
    Ok(EnsembleReport { results, summary })
}

// ---------------------------------------------------------------------------
// attack-detector

#[derive(Debug, Clone, Serialize)]
pub struct DetectorReport {
    pub stolen_owner: String,
    pub evaluation: DetectorEvaluation,
    /// TPR on patch-tweaked images, a family the detector never saw.
    pub patch_tweaked_tpr: f64,
    pub stolen_accuracy: f64,
    pub gateway_accuracy: f64,
    pub owner_fraction: f64,
    pub owner_claims: Vec<(Epsilon, bool)>,
    pub owner_tpr: f64,
    pub owner_prediction: f64,
    pub simulated_triggers: usize,
    pub simulated_tpr: f64,
    pub simulated_fraction: f64,
    pub simulated_prediction: f64,
    pub forced_fraction: f64,
    pub seconds_per_epoch: f64,
}

fn pick(data: &Dataset, count: usize, seed: u64) -> Vec<Image> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(seed, 0));
    images_of(data, idx.into_iter().take(count))
}

fn fraction_correct(answers: &[usize], labels: &[usize]) -> f64 {
    answers.iter().zip(labels).filter(|(a, l)| a == l).count() as f64 / labels.len() as f64
}

/// Trains a trigger detector on the stolen model's features and measures
/// the detector gateway against the owner, the clean test set, and a large
/// simulated trigger population.
pub fn attack_detector(
    cfg: &ExperimentConfig,
    layout: &Layout,
    epsilons: &[Epsilon],
) -> Result<DetectorReport> {
    let d = &cfg.detector;
    let owners = load_owners(cfg, layout)?;
    let owner = &owners[d.stolen_owner];
    let stolen = Arc::clone(&owner.model);
    let classes = stolen.classes();
    let data = load_data(cfg)?;
    let abstract_source = TriggerSource::MNIST_ABSTRACT;

    let clean = pick(
        &data.train,
        d.train_per_class,
        cfg.seed_for("detector/clean"),
    );
    let triggers = generate_trigger_images(
        d.train_per_class,
        cfg.seed_for("detector/abstract"),
        0.0,
        &abstract_source,
    )?;
    let dd = build_detector_dataset(&stolen, &clean, &triggers, cfg.seed_for("detector/shuffle"))?;
    let start = Instant::now();
    let det = detector::train_detector(Arc::clone(&stolen), &dd, &cfg.detector_train_config())?
        .with_threshold(d.tau)?;
    let seconds_per_epoch = start.elapsed().as_secs_f64() / d.epochs as f64;
    fs::create_dir_all(layout.detector_model().parent().expect("has parent"))?;
    det.save(layout.detector_model())?;

    let held_clean = pick(
        &data.test,
        d.test_per_class,
        cfg.seed_for("detector/clean-test"),
    );
    let held_abstract = generate_trigger_images(
        d.test_per_class,
        cfg.seed_for("detector/abstract-test"),
        0.0,
        &abstract_source,
    )?;
    let evaluation = detector::evaluate_detector(&det, &held_clean, &held_abstract)?;
    let patch = generate_trigger_images(
        d.test_per_class,
        cfg.seed_for("detector/patch-test"),
        0.0,
        &TriggerSource::PatchTweaked { base: &data.test },
    )?;
    let patch_tweaked_tpr = detector::evaluate_detector(&det, &held_clean, &patch)?.tpr;

    let stolen_accuracy = stolen.accuracy(&data.test)?;
    let test_images = images_of(&data.test, 0..data.test.len());
    let mut gateway = DetectorGateway::new(
        Arc::clone(&stolen),
        &det,
        cfg.seed_for("detector/answers/clean"),
    );
    let gateway_accuracy = fraction_correct(
        &gateway.guarded_predict_many(&test_images)?,
        data.test.labels(),
    );

    let mut gateway = DetectorGateway::new(
        Arc::clone(&stolen),
        &det,
        cfg.seed_for("detector/answers/owner"),
    );
    let verification = watermark::verify(&mut gateway, &owner.triggers, epsilons[0])?;
    let owner_tpr = gateway.flagged_count() as f64 / owner.triggers.len() as f64;
    let owner_accuracy = watermark::trigger_accuracy(&stolen, &owner.triggers)?;
    let owner_prediction =
        analytics::detector_verified_fraction(owner_tpr, owner_accuracy, classes)?;
    let owner_claims = epsilons
        .iter()
        .map(|&e| (e, e.admits(verification.correct, verification.queried)))
        .collect();

    // Simulated owner population: fresh abstract images labelled with the
    // stolen model's own answers, i.e. perfectly embedded triggers (a = 1).
    let simulated = generate_trigger_images(
        d.simulated_triggers,
        cfg.seed_for("detector/simulated"),
        0.0,
        &abstract_source,
    )?;
    let mut flat = Vec::with_capacity(simulated.len() * stolen.input_len());
    for im in &simulated {
        flat.extend_from_slice(im.pixels());
    }
    let labels = stolen.predict_many(&flat, simulated.len())?;
    let mut gateway = DetectorGateway::new(
        Arc::clone(&stolen),
        &det,
        cfg.seed_for("detector/answers/simulated"),
    );
    let simulated_fraction = fraction_correct(&gateway.guarded_predict_many(&simulated)?, &labels);
    let simulated_tpr = gateway.flagged_count() as f64 / simulated.len() as f64;
    let simulated_prediction = analytics::detector_verified_fraction(simulated_tpr, 1.0, classes)?;
    let mut forced = DetectorGateway::new(
        Arc::clone(&stolen),
        AlwaysTrigger,
        cfg.seed_for("detector/answers/forced"),
    );
    let forced_fraction = fraction_correct(&forced.guarded_predict_many(&simulated)?, &labels);

    let report = DetectorReport {
        stolen_owner: owner.triggers.owner_id.clone(),
        evaluation,
        patch_tweaked_tpr,
        stolen_accuracy,
        gateway_accuracy,
        owner_fraction: verification.verified_fraction(),
        owner_claims,
        owner_tpr,
        owner_prediction,
        simulated_triggers: simulated.len(),
        simulated_tpr,
        simulated_fraction,
        simulated_prediction,
        forced_fraction,
        seconds_per_epoch,
    };
    let e = &report.evaluation;
    let mut rows: Vec<(String, String)> = vec![
        ("stolen_owner".into(), report.stolen_owner.clone()),
        ("detector_accuracy".into(), fmt_f(e.accuracy)),
        ("detector_tpr".into(), fmt_f(e.tpr)),
        ("detector_fpr".into(), fmt_f(e.fpr)),
        ("true_positives".into(), e.true_positives.to_string()),
        ("false_negatives".into(), e.false_negatives.to_string()),
        ("true_negatives".into(), e.true_negatives.to_string()),
        ("false_positives".into(), e.false_positives.to_string()),
        ("patch_tweaked_tpr".into(), fmt_f(report.patch_tweaked_tpr)),
        (
            "stolen_clean_accuracy".into(),
            fmt_f(report.stolen_accuracy),
        ),
        (
            "gateway_clean_accuracy".into(),
            fmt_f(report.gateway_accuracy),
        ),
        (
            "owner_verified_fraction".into(),
            fmt_f(report.owner_fraction),
        ),
        ("owner_tpr".into(), fmt_f(report.owner_tpr)),
        (
            "owner_formula_prediction".into(),
            fmt_f(report.owner_prediction),
        ),
    ];
    rows.extend(
        report
            .owner_claims
            .iter()
            .map(|(e, c)| (format!("owner_claim@{e}"), c.to_string())),
    );
    rows.extend([
        (
            "simulated_triggers".into(),
            report.simulated_triggers.to_string(),
        ),
        ("simulated_tpr".into(), fmt_f(report.simulated_tpr)),
        (
            "simulated_verified_fraction".into(),
            fmt_f(report.simulated_fraction),
        ),
        (
            "simulated_formula_prediction".into(),
            fmt_f(report.simulated_prediction),
        ),
        (
            "forced_tpr1_verified_fraction".into(),
            fmt_f(report.forced_fraction),
        ),
        (
            "forced_tpr1_formula_prediction".into(),
            fmt_f(1.0 / classes as f64),
        ),
    ]);
    let rows: Vec<Vec<String>> = rows.into_iter().map(|(k, v)| vec![k, v]).collect();
    report::write_csv(
        &layout.file("attack-detector.csv"),
        cfg,
        &["metric".into(), "value".into()],
        &rows,
    )?;
    fs::write(
        layout.file("attack-detector-timings.json"),
        format!("{{\n  \"seconds_per_epoch\": {seconds_per_epoch}\n}}\n"),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// simulate / verify / serve-stdin

pub fn simulate(
    n: usize,
    l: usize,
    trials: u64,
    seed: u64,
    method: Method,
) -> Result<SimulationResult> {
    Ok(match method {
        Method::Exact => analytics::exact_result(n, l)?,
        Method::MonteCarlo => {
            analytics::simulate_ensemble_verification(&DieModelConfig { n, l, trials, seed })?
        }
    })
}

/// Gateway chosen for a black-box session.
pub enum Gateway {
    Model(Model),
    Ensemble(EnsembleGateway),
    Detector(DetectorGateway<Detector>),
}

impl QueryOracle for Gateway {
    fn query(&mut self, image: &Image) -> Result<usize, watermark::OracleError> {
        match self {
            Gateway::Model(m) => m.query(image),
            Gateway::Ensemble(g) => g.query(image),
            Gateway::Detector(g) => g.query(image),
        }
    }
}

pub fn ensemble_gateway(
    cfg: &ExperimentConfig,
    layout: &Layout,
    size: usize,
    seed: u64,
) -> Result<Gateway> {
    if size < 2 || size > cfg.owners {
        return Err(EnsembleError::SizeOutOfRange {
            size,
            owners: cfg.owners,
        }
        .into());
    }
    let owners = load_owners(cfg, layout)?;
    let models = owners[..size]
        .iter()
        .map(|o| Arc::clone(&o.model))
        .collect();
    Ok(Gateway::Ensemble(EnsembleGateway::new(
        models,
        rng::derive_seed(seed, "serve/ensemble"),
    )?))
}

pub fn detector_gateway(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<Gateway> {
    let stolen_path = layout.owner_model(cfg.detector.stolen_owner);
    if !stolen_path.is_file() {
        return Err(PipelineError::MissingArtifact {
            path: stolen_path,
            command: "train-owners",
        });
    }
    if !layout.detector_model().is_file() {
        return Err(PipelineError::MissingArtifact {
            path: layout.detector_model(),
            command: "attack-detector",
        });
    }
    let stolen = Arc::new(format::load(stolen_path)?);
    let det = Detector::load(layout.detector_model(), Arc::clone(&stolen))?;
    Ok(Gateway::Detector(DetectorGateway::new(
        stolen,
        det,
        rng::derive_seed(seed, "serve/detector"),
    )))
}

/// Line protocol: one image path in, one label (or `ERR`) out.
pub fn serve(
    gateway: &mut impl QueryOracle,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<usize> {
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        let path = line.trim();
        if path.is_empty() {
            continue;
        }
        match Image::load_pgm(path)
            .map_err(|e| e.to_string())
            .and_then(|im| gateway.query(&im).map_err(|e| e.to_string()))
        {
            Ok(label) => writeln!(output, "{label}")?,
            Err(_) => writeln!(output, "ERR")?,
        }
        output.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Reads one label per line (as written by [`serve`]); `ERR` lines count
/// as wrong answers.
pub fn parse_answers(text: &str) -> Result<Vec<Option<usize>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            if l == "ERR" {
                Ok(None)
            } else {
                l.parse().map(Some).map_err(|_| {
                    PipelineError::Data(DataError::Format(format!("bad answer line `{l}`")))
                })
            }
        })
        .collect()
}

/// Scores recorded answers against a trigger set.
pub fn verify_answers(
    triggers: &TriggerSet,
    answers: &[Option<usize>],
    epsilon: Epsilon,
) -> Result<watermark::VerificationReport> {
    // an ERR line never matches a label
    let returned: Vec<usize> = answers.iter().map(|a| a.unwrap_or(usize::MAX)).collect();
    Ok(watermark::VerificationReport::from_answers(
        &triggers.owner_id,
        &triggers.labels,
        &returned,
        epsilon,
    )?)
}

pub fn trigger_paths(dir: &Path, count: usize) -> Vec<PathBuf> {
    (0..count)
        .map(|i| dir.join(wmevade::data::trigger_file_name(i)))
        .collect()
}
