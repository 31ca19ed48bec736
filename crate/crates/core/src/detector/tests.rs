use super::*;
use crate::data::{build_detector_dataset, generate_trigger_images, TriggerSource};
use crate::watermark::{self, Epsilon};

const SOURCE: TriggerSource<'static> = TriggerSource::Abstract {
    channels: 1,
    height: 4,
    width: 4,
};

fn stolen() -> Arc<Model> {
    Arc::new(Model::init(
        Architecture::mlp(16, &[8], 10).unwrap(),
        3,
        "stolen",
    ))
}

/// Dim low-contrast noise standing in for natural images.
fn dim(count: usize, seed: u64) -> Vec<Image> {
    let mut rng = rng::stream(seed, 0);
    (0..count)
        .map(|_| {
            Image::new(
                1,
                4,
                4,
                (0..16).map(|_| rng.random_range(0.0f32..0.2)).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..default_train_config(seed)
    }
}

struct BrightFirstPixel;

impl TriggerScreen for BrightFirstPixel {
    fn is_trigger(&self, image: &Image) -> Result<bool, NnError> {
        Ok(image.pixels()[0] > 0.5)
    }
}

#[test]
fn hand_built_confusion() {
    let bright = Image::new(1, 4, 4, vec![1.0; 16]).unwrap();
    let dark = Image::blank(1, 4, 4);
    // clean: one dark (TN), one bright (FP); triggers: one bright (TP), one dark (FN)
    let eval = evaluate_detector(
        &BrightFirstPixel,
        &[dark.clone(), bright.clone()],
        &[bright, dark],
    )
    .unwrap();
    assert_eq!(
        (
            eval.true_positives,
            eval.false_negatives,
            eval.true_negatives,
            eval.false_positives
        ),
        (1, 1, 1, 1)
    );
    assert_eq!((eval.accuracy, eval.tpr, eval.fpr), (0.5, 0.5, 0.5));
    let e = DetectorEvaluation::from_counts(3, 1, 4, 0);
    assert_eq!(e.accuracy, (3.0 + 4.0) / 8.0);
    assert_eq!((e.tpr, e.fpr), (0.75, 0.0));
    assert!(evaluate_detector(&AlwaysClean, &[], &dim(1, 0)).is_err());
}

#[test]
fn learns_a_separable_split() {
    let stolen = stolen();
    let triggers = generate_trigger_images(200, 1, 0.0, &SOURCE).unwrap();
    let dd = build_detector_dataset(&stolen, &dim(200, 2), &triggers, 4).unwrap();
    let det = train_detector(Arc::clone(&stolen), &dd, &quick(5, 20)).unwrap();
    assert_eq!(det.threshold(), DEFAULT_THRESHOLD);
    let eval = evaluate_detector(
        &det,
        &dim(300, 6),
        &generate_trigger_images(300, 7, 0.0, &SOURCE).unwrap(),
    )
    .unwrap();
    assert!(eval.accuracy >= 0.9, "{eval:?}");

    let again = train_detector(stolen, &dd, &quick(5, 20)).unwrap();
    assert_eq!(again.classifier(), det.classifier());
}

#[test]
fn no_signal_means_coin_flip() {
    let stolen = stolen();
    let dd = build_detector_dataset(&stolen, &dim(300, 10), &dim(300, 11), 1).unwrap();
    let det = train_detector(stolen, &dd, &quick(2, 5)).unwrap();
    let eval = evaluate_detector(&det, &dim(2000, 12), &dim(2000, 13)).unwrap();
    assert!((eval.accuracy - 0.5).abs() <= 0.05, "{eval:?}");
}

#[test]
fn lowering_threshold_flags_more() {
    let stolen = stolen();
    let triggers = generate_trigger_images(100, 21, 0.0, &SOURCE).unwrap();
    let dd = build_detector_dataset(&stolen, &dim(100, 22), &triggers, 0).unwrap();
    let base = train_detector(stolen, &dd, &quick(1, 3)).unwrap();
    let clean = dim(200, 23);
    let trig = generate_trigger_images(200, 24, 0.0, &SOURCE).unwrap();
    let mut last = (0.0, 0.0);
    for tau in [1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 0.01, 0.0] {
        let eval =
            evaluate_detector(&base.clone().with_threshold(tau).unwrap(), &clean, &trig).unwrap();
        assert!(
            eval.tpr >= last.0 && eval.fpr >= last.1,
            "tau {tau}: {eval:?}"
        );
        last = (eval.tpr, eval.fpr);
    }
    assert_eq!(last, (1.0, 1.0));
    assert!(base.clone().with_threshold(1.5).is_err());
    assert!(base.with_threshold(-0.1).is_err());
}

#[test]
fn decisions_are_pure() {
    let stolen = stolen();
    let dd = build_detector_dataset(
        &stolen,
        &dim(50, 1),
        &generate_trigger_images(50, 2, 0.0, &SOURCE).unwrap(),
        0,
    )
    .unwrap();
    let det = train_detector(stolen, &dd, &quick(1, 2)).unwrap();
    let probe = dim(30, 9);
    let batched = det.trigger_probabilities(&probe).unwrap();
    for (im, p) in probe.iter().zip(&batched) {
        let (flag, q) = det.classify(im).unwrap();
        assert!((p - q).abs() < 1e-6);
        assert_eq!(flag, q >= 0.5);
        assert_eq!(det.classify(im).unwrap(), (flag, q));
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let stolen = stolen();
    let wide = Arc::new(Model::init(Architecture::mlp(16, &[5], 10).unwrap(), 1, ""));
    let dd = build_detector_dataset(&stolen, &dim(10, 1), &dim(10, 2), 0).unwrap();
    assert!(matches!(
        train_detector(wide, &dd, &quick(0, 1)),
        Err(DetectorError::Nn(NnError::Shape(_)))
    ));
    let mut gw = DetectorGateway::new(stolen, AlwaysClean, 0);
    assert!(gw.guarded_predict(&Image::blank(1, 5, 5)).is_err());
}

#[test]
fn clean_screen_is_the_stolen_model() {
    let stolen = stolen();
    let mut gw = DetectorGateway::new(Arc::clone(&stolen), AlwaysClean, 8);
    let probe = generate_trigger_images(200, 3, 0.0, &SOURCE).unwrap();
    for im in &probe {
        assert_eq!(
            gw.guarded_predict(im).unwrap(),
            stolen.predict(im.pixels()).unwrap()
        );
    }
    assert_eq!(gw.flagged_count(), 0);
}

#[test]
fn perfect_detector_leaves_one_in_l() {
    let stolen = stolen();
    let triggers = crate::data::assign_random_labels(
        generate_trigger_images(10_000, 4, 0.0, &SOURCE).unwrap(),
        10,
        4,
    )
    .unwrap();
    let mut gw = DetectorGateway::new(stolen, AlwaysTrigger, 31);
    let report = watermark::verify(&mut gw, &triggers, Epsilon::HALF).unwrap();
    assert!(
        (report.verified_fraction() - 0.1).abs() <= 0.01,
        "{}",
        report.verified_fraction()
    );
    assert!(!report.claim);
    assert_eq!(gw.flagged_count(), 10_000);
}

#[test]
fn batched_gateway_matches_sequential() {
    let stolen = stolen();
    let dd = build_detector_dataset(
        &stolen,
        &dim(60, 1),
        &generate_trigger_images(60, 2, 0.0, &SOURCE).unwrap(),
        0,
    )
    .unwrap();
    let det = train_detector(Arc::clone(&stolen), &dd, &quick(1, 4)).unwrap();
    let mut probe = dim(40, 5);
    probe.extend(generate_trigger_images(40, 6, 0.0, &SOURCE).unwrap());
    let mut a = DetectorGateway::new(Arc::clone(&stolen), &det, 77);
    let mut b = DetectorGateway::new(stolen, &det, 77);
    let batched = a.guarded_predict_many(&probe).unwrap();
    let single: Vec<usize> = probe
        .iter()
        .map(|im| b.guarded_predict(im).unwrap())
        .collect();
    assert_eq!(batched, single);
    assert_eq!(a.flagged_count(), b.flagged_count());
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let stolen = stolen();
    let dd = build_detector_dataset(
        &stolen,
        &dim(20, 1),
        &generate_trigger_images(20, 2, 0.0, &SOURCE).unwrap(),
        0,
    )
    .unwrap();
    let det = train_detector(Arc::clone(&stolen), &dd, &quick(1, 1))
        .unwrap()
        .with_threshold(0.3)
        .unwrap();
    let path = dir.path().join("detector.wmnn");
    det.save(&path).unwrap();
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("detector.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["tau"], 0.3);
    assert_eq!(sidecar["feature_source_hash"], model_hash(&stolen));
    let back = Detector::load(&path, Arc::clone(&stolen)).unwrap();
    assert_eq!(back.classifier(), det.classifier());
    assert_eq!(
        (back.threshold(), back.mean_pixel()),
        (0.3, det.mean_pixel())
    );

    let other = Arc::new(Model::init(stolen.arch().clone(), 99, ""));
    assert!(matches!(
        Detector::load(&path, other),
        Err(DetectorError::FeatureSource { .. })
    ));
}
