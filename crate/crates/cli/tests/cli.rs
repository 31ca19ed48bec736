mod common;

use std::fs;

use common::{smoke_config, stdout, wmevade};

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mnist_dir": "/nonexistent/mnist"}"#).unwrap();
    let out = dir.path().join("run");
    let o = wmevade(
        &["train-owners", "--config", s(&cfg), "--out", s(&out)],
        b"",
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing MNIST file"));

    fs::write(&cfg, r#"{"owners": 3, "bogus": 1}"#).unwrap();
    let o = wmevade(
        &["attack-ensemble", "--config", s(&cfg), "--out", s(&out)],
        b"",
    );
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(wmevade(&["simulate"], b"").status.code(), Some(2));
    assert_eq!(
        wmevade(&["simulate", "--n", "3", "--exact", "--trials", "x"], b"")
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_examples() {
    let o = wmevade(&["simulate", "--n", "2", "--l", "2", "--exact"], b"");
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config-hash="));
    assert_eq!(lines[1], "n,l,method,estimate,stderr,trials,seed");
    assert_eq!(lines[2], "2,2,exact,0.750000,0.000000,0,0");

    let o = wmevade(&["simulate", "--n", "3", "--l", "10", "--exact"], b"");
    assert!(stdout(&o).contains("3,10,exact,0.430000,"));

    let o = wmevade(&["simulate", "--n", "7", "--l", "1000", "--seed", "1"], b"");
    let row = stdout(&o).lines().nth(2).unwrap().to_string();
    let estimate: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!((estimate - 1.0 / 7.0).abs() < 0.005, "{row}");
    assert_eq!(
        stdout(&wmevade(
            &["simulate", "--n", "7", "--l", "1000", "--seed", "1"],
            b""
        ))
        .lines()
        .nth(2)
        .unwrap(),
        row
    );

    // past the enumeration bound the exact method refuses
    assert_eq!(
        wmevade(&["simulate", "--n", "7", "--l", "1000", "--exact"], b"")
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 7, 5);
    let out = dir.path().join("run");
    let (cfg, out) = (s(&cfg), s(&out));

    let o = wmevade(&["train-owners", "--config", cfg, "--out", out], b"");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("run/train-owners.csv")).unwrap();
    assert!(csv.starts_with("# config-hash="));
    assert_eq!(csv.lines().filter(|l| l.starts_with("owner-")).count(), 7);
    for i in 0..7 {
        assert!(dir
            .path()
            .join(format!("run/owners/owner-{i}/model.wmnn"))
            .is_file());
        assert!(dir
            .path()
            .join(format!("run/owners/owner-{i}/triggers/manifest.json"))
            .is_file());
    }

    // owner 0's own model verifies
    let triggers = dir.path().join("run/owners/owner-0/triggers");
    let model = dir.path().join("run/owners/owner-0/model.wmnn");
    let o = wmevade(
        &[
            "verify",
            "--triggers",
            s(&triggers),
            "--model",
            s(&model),
            "--epsilon",
            "0.9",
        ],
        b"",
    );
    assert!(stdout(&o).starts_with("CLAIM 10/10"), "{}", stdout(&o));

    // black-box session: trigger paths through the 7-model gateway, answers
    // piped into a separate verify
    let paths: String = (0..10)
        .map(|i| format!("{}/trigger-{i:03}.pgm\n", triggers.display()))
        .collect();
    let serve = [
        "serve-stdin",
        "--gateway",
        "ensemble",
        "--config",
        cfg,
        "--out",
        out,
        "--seed",
        "3",
    ];
    let o = wmevade(&serve, paths.as_bytes());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let answers = stdout(&o);
    assert_eq!(answers.lines().count(), 10);
    assert_eq!(stdout(&wmevade(&serve, paths.as_bytes())), answers);
    let o = wmevade(
        &[
            "verify",
            "--triggers",
            s(&triggers),
            "--answers",
            "-",
            "--epsilon",
            "0.5",
        ],
        answers.as_bytes(),
    );
    assert!(stdout(&o).starts_with("NO-CLAIM"), "{}", stdout(&o));

    assert!(wmevade(&serve, b"").stdout.is_empty());
    let o = wmevade(&serve, b"/no/such/image.pgm\n");
    assert!(o.status.success());
    assert_eq!(stdout(&o), "ERR\n");

    let o = wmevade(
        &[
            "attack-ensemble",
            "--config",
            cfg,
            "--out",
            out,
            "--sizes",
            "1",
            "7",
            "--epsilon",
            "0.5",
            "3/10",
        ],
        b"",
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("run/attack-ensemble-summary.csv")).unwrap();
    assert!(
        summary
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("1,1.000000,1.000000,exact,"),
        "{summary}"
    );
    let per_owner = fs::read_to_string(dir.path().join("run/attack-ensemble.csv")).unwrap();
    assert!(per_owner
        .lines()
        .nth(1)
        .unwrap()
        .contains("claim@0.5,claim@0.3"));
    assert!(
        wmevade(
            &[
                "attack-ensemble",
                "--config",
                cfg,
                "--out",
                out,
                "--sizes",
                "8"
            ],
            b""
        )
        .status
        .code()
            != Some(0)
    );

    let o = wmevade(
        &[
            "serve-stdin",
            "--gateway",
            "detector",
            "--config",
            cfg,
            "--out",
            out,
        ],
        paths.as_bytes(),
    );
    assert_eq!(
        o.status.code(),
        Some(1),
        "detector gateway needs attack-detector first"
    );
    let o = wmevade(&["attack-detector", "--config", cfg, "--out", out], b"");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = wmevade(
        &[
            "serve-stdin",
            "--gateway",
            "detector",
            "--config",
            cfg,
            "--out",
            out,
        ],
        paths.as_bytes(),
    );
    assert_eq!(stdout(&o).lines().count(), 10);

    let o = wmevade(&["report", "--out", out], b"");
    let text = stdout(&o);
    for section in [
        "Owner models",
        "Ensemble gateway (per size)",
        "Detector gateway",
    ] {
        assert!(text.contains(section), "{text}");
    }
    assert!(dir.path().join("run/report.txt").is_file());
}

#[test]
fn model_gateway_and_floor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = smoke_config(dir.path(), 1, 9);
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["accuracy_floor"] = 0.999.into();
    cfg["baseline"] = false.into();
    cfg["train"]["epochs"] = 1.into();
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    let o = wmevade(
        &["train-owners", "--config", s(&cfg_path), "--out", s(&out)],
        b"",
    );
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    // artifacts are still written; the model gateway answers like the model
    let model = out.join("owners/owner-0/model.wmnn");
    let triggers = out.join("owners/owner-0/triggers");
    let paths: String = (0..10)
        .map(|i| format!("{}/trigger-{i:03}.pgm\n", triggers.display()))
        .collect();
    let o = wmevade(
        &["serve-stdin", "--gateway", "model", "--model", s(&model)],
        paths.as_bytes(),
    );
    let o = wmevade(
        &["verify", "--triggers", s(&triggers), "--answers", "-"],
        &o.stdout,
    );
    assert!(stdout(&o).starts_with("CLAIM"), "{}", stdout(&o));
    assert!(wmevade(
        &["serve-stdin", "--gateway", "model", "--model", s(&model)],
        b""
    )
    .stdout
    .is_empty());
}
