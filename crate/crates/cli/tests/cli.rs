use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "synth_n_points=300",
    "synth_n_features=200",
    "synth_n_labels=40",
    "synth_labels_per_point=2",
    "epochs=3",
    "embed_dim=16",
    "k_h=4",
    "k_r=8",
    "k_p=2",
    "batch_size=16",
    "probe_rows=50",
    "max_degree=8",
    "build_beam=32",
    "query_beam=64",
];

fn xc(args: &[&str], sets: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xc"));
    cmd.args(args);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("XC_ASTRA_THREADS", t),
        None => cmd.env_remove("XC_ASTRA_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn small_with(extra: &[String]) -> Vec<String> {
    SMALL
        .iter()
        .map(|s| s.to_string())
        .chain(extra.iter().cloned())
        .collect()
}

fn run(cmd: &str, out: &Path, sets: &[String]) -> Output {
    let refs: Vec<&str> = sets.iter().map(String::as_str).collect();
    xc(&[cmd, "--out", out.to_str().unwrap()], &refs, Some("1"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_log_with_fixed_header_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sets = small_with(&[]);
    let o = run("train", &a, &sets);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,wall_seconds,mean_slate_loss,probe_full_loss,p_at_1,p_at_5,snapshot_epoch"
    );
    assert_eq!(csv.lines().count(), 4);
    for f in ["model.xast", "train_log.json", "metrics.json", "config.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    for k in [
        "p_at_1",
        "p_at_5",
        "ndcg_at_3",
        "psp_at_1",
        "psn_at_5",
        "n_evaluated",
        "n_excluded",
    ] {
        assert!(metrics.get(k).is_some(), "{k}");
    }
    let o = run("train", &b, &sets);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.json", "model.xast"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_dataset_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("train.txt");
    let o = run(
        "train",
        dir.path(),
        &small_with(&[format!("train_path={}", missing.display())]),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&missing.display().to_string()), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("train", dir.path(), &small_with(&["epoch=3".into()]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));
    let o = run("train", dir.path(), &small_with(&["dropout=1.5".into()]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(
        "ablate",
        dir.path(),
        &small_with(&[r#"arms=["mixture","bogus"]"#.into()]),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
    let o = xc(&["train", "--out", dir.path().to_str().unwrap()], SMALL, Some("zero"));
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "[1, 2]").unwrap();
    let o = xc(&["train", "--config", cfg.to_str().unwrap()], &[], Some("1"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let mut map = serde_json::Map::new();
    for s in SMALL {
        let (k, v) = s.split_once('=').unwrap();
        map.insert(k.into(), serde_json::from_str(v).unwrap());
    }
    map.insert("epochs".into(), 1.into());
    std::fs::write(&cfg, serde_json::Value::Object(map).to_string()).unwrap();
    let out = dir.path().join("o");
    let o = xc(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &["epochs=2"],
        Some("2"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn gen_synth_round_trips_and_trains_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run("gen-synth", &data, &small_with(&["binary_cache=true".into()]));
    assert!(o.status.success(), "{}", stderr(&o));
    let train = xc_core::dataset::parse_xc_file(data.join("train.txt")).unwrap();
    assert_eq!((train.n_points(), train.n_features(), train.n_labels()), (300, 200, 40));
    let cached = xc_core::dataset::read_binary(data.join("train.xcds")).unwrap();
    assert_eq!(cached.all_positives(), train.all_positives());
    let text = std::fs::read_to_string(data.join("train.txt")).unwrap();
    assert_eq!(xc_core::dataset::serialize_xc(&train), text);

    let out = dir.path().join("model");
    let sets = small_with(&[
        format!("train_path={}", data.join("train.xcds").display()),
        format!("test_path={}", data.join("test.txt").display()),
        format!("label_features_path={}", data.join("label_features.txt").display()),
        "strategy=label-emb-mixture".into(),
    ]);
    let o = run("train", &out, &sets);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_modes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m");
    assert!(run("train", &model, &small_with(&[])).status.success());
    let ckpt = format!("checkpoint={}", model.join("model.xast").display());
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let sets = small_with(&[ckpt.clone(), "eval_mode=both".into()]);
    let o = run("eval", &e1, &sets);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics_exact.json", "metrics_anns.json", "recall.json"] {
        assert!(e1.join(f).is_file(), "{f}");
    }
    let recall: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e1.join("recall.json")).unwrap()).unwrap();
    let r = recall["recall"].as_f64().unwrap();
    assert!(r > 0.0 && r <= 1.0);
    assert!(run("eval", &e2, &sets).status.success());
    for f in ["metrics_exact.json", "metrics_anns.json"] {
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(e2.join(f)).unwrap());
    }

    let o = run("eval", &e2, &small_with(&[ckpt.clone(), "ks=[1,41]".into()]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run("eval", &e2, &small_with(&[ckpt.clone(), "synth_n_labels=60".into()]));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("labels"), "{}", stderr(&o));

    let o = run("eval", &e2, &small_with(&[]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_curves_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_with(&[
        r#"arms=["random-only","stale-hard","mixture","full-loss"]"#.into(),
        "tau_s=1".into(),
        "tau_r=1".into(),
    ]);
    let o = run("ablate", dir.path(), &sets);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "arm,final_p_at_1,final_p_at_5,mean_epoch_seconds,wall_seconds"
    );
    assert_eq!(summary.lines().count(), 5);
    for arm in ["random-only", "stale-hard", "mixture", "full-loss"] {
        let curve = std::fs::read_to_string(dir.path().join(format!("curve_{arm}.csv"))).unwrap();
        assert_eq!(curve.lines().next().unwrap(), "epoch,wall_seconds,p_at_1,p_at_5");
        assert_eq!(curve.lines().count(), 4);
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 4);

    let single = dir.path().join("single");
    let o = run("ablate", &single, &small_with(&[r#"arms=["mixture"]"#.into()]));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn index_recall_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m");
    assert!(run("train", &model, &small_with(&[])).status.success());
    let out = dir.path().join("r");
    let o = run(
        "index-recall",
        &out,
        &small_with(&[
            format!("checkpoint={}", model.join("model.xast").display()),
            "recall_k=5".into(),
        ]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("recall.json")).unwrap()).unwrap();
    let r = v["recall"].as_f64().unwrap();
    assert!(r > 0.0 && r <= 1.0, "{r}");
}

#[test]
fn help_documents_csv_headers() {
    let o = xc(&["--help"], &[], None);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("epoch,wall_seconds,mean_slate_loss,probe_full_loss,p_at_1,p_at_5,snapshot_epoch"));
    assert!(text.contains("XC_ASTRA_THREADS"));
}
