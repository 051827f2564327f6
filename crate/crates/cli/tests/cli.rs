use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prada(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prada"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = prada(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, profile: &str, seed: &str, n: &str, tag: &str) {
    let (r, f) = (format!("{tag}-real.jsonl"), format!("{tag}-fake.jsonl"));
    ok(
        dir,
        &[
            "synth",
            "--profile",
            profile,
            "--seed",
            seed,
            "--n-real",
            n,
            "--n-fake",
            n,
            "--out-real",
            &r,
            "--out-fake",
            &f,
        ],
    );
}

#[test]
fn help_documents_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for sub in [
        "synth",
        "calibrate",
        "score",
        "detect",
        "attribute",
        "report",
        "profiles",
    ] {
        assert!(top.contains(sub), "{sub} missing from help");
        let help = ok(dir.path(), &[sub, "--help"]);
        assert!(help.contains("Usage"), "{sub}: {help}");
    }
    let cal = ok(dir.path(), &["calibrate", "--help"]);
    assert!(cal.contains("--fixed-alpha") && cal.contains("[default: 1]"));
    for report in [
        "scale-auroc",
        "token-stats",
        "cdf",
        "score-curve",
        "weights",
    ] {
        ok(dir.path(), &["report", report, "--help"]);
    }
}

#[test]
fn exit_codes_distinguish_validation_from_io() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = prada(dir.path(), &["synth", "--profile", "null", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    let bad_profile = prada(
        dir.path(),
        &[
            "synth",
            "--profile",
            "nope",
            "--out-real",
            "a",
            "--out-fake",
            "b",
        ],
    );
    assert_eq!(bad_profile.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_profile.stderr).contains("var-like"));
    let missing = prada(
        dir.path(),
        &["score", "--model", "m.json", "--in", "x.jsonl"],
    );
    assert_eq!(missing.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn null_profile_pipeline_finds_no_signal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "null", "1", "500", "train");
    synth(d, "null", "2", "500", "eval");
    ok(
        d,
        &[
            "calibrate",
            "--real",
            "train-real.jsonl",
            "--fake",
            "train-fake.jsonl",
            "--out",
            "null.json",
        ],
    );
    ok(
        d,
        &[
            "score",
            "--model",
            "null.json",
            "--in",
            "eval-real.jsonl",
            "--out",
            "real.csv",
        ],
    );
    ok(
        d,
        &[
            "score",
            "--model",
            "null.json",
            "--in",
            "eval-fake.jsonl",
            "--out",
            "fake.csv",
        ],
    );
    let fake = fs::read_to_string(d.join("fake.csv")).unwrap();
    let mut all = fs::read_to_string(d.join("real.csv")).unwrap();
    all.extend(fake.lines().skip(1).map(|l| format!("{l}\n")));
    fs::write(d.join("scores.csv"), all).unwrap();
    let out = ok(
        d,
        &["detect", "--tables", "scores.csv", "--roc-out", "roc.csv"],
    );
    let auc: f64 = out.trim().strip_prefix("auroc ").unwrap().parse().unwrap();
    assert!((0.45..=0.6).contains(&auc), "auroc {auc}");
    let roc = fs::read_to_string(d.join("roc.csv")).unwrap();
    assert!(
        roc.starts_with("fpr,tpr\n0,0\n") || roc.starts_with("fpr,tpr\n0.0,0.0\n"),
        "{roc}"
    );
}

#[test]
fn calibrate_writes_runs_and_manifest_with_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "var-like", "0", "80", "v");
    fs::write(
        d.join("cal.toml"),
        "steps = 60\nn_train_per_class = 40\nseed = 3\n",
    )
    .unwrap();
    let args = [
        "calibrate",
        "--real",
        "v-real.jsonl",
        "--fake",
        "v-fake.jsonl",
        "--config",
        "cal.toml",
        "--seed",
        "9",
        "--runs",
        "5",
        "--out",
        "model.json",
    ];
    let stdout = ok(d, &args);
    assert!(stdout.contains("over 5 run(s)"), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("model.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["steps"], 60);
    assert_eq!(manifest["config"]["seed"], 9);
    let runs = manifest["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 5);
    assert_eq!(runs[4]["seed"], 13);
    assert_eq!(
        manifest["test_auroc"]["values"].as_array().unwrap().len(),
        5
    );
    assert!(manifest["test_auroc"]["std"].as_f64().unwrap() >= 0.0);
    for r in 0..5 {
        assert!(d.join(format!("model.run{r}.json")).exists());
    }
    assert_eq!(
        fs::read(d.join("model.json")).unwrap(),
        fs::read(d.join("model.run0.json")).unwrap()
    );

    // Identical inputs give identical bytes.
    let first = fs::read(d.join("model.manifest.json")).unwrap();
    ok(d, &args);
    assert_eq!(first, fs::read(d.join("model.manifest.json")).unwrap());
}

#[test]
fn synth_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "infinity-like", "5", "7", "a");
    synth(d, "infinity-like", "5", "7", "b");
    assert_eq!(
        fs::read(d.join("a-real.jsonl")).unwrap(),
        fs::read(d.join("b-real.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("a-fake.jsonl")).unwrap(),
        fs::read(d.join("b-fake.jsonl")).unwrap()
    );
    synth(d, "infinity-like", "6", "7", "c");
    assert_ne!(
        fs::read(d.join("a-real.jsonl")).unwrap(),
        fs::read(d.join("c-real.jsonl")).unwrap()
    );
}

#[test]
fn score_rejects_records_with_a_different_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "var-like", "0", "60", "v");
    ok(
        d,
        &[
            "calibrate",
            "--real",
            "v-real.jsonl",
            "--fake",
            "v-fake.jsonl",
            "--steps",
            "5",
            "--n-train",
            "20",
            "--out",
            "m.json",
        ],
    );
    let line = r#"{"image_id":"x","source_label":"real","generator_id":"var-like","condition":"","scales":[{"scale_index":0,"log_p_cond":[-1.0],"log_p_uncond":[-2.0]}]}"#;
    fs::write(d.join("odd.jsonl"), format!("{line}\n")).unwrap();
    let out = prada(d, &["score", "--model", "m.json", "--in", "odd.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("shape") && err.contains("`x`"), "{err}");
}

#[test]
fn attribute_tallies_a_row_normalized_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("a.csv"),
        "image_id,source_label,generator_id,score\n1,real,gen-a,-1.0\n2,gen-a,gen-a,2.0\n3,gen-b,gen-a,0.5\n4,gen-b,gen-a,0.1\n",
    )
    .unwrap();
    fs::write(
        d.join("b.csv"),
        "image_id,source_label,generator_id,score\n4,gen-b,gen-b,0.9\n3,gen-b,gen-b,0.2\n2,gen-a,gen-b,-3.0\n1,real,gen-b,-0.5\n",
    )
    .unwrap();
    let stdout = ok(
        d,
        &[
            "attribute",
            "--tables",
            "a.csv",
            "b.csv",
            "--out",
            "conf.csv",
            "--verdicts",
            "v.csv",
        ],
    );
    assert_eq!(stdout.trim(), "accuracy 0.750000");
    let conf = fs::read_to_string(d.join("conf.csv")).unwrap();
    assert_eq!(
        conf,
        "true_label,real,gen-a,gen-b\nreal,1,0,0\ngen-a,0,1,0\ngen-b,0,0.5,0.5\n"
    );
    let verdicts = fs::read_to_string(d.join("v.csv")).unwrap();
    assert!(verdicts.contains("1,real,real/unknown"), "{verdicts}");

    // A high threshold sends everything to real/unknown.
    let stdout = ok(
        d,
        &[
            "attribute",
            "--tables",
            "a.csv",
            "b.csv",
            "--threshold",
            "5",
            "--out",
            "conf.csv",
        ],
    );
    assert_eq!(stdout.trim(), "accuracy 0.250000");

    fs::write(
        d.join("truth.csv"),
        "image_id,source_label\n1,real\n2,gen-a\n3,gen-a\n",
    )
    .unwrap();
    let out = prada(
        d,
        &[
            "attribute",
            "--tables",
            "a.csv",
            "b.csv",
            "--truth",
            "truth.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`4`"));

    let detect = ok(d, &["detect", "--tables", "a.csv", "b.csv"]);
    assert_eq!(detect.trim(), "auroc 1.000000");
}

#[test]
fn reports_export_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "one-hot-scale", "0", "60", "o");
    ok(
        d,
        &[
            "calibrate",
            "--real",
            "o-real.jsonl",
            "--fake",
            "o-fake.jsonl",
            "--steps",
            "5",
            "--n-train",
            "20",
            "--out",
            "m.json",
        ],
    );
    let per_scale = ok(
        d,
        &[
            "report",
            "scale-auroc",
            "--real",
            "o-real.jsonl",
            "--fake",
            "o-fake.jsonl",
            "--per-scale",
        ],
    );
    assert_eq!(per_scale.lines().count(), 4);
    assert!(per_scale.starts_with("scale,auroc\n0,"));
    let whole = ok(
        d,
        &[
            "report",
            "scale-auroc",
            "--real",
            "o-real.jsonl",
            "--fake",
            "o-fake.jsonl",
            "--score",
            "icas",
        ],
    );
    assert!(whole.starts_with("scale,auroc\nall,"));

    ok(
        d,
        &[
            "report",
            "token-stats",
            "--records",
            "o-real.jsonl",
            "--model",
            "m.json",
            "--out",
            "t.csv",
            "--scales-out",
            "s.csv",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("t.csv")).unwrap().lines().count(),
        1 + 4 + 16 + 36
    );
    assert_eq!(
        fs::read_to_string(d.join("s.csv")).unwrap().lines().count(),
        4
    );

    let cdf = ok(
        d,
        &[
            "report",
            "cdf",
            "--real",
            "o-real.jsonl",
            "--fake",
            "o-fake.jsonl",
            "--grid-min",
            "-40",
            "--grid-max",
            "40",
            "--grid-points",
            "5",
        ],
    );
    let last = cdf.lines().last().unwrap();
    assert_eq!(last, "40,1,1");

    let curve = ok(d, &["report", "score-curve", "--model", "m.json"]);
    assert_eq!(curve.lines().count(), 513);
    let weights = ok(d, &["report", "weights", "--model", "m.json"]);
    assert!(weights.starts_with("parameter,value\nalpha,"));
    assert_eq!(weights.lines().count(), 5);

    let bad = prada(
        d,
        &[
            "report",
            "cdf",
            "--real",
            "o-real.jsonl",
            "--fake",
            "o-fake.jsonl",
            "--grid-min",
            "3",
            "--grid-max",
            "1",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn profiles_lists_builtins_as_toml() {
    let dir = tempfile::tempdir().unwrap();
    let all = ok(dir.path(), &["profiles"]);
    for name in [
        "var-like",
        "infinity-like",
        "single-scale",
        "one-hot-scale",
        "null",
    ] {
        assert!(all.contains(&format!("name = \"{name}\"")), "{name}");
    }
    let one = ok(dir.path(), &["profiles", "--name", "single-scale"]);
    fs::write(dir.path().join("p.toml"), &one).unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--profile-file",
            "p.toml",
            "--n-real",
            "3",
            "--n-fake",
            "3",
            "--out-real",
            "r.jsonl",
            "--out-fake",
            "f.jsonl",
        ],
    );
    let text = fs::read_to_string(dir.path().join("f.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
}
