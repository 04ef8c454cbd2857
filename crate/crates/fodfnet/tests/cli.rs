use std::path::Path;
use std::process::{Command, Output};

use fodfnet::manifest::RunManifest;

fn fodfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fodfnet"))
        .args(args)
        .env("FODFNET_THREADS", "2")
        .output()
        .expect("spawn fodfnet")
}

fn ok(args: &[&str]) {
    let out = fodfnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.lines().count(), 1, "expected one error line, got {text:?}");
    text.trim_end().to_string()
}

#[test]
fn full_pipeline_produces_metrics_for_both_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name);
    let (ph, sh, model, pred, csd, ev) = (d("ph"), d("sh"), d("model"), d("pred"), d("csd"), d("eval"));
    ok(&["-q", "phantom", "--out", s(&ph), "--dims", "12", "12", "12", "--seed", "3"]);
    for f in ["dwi.nii", "dwi.bval", "dwi.bvec", "fodf.nii", "fractions.nii", "mask.nii", "zones.nii", "manifest.json"] {
        assert!(ph.join(f).is_file(), "missing {f}");
    }
    let (dwi, bval, bvec) = (ph.join("dwi.nii"), ph.join("dwi.bval"), ph.join("dwi.bvec"));
    ok(&[
        "-q", "fit-sh", "--out", s(&sh), "--dwi", s(&dwi), "--bvals", s(&bval), "--bvecs", s(&bvec), "--shell", "1000",
    ]);
    ok(&[
        "-q",
        "train",
        "--out",
        s(&model),
        "--sh",
        s(&sh.join("sh.nii")),
        "--fodf",
        s(&ph.join("fodf.nii")),
        "--fractions",
        s(&ph.join("fractions.nii")),
        "--mask",
        s(&sh.join("mask.nii")),
        "--epochs",
        "2",
    ]);
    ok(&[
        "-q", "predict", "--out", s(&pred), "--model", s(&model), "--sh", s(&sh.join("sh.nii")), "--mask",
        s(&sh.join("mask.nii")),
    ]);
    ok(&["-q", "csd", "--out", s(&csd), "--dwi", s(&dwi), "--bvals", s(&bval), "--bvecs", s(&bvec)]);
    let resdnn = format!("resdnn={}", s(&pred));
    let scsd = format!("scsd={}", s(&csd));
    ok(&[
        "-q",
        "eval",
        "--out",
        s(&ev),
        "--truth-fodf",
        s(&ph.join("fodf.nii")),
        "--truth-fractions",
        s(&ph.join("fractions.nii")),
        "--mask",
        s(&sh.join("mask.nii")),
        "--zones",
        s(&ph.join("zones.nii")),
        "--include-zones",
        "wm,crossing",
        "--prediction",
        &resdnn,
        "--prediction",
        &scsd,
    ]);
    let metrics = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("resdnn,acc_median,")));
    assert!(metrics.lines().any(|l| l.starts_with("scsd,acc_median,")));
    assert!(metrics.lines().any(|l| l.starts_with("resdnn,rmse_wm,")));
    assert!(ev.join("maps/legend.json").is_file());
    assert!(ev.join("maps/resdnn_acc_z011.pgm").is_file());

    // every listed hash matches the file on disk
    for dir in [&ph, &sh, &model, &pred, &csd, &ev] {
        let m = RunManifest::read(&dir.join("manifest.json")).unwrap();
        assert!(!m.outputs.is_empty());
        for rec in &m.outputs {
            let bytes = std::fs::read(dir.join(&rec.path)).unwrap();
            assert_eq!(fodfnet::files::sha256_hex(&bytes), rec.sha256, "{}", rec.path);
        }
    }

    // training from the cache written next to the model gives the same model
    let again = d("model_from_cache");
    ok(&[
        "-q",
        "train",
        "--out",
        s(&again),
        "--dataset",
        s(&model.join("dataset")),
        "--epochs",
        "2",
    ]);
    assert_eq!(
        std::fs::read(model.join("model.bin")).unwrap(),
        std::fs::read(again.join("model.bin")).unwrap()
    );
}

#[test]
fn missing_shell_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    ok(&["-q", "phantom", "--out", s(&ph), "--dims", "12", "12", "12", "--shells", "1000", "--dirs-per-shell", "30", "--noiseless"]);
    let sh = tmp.path().join("sh");
    let out = fodfnet(&[
        "fit-sh",
        "--out",
        s(&sh),
        "--dwi",
        s(&ph.join("dwi.nii")),
        "--bvals",
        s(&ph.join("dwi.bval")),
        "--bvecs",
        s(&ph.join("dwi.bvec")),
        "--shell",
        "3000",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error[input] shell_not_found:"));
    assert!(!sh.exists(), "nothing is written on failure");
}

#[test]
fn rerun_reproduces_output_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["-q", "phantom", "--out", s(&a), "--dims", "12", "12", "12", "--dirs-per-shell", "20", "--seed", "11"]);
    ok(&["-q", "rerun", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    let first = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(first, std::fs::read(b.join("manifest.json")).unwrap());

    ok(&[
        "-q", "fit-sh", "--out", s(&c), "--dwi", s(&a.join("dwi.nii")), "--bvals", s(&a.join("dwi.bval")), "--bvecs",
        s(&a.join("dwi.bvec")),
    ]);
    // a changed input is refused
    std::fs::write(a.join("dwi.bval"), "0 1000\n").unwrap();
    let out = fodfnet(&["rerun", "--manifest", s(&c.join("manifest.json")), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error[input] input_changed:"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ph.json");
    std::fs::write(&cfg, r#"{"phantom": {"dims": [12, 12, 12], "seed": 5}, "shells": [1000, 2000]}"#).unwrap();
    let out = tmp.path().join("ph");
    ok(&["-q", "phantom", "--config", s(&cfg), "--out", s(&out), "--seed", "6"]);
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    match m.job {
        fodfnet::commands::Job::Phantom(c) => {
            assert_eq!(c.phantom.dims, [12, 12, 12]);
            assert_eq!(c.phantom.seed, 6);
            assert_eq!(c.shells, vec![1000.0, 2000.0]);
            assert_eq!(c.dirs_per_shell, 90);
        }
        other => panic!("unexpected job {other:?}"),
    }
    assert_eq!(m.seeds["phantom"], 6);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"shellz": [1000]}"#).unwrap();
    let out = fodfnet(&["phantom", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[config] invalid_config:"));

    let out = fodfnet(&["train", "--out", s(&tmp.path().join("y")), "--learning-rate", "-1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = fodfnet(&["phantom", "--out", s(&tmp.path().join("z")), "--dtype", "int8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[config] usage:"));

    let out = Command::new(env!("CARGO_BIN_EXE_fodfnet"))
        .args(["phantom", "--out", s(&tmp.path().join("w"))])
        .env("FODFNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_never_overwrite_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    ok(&["-q", "phantom", "--out", s(&ph), "--dims", "12", "12", "12", "--dirs-per-shell", "20", "--noiseless"]);
    let before = std::fs::read(ph.join("mask.nii")).unwrap();
    let out = fodfnet(&[
        "fit-sh",
        "--out",
        s(&ph),
        "--dwi",
        s(&ph.join("dwi.nii")),
        "--bvals",
        s(&ph.join("dwi.bval")),
        "--bvecs",
        s(&ph.join("dwi.bvec")),
        "--mask",
        s(&ph.join("mask.nii")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(before, std::fs::read(ph.join("mask.nii")).unwrap());
}
