use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ulfdti::gradients::parse_gradient_table;
use ulfdti::nifti::read_nifti;
use ulfdti::tensor::{tensor_metrics, TensorField};
use ulfdti_cli::manifest::{sha256_file, Manifest};

fn ulfdti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulfdti"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = ulfdti(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("phantom");
    let mut args = vec!["phantom", "--dims", "14,16,12", "--voxel-mm", "3.5", "--seed", "3", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn dwi_args(p: &Path) -> Vec<String> {
    ["dwi.nii", "dwi.bval", "dwi.bvec"]
        .iter()
        .zip(["--dwi", "--bvals", "--bvecs"])
        .flat_map(|(f, flag)| [flag.to_string(), p.join(f).to_str().unwrap().to_string()])
        .collect()
}

fn with<'a>(head: &[&'a str], tail: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(tail.iter().map(String::as_str)).collect()
}

#[test]
fn fit_reproduces_phantom_fa() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &[]);
    let out = dir.path().join("fit");
    let d = dwi_args(&ph);
    ok(&with(&["fit", "--out", s(&out)], &d));
    let truth = TensorField::from_volume(&read_nifti(ph.join("tensor.nii")).unwrap()).unwrap();
    let fa = read_nifti(out.join("fa.nii")).unwrap();
    let worst = truth
        .tensors
        .iter()
        .zip(&fa.data)
        .map(|(t, f)| (tensor_metrics(t).fa - f).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-9, "FA error {worst}");
    for f in ["tensor.nii", "adc.nii", "v1.nii"] {
        assert!(out.join(f).is_file());
    }
}

#[test]
fn manifest_records_seed_versions_and_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &[]);
    let out = dir.path().join("sh");
    let d = dwi_args(&ph);
    ok(&with(&["sh-fit", "--seed", "42", "--out", s(&out)], &d));
    let m = Manifest::read(&out).unwrap();
    assert_eq!(m.command, "sh-fit");
    assert_eq!(m.seed, 42);
    assert_eq!(m.versions["ulfdti"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m.inputs.len(), 3);
    for r in &m.inputs {
        assert_eq!(r.sha256, sha256_file(&r.path).unwrap());
    }
    assert_eq!(read_nifti(out.join("sample.nii")).unwrap().channels, 7);
    assert_eq!(Manifest::read(&ph).unwrap().seed, 3);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    // unknown flag and missing inputs are usage errors
    assert_eq!(ulfdti(&["fit", "--bogus"]).status.code(), Some(2));
    let missing = dir.path().join("none.nii");
    let args = ["fit", "--dwi", s(&missing), "--bvals", s(&missing), "--bvecs", s(&missing), "--out", s(&out)];
    assert_eq!(ulfdti(&args).status.code(), Some(2));
    // garbage NIfTI is a format error
    let bad = dir.path().join("bad.nii");
    std::fs::write(&bad, vec![7u8; 400]).unwrap();
    let bval = dir.path().join("b.bval");
    let bvec = dir.path().join("b.bvec");
    std::fs::write(&bval, "0 1000\n").unwrap();
    std::fs::write(&bvec, "0 1\n0 0\n0 0\n").unwrap();
    let args = ["fit", "--dwi", s(&bad), "--bvals", s(&bval), "--bvecs", s(&bvec), "--out", s(&out)];
    assert_eq!(ulfdti(&args).status.code(), Some(3));
    // a table with too few directions cannot be fitted
    let ph = phantom(dir.path(), &[]);
    let small = dir.path().join("one.bval");
    std::fs::write(&small, "0 0 700 0 0 0 0 0 0 0 0 0\n").unwrap();
    let (dwi, bvec) = (ph.join("dwi.nii"), ph.join("dwi.bvec"));
    let args = ["fit", "--dwi", s(&dwi), "--bvals", s(&small), "--bvecs", s(&bvec), "--out", s(&out)];
    let code = ulfdti(&args).status.code();
    assert!(code == Some(4) || code == Some(3), "{code:?}");
    assert_eq!(ulfdti(&["--version"]).status.code(), Some(0));
}

#[test]
fn degrade_protocol_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &[]);
    let d = dwi_args(&ph);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&with(&["degrade", "--seed", "9", "--voxel-mm", "7", "--out", s(&a)], &d));
    ok(&with(&["degrade", "--seed", "9", "--voxel-mm", "7", "--out", s(&b)], &d));
    for f in ["dwi.nii", "dwi.bval", "dwi.bvec"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let g = parse_gradient_table(a.join("dwi.bval"), a.join("dwi.bvec")).unwrap();
    assert_eq!(g.dwi_indices(50.0).len(), 9);
    assert_eq!(read_nifti(a.join("dwi.nii")).unwrap().grid.voxel_size, [7.0; 3]);

    let id = dir.path().join("id");
    ok(&with(&["degrade", "--voxel-mm", "3.5", "--sigma", "0", "--out", s(&id)], &d));
    let src = read_nifti(ph.join("dwi.nii")).unwrap();
    assert_eq!(read_nifti(id.join("dwi.nii")).unwrap(), src);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &[]);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "threads": 1, "protocol": {"voxel_mm": 7.0, "rician_sigma": 0.0}}"#).unwrap();
    let d = dwi_args(&ph);
    let out = dir.path().join("o");
    ok(&with(&["degrade", "--config", s(&cfg), "--seed", "6", "--voxel-mm", "5", "--out", s(&out)], &d));
    let m = Manifest::read(&out).unwrap();
    assert_eq!(m.seed, 6);
    assert_eq!(m.threads, 1);
    assert_eq!(m.config["protocol"]["voxel_mm"], 5.0);
    assert_eq!(m.config["protocol"]["rician_sigma"], 0.0);
    assert!(m.inputs.iter().any(|r| r.path == cfg));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sed": 5}"#).unwrap();
    assert_eq!(ulfdti(&with(&["degrade", "--config", s(&bad), "--out", s(&out)], &d)).status.code(), Some(3));
}

#[test]
fn bias_correction_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &["--bias"]);
    let d = dwi_args(&ph);
    let atlas = ph.join("atlas.nii");
    let run = |tag: &str, threads: &str| {
        let out = dir.path().join(tag);
        let head = ["bias-correct", "--threads", threads, "--adam-steps", "20", "--atlas", s(&atlas), "--out", s(&out)];
        ok(&with(&head, &d));
        out
    };
    let (a, b) = (run("t1", "1"), run("t3", "3"));
    for f in ["corrected.nii", "bias.nii", "bias.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let fields = read_nifti(a.join("bias.nii")).unwrap();
    assert_eq!(fields.channels, 12);
    assert!(fields.data.iter().all(|v| *v > 0.0));
}

#[test]
fn train_superresolve_metrics_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(
        &cfg,
        r#"{
            "model": {"unet": {"base_features": 2, "global_tokens": 2}, "ico_hidden": 2},
            "train": {"iterations": 3, "lr_peak": 1e-3, "warmup_epochs": 0,
                      "augment": {"crop_size": [8, 8, 8], "taper_length_voxels": 2, "resample_range_mm": [2.0, 3.0]}}
        }"#,
    )
    .unwrap();
    let t = dir.path().join("train");
    let head = [
        "train", "--config", s(&cfg), "--phantoms", "2", "--phantom-dims", "10,10,10", "--out", s(&t),
    ];
    ok(&head);
    let csv = std::fs::read_to_string(t.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,iteration,total,lowb_l2,l2order_l1,angular,consistency");
    assert_eq!(csv.lines().count(), 4);

    let ph = phantom(dir.path(), &[]);
    let sh = dir.path().join("sh");
    ok(&with(&["sh-fit", "--out", s(&sh)], &dwi_args(&ph)));
    let sr = dir.path().join("sr");
    let input = sh.join("sample.nii");
    ok(&["superresolve", "--model", s(&t.join("model.ckpt")), "--input", s(&input), "--voxel-mm", "1.75", "--tile", "12", "--overlap", "4", "--out", s(&sr)]);
    let out = read_nifti(sr.join("sample.nii")).unwrap();
    assert_eq!(out.grid.dims, [28, 32, 24]);
    assert_eq!(out.grid.voxel_size, [1.75; 3]);

    let m = dir.path().join("m");
    ok(&["metrics", "--pred", s(&input), "--reference", s(&input), "--out", s(&m)]);
    let csv = std::fs::read_to_string(m.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "metric,value,ci_low,ci_high,p_raw,p_fdr");
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["mae_lowb", "mae_sh", "lncc_lowb", "v1_angular_error_deg"]);
}

#[test]
fn augment_preview_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &[]);
    let sh = dir.path().join("sh");
    ok(&with(&["sh-fit", "--out", s(&sh)], &dwi_args(&ph)));
    let out = dir.path().join("aug");
    ok(&["augment-preview", "--sample", s(&sh.join("sample.nii")), "--count", "2", "--crop", "8", "--out", s(&out)]);
    for k in 0..2 {
        let t = read_nifti(out.join(format!("target_{k}.nii"))).unwrap();
        let l = read_nifti(out.join(format!("lr_{k}.nii"))).unwrap();
        assert_eq!(t.grid.dims, [8, 8, 8]);
        assert_eq!(l.grid.dims, [8, 8, 8]);
    }
}
