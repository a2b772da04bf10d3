use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "phantoms.shape=[48,48,32]",
    "--set",
    "preprocess.crop_size=[32,32,32]",
    "--set",
    "teacher.base_channels=2",
    "--set",
    "student.base_channels=2",
    "--set",
    "teacher_training.max_epochs=1",
    "--set",
    "student_training.max_epochs=1",
    "--set",
    "teacher_training.virtual_batch=1",
    "--set",
    "student_training.virtual_batch=1",
];

fn distilseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distilseg"))
        .arg("--workdir")
        .arg(dir)
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let mut all = args.to_vec();
    all.extend_from_slice(SMALL);
    let o = distilseg(dir, &all);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn phantom_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["generate-phantoms", "--n", "2", "--weak", "1", "--out", "a"],
    );
    ok(
        dir.path(),
        &["generate-phantoms", "--n", "2", "--weak", "1", "--out", "b"],
    );
    ok(
        dir.path(),
        &["--seed", "9", "generate-phantoms", "--n", "2", "--out", "c"],
    );
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in &names {
        let a = fs::read(dir.path().join("a").join(n)).unwrap();
        let b = fs::read(dir.path().join("b").join(n)).unwrap();
        assert!(a == b, "{n:?} differs between identical runs");
    }
    let a = fs::read(dir.path().join("a/case_0000_image.nii.gz")).unwrap();
    let c = fs::read(dir.path().join("c/case_0000_image.nii.gz")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_cases_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = distilseg(dir.path(), &["generate-phantoms", "--n", "0", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("x").exists());
}

#[test]
fn bad_overrides_and_missing_files_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = distilseg(
        dir.path(),
        &[
            "--set",
            "teacher.depth=3",
            "generate-phantoms",
            "--n",
            "1",
            "--out",
            "x",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("teacher.depth"));

    let o = distilseg(
        dir.path(),
        &["prepare", "--manifest", "nope.json", "--out", "p"],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn prepare_can_require_lung_masks() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["generate-phantoms", "--n", "3", "--out", "data"],
    );
    let path = dir.path().join("data/manifest.json");
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["records"][1]
        .as_object_mut()
        .unwrap()
        .remove("lungmask_path");
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();

    let o = distilseg(
        dir.path(),
        &[
            "prepare",
            "--manifest",
            "data/manifest.json",
            "--out",
            "prep",
            "--require-lungmask",
        ],
    );
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("case_0001") && err.contains("lung"), "{err}");

    ok(
        dir.path(),
        &[
            "prepare",
            "--manifest",
            "data/manifest.json",
            "--out",
            "prep",
        ],
    );
    assert!(dir.path().join("prep/manifest.json").exists());
    assert!(dir.path().join("prep/prepare_report.json").exists());
}

#[test]
fn teacher_needs_strong_records() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "generate-phantoms",
            "--n",
            "3",
            "--weak",
            "3",
            "--out",
            "data",
        ],
    );
    ok(
        dir.path(),
        &[
            "prepare",
            "--manifest",
            "data/manifest.json",
            "--out",
            "prep",
        ],
    );
    let mut args = vec![
        "train-teacher",
        "--manifest",
        "prep/manifest.json",
        "--guidance",
        "box",
        "--out",
        "t",
    ];
    args.extend_from_slice(SMALL);
    let o = distilseg(dir.path(), &args);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_on_a_tiny_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "generate-phantoms",
            "--n",
            "4",
            "--weak",
            "1",
            "--out",
            "data",
        ],
    );
    ok(
        d,
        &[
            "prepare",
            "--manifest",
            "data/manifest.json",
            "--out",
            "prep",
        ],
    );
    ok(
        d,
        &[
            "train-teacher",
            "--manifest",
            "prep/manifest.json",
            "--guidance",
            "box",
            "--out",
            "teacher",
        ],
    );
    let ckpt = fs::read_dir(d.join("teacher"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .expect("teacher checkpoint");
    let again = ok(
        d,
        &[
            "train-teacher",
            "--manifest",
            "prep/manifest.json",
            "--guidance",
            "box",
            "--out",
            "teacher",
        ],
    );
    assert!(again.starts_with("reused"), "{again}");

    ok(
        d,
        &[
            "pseudo-label",
            "--teacher",
            ckpt.to_str().unwrap(),
            "--manifest",
            "prep/manifest.json",
            "--out",
            "pseudo",
        ],
    );
    let pm: Value =
        serde_json::from_str(&fs::read_to_string(d.join("pseudo/pseudo_manifest.json")).unwrap())
            .unwrap();
    let recs = pm["records"].as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["supervision_kind"], "pseudo");

    ok(
        d,
        &[
            "train-student",
            "--manifest",
            "prep/manifest.json",
            "--pseudo",
            "pseudo/pseudo_manifest.json",
            "--variant",
            "so",
            "--out",
            "student",
        ],
    );
    let student = fs::read_dir(d.join("student"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .expect("student checkpoint");
    let student = student.to_str().unwrap();

    ok(
        d,
        &[
            "evaluate",
            "--model",
            student,
            "--manifest",
            "prep/manifest.json",
            "--split",
            "all",
            "--out",
            "eval",
        ],
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(d.join("eval/table.md").exists());

    ok(
        d,
        &[
            "segment",
            "--image",
            "data/case_0000_image.nii.gz",
            "--lungmask",
            "data/case_0000_lungmask.nii.gz",
            "--model",
            student,
            "--out",
            "seg.nii.gz",
        ],
    );
    ok(
        d,
        &[
            "plot",
            "--image",
            "data/case_0000_image.nii.gz",
            "--mask",
            "data/case_0000_mask.nii.gz",
            "--pred",
            "seg.nii.gz",
            "--out",
            "slice.png",
        ],
    );
    let png = fs::read(d.join("slice.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    // a teacher cannot segment on its own
    let o = distilseg(
        d,
        &[
            "segment",
            "--image",
            "data/case_0000_image.nii.gz",
            "--lungmask",
            "data/case_0000_lungmask.nii.gz",
            "--model",
            ckpt.to_str().unwrap(),
            "--out",
            "bad.nii.gz",
        ],
    );
    assert_eq!(code(&o), 2);
}
