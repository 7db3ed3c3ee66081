//! The `masscrf` binary end to end.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use masscrf::dataio::{load_masks_dir, write_dataset_dir, Dataset, Split, IMAGE_SIZE};
use masscrf::model::Variant;
use masscrf::trainer::{TrainConfig, TrainState};
use masscrf::Tensor;

fn masscrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masscrf")).args(args).env("MASSCRF_THREADS", "1").output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(out: &Path, count: &str, test: &str) -> Output {
    masscrf(&["synth", "--count", count, "--test-count", test, "--seed", "3", "--out", path(out)])
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth(&a, "6", "2").status.success());
    assert!(synth(&b, "6", "2").status.success());
    for split in ["train", "test"] {
        let (fa, fb) = (dir_contents(&a.join(split)), dir_contents(&b.join(split)));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{split} differs");
    }
    assert_eq!(load_masks_dir(a.join("test")).unwrap().split, Split::Test);
}

#[test]
fn zero_count_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = masscrf(&["synth", "--count", "0", "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage: masscrf synth"), "{}", stderr(&o));
}

#[test]
fn unknown_variant_lists_choices() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "4", "1");
    let out = tmp.path().join("run");
    let o =
        masscrf(&["train", "--data", path(&tmp.path().join("train")), "--variant", "crf_only", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    for v in Variant::ALL {
        assert!(stderr(&o).contains(v.name()), "{}", stderr(&o));
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "4", "2");
    let o = masscrf(&[
        "eval",
        "--checkpoint",
        path(&tmp.path().join("nope.bin")),
        "--data",
        path(&tmp.path().join("test")),
        "--out",
        path(&tmp.path().join("eval")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.bin"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = masscrf(&["synth", "--count", "2", "--set", "synth.colour=blue", "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("synth.colour"), "{}", stderr(&o));

    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nepochs = 1\nbogus = 2\n").unwrap();
    let o = masscrf(&["synth", "--count", "2", "--config", path(&cfg), "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

/// A fcn checkpoint whose prior bias spells out `mask` and whose
/// convolutions are zero, so it predicts exactly that mask.
fn oracle_checkpoint(train: &Dataset, mask: &[u8], file: &Path) {
    let cfg = TrainConfig { variant: Variant::Fcn, ..TrainConfig::default() };
    let mut state = TrainState::new(cfg, train).unwrap();
    let fcn = &mut state.model.fcns[0];
    fcn.zero_weights();
    let n = mask.len();
    let bias = Tensor::from_fn(&[2, IMAGE_SIZE, IMAGE_SIZE], |k| {
        let fg = mask[k % n] != 0;
        if (k < n) != fg {
            20.0
        } else {
            -20.0
        }
    });
    let slot = fcn.params.iter_mut().find(|p| p.name == "prior_bias").unwrap();
    slot.value = Arc::new(bias);
    state.save(file).unwrap();
}

#[test]
fn perfect_model_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "5", "4");
    let mut test = load_masks_dir(tmp.path().join("test")).unwrap();
    let mask = test.samples[0].mask.clone();
    for s in &mut test.samples {
        s.mask = mask.clone();
    }
    let data = tmp.path().join("same_mask");
    write_dataset_dir(&test, &data, None).unwrap();
    let mut train = test.clone();
    train.split = Split::Train;
    let ck = tmp.path().join("oracle.bin");
    oracle_checkpoint(&train, &mask, &ck);

    let out = tmp.path().join("eval");
    let o = masscrf(&["eval", "--checkpoint", path(&ck), "--data", path(&data), "--overlays", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("mean_dice = 1\n"), "{summary}");
    let trimap = std::fs::read_to_string(out.join("trimap.csv")).unwrap();
    let rows: Vec<&str> = trimap.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(",1")), "{trimap}");
    let per_sample = std::fs::read_to_string(out.join("per_sample.csv")).unwrap();
    assert_eq!(per_sample.lines().count(), 1 + test.len());
    assert_eq!(std::fs::read_dir(out.join("overlays")).unwrap().count(), test.len());

    let o = masscrf(&[
        "eval",
        "--checkpoint",
        path(&ck),
        "--data",
        path(&data),
        "--variant",
        "fcn_crf",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn resume_matches_unbroken_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "6", "2");
    let data = tmp.path().join("train");
    let common = ["--data", path(&data), "--variant", "fcn", "--batch-size", "4", "--seed", "5"];
    let full = tmp.path().join("full");
    let o = masscrf(&[&["train", "--epochs", "2", "--out", path(&full)][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));

    let first = tmp.path().join("first");
    let o = masscrf(&[&["train", "--epochs", "1", "--out", path(&first)][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let second = tmp.path().join("second");
    let ck = first.join("checkpoint.bin");
    let o =
        masscrf(&[&["train", "--epochs", "2", "--resume", path(&ck), "--out", path(&second)][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));

    let a = std::fs::read(full.join("checkpoint.bin")).unwrap();
    let b = std::fs::read(second.join("checkpoint.bin")).unwrap();
    assert!(a == b, "resumed checkpoint differs from the unbroken run");
    let metrics = std::fs::read_to_string(second.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
}

#[test]
fn resolved_config_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "4", "1");
    let out = tmp.path().join("run");
    let o = masscrf(&[
        "train",
        "--data",
        path(&tmp.path().join("train")),
        "--epochs",
        "1",
        "--set",
        "crf.theta_beta=0.2",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("run_config.txt")).unwrap();
    for line in ["epochs = 1", "crf.theta_beta = 0.2", "variant = fcn"] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn gradcheck_filter_runs_one_family() {
    let tmp = tempfile::tempdir().unwrap();
    let o = masscrf(&["gradcheck", "--op", "conv2d", "--seeds", "2", "--out", path(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(tmp.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains("conv2d_same") && report.contains("conv2d_valid"), "{report}");
    assert!(!report.contains("tanh"), "{report}");
    assert!(report.contains("overall: PASS"), "{report}");

    let o = masscrf(&["gradcheck", "--op", "no_such_op"]);
    assert_eq!(o.status.code(), Some(1));
}
