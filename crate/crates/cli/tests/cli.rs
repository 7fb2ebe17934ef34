mod common;

use std::fs;

use common::{field, run, stdout};
use serde_json::Value;

fn manifest(dir: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_data_dir_is_usage_error() {
    let o = run(&["train", "--dataset", "mnist"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--dataset", "mnist", "--data-dir", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_and_dataset_are_usage_errors() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert_eq!(run(&["train", "--dataset", "svhn", "--data-dir", d]).status.code(), Some(2));
    assert_eq!(run(&["train", "--dataset", "mnist", "--data-dir", d, "--mode", "x"]).status.code(), Some(2));
}

#[test]
fn mnist_defaults_land_in_manifest_and_eval_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::mnist_dir(tmp.path(), 60, 30);
    let out = tmp.path().join("run");
    let o = run(&[
        "train", "--dataset", "mnist", "--data-dir", data.to_str().unwrap(), "--epochs", "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["config"]["lr"], serde_json::json!(0.1));
    assert_eq!(m["config"]["batch_size"], 128);
    assert_eq!(m["config"]["mode"], "sgt_pact");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    for f in ["metrics.csv", "metrics.gp", "model.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,ce,kl,pact_penalty,total,test_acc,alpha_0,alpha_1,seconds\n"));
    assert_eq!(csv.lines().count(), 3);

    let train_acc = field(&stdout(&o), "test_acc").unwrap();
    let ckpt = out.join("model.ckpt");
    let e = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", "mnist", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0));
    assert_eq!(field(&stdout(&e), "accuracy").unwrap(), train_acc);
}

#[test]
fn cifar_default_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::cifar_dir(tmp.path(), 4, 10);
    let out = tmp.path().join("run");
    let o = run(&[
        "train", "--dataset", "cifar10", "--data-dir", data.to_str().unwrap(), "--epochs", "1", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["config"]["lambda"], serde_json::json!(0.05));
    assert_eq!(m["config"]["activation_bits"], 4);
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::mnist_dir(tmp.path(), 40, 20);
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# small run\ndataset = mnist\ndata-dir = {}\nepochs = 1\nlr = 0.05\nmode = pact_only\nbatch_size = 16\n",
            data.display()
        ),
    )
    .unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--lr", "0.02", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["config"]["lr"], serde_json::json!(0.02));
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["batch_size"], 16);
    assert_eq!(m["config"]["mode"], "pact_only");

    fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn corrupt_files_exit_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::mnist_dir(tmp.path(), 20, 10);
    let labels = data.join("train-labels-idx1-ubyte");
    let mut b = fs::read(&labels).unwrap();
    b[2] = 9;
    fs::write(&labels, &b).unwrap();
    let o = run(&["train", "--dataset", "mnist", "--data-dir", data.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn sweep_and_saliency_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::mnist_dir(tmp.path(), 60, 20);
    let d = data.to_str().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["train", "--dataset", "mnist", "--data-dir", d, "--epochs", "1", "--mode", "sgt_float", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let ckpt = out.join("model.ckpt");
    let c = ckpt.to_str().unwrap();
    let eval = stdout(&run(&["eval", "--checkpoint", c, "--dataset", "mnist", "--data-dir", d]));
    let sweep_out = tmp.path().join("sweep");
    let s = run(&["sweep", "--checkpoint", c, "--dataset", "mnist", "--data-dir", d, "--percentages", "0,50,90", "--out", sweep_out.to_str().unwrap()]);
    assert_eq!(s.status.code(), Some(0));
    assert_eq!(field(&stdout(&s), "acc_0").unwrap(), field(&eval, "accuracy").unwrap());
    let csv = fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    let pcts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(pcts, ["0", "50", "90"]);
    assert!(sweep_out.join("sweep.gp").is_file());

    let sal = tmp.path().join("maps");
    let m = run(&["saliency", "--checkpoint", c, "--dataset", "mnist", "--data-dir", d, "--indices", "0,3", "--out", sal.to_str().unwrap()]);
    assert_eq!(m.status.code(), Some(0));
    let pgm = fs::read(sal.join("saliency_3.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(pgm.len(), 13 + 784);
    let bad = run(&["saliency", "--checkpoint", c, "--dataset", "mnist", "--data-dir", d, "--indices", "99"]);
    assert_eq!(bad.status.code(), Some(2));
    let wrong = run(&["eval", "--checkpoint", c, "--dataset", "cifar10", "--data-dir", d]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn bad_checkpoint_tag_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::mnist_dir(tmp.path(), 10, 10);
    let ckpt = tmp.path().join("x.ckpt");
    fs::write(&ckpt, b"SGTPACT0\n").unwrap();
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", "mnist", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_smoke() {
    let o = run(&["gradcheck", "--instances", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "failed").unwrap(), "0");
}
