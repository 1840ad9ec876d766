use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forec_core::checkpoint::{self, Checkpoint};
use forec_core::dataset::Dataset;
use forec_core::{ops, pnm};
use serde_json::Value;

fn forec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forec")).args(args).output().expect("spawn forec")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let o = forec(&["gen-data", "--out", p(&out), "--count", "12", "--val", "4", "--size", "32x32", "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn small_train(dir: &Path, data: &Path, run: &str, extra: &[&str]) -> Output {
    let out = dir.join(run);
    let mut args = vec![
        "train", "--out", p(&out), "--data", p(data), "--epochs", "1",
        "--set", "net.base_width=4", "--set", "net.latent_width=4", "--set", "train.labeled_fraction=0.25",
        "--set", "train.batch_size=2",
    ];
    args.extend_from_slice(extra);
    forec(&args)
}

#[test]
fn gen_data_is_deterministic_and_atomic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), "a", "5");
    let b = gen_small(dir.path(), "b", "5");
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 16);
    let c = gen_small(dir.path(), "c", "6");
    assert_ne!(tree(&a), tree(&c));

    // Existing output is refused without --force.
    let o = forec(&["gen-data", "--out", p(&a), "--count", "4", "--val", "1", "--size", "32x32"]);
    assert_eq!(code(&o), 2);
    let o = forec(&["gen-data", "--out", p(&dir.path().join("z")), "--classes", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("z").exists());
    let leftovers = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".forec-gen-"))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn default_gen_data_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = forec(&["gen-data", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let summary = stdout_json(&o);
    assert_eq!((summary["train"].as_u64(), summary["val"].as_u64()), (Some(256), Some(64)));
    assert_eq!(std::fs::read_dir(out.join("labels")).unwrap().count(), 320);
}

#[test]
fn train_eval_and_latent() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "data", "1");
    let o = small_train(dir.path(), &data, "run", &["--mode", "forec"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["metrics.csv", "final.ckpt", "resolved-config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let summary = stdout_json(&o);
    assert_eq!(summary["mode"], "forec");

    // Training from the resolved config reproduces the run byte for byte.
    let again = dir.path().join("again");
    let o = forec(&["train", "--config", p(&run.join("resolved-config.json")), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "final.ckpt"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let o = forec(&["eval", "--ckpt", p(&run.join("final.ckpt")), "--data", p(&data), "--json"]);
    assert_eq!(code(&o), 0);
    let report = stdout_json(&o);
    assert_eq!(report["per_class_iou"].as_array().unwrap().len(), 4);
    assert!((0.0..=1.0).contains(&report["miou"].as_f64().unwrap()));

    let image = data.join("images/0000.ppm");
    let label = data.join("labels/0000.pgm");
    let lat = dir.path().join("lat");
    let ckpt = run.join("final.ckpt");
    let args = ["latent", "--ckpt", p(&ckpt), "--image", p(&image), "--out", p(&lat), "--label", p(&label)];
    let o = forec(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&lat).unwrap().count(), 5);
    let first = tree(&lat);
    assert_eq!(code(&forec(&args)), 0);
    assert_eq!(tree(&lat), first);
    let manifest: Value = serde_json::from_slice(&std::fs::read(lat.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["slices"].as_array().unwrap().len(), 4);

    let top = dir.path().join("top");
    let o = forec(&["latent", "--ckpt", p(&run.join("final.ckpt")), "--image", p(&image), "--out", p(&top), "--topk", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&top).unwrap().count(), 3);
}

#[test]
fn supervised_train_ignores_unlabeled_pool() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "data", "2");
    let o = small_train(dir.path(), &data, "sup", &["--mode", "supervised"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sup/metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    assert_eq!((fields[4], fields[5]), ("0.0", "0.0"), "{last}");
}

#[test]
fn perfect_oracle_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "data", "3");
    let o = small_train(dir.path(), &data, "run", &[]);
    assert_eq!(code(&o), 0);
    let ckpt = dir.path().join("run/final.ckpt");

    // Relabel the validation images with the checkpoint's own predictions.
    let net = Checkpoint::load(&ckpt).unwrap().eval_network().unwrap();
    let set = Dataset::load(&data).unwrap();
    for &id in &set.meta.val_ids {
        let s = set.sample(id);
        let x = s.image.clone().reshape([1, 3, 32, 32]).unwrap();
        let pred = ops::argmax_channels(&net.forward_seg(&x).unwrap()).unwrap();
        pnm::write_pgm(32, 32, &pred, data.join(format!("labels/{id:04}.pgm"))).unwrap();
    }
    let o = forec(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["miou"].as_f64(), Some(1.0));
    let o = forec(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mIoU 1.0000"));
}

#[test]
fn usage_and_numerical_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "data", "4");

    let o = small_train(dir.path(), &data, "bad", &["--set", "train.sed=1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.sed"));

    let o = forec(&["train", "--out", p(&dir.path().join("x")), "--data", p(&dir.path().join("missing"))]);
    assert_eq!(code(&o), 2);

    let o = small_train(dir.path(), &data, "nan", &["--set", "optim.lr0=1e30"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    // A 2-class dataset against a 4-class checkpoint.
    let ok = small_train(dir.path(), &data, "run", &[]);
    assert_eq!(code(&ok), 0);
    let two = dir.path().join("two");
    let o = forec(&["gen-data", "--out", p(&two), "--count", "4", "--val", "2", "--size", "32x32", "--classes", "1"]);
    assert_eq!(code(&o), 0);
    let o = forec(&["eval", "--ckpt", p(&dir.path().join("run/final.ckpt")), "--data", p(&two)]);
    assert_eq!(code(&o), 2);

    // Latent analysis needs the student's reconstruction decoder.
    let (_, teacher) = forec_core::Network::build(Default::default(), forec_core::AuxHead::None, 0).unwrap();
    let lone = dir.path().join("teacher.ckpt");
    checkpoint::save_checkpoint(&teacher, &lone).unwrap();
    let o = forec(&["latent", "--ckpt", p(&lone), "--image", p(&data.join("images/0000.ppm")), "--out", p(&dir.path().join("l"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_exit_codes() {
    let o = forec(&["grad-check", "--trials", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);

    let o = forec(&["grad-check", "--op", "conv2d", "--trials", "3"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("conv2d"));

    let o = forec(&["grad-check", "--op", "faulty_conv", "--trials", "3"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&forec(&["grad-check", "--op", "nope"])), 2);
}
