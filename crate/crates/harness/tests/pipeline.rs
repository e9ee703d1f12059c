use std::path::Path;
use std::process::Command;

use asdfd_core::corpus::SplitName;
use asdfd_core::distill::LossRecord;
use asdfd_core::model::TokenBatch;
use asdfd_harness::audit;
use asdfd_harness::checkpoint::Checkpoint;
use asdfd_harness::config::RunConfig;
use asdfd_harness::data;
use asdfd_harness::metrics::{read_metrics, write_metrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn tiny_config() -> Value {
    let mut v = RunConfig::default().to_value();
    v["corpus"]["synthetic"]["train"] = json!(160);
    v["corpus"]["synthetic"]["valid"] = json!(40);
    v["corpus"]["synthetic"]["test"] = json!(40);
    v["teacher"] = json!({"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ff_dim": 32, "max_len": 24});
    v["finetune"]["epochs"] = json!(2);
    v["student_layers"] = json!([1, 2]);
    v["distill"]["epochs"] = json!(3);
    v["distill"]["batch"] = json!(4);
    v["forge"]["n_iter"] = json!(2);
    v["forge"]["n_t"] = json!(2);
    v["forge"]["l_max"] = json!(8);
    v
}

fn asdfd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_asdfd")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&tiny_config()).unwrap()).unwrap();
    let teacher_dir = dir.path().join("teacher");

    let o = asdfd(&["teacher-train", "--config", p(&cfg_path), "--out", p(&teacher_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["teacher.ckpt", "base.ckpt", "vocab.tsv", "data/train.csv", "data/test.csv", "teacher_metrics.jsonl", "teacher_report.json"] {
        assert!(teacher_dir.join(f).exists(), "missing {f}");
    }
    let tckpt = teacher_dir.join("teacher.ckpt");

    let student_dir = dir.path().join("student");
    let o = asdfd(&["distill", "--config", p(&cfg_path), "--method", "asdfd", "--teacher", p(&tckpt), "--out", p(&student_dir), "--forge.n-s", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = read_metrics(&student_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.acc.is_none()));
    let saved = Checkpoint::load(&student_dir.join("student.ckpt")).unwrap();
    assert_eq!(saved.meta.config["forge"]["n_s"], json!(0));
    assert_eq!(saved.meta.config_hash, recs[0].config_hash);
    assert!(saved.predictor.is_none());

    // eval against the split written by teacher-train
    let o = asdfd(&["eval", "--checkpoint", p(&student_dir.join("student.ckpt")), "--data", p(&teacher_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((0.0..=1.0).contains(&v["acc"].as_f64().unwrap()));

    // --strict: the student was distilled with n_s = 0, the bare config differs
    let o = asdfd(&["eval", "--config", p(&cfg_path), "--strict", "--checkpoint", p(&student_dir.join("student.ckpt")), "--data", p(&teacher_dir)]);
    assert_eq!(o.status.code(), Some(2));
    let o = asdfd(&[
        "eval", "--config", p(&cfg_path), "--forge.n-s", "0", "--strict",
        "--checkpoint", p(&student_dir.join("student.ckpt")), "--data", p(&teacher_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ablate_dir = dir.path().join("ablate");
    let o = asdfd(&["ablate", "--config", p(&cfg_path), "--teacher", p(&tckpt), "--out", p(&ablate_dir), "--distill.epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ablate_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    // eval reproduces the accuracy stored at save time
    let arm = ablate_dir.join("6_adversarial").join("student.ckpt");
    let o = asdfd(&["eval", "--checkpoint", p(&arm), "--data", p(&teacher_dir)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["acc"], v["saved_acc"]);
    assert_eq!(v["acc"], report["rows"][5]["acc"]);

    let sweep_dir = dir.path().join("sweep");
    let o = asdfd(&["sigma-sweep", "--config", p(&cfg_path), "--teacher", p(&tckpt), "--out", p(&sweep_dir), "--sigmas", "0.35", "--distill.epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(sweep_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);

    let export = |name: &str| {
        let out = dir.path().join(name);
        let o = asdfd(&[
            "export-hidden", "--config", p(&cfg_path), "--teacher", p(&tckpt), "--out", p(&out), "--n-real", "10", "--n-synthetic", "10",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("hidden.csv")).unwrap()
    };
    let csv = export("export_a");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 21);
    assert_eq!(lines[0].split(',').count(), 2 + 16);
    assert!(lines[0].starts_with("source,label,dim_0,"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("real,")).count(), 10);
    assert_eq!(lines.iter().filter(|l| l.starts_with("synthetic,")).count(), 10);
    assert_eq!(csv, export("export_b"));
}

#[test]
fn exit_statuses() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(asdfd(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(asdfd(&["distill", "--bogus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"forge": {"sigma": 0.2, "unknown": 1}}"#).unwrap();
    assert_eq!(asdfd(&["teacher-train", "--config", p(&bad)]).status.code(), Some(2));
    // valid config, missing teacher checkpoint: runtime failure
    let o = asdfd(&["distill", "--teacher", p(&dir.path().join("missing.ckpt")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(asdfd(&["--help"]).status.success());
}

#[test]
fn checkpoint_round_trip_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_value(tiny_config()).unwrap();
    asdfd_harness::experiments::train_teacher(&cfg, dir.path()).unwrap();
    let path = dir.path().join("teacher.ckpt");
    let a = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    a.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let b = Checkpoint::load(&again).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = a.model.config().vocab_size;
    for _ in 0..100 {
        let len = rng.gen_range(3..=10);
        let mut ids = vec![2];
        ids.extend((0..len - 2).map(|_| rng.gen_range(5..v)));
        ids.push(3);
        let t = TokenBatch::new(1, len, ids).unwrap();
        let la = a.model.forward(&t).unwrap();
        let lb = b.model.forward(&t).unwrap();
        assert_eq!(la.values(), lb.values());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes).unwrap();
    assert!(Checkpoint::load(&cut).is_err());
}

#[test]
fn metrics_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<LossRecord> = (1..=1000)
        .map(|epoch| LossRecord {
            epoch,
            l_input: rng.gen_bool(0.5).then(|| rng.gen::<f64>() * 3.0),
            l_mask: rng.gen_bool(0.5).then(|| rng.gen::<f64>() * 4.0),
            l_kl: rng.gen::<f64>(),
            l_pt: f64::from(rng.gen::<f32>()),
            l_kd: rng.gen::<f64>() * 1e3,
            acc: rng.gen_bool(0.1).then(|| rng.gen::<f64>()),
        })
        .collect();
    let path = dir.path().join("m.jsonl");
    write_metrics(&path, &records, 5, "abcd").unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), 1000);
    for (r, b) in records.iter().zip(&back) {
        assert_eq!((r.epoch, r.l_input, r.l_mask, r.l_kl, r.l_pt, r.l_kd, r.acc), (b.epoch, b.l_input, b.l_mask, b.l_kl, b.l_pt, b.l_kd, b.acc));
        assert_eq!((b.seed, b.config_hash.as_str()), (5, "abcd"));
    }
}

#[test]
fn data_free_session_reads_no_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_value(tiny_config()).unwrap();
    asdfd_harness::experiments::train_teacher(&cfg, dir.path()).unwrap();
    let session = asdfd_harness::experiments::Session::open(&dir.path().join("teacher.ckpt")).unwrap();
    session.run(&cfg, None).unwrap();
    let data_dir = std::fs::canonicalize(data::split_path(dir.path(), SplitName::Test).parent().unwrap()).unwrap();
    let root = std::fs::canonicalize(dir.path()).unwrap();
    let mine: Vec<_> = audit::accesses().into_iter().filter(|a| a.mode == audit::Mode::Read && a.path.starts_with(&root)).collect();
    assert!(mine.iter().all(|a| !a.path.starts_with(&data_dir)), "{mine:?}");
    let names: Vec<_> = mine.iter().map(|a| a.path.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["teacher.ckpt", "base.ckpt"]);
}
