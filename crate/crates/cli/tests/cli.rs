use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mpseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mpseg(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "epochs": 1,
  "batch_size": 4,
  "fold_count": 3,
  "network": { "stage_widths": [2, 2, 4, 4, 4], "decision_width": 4 },
  "augmentation": { "max_shift": 2.0 }
}"#;

#[test]
fn generated_datasets_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen", "--out", s(out), "--cases", "2", "--seed", "5", "--size", "6x32x32", "--misalign", "2"]);
    }
    for case in ["case_0000", "case_0001"] {
        for f in ["pv.f32raw", "pv.f32raw.json", "art.f32raw", "liver.u8raw", "tumor.u8raw", "meta.json"] {
            assert_eq!(fs::read(a.join(case).join(f)).unwrap(), fs::read(b.join(case).join(f)).unwrap(), "{case}/{f}");
        }
    }
}

#[test]
fn rejected_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&["gen", "--out", s(&out), "--cases", "1", "--seed", "1", "--size", "6x30x32"]), 2);
    assert_eq!(code(&["gen", "--out", s(&out), "--cases", "1", "--seed", "1", "--size", "6x32"]), 2);
    assert_eq!(code(&["gen", "--out", s(&out), "--cases", "1", "--seed", "1", "--size", "6x32x32", "--visibility", "0.3"]), 2);
    assert_eq!(code(&["gradcheck", "--module", "everything"]), 2);

    ok(&["gen", "--out", s(&out), "--cases", "3", "--seed", "1", "--size", "6x32x32"]);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&["train", "--data", s(&out), "--config", s(&cfg), "--out", s(&run), "--seed", "1"]), 2);
    fs::write(&cfg, r#"{"momentum": 1.5}"#).unwrap();
    assert_eq!(code(&["train", "--data", s(&out), "--config", s(&cfg), "--out", s(&run), "--seed", "1"]), 2);
    let missing = dir.path().join("nowhere");
    assert_eq!(code(&["eval", "--pred", s(&missing), "--ref", s(&out), "--report", s(&dir.path().join("r.json"))]), 2);
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--out", s(&data), "--cases", "3", "--seed", "9", "--size", "6x32x32"]);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run), "--seed", "4", "--f64"]);
    assert!(stdout.contains("val DPC"), "{stdout}");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 4);
    assert_eq!(record["precision"], "f64");
    assert_eq!(record["config"]["network"]["stage_widths"], serde_json::json!([2, 2, 4, 4, 4]));

    let pred = dir.path().join("pred");
    ok(&["infer", "--model", s(&run.join("best.ckpt")), "--case", s(&data), "--out", s(&pred)]);
    assert!(pred.join("case_0002").join("tumor.u8raw").is_file());
    let report = dir.path().join("report.json");
    let stdout = ok(&["eval", "--pred", s(&pred), "--ref", s(&data), "--report", s(&report)]);
    assert!(stdout.starts_with("3 cases"), "{stdout}");
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["cases"].as_array().unwrap().len(), 3);
    assert_eq!(parsed["surface"], "3d-6-connected");

    // A single case scored against itself is perfect.
    let single = dir.path().join("single");
    let case = data.join("case_0001");
    fs::create_dir_all(&single).unwrap();
    fs::copy(case.join("tumor.u8raw"), single.join("tumor.u8raw")).unwrap();
    fs::copy(case.join("tumor.u8raw.json"), single.join("tumor.u8raw.json")).unwrap();
    ok(&["eval", "--pred", s(&single), "--ref", s(&case), "--report", s(&report)]);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["aggregate"]["dpc_mean"], 1.0);
    assert_eq!(parsed["aggregate"]["assd_mean"], 0.0);
}

#[test]
fn ablate_writes_table_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--out", s(&data), "--cases", "3", "--seed", "2", "--size", "6x32x32"]);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.path().join("abl");
    let status = code(&["ablate", "--data", s(&data), "--config", s(&cfg), "--seeds", "1,2", "--out", s(&out)]);
    assert!(status == 0 || status == 1);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.split_whitespace().nth(1) == Some("mp-add")).count(), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 8);
    assert_eq!(report["control"], false);
}

#[test]
fn gradcheck_single_module() {
    let stdout = ok(&["gradcheck", "--module", "urim"]);
    assert!(stdout.lines().filter(|l| l.starts_with("ok")).count() >= 3, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}
