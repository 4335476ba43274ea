use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn petgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petgrid")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = petgrid(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn phantom_parse_segment_crop_encode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ex = d.join("ex");
    ok(&["--seed", "5", "--dims", "64,64,64", "phantom", "--out", p(&ex), "--exam", "e1", "--blobs", "2"]);
    for f in ["e1_pet.nii.gz", "e1_ct.nii.gz", "e1_truth0.nii.gz", "e1_truth1.nii.gz", "e1.txt"] {
        assert!(ex.join(f).is_file(), "{f}");
    }

    let rec = d.join("rec.jsonl");
    ok(&["parse", "--reports", p(&ex), "--out", p(&rec)]);
    let records = lines(&rec);
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["exam_id"], "e1");

    let seg = d.join("seg");
    ok(&["segment", "--pet", p(&ex.join("e1_pet.nii.gz")), "--records", p(&rec), "--out", p(&seg)]);
    let segs = lines(&seg.join("segments.jsonl"));
    assert_eq!(segs.len(), 2);
    for s in &segs {
        let want = s["suv_max"].as_f64().unwrap();
        let got = s["achieved_suv_max"].as_f64().unwrap();
        assert!((want - got).abs() <= 0.1, "{s}");
    }

    let crop = d.join("crop");
    let mask = seg.join("e1_0.nii.gz");
    let pet = ex.join("e1_pet.nii.gz");
    let ct = ex.join("e1_ct.nii.gz");
    ok(&["crop", "--pet", p(&pet), "--ct", p(&ct), "--mask", p(&mask), "--out", p(&crop), "--crop-dims", "16,16,16"]);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(crop.join("crop.json")).unwrap()).unwrap();
    assert_eq!(rec["resampled_dims"], serde_json::json!([16, 16, 16]));
    assert!(crop.join("mask.nii.gz").is_file());

    let t = d.join("t.bin");
    let v = d.join("v.bin");
    let enc = ["--dims", "64,64,64", "--seed", "2", "encode", "--pet", p(&pet), "--ct", p(&ct), "--mask", p(&mask)];
    ok(&[&enc[..], &["--out", p(&t), "--pooled", p(&v)]].concat());
    let tb = fs::read(&t).unwrap();
    assert_eq!(&tb[..8], [64u32.to_le_bytes(), 128u32.to_le_bytes()].concat());
    assert_eq!(tb.len(), 8 + 64 * 128 * 8);
    assert_eq!(fs::read(&v).unwrap().len(), 8 + 8 * 128 * 8);
    let t2 = d.join("t2.bin");
    ok(&[&enc[..], &["--out", p(&t2)]].concat());
    assert_eq!(tb, fs::read(&t2).unwrap());
}

#[test]
fn pipeline_runs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let ex = dir.path().join("ex");
    let out = dir.path().join("out");
    ok(&["--seed", "1", "--dims", "64,64,64", "phantom", "--out", p(&ex), "--exam", "a"]);
    let args = ["--dims", "64,64,64", "--workers", "2", "pipeline", "--reports", p(&ex), "--out", p(&out)];
    let first = ok(&args);
    assert!(first.contains("encoded 3"), "{first}");
    let summary = fs::read(out.join("summary.json")).unwrap();
    let second = ok(&args);
    assert!(second.contains("cached 3"), "{second}");
    assert_eq!(summary, fs::read(out.join("summary.json")).unwrap());
}

#[test]
fn eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("pred.jsonl"), "{\"id\":\"a\",\"text\":\"liver lesion suv 8.4\"}\n{\"id\":\"b\",\"text\":\"right hilar node\"}\n").unwrap();
    fs::write(d.join("ref.jsonl"), "{\"id\":\"b\",\"text\":\"right hilar node\"}\n{\"id\":\"a\",\"text\":\"liver lesion suv 8.4\"}\n").unwrap();
    let out = d.join("eval.json");
    ok(&["eval", "--pred", p(&d.join("pred.jsonl")), "--ref", p(&d.join("ref.jsonl")), "--out", p(&out)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["corpus"]["rouge_l"], 1.0);
    assert_eq!(r["corpus"]["n_pairs"], 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "wrokers = 2\n").unwrap();
    let out = petgrid(&["--config", p(&cfg), "pipeline"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrokers"));
    let out = petgrid(&["--dims", "64,64", "pipeline"]);
    assert!(!out.status.success());
    let out = petgrid(&["pipeline", "--reports", p(&dir.path().join("missing"))]);
    assert!(!out.status.success());
}
