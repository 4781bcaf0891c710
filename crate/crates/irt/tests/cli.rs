mod common;

use std::path::Path;
use std::process::{Command, Output};

fn irt(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_irt"));
    cmd.arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("tiny.toml");
    let mut c = common::tiny_config();
    c.color.log_every = 0;
    std::fs::write(&cfg, c.to_toml()).unwrap();
    let cfg = Some(cfg.as_path());

    let described = ok(&irt(out, cfg, &["make-scene", "--size", "8"]));
    assert!(described.contains("views: 12 (8 train, 4 held-out)"));
    assert!(ok(&irt(out, None, &["eval", "--describe"])).contains("labeled views: 2 [0, 4]"));

    // stage 2 before stage 1: names the missing checkpoint
    let early = irt(out, cfg, &["train-seg", "--variant", "RT"]);
    assert_eq!(early.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&early.stderr).contains("color/final.ckpt"));

    ok(&irt(out, cfg, &["train-color", "--quiet"]));
    let sem = irt(out, cfg, &["render", "--mode", "semantic"]);
    assert_eq!(sem.status.code(), Some(11), "{}", String::from_utf8_lossy(&sem.stderr));

    for v in ["B", "RT", "RTT", "RTC", "RTTC"] {
        ok(&irt(out, cfg, &["--seed", "3", "train-seg", "--variant", v, "--quiet"]));
    }
    ok(&irt(out, cfg, &["render", "--mode", "rgb"]));
    ok(&irt(out, cfg, &["render", "--mode", "depth", "--views", "all"]));
    ok(&irt(out, cfg, &["render", "--mode", "semantic", "--variant", "RTTC", "--logits"]));
    let r = out.join("render");
    assert!(r.join("color/rgb/0008.png").exists());
    assert!(r.join("color/depth/0000.png").exists());
    assert!(r.join("seg-RTTC/semantic/0011.png").exists());
    assert!(r.join("seg-RTTC/semantic/0011-color.png").exists());
    assert_eq!(std::fs::metadata(r.join("seg-RTTC/semantic/0011.logits")).unwrap().len(), 8 * 8 * 5 * 8);

    let report = ok(&irt(out, cfg, &["eval"]));
    assert!(report.contains("stage 1 held-out PSNR"));
    let table = std::fs::read_to_string(out.join("eval/variants.csv")).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, vec!["variant", "B", "RT", "RTT", "RTC", "RTTC"]);
    let csv = std::fs::read_to_string(out.join("eval/RTTC/iou.csv")).unwrap();
    assert!(csv.starts_with("class,name,iou\n0,background,"));
    assert_eq!(csv.lines().count(), 6);
    let cm = std::fs::read_to_string(out.join("eval/RTTC/confusion.txt")).unwrap();
    let total: u64 = cm.split_whitespace().map(|v| v.parse::<u64>().unwrap()).sum();
    assert_eq!(total, 4 * 64);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(irt(dir.path(), None, &["make-scene", "--bogus"]).status.code(), Some(2));
    assert_eq!(irt(dir.path(), None, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(irt(dir.path(), None, &["train-seg", "--variant", "XYZ"]).status.code(), Some(2));
}

#[test]
fn validation_failures_propagate_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = irt(dir.path(), None, &["eval", "--describe"]);
    assert_eq!(missing.status.code(), Some(3));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[transformer]\nk = 0").unwrap();
    assert_eq!(irt(dir.path(), Some(&bad), &["make-scene"]).status.code(), Some(9));
}
