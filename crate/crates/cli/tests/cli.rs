use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gtpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtpt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// First JSON document on stdout; `flops` follows it with a text table.
fn first_json(out: &Output) -> Value {
    let mut stream = serde_json::Deserializer::from_slice(&out.stdout).into_iter::<Value>();
    stream.next().expect("stdout holds json").expect("valid json")
}

const TINY: &str = r#"{
    "image_height": 16, "image_width": 16, "stem_channels": 4,
    "embed_dim": 8, "heads": 2,
    "coarse_layers": 2, "h2k_layer": 1, "fine_layers": 2, "fine_prune_layer": 1,
    "train": { "steps": 3, "batch_size": 2, "checkpoint_every": 2 }
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn flops_on_s_like_config_reports_expected_reduction() {
    let out = gtpt(&["flops", "--config", &shipped("s_like.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = first_json(&out);
    let pct = r["reduction_pct"].as_f64().unwrap();
    assert!((36.0..=48.0).contains(&pct), "reduction {pct}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("total"));

    let off = gtpt(&["flops", "--config", &shipped("s_like.json"), "--no-prune"]);
    let off = first_json(&off);
    assert_eq!(off["total_flops"], r["unpruned_total_flops"]);
    assert_eq!(off["reduction_pct"].as_f64().unwrap(), 0.0);
}

#[test]
fn introduction_modes_order_by_cost() {
    let total = |mode: &str| {
        let out = gtpt(&["flops", "--config", &shipped("s_like.json"), "--introduction", mode]);
        assert!(out.status.success());
        first_json(&out)["total_flops"].as_u64().unwrap()
    };
    let (hsd, sd, dense) = (total("human-sparse-dense"), total("sparse-dense"), total("dense"));
    assert!(hsd < sd && sd < dense, "{hsd} {sd} {dense}");
}

#[test]
fn shipped_configs_parse() {
    for name in ["s_like.json", "desk_train.json"] {
        let out = gtpt(&["flops", "--config", &shipped(name)]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"embed_dim": 30, "heads": 4}"#).unwrap();
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"colour": "red"}"#).unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("missing.gsyn");

    assert_eq!(gtpt(&["flops", "--config", path(&bad)]).status.code(), Some(2));
    assert_eq!(gtpt(&["flops", "--config", path(&unknown)]).status.code(), Some(2));
    assert_eq!(gtpt(&["flops", "--config", "no-such-file.json"]).status.code(), Some(2));
    let eval = gtpt(&[
        "eval", "--config", path(&cfg), "--data", path(&missing), "--ckpt", path(&missing),
    ]);
    assert_eq!(eval.status.code(), Some(3));
    assert!(!eval.stderr.is_empty());
    assert_eq!(gtpt(&[]).status.code(), Some(1));
    assert_eq!(gtpt(&["flops"]).status.code(), Some(1));
    assert_eq!(gtpt(&["train", "--config", path(&cfg), "--stage", "torso"]).status.code(), Some(1));
    assert_eq!(gtpt(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_train_eval_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let (body_data, wb_data) = (d.join("body.gsyn"), d.join("wb.gsyn"));
    let (body_ckpt, wb_ckpt) = (d.join("body.ckpt"), d.join("wb.ckpt"));

    let out = gtpt(&["synth", "--config", path(&cfg), "--count", "4", "--out", path(&body_data), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = gtpt(&["train", "--config", path(&cfg), "--data", path(&body_data), "--stage", "body", "--out", path(&body_ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let logs: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logs.len(), 3);
    for (i, log) in logs.iter().enumerate() {
        assert_eq!(log["step"], i);
        for key in ["L_pruned", "L_unpruned", "L_G2L", "L_GP", "lr"] {
            assert!(log[key].as_f64().unwrap().is_finite(), "{key}");
        }
    }
    assert!(body_ckpt.exists());

    let out = gtpt(&["eval", "--config", path(&cfg), "--data", path(&body_data), "--ckpt", path(&body_ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = first_json(&out);
    assert_eq!(r["samples"], 4);
    for key in ["pck@0.1", "pck@0.2"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(r["per_group"]["head"]["pck@0.2"].is_number());

    // whole-body stage from the body checkpoint
    let wb_cfg = d.join("wb.json");
    std::fs::write(&wb_cfg, TINY.replacen('{', r#"{ "mode": "wholebody","#, 1)).unwrap();
    let out = gtpt(&["synth", "--config", path(&wb_cfg), "--count", "2", "--out", path(&wb_data)]);
    assert!(out.status.success());
    let out = gtpt(&[
        "train", "--config", path(&cfg), "--data", path(&wb_data), "--stage", "wholebody",
        "--init", path(&body_ckpt), "--out", path(&wb_ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = gtpt(&["eval", "--config", path(&wb_cfg), "--data", path(&wb_data), "--ckpt", path(&wb_ckpt), "--no-prune"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first_json(&out)["pruned"], false);

    // a body checkpoint does not fit the whole-body model without transfer
    let out = gtpt(&["eval", "--config", path(&wb_cfg), "--data", path(&wb_data), "--ckpt", path(&body_ckpt)]);
    assert_eq!(out.status.code(), Some(3));

    let maps = d.join("maps");
    let out = gtpt(&[
        "dump", "--config", path(&cfg), "--ckpt", path(&body_ckpt), "--data", path(&body_data),
        "--index", "1", "--out", path(&maps),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_dir(&maps).unwrap().count() > 0);
    let out = gtpt(&[
        "dump", "--config", path(&cfg), "--ckpt", path(&body_ckpt), "--data", path(&body_data),
        "--index", "9", "--out", path(&maps),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
