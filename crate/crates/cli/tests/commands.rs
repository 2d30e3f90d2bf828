mod common;

use std::io::Write;

use common::{checkpoints, png_dir, s, ssr, MICRO_TOML};
use ssr_core::config::ExperimentConfig;
use ssr_core::imaging::{load_image, ValueRange};
use ssr_core::metrics::RatingRecord;

#[test]
fn split_reports_counts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    png_dir(&src, 12, 40, 1);
    let run = |out: &str, paired: &str| {
        ssr(&[
            "split", "--src", s(&src), "--out", s(&tmp.path().join(out)), "--paired", paired,
            "--test", "3", "--seed", "7", "--hr-size", "32",
        ])
    };
    let a = run("a", "4");
    assert_eq!(a.code, 0, "{}", a.stdout);
    assert_eq!((a.json["paired"].as_u64(), a.json["unpaired"].as_u64(), a.json["test"].as_u64()), (Some(4), Some(5), Some(3)));
    assert_eq!(run("b", "4").code, 0);
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("manifest.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));

    let unsup = run("c", "0");
    assert_eq!(unsup.json["paired"], 0);
    assert_eq!(unsup.json["unpaired"], 9);

    let err = run("d", "20");
    assert_eq!(err.code, 1);
    assert_eq!(err.json["error"]["kind"], "capacity");
}

#[test]
fn train_echoes_its_config_and_infer_upscales() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.toml");
    std::fs::write(&cfg_path, MICRO_TOML).unwrap();
    let out = tmp.path().join("run");
    let r = ssr(&["train", "--config", s(&cfg_path), "--out", s(&out), "--seed", "3", "--max-batches", "3"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!(r.json["batches"], 3);
    assert_eq!(r.json["seed"], 3);
    assert_eq!(r.json["last"]["stage"], "adversarial");

    // the echo re-parses to the resolved run parameters, overrides included
    let echo = ExperimentConfig::from_file(&out.join("config.toml")).unwrap();
    let mut expected = ExperimentConfig::from_toml_str(MICRO_TOML).unwrap();
    expected.trainer.seed = 3;
    expected.trainer.max_batches = 3;
    expected.trainer.out_dir = out.clone();
    assert_eq!(echo, expected);

    let lr_dir = tmp.path().join("lr");
    png_dir(&lr_dir, 2, 12, 4);
    let sr = tmp.path().join("sr.png");
    let r = ssr(&["infer", "--ckpt", s(&out), "--in", s(&lr_dir.join("im000.png")), "--out", s(&sr)]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!(load_image(&sr, ValueRange::Unit).unwrap().shape(), (48, 48, 3));

    let sr_dir = tmp.path().join("sr");
    let r = ssr(&[
        "infer", "--ckpt", s(&out.join("last.safetensors")), "--in", s(&lr_dir), "--out", s(&sr_dir),
        "--tile", "8", "--overlap", "2",
    ]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!(r.json["outputs"].as_array().unwrap().len(), 2);
    assert!(sr_dir.join("im001.png").is_file());
}

#[test]
fn resume_continues_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.toml");
    std::fs::write(&cfg_path, MICRO_TOML).unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    assert_eq!(ssr(&["train", "--config", s(&cfg_path), "--out", s(&full), "--max-batches", "3"]).code, 0);
    assert_eq!(ssr(&["train", "--config", s(&cfg_path), "--out", s(&part), "--max-batches", "2"]).code, 0);
    let r = ssr(&["train", "--config", s(&cfg_path), "--out", s(&part), "--max-batches", "3", "--resume", s(&part)]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    let log = |d: &std::path::Path| std::fs::read_to_string(d.join("losses.jsonl")).unwrap();
    assert_eq!(log(&full), log(&part));
}

#[test]
fn bad_config_is_a_structured_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.toml");
    std::fs::write(&cfg_path, "[trainer]\nlearning_rate = 0.1\n").unwrap();
    let r = ssr(&["train", "--config", s(&cfg_path)]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["error"]["kind"], "config");
    assert!(r.json["error"]["message"].as_str().unwrap().contains("learning_rate"));

    let r = ssr(&["infer", "--ckpt", s(&tmp.path().join("none")), "--in", "x.png", "--out", "y.png"]);
    assert_eq!(r.code, 1);
    assert!(r.json["error"]["kind"].is_string());
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("hr");
    png_dir(&d, 6, 32, 5);
    let r = ssr(&["fid", "--real", s(&d), "--fake", s(&d), "--small"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert!(r.json["fid"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r.json["n_real"], 6);
    assert_eq!(r.json["shrinkage"], true);
}

fn record(rater: &str, image: &str, method: &str, score: u8) -> RatingRecord {
    RatingRecord {
        rater_id: rater.into(),
        session_id: format!("s-{rater}"),
        item_id: format!("{image}-{method}"),
        image_id: image.into(),
        method_id: method.into(),
        score,
        position: 0,
        presented_at: 0,
    }
}

#[test]
fn mos_prints_three_decimal_means() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("r.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for r in [
        record("a", "i1", "mA", 5),
        record("b", "i1", "mA", 5),
        record("c", "i1", "mA", 4),
        record("a", "i1", "mB", 3),
        record("b", "i1", "mB", 3),
    ] {
        writeln!(f, "{}", serde_json::to_string(&r).unwrap()).unwrap();
    }
    let r = ssr(&["mos", "--ratings", s(&path)]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    let m = &r.json["methods"];
    assert_eq!(m[0]["method_id"], "mA");
    assert_eq!(m[0]["mean"].as_f64(), Some(4.667));
    assert_eq!(m[0]["std"].as_f64(), Some(0.577));
    assert_eq!(m[1]["mean"].as_f64(), Some(3.0));
    assert_eq!(m[1]["std"].as_f64(), Some(0.0));
    assert!(r.stdout.contains("4.667"));
}

#[test]
fn export_study_from_a_split() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    png_dir(&src, 6, 32, 2);
    let split = tmp.path().join("split");
    let r = ssr(&["split", "--src", s(&src), "--out", s(&split), "--paired", "2", "--test", "3", "--hr-size", "32"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    let methods = checkpoints(tmp.path(), 2);
    let spec = |i: usize| format!("{}={}", methods[i].name, methods[i].checkpoint.display());
    let out = tmp.path().join("bundle");
    let r = ssr(&["export-study", "--ckpt", &spec(0), "--ckpt", &spec(1), "--manifest", s(&split), "--out", s(&out), "--seed", "3"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!((r.json["n_items"].as_u64(), r.json["n_references"].as_u64()), (Some(6), Some(3)));

    let missing = tmp.path().join("gone.safetensors");
    let r = ssr(&["export-study", "--ckpt", s(&missing), "--manifest", s(&split), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["error"]["kind"], "not_found");
    assert!(r.json["error"]["message"].as_str().unwrap().contains("gone.safetensors"));
}
