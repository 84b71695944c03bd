//! End-to-end runs of the `voidscan` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voidscan::imaging::{save_image, save_mask, BinaryMask};
use voidscan::synth::{synthesize_board, BoardSpec};

fn voidscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voidscan"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("run voidscan")
}

fn ok(args: &[&str]) -> Output {
    let o = voidscan(args);
    assert!(
        o.status.success(),
        "voidscan {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_board(dir: &Path, name: &str, spec: &BoardSpec) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let (img, _) = synthesize_board(spec).unwrap();
    let p = dir.join(name);
    save_image(&img, &p).unwrap();
    p
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn extract_balls_writes_crops_and_records() {
    let t = tempfile::tempdir().unwrap();
    let boards = t.path().join("boards");
    write_board(&boards, "b1.png", &BoardSpec::grid(4, 5, 100.0, 20.0));
    let out = t.path().join("crops");
    ok(&["extract-balls", "--board", s(&boards), "--out", s(&out)]);
    assert_eq!(pngs(&out), 20);
    let dets = lines(&out.join("board_b1_detections.jsonl"));
    assert_eq!(dets.len(), 20);
    assert!(dets.iter().all(|d| d["source"] == "detected"));
    assert!(out.join("effective_config.txt").is_file());

    // Identical rerun produces identical files.
    let again = t.path().join("crops2");
    ok(&["extract-balls", "--board", s(&boards), "--out", s(&again)]);
    for f in [
        "board_b1_detections.jsonl",
        "board_b1_ball_2_3.png",
        "effective_config.txt",
    ] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn occluded_ball_is_reported_as_refined() {
    let t = tempfile::tempdir().unwrap();
    let mut spec = BoardSpec::grid(4, 5, 80.0, 20.0);
    spec.occluded = vec![(1, 2)];
    spec.noise_sigma = 2.0;
    let board = write_board(t.path(), "occ.png", &spec);
    let out = t.path().join("crops");
    ok(&["extract-balls", "--board", s(&board), "--out", s(&out)]);
    let dets = lines(&out.join("board_occ_detections.jsonl"));
    assert_eq!(dets.len(), 20);
    let refined: Vec<_> = dets.iter().filter(|d| d["source"] == "refined").collect();
    assert_eq!(refined.len(), 1);
    assert!(refined[0]["pre_refinement"].is_array());
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = voidscan(&["extract-balls", "--board", s(&empty), "--out", s(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no boards found"));

    let o = voidscan(&[
        "--set",
        "synth.bogus=1",
        "extract-balls",
        "--board",
        s(&empty),
        "--out",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));

    let o = voidscan(&[
        "train",
        "--stage",
        "unet",
        "--manifest",
        s(&t.path().join("missing.jsonl")),
        "--out",
        "m",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn crops_dir(t: &Path) -> PathBuf {
    let board = write_board(t, "b.png", &BoardSpec::grid(3, 3, 80.0, 20.0));
    let out = t.join("crops");
    ok(&["extract-balls", "--board", s(&board), "--out", s(&out)]);
    out
}

#[test]
fn label_auto_and_manual() {
    let t = tempfile::tempdir().unwrap();
    let crops = crops_dir(t.path());
    let manifest = t.path().join("labels/labels.jsonl");
    ok(&["label", "--crops", s(&crops), "--out", s(&manifest)]);
    let rows = lines(&manifest);
    assert_eq!(rows.len(), 9);
    assert!(rows
        .iter()
        .all(|r| r["class"] == "non_void" && r["source"] == "auto_log"));

    let masks = t.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    for e in fs::read_dir(&crops).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "png") {
            save_mask(&BinaryMask::new(64, 64), masks.join(p.file_name().unwrap())).unwrap();
        }
    }
    let manual = t.path().join("manual.jsonl");
    ok(&["label", "--crops", s(&crops), "--masks", s(&masks), "--out", s(&manual)]);
    assert!(lines(&manual).iter().all(|r| r["source"] == "manual_mask"));

    save_mask(&BinaryMask::new(32, 32), masks.join("board_b_ball_1_1.png")).unwrap();
    let o = voidscan(&["label", "--crops", s(&crops), "--masks", s(&masks), "--out", s(&manual)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("board_b_ball_1_1.png"));
}

#[test]
fn synth_is_reproducible_and_warns_on_low_contrast() {
    let t = tempfile::tempdir().unwrap();
    let crops = crops_dir(t.path());
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "synth.I_max = 100\nsynth.master_seed = 42\n").unwrap();
    let (a, b) = (t.path().join("syn_a"), t.path().join("syn_b"));
    for out in [&a, &b] {
        ok(&["synth", "--crops", s(&crops), "--config", s(&cfg), "--out", s(out)]);
    }
    assert_eq!(lines(&a.join("manifest.jsonl")).len(), 100);
    assert_eq!((pngs(&a.join("images")), pngs(&a.join("masks"))), (100, 100));
    for f in ["manifest.jsonl", "images/syn_000050.png", "masks/syn_000099.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let o = ok(&[
        "synth",
        "--crops",
        s(&crops),
        "--config",
        s(&cfg),
        "--set",
        "synth.VI_min=4",
        "--set",
        "synth.I_max=5",
        "--out",
        s(&t.path().join("syn_c")),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("VI_min"));
}

#[test]
fn train_infer_evaluate_report() {
    let t = tempfile::tempdir().unwrap();
    let crops = crops_dir(t.path());
    let tiny = ["--set", "model.arch=tiny", "--set", "synth.master_seed=3"];
    let with = |extra: &[&str]| -> Vec<String> { tiny.iter().chain(extra).map(|x| x.to_string()).collect() };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let train_set = t.path().join("train");
    let test_set = t.path().join("test");
    run(with(&[
        "--set",
        "synth.I_max=24",
        "synth",
        "--crops",
        s(&crops),
        "--out",
        s(&train_set),
    ]));
    run(with(&[
        "--set",
        "synth.I_max=8",
        "--set",
        "synth.master_seed=9",
        "synth",
        "--crops",
        s(&crops),
        "--split",
        "test",
        "--out",
        s(&test_set),
    ]));

    let ckpt = t.path().join("models/unet.safetensors");
    let o = run(with(&[
        "--set",
        "unet.epochs=2",
        "--set",
        "unet.batch_size=8",
        "train",
        "--stage",
        "unet",
        "--manifest",
        s(&train_set.join("manifest.jsonl")),
        "--out",
        s(&ckpt),
    ]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("random weights"));
    assert!(ckpt.is_file() && ckpt.with_extension("json").is_file());

    let test_manifest = test_set.join("manifest.jsonl");
    let pred = t.path().join("pred");
    run(with(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--crops",
        s(&test_manifest),
        "--split",
        "test",
        "--out",
        s(&pred),
    ]));
    assert_eq!(lines(&pred.join("predictions.jsonl")).len(), 8);

    let mut evals = Vec::new();
    for name in [
        "Train_Real_Test_Real",
        "Train_Syn_Test_Real",
        "Train_Real_Syn_Test_Real",
    ] {
        let out = t.path().join(format!("eval_{name}"));
        run(with(&[
            "evaluate",
            "--pred",
            s(&pred),
            "--gt",
            s(&test_manifest),
            "--out",
            s(&out),
            "--name",
            name,
        ]));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
        for k in ["precision", "recall", "f1"] {
            assert!(v["region"][k].is_number() && v["pixel"][k].is_number(), "{k}");
        }
        evals.push(out.join("eval.json"));
    }
    let table = t.path().join("table.txt");
    let mut args = vec!["report".to_string()];
    for e in &evals {
        args.push("--eval".into());
        args.push(s(e).into());
    }
    args.extend(["--out".into(), s(&table).into()]);
    run(args);
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 4);
    for name in [
        "Train_Real_Test_Real",
        "Train_Syn_Test_Real",
        "Train_Real_Syn_Test_Real",
    ] {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{name} "))).count(), 1);
    }

    // Ground truth fed back as predictions scores perfectly.
    let self_eval = t.path().join("self");
    run(with(&[
        "evaluate",
        "--pred",
        s(&test_manifest),
        "--gt",
        s(&test_manifest),
        "--out",
        s(&self_eval),
    ]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(self_eval.join("eval.json")).unwrap()).unwrap();
    assert_eq!(v["region"]["f1"], 1.0);
}

#[test]
fn overlay_from_board_crops() {
    let t = tempfile::tempdir().unwrap();
    let board = write_board(t.path(), "b.png", &BoardSpec::grid(2, 2, 80.0, 20.0));
    let crops = t.path().join("crops");
    ok(&["extract-balls", "--board", s(&board), "--out", s(&crops)]);
    let cfg = voidscan::config::RunConfig {
        arch: voidscan::config::ArchPreset::Tiny,
        ..Default::default()
    };
    let net = voidscan::segnet::Network::unet(&cfg.architecture(), 1, None).unwrap();
    let ckpt = t.path().join("u.safetensors");
    voidscan::segnet::NetworkParams::untrained(net, 1).save(&ckpt).unwrap();
    let out = t.path().join("pred");
    ok(&[
        "--set",
        "model.arch=tiny",
        "infer",
        "--ckpt",
        s(&ckpt),
        "--crops",
        s(&crops),
        "--board",
        s(&board),
        "--out",
        s(&out),
    ]);
    let overlay = voidscan::imaging::load_image(out.join("overlay_b.png")).unwrap();
    let src = voidscan::imaging::load_image(&board).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (src.width(), src.height()));
    assert_ne!(overlay, src);
}
