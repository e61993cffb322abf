use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn npc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npc"))
        .current_dir(dir)
        .env("NPC_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = npc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON report on stdout")
}

fn train(dir: &Path) {
    ok_json(
        dir,
        &[
            "train-fixture",
            "--out",
            "m.npcm",
            "--dims",
            "2",
            "--classes",
            "3",
            "--seed",
            "5",
            "--epochs",
            "20",
        ],
    );
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d);
    for f in ["m.npcm", "m.train.npct", "m.test.npct"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let built = ok_json(
        d,
        &[
            "build-dg",
            "--model",
            "m.npcm",
            "--data",
            "m.train.npct",
            "--preset",
            "mnist-sadl1",
            "--clusters",
            "3",
            "--beta",
            "0.5",
            "--seed",
            "1",
            "--out",
            "g.npcg",
        ],
    );
    assert_eq!(built["graph"]["alpha"], 0.8);
    assert_eq!(built["clusters"].as_array().unwrap().len(), 9);

    for criterion in ["snpc", "anpc"] {
        let r = ok_json(
            d,
            &[
                "cover",
                "--model",
                "m.npcm",
                "--dg",
                "g.npcg",
                "--suite",
                "m.test.npct",
                "--criterion",
                criterion,
            ],
        );
        assert_eq!(r["criterion"], criterion);
        assert_eq!(r["m"], 200);
        let ratio = r["ratio"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ratio));
        let per_class: u64 = r["per_class"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["cells_covered"].as_u64().unwrap())
            .sum();
        assert_eq!(per_class, r["cells_covered"].as_u64().unwrap());
    }

    let m = ok_json(
        d,
        &[
            "mask-eval",
            "--model",
            "m.npcm",
            "--data",
            "m.test.npct",
            "--quintiles",
        ],
    );
    assert_eq!(m["quintile_inc"].as_array().unwrap().len(), 5);

    let t = ok_json(
        d,
        &[
            "tune",
            "--model",
            "m.npcm",
            "--data",
            "m.test.npct",
            "--alphas",
            "0.6,0.9",
            "--csv",
            "t.csv",
        ],
    );
    assert_eq!(t["alpha_rows"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(csv.starts_with("alpha,k,beta,width,inc_cdp,inc_ncdp"));

    for kind in ["nc", "kmnc", "nbc"] {
        let b = ok_json(
            d,
            &[
                "baseline",
                kind,
                "--model",
                "m.npcm",
                "--train",
                "m.train.npct",
                "--suite",
                "m.test.npct",
            ],
        );
        assert_eq!(b["criterion"], kind);
        assert_eq!(b["per_class"].as_array().unwrap().len(), 3);
    }

    let a = ok_json(
        d,
        &[
            "attack",
            "--model",
            "m.npcm",
            "--data",
            "m.test.npct",
            "--eps",
            "0.2",
            "--seed",
            "3",
            "--out",
            "adv.npct",
        ],
    );
    assert!(a["max_linf"].as_f64().unwrap() <= 0.2 + 1e-7);

    let i = ok_json(
        d,
        &[
            "impartiality",
            "--model",
            "m.npcm",
            "--suite",
            "m.test.npct",
            "adv.npct",
            "--dg",
            "g.npcg",
            "--criterion",
            "snpc",
        ],
    );
    assert_eq!(i["suites"].as_array().unwrap().len(), 2);

    let s = ok_json(d, &["similarity", "--model", "m.npcm", "--dg", "g.npcg"]);
    assert!(s["intra_cluster"].is_number());

    let e = ok_json(
        d,
        &[
            "sensitivity",
            "--model",
            "m.npcm",
            "--dg",
            "g.npcg",
            "--data",
            "m.test.npct",
            "--errors",
            "adv.npct",
            "--size",
            "100",
            "--repeats",
            "2",
            "--seed",
            "1",
        ],
    );
    assert_eq!(e["rows"].as_array().unwrap().len(), 10);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        train(dir);
        ok_json(
            dir,
            &[
                "build-dg",
                "--model",
                "m.npcm",
                "--data",
                "m.train.npct",
                "--alpha",
                "0.7",
                "--clusters",
                "2",
                "--beta",
                "0.5",
                "--seed",
                "9",
                "--out",
                "g.npcg",
            ],
        );
    }
    for f in ["m.npcm", "m.train.npct", "m.test.npct", "g.npcg"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = npc(
        dir.path(),
        &[
            "train-fixture",
            "--out",
            "m.npcm",
            "--classes",
            "1",
            "--seed",
            "0",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = npc(dir.path(), &["cover", "--model", "m.npcm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d);
    ok_json(
        d,
        &[
            "build-dg",
            "--model",
            "m.npcm",
            "--data",
            "m.train.npct",
            "--alpha",
            "0.7",
            "--clusters",
            "2",
            "--beta",
            "0.5",
            "--seed",
            "1",
            "--out",
            "g.npcg",
        ],
    );
    std::fs::rename(d.join("m.npcm"), d.join("first.npcm")).unwrap();
    ok_json(
        d,
        &[
            "train-fixture",
            "--out",
            "m.npcm",
            "--classes",
            "3",
            "--seed",
            "6",
            "--epochs",
            "5",
        ],
    );
    let out = npc(
        d,
        &[
            "cover",
            "--model",
            "m.npcm",
            "--dg",
            "g.npcg",
            "--suite",
            "m.test.npct",
            "--criterion",
            "snpc",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph was built for model"));

    let out = npc(
        d,
        &[
            "cover",
            "--model",
            "missing.npcm",
            "--dg",
            "g.npcg",
            "--suite",
            "m.test.npct",
            "--criterion",
            "snpc",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_npc"))
        .current_dir(dir.path())
        .env("NPC_THREADS", "zero")
        .args(["train-fixture", "--out", "m.npcm", "--seed", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
