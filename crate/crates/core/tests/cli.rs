use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth": {
    "classes": ["sphere", "box"],
    "points_per_cloud": 256,
    "train_per_class": 2,
    "test_normal_per_class": 3,
    "test_anomalous_per_class": 3,
    "seed": 4
  },
  "train": { "epochs": 2, "batch_size": 2 }
}"#;

fn mc4ad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mc4ad"))
        .args(args)
        .env("MC4AD_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mc4ad(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "resolved_config.json" {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    assert!(ta.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(
        ta.iter().filter(|(p, _)| p.contains("/test/")).count(),
        2 * 6
    );
    assert!(a.join("resolved_config.json").exists());

    let c = dir.path().join("c");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--seed", "5"]);
    assert_ne!(ta, tree(&c));

    let ev = dir.path().join("oracle");
    ok(&[
        "evaluate", "--config", s(&cfg), "--data", s(&a), "--oracle", "--out", s(&ev),
    ]);
    let csv = read(&ev.join("metrics.csv"));
    let mean = csv.lines().find(|l| l.starts_with("mean,")).unwrap();
    let cols: Vec<&str> = mean.split(',').collect();
    for c in &cols[1..5] {
        assert_eq!(c.parse::<f64>().unwrap(), 1.0, "{mean}");
    }
    let json: serde_json::Value = serde_json::from_str(&read(&ev.join("metrics.json"))).unwrap();
    let ratio = json["pruned_to_full_parameter_ratio"].as_f64().unwrap();
    assert!((0.25..=0.45).contains(&ratio));
}

#[test]
fn train_evaluate_hqc_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);

    let full = dir.path().join("full");
    let pruned = dir.path().join("pruned");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&pruned), "--pruned",
    ]);
    let log = read(&full.join("train_log.csv"));
    assert!(log.starts_with("epoch,lr,L_dist,L_dir,L_sym,L_comb,wall_seconds\n"));
    assert_eq!(log.lines().count(), 3);
    let resolved: serde_json::Value =
        serde_json::from_str(&read(&pruned.join("resolved_config.json"))).unwrap();
    assert_eq!(resolved["network"]["variant"], "pruned");
    assert_eq!(resolved["train"]["lr_initial"], 0.0015);

    let full_ck = full.join("checkpoint.bin");
    let pruned_ck = pruned.join("checkpoint.bin");
    let ev = dir.path().join("eval");
    let out = ok(&[
        "evaluate", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&full_ck), "--out",
        s(&ev),
    ]);
    let csv = read(&ev.join("metrics.csv"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    assert!(csv.starts_with("category,o_auroc,p_auroc,o_aupr,p_aupr,n_samples,n_points,fps\n"));
    assert_eq!(csv.lines().count(), 4);

    let hq = dir.path().join("hqc");
    ok(&[
        "hqc",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--pruned-ckpt",
        s(&pruned_ck),
        "--full-ckpt",
        s(&full_ck),
        "--out",
        s(&hq),
    ]);
    let rows = read(&hq.join("hqc.csv"));
    let bypassed = rows.lines().filter(|l| l.contains(",bypassed_normal,")).count();
    let rescored = rows.lines().filter(|l| l.contains(",rescored,")).count();
    assert_eq!(bypassed, 3, "floor(0.25 * 12)");
    assert_eq!(bypassed + rescored, 12);
    let summary: serde_json::Value =
        serde_json::from_str(&read(&hq.join("hqc_summary.json"))).unwrap();
    assert_eq!(summary["bypass_count"], 3);

    let map = dir.path().join("map");
    let cloud = data.join("sphere/test/defect_000.xyz");
    ok(&[
        "export-map", "--checkpoint", s(&full_ck), "--cloud", s(&cloud), "--out", s(&map),
    ]);
    let ply = read(&map.join("defect_000_map.ply"));
    assert!(ply.contains("element vertex 256"));
    assert!(ply.contains("property uchar red"));
    let scores = read(&map.join("defect_000_scores.txt"));
    assert_eq!(scores.lines().count(), 256);
    assert!(scores.lines().all(|l| l.parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    // Usage error.
    assert_eq!(mc4ad(&["frobnicate"]).status.code(), Some(2));

    // Unknown config field.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let r = mc4ad(&["gen-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    // Invalid value.
    let bad = dir.path().join("bad2.json");
    std::fs::write(&bad, r#"{"synth": {"noise_variance": -1}}"#).unwrap();
    let r = mc4ad(&["gen-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    // Missing data directory.
    let missing = dir.path().join("nope");
    let r = mc4ad(&["evaluate", "--data", s(&missing), "--oracle", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));

    // Malformed cloud.
    let cloud = dir.path().join("broken.xyz");
    std::fs::write(&cloud, "0 0 0\n1 2\n").unwrap();
    let ck = dir.path().join("ck.bin");
    mc4ad::net::Network::build(&mc4ad::net::NetworkConfig::pruned(), 0)
        .unwrap()
        .to_checkpoint(0, 0, Default::default())
        .save(&ck)
        .unwrap();
    let r = mc4ad(&["export-map", "--checkpoint", s(&ck), "--cloud", s(&cloud), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("broken.xyz:2:"));
}
