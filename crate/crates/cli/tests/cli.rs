use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jeit_cli::RunConfig;
use tempfile::TempDir;

fn jeit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jeit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

/// The smoke config cut down to a few training steps, written into `dir`.
fn quick_config(dir: &Path) -> PathBuf {
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut cfg = RunConfig::load(&smoke).unwrap();
    cfg.out_dir = dir.join("out");
    cfg.train.steps = 6;
    cfg.train.eval_every = 3;
    cfg.adapt.steps = 4;
    cfg.adapt.eval_every = 2;
    cfg.lm.train.steps = 4;
    let path = dir.join("quick.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, &mut out);
    out
}

#[test]
fn malformed_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\n[train]\nstepz = 3\n").unwrap();
    let o = jeit(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    fs::write(&bad, "schema_version = 99\n").unwrap();
    assert_eq!(code(&jeit(&["gen-data", "--config", bad.to_str().unwrap()])), 2);

    let missing = tmp.path().join("absent.toml");
    assert_eq!(code(&jeit(&["gen-data", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn gen_data_is_reproducible_and_corruption_is_caught() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = jeit(&["gen-data", "--config", cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rel = |m: BTreeMap<PathBuf, Vec<u8>>, root: &Path| -> BTreeMap<PathBuf, Vec<u8>> {
        m.into_iter()
            .map(|(k, v)| (k.strip_prefix(root).unwrap().to_path_buf(), v))
            .filter(|(k, _)| k.file_name().is_some_and(|n| n != "config.toml"))
            .collect()
    };
    let (sa, sb) = (rel(snapshot(&a), &a), rel(snapshot(&b), &b));
    assert!(sa.len() > 3);
    assert_eq!(sa, sb);

    let victim = a.join("data/paired_train.txt");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    let o = jeit(&["train", "--config", cfg, "--out", a.to_str().unwrap(), "--mode", "base"]);
    assert_eq!(code(&o), 1);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("checksum"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn command_line_errors_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&jeit(&["gen-data", "--config", cfg])), 0);
    // ILMA has its own subcommand and needs an ILMT seed.
    assert_eq!(code(&jeit(&["train", "--config", cfg, "--mode", "ilma"])), 2);
    assert_eq!(code(&jeit(&["adapt", "--config", cfg, "--variant", "hat"])), 2);
    assert_ne!(code(&jeit(&["train", "--config", cfg, "--mode", "nonsense"])), 0);
    assert_eq!(code(&jeit(&["train", "--config", cfg, "--mode", "base"])), 0);
    // Fusion weight without an external LM on disk.
    let o = jeit(&[
        "decode",
        "--config",
        cfg,
        "--checkpoint",
        "mhat-base",
        "--lambda-lm",
        "0.3",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        code(&jeit(&[
            "decode",
            "--config",
            cfg,
            "--checkpoint",
            "mhat-base",
            "--beam",
            "0"
        ])),
        2
    );
}

#[test]
fn pipeline_by_hand_and_read_only_report() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = quick_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();
    let out = tmp.path().join("out");
    let ok = |args: &[&str]| {
        let o = jeit(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    ok(&["gen-data", "--config", cfg]);
    ok(&["train", "--config", cfg, "--mode", "ilmt", "--variant", "hat"]);
    ok(&["train", "--config", cfg, "--mode", "jeit"]);
    let adapted = ok(&["adapt", "--config", cfg, "--variant", "hat", "--kld-weight", "0"]);
    assert!(adapted.contains("step     0"), "{adapted}");
    let curve = fs::read_to_string(out.join("runs/hat-ilma-kld0/curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);

    // ILMA moved only the internal-LM parameters.
    let seed = jeit_cli::commands::load_checkpoint(&out.join("runs/hat-ilmt/last.ckpt")).unwrap();
    let adapted = jeit_cli::commands::load_checkpoint(&out.join("runs/hat-ilma-kld0/last.ckpt")).unwrap();
    let ilm = seed.ilm_parameter_names();
    let mut moved = 0;
    for ((_, a), (_, b)) in seed.params.iter().zip(adapted.params.iter()) {
        assert_eq!(a.name, b.name);
        if a.tensor != b.tensor {
            assert!(ilm.contains(&a.name), "{} moved", a.name);
            moved += 1;
        }
    }
    assert!(moved > 0);

    ok(&["train-lm", "--config", cfg]);
    let dir = ok(&[
        "decode",
        "--config",
        cfg,
        "--checkpoint",
        "mhat-jeit",
        "--lambda-lm",
        "0.3",
        "--lambda-ilm",
        "0.1",
    ]);
    let dir = PathBuf::from(dir.trim());
    assert!(
        dir.ends_with("runs/mhat-jeit/decode/lm0.3-ilm0.1-beam4"),
        "{}",
        dir.display()
    );
    let scored = ok(&[
        "score",
        "--config",
        cfg,
        "--decode-dir",
        dir.to_str().unwrap(),
        "--system",
        "x",
    ]);
    assert!(scored.contains("rare"));
    let swept = ok(&["sweep", "--config", cfg, "--checkpoint", "mhat-jeit"]);
    assert!(swept.starts_with("best λ_lm"), "{swept}");

    let before = snapshot(&out);
    let table = ok(&["report", "--config", cfg]);
    assert!(table.contains("| x |"), "{table}");
    let after = snapshot(&out);
    let report = out.join("report");
    let outside = |m: &BTreeMap<PathBuf, Vec<u8>>| -> Vec<(PathBuf, Vec<u8>)> {
        m.iter()
            .filter(|(k, _)| !k.starts_with(&report))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    assert_eq!(outside(&before), outside(&after));
    assert!(report.join("table.md").is_file());
    assert!(report.join("ilma_curves.svg").is_file());
    assert!(report.join("train_loss.svg").is_file());
}
