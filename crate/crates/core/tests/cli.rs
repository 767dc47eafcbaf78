use std::path::Path;
use std::process::{Command, Output};

fn tgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgd"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tgd(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--events",
        "300",
        "--per-community",
        "10",
        "--d-e",
        "4",
        "--out",
        s(&data),
    ]);
    data.join("events.csv")
}

#[test]
fn perturbation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    // stdout names the output paths, so compare only the summary and hashes
    let run = |out: &Path| {
        let stdout = ok(&[
            "perturb",
            "--input",
            s(&input),
            "--method",
            "structure",
            "--p",
            "0.3",
            "--seed",
            "4",
            "--out",
            s(out),
        ])
        .stdout;
        String::from_utf8(stdout)
            .unwrap()
            .lines()
            .map(|l| l.split("  ").next().unwrap().to_owned())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(&a), run(&b));
    for f in ["events.csv", "perturbation_log.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
}

#[test]
fn exit_codes() {
    assert_eq!(tgd(&["train"]).status.code(), Some(2));
    assert_eq!(
        tgd(&["perturb", "--input", "x", "--method", "bogus", "--p", "0.1", "--out", "y"])
            .status
            .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("o");
    assert_eq!(
        tgd(&[
            "perturb",
            "--input",
            s(&missing),
            "--method",
            "time",
            "--p",
            "0.1",
            "--out",
            s(&out)
        ])
        .status
        .code(),
        Some(3)
    );
    let input = synth(dir.path());
    let run = dir.path().join("run");
    let bad = tgd(&[
        "train",
        "--data",
        s(&input),
        "--set",
        "no_such_key=1",
        "--out",
        s(&run),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("grad.csv");
    ok(&["grad-check", "--seed", "7", "--out", s(&table)]);
    let text = std::fs::read_to_string(table).unwrap();
    assert!(text.lines().any(|l| l.starts_with("check,")));
    assert!(!text.contains("FAIL"));
}

#[test]
fn train_then_eval_reports_auc() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&input),
        "--set",
        "epochs=1",
        "--set",
        "d_emb=8",
        "--set",
        "d_time=4",
        "--set",
        "batch_size=50",
        "--out",
        s(&run),
    ]);
    for f in ["config.cfg", "checkpoint.ckpt", "last.ckpt", "losses.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    ok(&["eval", "--run", s(&run), "--data", s(&input)]);
    let text = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    let row = text
        .lines()
        .find(|l| l.contains(",test,auc,"))
        .expect("test auc row");
    let value: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&value));
}
