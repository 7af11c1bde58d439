//! Black-box checks of the command-line interface.

use std::path::Path;
use std::process::Command;

fn gap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gap"))
}

fn data_args(cmd: &mut Command) -> &mut Command {
    cmd.args([
        "--classes", "3",
        "--per-class", "20",
        "--image-shape", "1x8x8",
        "--noise", "0.2",
        "--amplitude", "0.5",
        "--data-seed", "900",
    ])
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();

    let out = data_args(gap().args([
        "train", "--seed", "11", "--arch", "MiniCNN", "--epochs", "2",
        "--batch-size", "16", "--out", &p("base.gapw"),
        "--log", &p("train.csv"),
    ]))
    .output()
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&p("base.gapw")).exists());
    assert!(std::fs::read_to_string(p("train.csv")).unwrap().starts_with("epoch,split,loss"));

    let out = data_args(gap().args([
        "attack", "--model", &p("base.gapw"), "--seed", "11", "--samples", "16",
        "--out", &p("adv.gapw"),
    ]))
    .output()
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = data_args(gap().args([
        "prune", "--model", &p("base.gapw"), "--method", "gap", "--scope", "global",
        "--compression", "2", "--seed", "11", "--score-samples", "16", "--score-batch", "8",
        "--out", &p("pruned.gapw"), "--mask-out", &p("masks.gapw"), "--hist-out", &p("hist.csv"),
    ]))
    .output()
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layer conv1.weight"), "{stdout}");
    assert!(std::fs::read_to_string(p("hist.csv")).unwrap().starts_with("bin_lo,bin_hi,count"));

    let out = data_args(gap().args([
        "finetune", "--model", &p("pruned.gapw"), "--seed", "12", "--epochs", "1",
        "--batch-size", "16", "--out", &p("ft.gapw"),
    ]))
    .output()
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = gap()
        .args(["quantize", "--model", &p("ft.gapw"), "--out", &p("ft_q8.gapw")])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = data_args(gap().args([
        "eval", "--model", &p("ft.gapw"), "--seed", "13", "--split", "test",
        "--adv", &p("adv.gapw"),
    ]))
    .output()
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("clean_acc="), "{text}");
    assert!(text.contains("transfer_acc="), "{text}");

    let out = gap()
        .args(["hist", "--model", &p("ft.gapw"), "--bins", "8", "--out", &p("hist2.csv")])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn sweep_writes_default_config_and_runs_tiny_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("desk.toml");
    let out = gap()
        .args([
            "sweep",
            "--write-default",
            cfg_path.to_str().unwrap(),
            "--seed",
            "3",
            "--out-dir",
            dir.path().join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    assert!(text.contains("[attack]"));

    // shrink the default config into a seconds-scale matrix
    let text = text
        .replace("trials = 3", "trials = 1")
        .replace("per_class_train = 200", "per_class_train = 12")
        .replace("per_class_test = 400", "per_class_test = 6")
        .replace("epochs = 40", "epochs = 1")
        .replace("epochs = 15", "epochs = 1")
        .replace("eval_sample_size = 512", "eval_sample_size = 8")
        .replace("score_sample_size = 1024", "score_sample_size = 8")
        .replace("steps = 10", "steps = 2");
    let mut lines: Vec<&str> = text.lines().collect();
    // keep only one (method, scope) pair and one compression
    let text = {
        let start = lines.iter().position(|l| l.starts_with("pairs =")).unwrap();
        let end = lines.iter().position(|l| l.starts_with("compressions =")).unwrap();
        lines.splice(start..end, ["pairs = [[\"magnitude\", \"global\"]]"]);
        let cstart = lines.iter().position(|l| l.starts_with("compressions =")).unwrap();
        let cend = cstart + lines[cstart..].iter().position(|l| l.ends_with(']')).unwrap() + 1;
        lines.splice(cstart..cend, ["compressions = [2.0]"]);
        lines.join("\n")
    };
    std::fs::write(&cfg_path, text).unwrap();

    let out = gap()
        .args(["sweep", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 12); // header + (1 cell + baseline) x 3 metrics x 2
}

#[test]
fn missing_model_file_fails_cleanly() {
    let out = gap()
        .args(["quantize", "--model", "/nonexistent/model.gapw", "--out", "/tmp/x.gapw"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
