use std::path::Path;
use std::process::{Command, Output};

fn softsil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softsil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    let text = format!(
        "# tiny synthetic run\n\
         dataset = synthetic\n\
         synth.classes = 4\n\
         synth.dim = 6\n\
         synth.per_class = 20\n\
         encoder = 16,8\n\
         head = 8\n\
         batch_p = 4\n\
         batch_k = 4\n\
         epochs = 2\n\
         probe_epochs = 3\n\
         {extra}\n"
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn train_eval_report_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let o = softsil(&[
        "train",
        "--config",
        &cfg,
        "--objective",
        "ce+sil",
        "--seed",
        "3",
        "--out",
        &run_s,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "timing.csv",
        "summary.json",
        "checkpoint.bin",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["objective"], "CE+SIL");
    assert_eq!(summary["seed"], 3);

    // eval with the same data reproduces the stored test metrics
    let ckpt = run.join("checkpoint.bin").display().to_string();
    let o = softsil(&["eval", "--checkpoint", &ckpt, "--data", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(m["top1"], summary["test_top1"]);

    let o = softsil(&["report", &run_s, "--csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.starts_with("objective,runs,datasets,top1,top5\nCE+SIL,1,1,"),
        "{text}"
    );

    let plots = dir.path().join("plots");
    let metrics = run.join("metrics.csv").display().to_string();
    let o = softsil(&["plot", &metrics, "--out", &plots.display().to_string()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(plots.join("curves_synthetic.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 0.1");
    let o = softsil(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn bad_flags_and_missing_config_exit_1() {
    assert_eq!(
        softsil(&["train", "--objective", "triplet"]).status.code(),
        Some(1)
    );
    assert_eq!(
        softsil(&["train", "--config", "/no/such/file.cfg"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        softsil(&["train", "--set", "epochs"]).status.code(),
        Some(1)
    );
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr = 1e300");
    let out = dir.path().join("run").display().to_string();
    let o = softsil(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(dir.path().join("run/failure.json").exists());
}

#[test]
fn malformed_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(&data, "0,0.5,0.5\n1,oops,0.1\n").unwrap();
    let cfg = write_config(dir.path(), &format!("dataset = csv:{}", data.display()));
    let o = softsil(&["train", "--config", &cfg, "--set", "out_dir="]);
    assert_eq!(o.status.code(), Some(1), "empty out_dir is a config error");
    let out = dir.path().join("run").display().to_string();
    let o = softsil(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn synth_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    std::fs::write(&spec, "classes = 3\ndim = 4\nper_class = 20\nseed = 5\n").unwrap();
    let out = dir.path().join("data");
    let o = softsil(&[
        "synth",
        "--spec",
        &spec.display().to_string(),
        "--out",
        &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: usize = ["train", "val", "test"]
        .iter()
        .map(|s| {
            std::fs::read_to_string(out.join(format!("{s}.csv")))
                .unwrap()
                .lines()
                .count()
        })
        .sum();
    assert_eq!(rows, 60);
}

#[test]
fn gradcheck_scope_runs_and_passes() {
    let o = softsil(&["gradcheck", "--scope", "baselines", "--instances", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("cross_entropy") && text.contains("proxy_nca"));
    assert!(!text.contains("sil_loss"));
}

#[test]
fn sweep_runs_each_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1");
    let out = dir.path().join("sweep");
    let o = softsil(&[
        "sweep",
        "--config",
        &cfg,
        "--objectives",
        "CE,SupCon",
        "--seeds",
        "0,1",
        "--jobs",
        "2",
        "--out",
        &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (tag, seed) in [("CE", 0), ("CE", 1), ("SupCon", 0), ("SupCon", 1)] {
        assert!(out
            .join(tag)
            .join(format!("seed{seed}"))
            .join("summary.json")
            .exists());
    }
    let text = stdout(&o);
    assert!(text.contains("CE ") && text.contains("SupCon"), "{text}");
}
