use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use softsil::data::{gen_gaussian_mixture, write_dataset_dir, SyntheticSpec};
use softsil::kv::KeyValues;
use softsil::trainer::config::{parse_source, RunConfig};
use softsil::trainer::gradcheck::{run_gradcheck, Scope, DEFAULT_INSTANCES};
use softsil::trainer::objective::ObjectiveKind;
use softsil::trainer::plot::plot_metrics;
use softsil::trainer::report::{aggregate, load_summaries, report_csv, report_table};
use softsil::trainer::{evaluate_checkpoint, train};
use softsil::{Error, Result};

#[derive(Parser)]
#[command(
    name = "softsil",
    version,
    about = "Train and evaluate soft-silhouette metric-learning objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a data source.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `synthetic`, `cifar10:<dir>`, `csv:<path>`, or a config file.
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        probe_lr: f64,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a Gaussian-mixture dataset as train/val/test CSV files.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average test metrics over run directories or summary files.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Print CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Draw training curves from metrics CSV files.
    Plot {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every objective and seed combination as separate processes.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated objective tags.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "CE,CE+SIL,SupCon,SupCon2,CE+SIL+SupCon2,ProxyNCA,Center"
        )]
        objectives: Vec<ObjectiveKind>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Extra `key=value` overrides passed to every run.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file; absent keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    lambda_sil: Option<f64>,
    #[arg(long)]
    lambda_ce: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Any config key, e.g. `--set tau_s=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn read_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::default()),
        Some(p) => KeyValues::read(p).map_err(|e| match e {
            Error::Io { path, source } => Error::InvalidConfiguration(format!(
                "cannot read config {}: {source}",
                path.display()
            )),
            other => other,
        }),
    }
}

fn apply_overrides(kv: &mut KeyValues, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| {
            Error::InvalidConfiguration(format!("override {o:?} is not KEY=VALUE"))
        })?;
        kv.set(k.trim(), v.trim());
    }
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut kv = read_config(a.config.as_deref())?;
    apply_overrides(&mut kv, &a.overrides)?;
    if let Some(s) = a.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(o) = a.objective {
        kv.set("objective", o.tag());
    }
    if let Some(l) = a.lambda_sil {
        kv.set("lambda_sil", l.to_string());
    }
    if let Some(l) = a.lambda_ce {
        kv.set("lambda_ce", l.to_string());
    }
    if let Some(e) = a.epochs {
        kv.set("epochs", e.to_string());
    }
    if let Some(o) = &a.out {
        kv.set("out_dir", o.display().to_string());
    }
    if let Some(r) = &a.resume {
        kv.set("resume", r.display().to_string());
    }
    let cfg = RunConfig::from_kv(&kv)?;
    let s = train(&cfg)?;
    println!(
        "{} {} seed={} epochs={} test_top1={:.4} test_top{}={} silhouette={:.4} -> {}",
        s.objective,
        s.dataset,
        s.seed,
        s.epochs,
        s.test_top1,
        s.top5_k,
        s.test_top5.map_or("--".into(), |v| format!("{v:.4}")),
        s.test_silhouette,
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_eval(
    checkpoint: &Path,
    data: &str,
    seed: u64,
    probe_epochs: usize,
    probe_lr: f64,
) -> Result<()> {
    let as_path = Path::new(data);
    let kv = if as_path.is_file() && as_path.extension().is_none_or(|e| e != "csv") {
        read_config(Some(as_path))?
    } else {
        let mut kv = KeyValues::default();
        kv.set("dataset", data);
        kv
    };
    let source = parse_source(&kv)?;
    source.check_exists()?;
    let ds = source.load(seed)?;
    let m = evaluate_checkpoint(checkpoint, &ds, probe_epochs, probe_lr, seed)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn run_gradcheck_cmd(scope: Scope, instances: usize, seed: u64) -> Result<()> {
    let reports = run_gradcheck(scope, instances, seed);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::NumericalFailure(format!(
            "{failed} of {} gradient targets failed",
            reports.len()
        )));
    }
    println!(
        "all {} targets passed ({instances} instances each)",
        reports.len()
    );
    Ok(())
}

fn run_synth(spec: &Path, out: &Path) -> Result<()> {
    let spec = SyntheticSpec::read(spec)?;
    let ds = gen_gaussian_mixture(&spec)?;
    write_dataset_dir(out, &ds)?;
    println!(
        "{} rows, {} classes -> {}",
        ds.len(),
        ds.num_classes(),
        out.display()
    );
    Ok(())
}

fn dir_name(tag: &str) -> String {
    tag.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn run_sweep(
    config: Option<&Path>,
    objectives: &[ObjectiveKind],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
    overrides: &[String],
) -> Result<()> {
    // parse once up front so a bad config fails before anything is spawned
    let mut kv = read_config(config)?;
    apply_overrides(&mut kv, overrides)?;
    RunConfig::from_kv(&kv)?.validate()?;
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let runs: Vec<(ObjectiveKind, u64, PathBuf)> = objectives
        .iter()
        .flat_map(|&o| seeds.iter().map(move |&s| (o, s)))
        .map(|(o, s)| (o, s, out.join(dir_name(o.tag())).join(format!("seed{s}"))))
        .collect();
    let next = AtomicUsize::new(0);
    let worst = Mutex::new(0i32);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((o, s, dir)) = runs.get(i) else {
                    break;
                };
                let mut cmd = Command::new(&exe);
                cmd.arg("train");
                if let Some(c) = config {
                    cmd.arg("--config").arg(c);
                }
                for ov in overrides {
                    cmd.arg("--set").arg(ov);
                }
                cmd.args(["--objective", o.tag(), "--seed", &s.to_string(), "--out"])
                    .arg(dir)
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped());
                let code = match cmd.output() {
                    Ok(r) => {
                        print!("{}", String::from_utf8_lossy(&r.stdout));
                        eprint!("{}", String::from_utf8_lossy(&r.stderr));
                        r.status.code().unwrap_or(2)
                    }
                    Err(e) => {
                        eprintln!("cannot start run {} seed {s}: {e}", o.tag());
                        3
                    }
                };
                let mut w = worst.lock().expect("no panics while holding the lock");
                *w = (*w).max(code);
            });
        }
    });
    let code = worst.into_inner().expect("threads joined");
    if code != 0 {
        return Err(match code {
            1 => Error::InvalidConfiguration("a sweep run rejected its configuration".into()),
            2 => Error::NumericalFailure("a sweep run failed numerically".into()),
            _ => Error::NoData("a sweep run hit a data error".into()),
        });
    }
    print!(
        "{}",
        report_table(&aggregate(&load_summaries(&[out.to_path_buf()])?)?)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(a) => run_train(&a),
        Cmd::Eval {
            checkpoint,
            data,
            seed,
            probe_epochs,
            probe_lr,
        } => run_eval(&checkpoint, &data, seed, probe_epochs, probe_lr),
        Cmd::Gradcheck {
            scope,
            instances,
            seed,
        } => run_gradcheck_cmd(scope, instances, seed),
        Cmd::Synth { spec, out } => run_synth(&spec, &out),
        Cmd::Report { runs, csv } => {
            let rows = aggregate(&load_summaries(&runs)?)?;
            print!(
                "{}",
                if csv {
                    report_csv(&rows)
                } else {
                    report_table(&rows)
                }
            );
            Ok(())
        }
        Cmd::Plot { csvs, out } => {
            for p in plot_metrics(&csvs, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Cmd::Sweep {
            config,
            objectives,
            seeds,
            out,
            jobs,
            overrides,
        } => run_sweep(
            config.as_deref(),
            &objectives,
            &seeds,
            &out,
            jobs,
            &overrides,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
