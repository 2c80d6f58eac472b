use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use layerprune::eval::{check_comparable, throughput_bench};
use layerprune_cli::config::{digest, ExperimentConfig, PruneMethod, RecoverMethod};
use layerprune_cli::pipeline::{read_report, write_comparison, ComparisonRow, Run};
use layerprune_cli::CliError;
use serde_json::json;

/// Learnable depth pruning experiments on a toy diffusion transformer.
#[derive(Parser, Debug)]
#[command(name = "layerprune", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "layerprune.toml")]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Print the resolved config and planned artifact paths, then exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Overrides {
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Step count of the stage being run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pruning method.
    #[arg(long, global = true, value_enum)]
    method: Option<PruneMethod>,
    /// N:M scheme, e.g. `1:2`.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Checkpoint to prune and distill from instead of the trained base.
    #[arg(long, global = true)]
    source: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the dense base model.
    TrainBase,
    /// Learn an N:M mask on the base model.
    PruneLearn,
    /// Prune with a baseline method (`--method`).
    PruneBaseline,
    /// Plain fine-tuning of a pruned model.
    Finetune,
    /// Distillation fine-tuning of a pruned model.
    Distill,
    /// Evaluate a recovered model, or compare existing reports.
    Eval {
        /// Recovery stage to evaluate; the configured one by default.
        #[arg(long, value_enum)]
        recover: Option<RecoverMethod>,
        /// Report files to compare instead of evaluating.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
    },
    /// Forward-pass throughput for the configured depths.
    Bench,
    /// Every method for every seed, as a pool of worker processes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "learnable,oracle,min-loss,sensitivity")]
        methods: Vec<PruneMethod>,
        /// Worker processes; the number of CPUs by default.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// One sweep cell: prune, recover and evaluate.
    #[command(hide = true)]
    SweepCell,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    let o = &cli.overrides;
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(m) = o.method {
        cfg.prune.method = m;
    }
    if let Some(s) = &o.scheme {
        cfg.prune.learn.scheme = s.clone();
    }
    if let Some(steps) = o.steps {
        match cli.command {
            Cmd::TrainBase => cfg.train.steps = steps,
            Cmd::PruneLearn => cfg.prune.learn.steps = Some(steps),
            Cmd::Finetune | Cmd::Distill => cfg.recover.train.steps = steps,
            _ => return Err(CliError::Config("--steps applies to train-base, prune-learn, finetune and distill".into())),
        }
    }
    match cli.command {
        Cmd::PruneLearn => cfg.prune.method = PruneMethod::Learnable,
        Cmd::PruneBaseline if o.method.is_none() => cfg.prune.method = PruneMethod::Oracle,
        Cmd::PruneBaseline if cfg.prune.method == PruneMethod::Learnable => {
            return Err(CliError::Config("prune.method: use prune-learn for the learnable method".into()));
        }
        Cmd::Finetune => cfg.recover.method = RecoverMethod::Finetune,
        Cmd::Distill => cfg.recover.method = RecoverMethod::Distill,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runs(cfg: &ExperimentConfig, source: &Option<PathBuf>) -> Vec<Run> {
    cfg.seeds.iter().map(|&s| Run { source: source.clone(), ..Run::new(cfg.clone(), s) }).collect()
}

fn sweep_key(cfg: &ExperimentConfig, methods: &[PruneMethod]) -> String {
    let names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
    digest(&json!({ "stage": "sweep", "config": cfg.hash(), "methods": names }))
}

fn planned(cli: &Cli, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let (m, r) = (cfg.prune.method, cfg.recover.method);
    let mut paths = Vec::new();
    for run in runs(cfg, &cli.overrides.source) {
        match &cli.command {
            Cmd::TrainBase => paths.push(run.base_checkpoint()),
            Cmd::PruneLearn | Cmd::PruneBaseline => paths.push(run.prune_dir(m)?.join("decision.json")),
            Cmd::Finetune | Cmd::Distill => paths.push(run.recover_dir(m, r)?.join("checkpoint.tfck")),
            Cmd::Eval { recover, .. } => paths.push(run.eval_dir(m, recover.unwrap_or(r))?.join("report.json")),
            Cmd::SweepCell => paths.push(run.eval_dir(m, r)?.join("report.json")),
            Cmd::Bench | Cmd::Sweep { .. } => {}
        }
    }
    match &cli.command {
        Cmd::Bench => paths.push(cfg.output_dir.join("bench").join(&cfg.hash()[..]).join("bench.json")),
        Cmd::Sweep { methods, .. } => {
            paths.push(cfg.output_dir.join("sweep").join(sweep_key(cfg, methods)).join("comparison.csv"))
        }
        _ => {}
    }
    Ok(paths)
}

fn spawn_cell(cli: &Cli, cfg: &ExperimentConfig, args: &[String]) -> Result<std::process::Child, CliError> {
    let exe = std::env::current_exe()?;
    let mut cmd = Command::new(exe);
    cmd.arg("--config").arg(&cli.config).arg("--out").arg(&cfg.output_dir);
    if let Some(s) = &cli.overrides.scheme {
        cmd.arg("--scheme").arg(s);
    }
    if let Some(s) = &cli.overrides.source {
        cmd.arg("--source").arg(s);
    }
    // artifact paths of cells are progress, not the sweep's result
    cmd.stdout(std::io::stderr());
    Ok(cmd.args(args).spawn()?)
}

/// Runs child processes with at most `jobs` alive at once.
fn run_pool(cli: &Cli, cfg: &ExperimentConfig, cells: Vec<Vec<String>>, jobs: usize) -> Result<(), CliError> {
    let mut queue: VecDeque<Vec<String>> = cells.into();
    let mut running: Vec<(Vec<String>, std::process::Child)> = Vec::new();
    let mut failed = Vec::new();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < jobs.max(1) {
            let Some(args) = queue.pop_front() else { break };
            let child = spawn_cell(cli, cfg, &args)?;
            running.push((args, child));
        }
        let mut i = 0;
        while i < running.len() {
            if let Some(status) = running[i].1.try_wait()? {
                let (args, _) = running.swap_remove(i);
                if !status.success() {
                    failed.push((args.join(" "), status.code().unwrap_or(1)));
                }
            } else {
                i += 1;
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    match failed.first() {
        None => Ok(()),
        Some((args, 2)) => Err(CliError::Other(format!("sweep cell `{args}` is missing a dependency"))),
        Some((args, code)) => Err(CliError::Other(format!("sweep cell `{args}` exited with {code}"))),
    }
}

fn sweep(cli: &Cli, cfg: &ExperimentConfig, methods: &[PruneMethod], jobs: Option<usize>) -> Result<PathBuf, CliError> {
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let seeds = cfg.seeds.clone();
    if cli.overrides.source.is_none() {
        let bases = seeds.iter().map(|s| vec!["--seed".into(), s.to_string(), "train-base".into()]).collect();
        run_pool(cli, cfg, bases, jobs)?;
    }
    let cells = methods
        .iter()
        .flat_map(|m| {
            seeds.iter().map(move |s| {
                vec!["--seed".into(), s.to_string(), "--method".into(), m.name().into(), "sweep-cell".into()]
            })
        })
        .collect();
    run_pool(cli, cfg, cells, jobs)?;

    let r = cfg.recover.method;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &m in methods {
        for run in runs(cfg, &cli.overrides.source) {
            let record = run.decision(m)?;
            let report = read_report(&run.eval_dir(m, r)?.join("report.json"))?;
            rows.push(ComparisonRow {
                method: m.name().into(),
                seed: run.seed,
                retained: record.decision.bitstring(),
                calibration_loss: record.calibration_loss,
                heldout_loss: report.heldout_loss,
                sliced_wasserstein: report.sliced_wasserstein,
            });
            reports.push(report);
        }
    }
    check_comparable(&reports)?;
    let key = sweep_key(cfg, methods);
    let dir = cfg.output_dir.join("sweep").join(&key);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("comparison.csv");
    write_comparison(&path, &key, &rows)?;
    for &m in methods {
        let losses: Vec<f64> = rows.iter().filter(|r| r.method == m.name()).map(|r| r.heldout_loss).collect();
        eprintln!("[sweep] {:<12} mean held-out {:.5}", m.name(), losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(path)
}

fn compare(cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<PathBuf, CliError> {
    let reports = files.iter().map(|f| read_report(f)).collect::<Result<Vec<_>, _>>()?;
    check_comparable(&reports)?;
    let key = digest(&json!(reports.iter().map(|r| &r.config_hash).collect::<Vec<_>>()));
    let dir = cfg.output_dir.join("compare").join(&key);
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    w.write_record(["model_id", "seed", "depth", "parameters", "heldout_loss", "sliced_wasserstein"])?;
    for r in &reports {
        w.write_record([
            r.model_id.clone(),
            r.seed.to_string(),
            r.depth.to_string(),
            r.parameter_count.to_string(),
            format!("{:e}", r.heldout_loss),
            format!("{:e}", r.sliced_wasserstein),
        ])?;
    }
    w.flush()?;
    Ok(dir.join("comparison.csv"))
}

/// Writes to stdout; a closed pipe (`| head`) ends the process quietly.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if cli.dry_run {
        let mut text = format!("# config_hash = {}\n{}\n# planned artifacts\n", cfg.hash(), cfg.to_toml());
        for p in planned(cli, &cfg)? {
            text += &format!("# {}\n", p.display());
        }
        emit(&text);
        return Ok(());
    }
    let (m, r) = (cfg.prune.method, cfg.recover.method);
    let show = |p: &Path| emit(&format!("{}\n", p.display()));
    match &cli.command {
        Cmd::Sweep { methods, jobs } => show(&sweep(cli, &cfg, methods, *jobs)?),
        Cmd::Eval { compare: files, .. } if !files.is_empty() => show(&compare(&cfg, files)?),
        Cmd::Bench => {
            let report = throughput_bench(&cfg.bench)?;
            let dir = cfg.output_dir.join("bench").join(cfg.hash());
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("bench.json");
            std::fs::write(&path, serde_json::to_string_pretty(&json!({ "config_hash": cfg.hash(), "report": report }))?)?;
            for row in &report.rows {
                eprintln!("[bench] depth {:>3}  {:>10.2} it/s  speedup {:.3}", row.depth, row.its, row.speedup);
            }
            show(&path);
        }
        cmd => {
            for run in runs(&cfg, &cli.overrides.source) {
                let path = match cmd {
                    Cmd::TrainBase => run.train_base()?,
                    Cmd::PruneLearn | Cmd::PruneBaseline => run.prune(m)?,
                    Cmd::Finetune | Cmd::Distill => run.recover(m, r)?,
                    Cmd::Eval { recover, .. } => run.eval(m, recover.unwrap_or(r))?,
                    Cmd::SweepCell => {
                        run.prune(m)?;
                        run.recover(m, r)?;
                        run.eval(m, r)?
                    }
                    Cmd::Bench | Cmd::Sweep { .. } => unreachable!(),
                };
                show(&path);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
