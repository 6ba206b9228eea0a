use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mtcmtm::ablation::{run_ablation, AblationRow, AblationTask};
use mtcmtm::checkpoint::Checkpoint;
use mtcmtm::config::RunConfig;
use mtcmtm::data::{generate_synthetic, PairedDataset, SynthConfig, TableSchema};
use mtcmtm::encoders::{model_stats, registered_count, DownstreamModel};
use mtcmtm::gradsuite::run_suite;
use mtcmtm::metrics::Metrics;
use mtcmtm::train::{evaluate, finetune, load_downstream, pretrain, FinetuneOutcome, Init};
use mtcmtm::{Error, Precision, Scalar};

/// Multi-task contrastive masked tabular modeling.
#[derive(Parser)]
#[command(name = "mtcmtm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train a tabular encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a downstream model, optionally from a pre-training checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare fine-tuning from scratch with each pre-training strategy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Fraction of the training split to keep.
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Comma-separated rows: scratch, mtm_mask, mtm_feature, mmcl, mt_cmtm.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        /// Extra schema files over the same CSV, each run as another task.
        #[arg(long)]
        schema: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Config file whose [data] section describes the dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter and FLOP counts of the downstream model.
    Stats {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
    Suite(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => 1,
        Failure::Lib(e) if e.is_numeric() => 3,
        Failure::Lib(Error::Config(_) | Error::Invalid(_)) => 1,
        Failure::Lib(_) => 2,
        Failure::Suite(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Suite(m) => eprintln!("error: {m}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Synth { n, seed, out } => cmd_synth(n, seed, out),
        Command::Pretrain { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            dispatch!(cfg.run.precision, cmd_pretrain(&cfg, out.as_deref()))
        }
        Command::Finetune { config, from, out } => {
            let cfg = RunConfig::from_file(&config)?;
            dispatch!(cfg.run.precision, cmd_finetune(&cfg, from.as_deref(), out.as_deref()))
        }
        Command::Ablate {
            config,
            train_fraction,
            rows,
            schema,
            out,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(f) = train_fraction {
                cfg.data.train_fraction = f;
                cfg.validate()?;
            }
            let rows = match rows {
                Some(keys) => keys.iter().map(|k| AblationRow::parse(k)).collect::<Result<Vec<_>, _>>()?,
                None => AblationRow::ALL.to_vec(),
            };
            dispatch!(cfg.run.precision, cmd_ablate(&cfg, &rows, &schema, out.as_deref()))
        }
        Command::Eval { model, data, out } => {
            let cfg = RunConfig::from_file(&data)?;
            dispatch!(cfg.run.precision, cmd_eval(&model, &cfg, out.as_deref()))
        }
        Command::Stats { config } => cmd_stats(&RunConfig::from_file(&config)?),
        Command::Gradcheck { seed, repeats } => cmd_gradcheck(seed, repeats),
    }
}

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}
use dispatch;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Data(format!("{}: {e}", path.display())))
}

/// Creates `<out>/<run-id>` and echoes the resolved config into it.
fn run_dir(cfg: &RunConfig, command: &str, out: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = cfg.run.resolve_out_dir(out).join(cfg.run_id(command));
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| io_err(&path, e))?;
    Ok(dir)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Outcome {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Lib(Error::Data(e.to_string())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Lib(Error::Data(e.to_string())))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_synth(n: usize, seed: u64, out: Option<PathBuf>) -> Outcome {
    let out = out.unwrap_or_else(|| {
        mtcmtm::config::RunSettings::default()
            .resolve_out_dir(None)
            .join(format!("synth-n{n}-seed{seed}"))
    });
    let summary = generate_synthetic(n, seed, &SynthConfig::default(), &out)?;
    println!(
        "wrote {} rows ({} missing cells) to {}",
        summary.rows,
        summary.missing_cells,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain<T: Scalar>(cfg: &RunConfig, out: Option<&Path>) -> Outcome {
    let data = PairedDataset::build(&cfg.data, None)?;
    let dir = run_dir(cfg, "pretrain", out)?;
    for &seed in &cfg.run.seeds {
        let outcome = pretrain::<T>(cfg, &data, seed)?;
        outcome.checkpoint.save(&dir.join(format!("pretrain-seed{seed}.ckpt")))?;
        write_csv(&dir.join(format!("pretrain-seed{seed}-log.csv")), &outcome.log)?;
        if let Some(last) = outcome.log.last() {
            println!("seed {seed}: final loss {:.6}", last.loss);
        }
    }
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    seed: u64,
    split: &'static str,
    best_epoch: usize,
    mse: Option<f64>,
    mae: Option<f64>,
    accuracy: Option<f64>,
    balanced_accuracy: Option<f64>,
    macro_f1: Option<f64>,
}

fn metric_row(seed: u64, split: &'static str, best_epoch: usize, m: &Metrics) -> MetricRow {
    let mut row = MetricRow {
        seed,
        split,
        best_epoch,
        mse: None,
        mae: None,
        accuracy: None,
        balanced_accuracy: None,
        macro_f1: None,
    };
    match *m {
        Metrics::Regression { mae, mse } => {
            row.mse = Some(mse);
            row.mae = Some(mae);
        }
        Metrics::Classification {
            accuracy,
            balanced_accuracy,
            macro_f1,
        } => {
            row.accuracy = Some(accuracy);
            row.balanced_accuracy = Some(balanced_accuracy);
            row.macro_f1 = Some(macro_f1);
        }
    }
    row
}

fn cmd_finetune<T: Scalar>(cfg: &RunConfig, from: Option<&Path>, out: Option<&Path>) -> Outcome {
    let data = PairedDataset::build(&cfg.data, None)?;
    let ck = from.map(Checkpoint::load).transpose()?;
    let dir = run_dir(cfg, "finetune", out)?;
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        let init = ck.as_ref().map_or(Init::Fresh, Init::Pretrained);
        let outcome: FinetuneOutcome<T> = finetune(cfg, init, &data, seed)?;
        outcome.checkpoint(cfg, seed).save(&dir.join(format!("model-seed{seed}.ckpt")))?;
        println!("seed {seed}: test {:?}", outcome.test);
        rows.push(metric_row(seed, "val", outcome.best_epoch, &outcome.val));
        rows.push(metric_row(seed, "test", outcome.best_epoch, &outcome.test));
    }
    write_csv(&dir.join("metrics.csv"), &rows)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_ablate<T: Scalar>(cfg: &RunConfig, rows: &[AblationRow], extra: &[PathBuf], out: Option<&Path>) -> Outcome {
    let mut configs = vec![cfg.data.clone()];
    for schema in extra {
        let mut d = cfg.data.clone();
        d.schema = schema.clone();
        configs.push(d);
    }
    let datasets = configs
        .iter()
        .map(|d| PairedDataset::build(d, None))
        .collect::<Result<Vec<_>, _>>()?;
    let tasks: Vec<AblationTask<'_>> = configs
        .iter()
        .zip(&datasets)
        .map(|(d, data)| AblationTask {
            name: d
                .schema
                .file_stem()
                .map_or_else(|| "task".into(), |s| s.to_string_lossy().into_owned()),
            data,
        })
        .collect();
    let dir = run_dir(cfg, "ablate", out)?;
    let report = run_ablation::<T>(cfg, &tasks, rows)?;
    report.write(&dir)?;
    print!("{}", report.to_table());
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval<T: Scalar>(model_path: &Path, cfg: &RunConfig, out: Option<&Path>) -> Outcome {
    let ck = Checkpoint::load(model_path)?;
    let (model, params): (DownstreamModel, _) = load_downstream::<T>(&ck)?;
    let data = PairedDataset::build(&cfg.data, None)?;
    if data.input_len() != model.cfg.input_len || data.task() != model.task() {
        return Err(Failure::Lib(Error::Data(format!(
            "model expects {} inputs and {:?}, dataset has {} inputs and {:?}",
            model.cfg.input_len,
            model.task(),
            data.input_len(),
            data.task()
        ))));
    }
    let (_, test) = data.eval_indices();
    let m = evaluate(&model, &params, &data, &test)?;
    let dir = run_dir(cfg, "eval", out)?;
    write_csv(&dir.join("eval.csv"), &[metric_row(ck.manifest.rng_state.seed, "test", 0, &m)])?;
    println!("{m:?}");
    Ok(())
}

fn cmd_stats(cfg: &RunConfig) -> Outcome {
    let task = TableSchema::from_file(&cfg.data.schema)?.task();
    let stats = model_stats(&cfg.model.tabular, task);
    let registered = registered_count(&DownstreamModel::new(&cfg.model.tabular, task)?.specs());
    println!("task: {task:?}");
    println!("param_count: {}", stats.param_count);
    println!("registered_params: {registered}");
    println!("flops_per_forward: {}", stats.flops_per_forward);
    if registered != stats.param_count {
        return Err(Failure::Suite(format!(
            "analytic count {} differs from registered count {registered}",
            stats.param_count
        )));
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, repeats: usize) -> Outcome {
    if repeats == 0 {
        return Err(Failure::Usage("--repeats must be >= 1".into()));
    }
    let report = run_suite(seed, repeats)?;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for r in &report.results {
        match worst.iter_mut().find(|(n, _)| *n == r.name) {
            Some((_, e)) => *e = e.max(r.max_rel_error),
            None => worst.push((r.name, r.max_rel_error)),
        }
    }
    for (name, err) in &worst {
        let flag = if *err < report.tolerance { "ok" } else { "FAIL" };
        println!("{name:<24} {err:.3e} {flag}");
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("{} checks passed (tolerance {:e})", report.results.len(), report.tolerance);
        Ok(())
    } else {
        Err(Failure::Suite(format!(
            "{} of {} checks exceeded {:e}",
            failures.len(),
            report.results.len(),
            report.tolerance
        )))
    }
}
