//! Command-line interface.

use std::path::{Path, PathBuf};

use ablb_core::dataset::{gen_synthetic, positive_set, TaskSpec};
use ablb_core::eval::{histogram, nas_confidence, shift_ratios, EvalRecord, MetricsReport, ECE_BINS};
use ablb_core::nas::nas_table_csv;
use ablb_core::tuner::{summarize, Tau, TuneMode};
use ablb_core::BinarySample;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{load_config, parse_task, RunConfig, SEED_ENV};
use crate::error::{AppError, AppResult};
use crate::io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::pipeline::{self, HeadsFile};

#[derive(Debug, Parser)]
#[command(name = "ablb", version, about = "Negative-attention probing and head-wise debiasing for a toy yes/no transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; the ABLB_SEED environment variable overrides it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    /// Seeded mix of positive and negative samples.
    Mixed,
    /// Every question under every template, positively labelled.
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic modular-addition verification dataset (JSONL).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Task name, `add-mod<m>`; defaults to the configured modulus.
        #[arg(long)]
        task: Option<String>,
        /// Template selection (see the config's task.templates).
        #[arg(long)]
        templates: Option<String>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        yes_ratio: f64,
        #[arg(long, value_enum, default_value_t = Kind::Mixed)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        /// Also write the short-answer records (JSONL).
        #[arg(long)]
        qa_out: Option<PathBuf>,
    },
    /// Train a fresh model on data.train until the dev balanced-accuracy target.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides data.train.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Overrides data.dev.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Continue training on a skewed set until the dev precision-recall gap target.
    BiasInject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Overrides bias.yes_ratio.
        #[arg(long)]
        yes_ratio: Option<f64>,
        /// Overrides data.dev.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Select negative attention heads and split the probing set into TP/FN.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Positive-only probing samples (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Per-sample top-k; clipped to the head count.
        #[arg(long)]
        k: Option<usize>,
        /// Heads kept; clipped to the head count.
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Write the false-negative samples (the tuning data) here.
        #[arg(long)]
        fn_out: Option<PathBuf>,
        /// Per-head NAS table (CSV).
        #[arg(long)]
        nas_table: Option<PathBuf>,
    },
    /// Tune the selected heads' query/key projections.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// heads.json written by `probe`.
        #[arg(long)]
        heads: PathBuf,
        /// False-negative samples (JSONL), split into tuning and validation sets.
        #[arg(long)]
        train: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        rho: Option<f64>,
        /// `auto` (from heads.json) or a number.
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<Tau>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// nasa, freeze-key or random-heads.
        #[arg(long)]
        mode: Option<TuneMode>,
        /// Heads drawn in random-heads mode; defaults to the selected count.
        #[arg(long)]
        budget: Option<usize>,
        /// Seed for the random head draw; defaults to the run seed.
        #[arg(long)]
        head_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Tuning log (JSON).
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a model on a labelled set and write a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics report (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Per-sample records (JSONL); overrides reports.records.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Confidence histogram (CSV); overrides reports.histogram.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Records of an earlier model on the same data, for the shift table.
        #[arg(long, requires = "shift")]
        baseline: Option<PathBuf>,
        /// FN->TP / TN->FP shift table (CSV).
        #[arg(long, requires = "baseline")]
        shift: Option<PathBuf>,
        /// Model NAS vs negative confidence correlations (JSON).
        #[arg(long)]
        correlation: Option<PathBuf>,
    },
    /// Re-emit a metrics report as JSON or CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(common: &Common, env_seed: Option<&str>) -> AppResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(common.seed, env_seed)?;
    Ok(cfg)
}

fn samples(path: &Path) -> AppResult<Vec<BinarySample>> {
    let xs: Vec<BinarySample> = read_jsonl(path)?;
    for s in &xs {
        s.validate()?;
    }
    Ok(xs)
}

fn flag_or(flag: &Option<PathBuf>, cfg: &RunConfig, key: &str, value: &Option<String>) -> AppResult<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => cfg.require(key, value),
    }
}

/// Report text in the requested format.
pub fn render_report(report: &MetricsReport, format: Format) -> String {
    match format {
        Format::Json => crate::io::to_json(report),
        Format::Csv => report.to_csv(),
    }
}

pub fn write_report(report: &MetricsReport, path: &Path, format: Format) -> AppResult<()> {
    write_atomic(path, render_report(report, format).as_bytes())
}

fn run(cli: Cli, env_seed: Option<&str>) -> AppResult<()> {
    match cli.command {
        Command::GenData {
            common,
            task,
            templates,
            n,
            yes_ratio,
            kind,
            out,
            qa_out,
        } => {
            let mut cfg = config(&common, env_seed)?;
            if let Some(t) = task {
                cfg.task.modulus = parse_task(&t)?;
            }
            if let Some(t) = templates {
                cfg.task.templates = t;
            }
            cfg.validate()?;
            let spec: TaskSpec = cfg.task.spec()?;
            let (qa, xs) = match kind {
                Kind::Mixed => {
                    let data = gen_synthetic(&spec, n, yes_ratio, cfg.seed)?;
                    (data.qa, data.samples)
                }
                Kind::Probe => {
                    let qa = spec.records();
                    let xs = positive_set(&qa, &spec.templates, spec.max_seq_len)?;
                    (qa, xs)
                }
            };
            write_jsonl(&out, &xs)?;
            if let Some(p) = qa_out {
                write_jsonl(&p, &qa)?;
            }
            println!("gen-data: {} samples -> {}", xs.len(), out.display());
        }
        Command::Pretrain {
            common,
            train,
            dev,
            out,
            log,
        } => {
            let cfg = config(&common, env_seed)?;
            let train_set = samples(&flag_or(&train, &cfg, "data.train", &cfg.data.train)?)?;
            let dev_set = samples(&flag_or(&dev, &cfg, "data.dev", &cfg.data.dev)?)?;
            let (model, tlog) = pipeline::pretrain(&cfg, &train_set, &dev_set)?;
            checkpoint::save(&model, &out)?;
            if let Some(p) = log {
                write_json(&p, &tlog)?;
            }
            let last = tlog.epochs.last().expect("at least one epoch");
            println!(
                "pretrain: {} epochs, dev balanced accuracy {:.4}{}",
                last.epoch,
                last.balanced_accuracy,
                if tlog.reached_target { "" } else { " (target not reached)" }
            );
        }
        Command::BiasInject {
            common,
            model,
            yes_ratio,
            dev,
            out,
            log,
        } => {
            let mut cfg = config(&common, env_seed)?;
            if let Some(r) = yes_ratio {
                cfg.bias.yes_ratio = r;
            }
            cfg.validate()?;
            let dev_set = samples(&flag_or(&dev, &cfg, "data.dev", &cfg.data.dev)?)?;
            let mut m = checkpoint::load(&model)?;
            let tlog = pipeline::bias_inject(&mut m, &cfg, &dev_set)?;
            checkpoint::save(&m, &out)?;
            if let Some(p) = log {
                write_json(&p, &tlog)?;
            }
            let last = tlog.epochs.last().expect("at least one epoch");
            println!(
                "bias-inject: {} epochs, dev precision {:.4} recall {:.4}{}",
                last.epoch,
                last.precision,
                last.recall,
                if tlog.reached_target { "" } else { " (target not reached)" }
            );
        }
        Command::Probe {
            common,
            model,
            data,
            k,
            top_n,
            out,
            fn_out,
            nas_table,
        } => {
            let mut cfg = config(&common, env_seed)?;
            if let Some(k) = k {
                cfg.probe.k = k;
            }
            if let Some(n) = top_n {
                cfg.probe.top_n = n;
            }
            cfg.validate()?;
            let m = checkpoint::load(&model)?;
            let res = pipeline::probe(&m, &samples(&data)?, &cfg.probe)?;
            write_json(&out, &res.heads)?;
            if let Some(p) = fn_out {
                write_jsonl(&p, &res.fn_samples)?;
            }
            if let Some(p) = nas_table {
                write_atomic(&p, nas_table_csv(&res.heads.nas_table).as_bytes())?;
            }
            println!(
                "probe: {} heads selected, {} TP / {} FN",
                res.heads.probe.selected.len(),
                res.heads.tp.len(),
                res.heads.fn_.len()
            );
        }
        Command::Tune {
            common,
            model,
            heads,
            train,
            rho,
            tau,
            lr,
            batch,
            max_epochs,
            mode,
            budget,
            head_seed,
            out,
            log,
        } => {
            let mut cfg = config(&common, env_seed)?;
            let t = &mut cfg.tune;
            t.rho = rho.unwrap_or(t.rho);
            t.tau = tau.unwrap_or(t.tau);
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch.unwrap_or(t.batch_size);
            t.max_epochs = max_epochs.unwrap_or(t.max_epochs);
            t.mode = mode.unwrap_or(t.mode);
            cfg.validate()?;
            let mut m = checkpoint::load(&model)?;
            let hf: HeadsFile = read_json(&heads)?;
            let tlog = pipeline::tune(
                &mut m,
                &hf,
                &samples(&train)?,
                &cfg.tune,
                budget,
                head_seed.unwrap_or(cfg.seed),
            )?;
            checkpoint::save(&m, &out)?;
            write_json(&log, &tlog)?;
            print!("{}", summarize(&tlog));
        }
        Command::Eval {
            common,
            model,
            data,
            report,
            records,
            histogram: hist,
            baseline,
            shift,
            correlation,
        } => {
            let cfg = config(&common, env_seed)?;
            let m = checkpoint::load(&model)?;
            let xs = samples(&data)?;
            let (rep, recs) = pipeline::eval(&m, &xs)?;
            write_report(&rep, &report, Format::Json)?;
            let resolve = |flag: Option<PathBuf>, value: &Option<String>| flag.or_else(|| value.as_deref().map(|v| cfg.resolve(v)));
            if let Some(p) = resolve(records, &cfg.reports.records) {
                write_jsonl(&p, &recs)?;
            }
            if let Some(p) = resolve(hist, &cfg.reports.histogram) {
                write_atomic(&p, histogram(&recs, ECE_BINS)?.to_csv().as_bytes())?;
            }
            if let (Some(b), Some(s)) = (baseline, shift) {
                let before: Vec<EvalRecord> = read_jsonl(&b)?;
                write_atomic(&s, shift_ratios(&before, &recs)?.to_csv().as_bytes())?;
            }
            if let Some(p) = correlation {
                write_json(&p, &nas_confidence(&m, &xs)?)?;
            }
            println!(
                "eval: precision {:.4} recall {:.4} f1 {:.4} ece {:.4}",
                rep.precision, rep.recall, rep.f1, rep.ece
            );
        }
        Command::Report { input, format, out } => {
            let rep: MetricsReport = read_json(&input)?;
            match out {
                Some(p) => write_report(&rep, &p, format)?,
                None => print!("{}", render_report(&rep, format)),
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command, with the
/// `ABLB_SEED` value supplied by the caller.
pub fn run_with_env<I, S>(argv: I, env_seed: Option<&str>) -> AppResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => AppError::Usage(String::new()),
        _ => AppError::Usage(e.to_string()),
    });
    match cli {
        Ok(cli) => run(cli, env_seed),
        Err(e) => Err(e),
    }
}

/// Runs one command and returns the process exit code: 0 on success, 2 for
/// usage errors, 1 for everything else. Errors are printed as one line.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    if let Err(e) = Cli::try_parse_from(&argv) {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            print!("{e}");
            return 0;
        }
    }
    let env = std::env::var(SEED_ENV).ok();
    match run_with_env(argv, env.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
