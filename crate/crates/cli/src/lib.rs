//! Command-line front end for the `harmlab` library.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use harmlab::btrank::{bt_fit, write_scores_csv, PairwiseWins};
use harmlab::generator::{load_checkpoint, NormBlock, UNetConfig};
use harmlab::imaging::{read_pgm, read_ppm, write_ppm};
use harmlab::synthdata::{generate_dataset, load_dataset, write_dataset, GenConfig};
use harmlab::trainer::{evaluate, train, TrainConfig};
use harmlab::verify;

use config::{parse_shape, ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Worker-count override for data generation and evaluation.
pub const THREADS_ENV: &str = "HARMLAB_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "harmlab",
    version,
    about = "Region-aware image harmonization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        /// Index of the first sample.
        #[arg(long)]
        first: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        block: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        base_channels: Option<usize>,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Per-sample metrics CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the summary table here instead of standard output.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Harmonize one composite.
    Harmonize {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        comp: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        sem: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the gradient and invariant self-checks.
    Gradcheck {
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        instances: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit Bradley–Terry scores to `winner,loser,count` rows.
    BtRank {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let code = match e.downcast_ref::<ConfigError>() {
                Some(ConfigError::Usage(_)) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
            let _ = writeln!(err, "error: {e:#}");
            code
        }
    }
}

fn log_config(err: &mut dyn Write, cfg: &RunConfig, prefixes: &[&str]) {
    for line in cfg.resolved(prefixes) {
        let _ = writeln!(err, "# {line}");
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData {
            seed,
            count,
            out: dir,
            size,
            first,
            common,
        } => {
            let mut c = RunConfig::load(common.config.as_deref())?;
            c.flag("data.seed", seed);
            c.flag("data.count", count);
            c.flag("data.out", path_str(dir));
            c.flag("data.size", size);
            c.flag("data.first_index", first);
            log_config(err, &c, &["data."]);
            gen_data(&c, err)
        }
        Command::Train {
            data,
            val,
            block,
            steps,
            seed,
            lr,
            stages,
            base_channels,
            out: ckpt,
            loss_log,
            common,
        } => {
            let mut c = RunConfig::load(common.config.as_deref())?;
            c.flag("train.data", path_str(data));
            c.flag("train.val_data", path_str(val));
            c.flag("net.block", block);
            c.flag("train.steps", steps);
            c.flag("train.seed", seed);
            c.flag("train.lr", lr);
            c.flag("net.stages", stages);
            c.flag("net.base_channels", base_channels);
            c.flag("train.out", path_str(ckpt));
            c.flag("train.loss_log", path_str(loss_log));
            log_config(err, &c, &["net.", "train."]);
            run_train(&c, err)
        }
        Command::Eval {
            data,
            ckpt,
            report,
            summary,
            common,
        } => {
            let mut c = RunConfig::load(common.config.as_deref())?;
            c.flag("eval.data", path_str(data));
            c.flag("eval.ckpt", path_str(ckpt));
            c.flag("eval.report", path_str(report));
            c.flag("eval.summary", path_str(summary));
            log_config(err, &c, &["eval."]);
            run_eval(&c, out)
        }
        Command::Harmonize {
            ckpt,
            comp,
            mask,
            sem,
            out: dest,
            common,
        } => {
            let mut c = RunConfig::load(common.config.as_deref())?;
            c.flag("harmonize.ckpt", path_str(ckpt));
            c.flag("harmonize.comp", path_str(comp));
            c.flag("harmonize.mask", path_str(mask));
            c.flag("harmonize.sem", path_str(sem));
            c.flag("harmonize.out", path_str(dest));
            log_config(err, &c, &["harmonize."]);
            harmonize(&c)
        }
        Command::Gradcheck {
            tol,
            instances,
            common,
        } => {
            let mut c = RunConfig::load(common.config.as_deref())?;
            c.flag("gradcheck.tol", tol);
            c.flag("gradcheck.instances", instances);
            log_config(err, &c, &["gradcheck."]);
            gradcheck(&c, out)
        }
        Command::BtRank {
            pairs,
            tol,
            max_iter,
            common,
        } => {
            let mut c = RunConfig::load(common.config.as_deref())?;
            c.flag("bt.pairs", path_str(pairs));
            c.flag("bt.tol", tol);
            c.flag("bt.max_iter", max_iter);
            log_config(err, &c, &["bt."]);
            bt_rank(&c, out, err)
        }
    }
}

fn gen_config(c: &RunConfig) -> Result<GenConfig> {
    let shapes = c
        .list::<String>("data.shapes")?
        .iter()
        .map(|s| parse_shape(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ConfigError::Invalid)?;
    Ok(GenConfig {
        size: c.get("data.size")?,
        min_objects: c.get("data.min_objects")?,
        max_objects: c.get("data.max_objects")?,
        shapes,
        gain: c.range("data.gain")?,
        bias: c.range("data.bias")?,
        gamma: c.range("data.gamma")?,
        fg_ratio: c.range("data.fg_ratio")?,
        seed: c.get("data.seed")?,
    })
}

fn gen_data(c: &RunConfig, err: &mut dyn Write) -> Result<i32> {
    let cfg = gen_config(c)?;
    let dir = c.path("data.out")?;
    let count: u64 = c.get("data.count")?;
    let first: u64 = c.get("data.first_index")?;
    let samples = generate_dataset(&cfg, first, count as usize, threads())?;
    write_dataset(&samples, &dir)?;
    writeln!(err, "wrote {} samples to {}", samples.len(), dir.display())?;
    Ok(EXIT_OK)
}

fn run_train(c: &RunConfig, err: &mut dyn Write) -> Result<i32> {
    let data = c.path("train.data")?;
    let ckpt = c.path("train.out")?;
    let block: NormBlock = c.get("net.block")?;
    // the network size follows the data unless pinned
    let size = match c.opt::<usize>("net.size")? {
        Some(s) => s,
        None => first_sample_size(&data)?,
    };
    let network = UNetConfig {
        size,
        stages: c.get("net.stages")?,
        base_channels: c.get("net.base_channels")?,
        block,
        residual: c.get("net.residual")?,
    };
    let loss_log = match c.opt::<PathBuf>("train.loss_log")? {
        Some(p) => p,
        None => PathBuf::from(format!("{}.loss.csv", ckpt.display())),
    };
    let cfg = TrainConfig {
        train_data: data,
        val_data: c.opt("train.val_data")?,
        steps: c.get("train.steps")?,
        batch_size: c.get("train.batch_size")?,
        lr: c.get("train.lr")?,
        lr_decay: c.get("train.lr_decay")?,
        milestones: c.list("train.milestones")?,
        seed: c.get("train.seed")?,
        network,
        checkpoint: Some(ckpt.clone()),
        loss_log: Some(loss_log.clone()),
        bypass_bottleneck: false,
    };
    writeln!(
        err,
        "# network: {network} ({} parameters)",
        network.parameter_count()
    )?;
    let outcome = train(&cfg)?;
    for v in &outcome.validation {
        writeln!(
            err,
            "validation step {}: mse {:.4} psnr {:.3}",
            v.step, v.mse, v.psnr
        )?;
    }
    let degenerate = outcome.history.iter().filter(|r| r.degenerate).count();
    if degenerate > 0 {
        writeln!(err, "bottleneck block passed through on {degenerate} steps")?;
    }
    if let Some(last) = outcome.history.last() {
        writeln!(err, "final loss {} after {} steps", last.loss, last.step)?;
    }
    writeln!(
        err,
        "checkpoint {}, loss log {}",
        ckpt.display(),
        loss_log.display()
    )?;
    Ok(EXIT_OK)
}

fn first_sample_size(dir: &Path) -> Result<usize> {
    let samples = load_dataset(dir)?;
    let Some(s) = samples.first() else {
        bail!("dataset {} is empty", dir.display());
    };
    let (h, w) = s.size();
    if h != w {
        bail!(
            "sample {} is {h}×{w}; the network needs square images",
            s.id
        );
    }
    Ok(h)
}

fn run_eval(c: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let data = c.path("eval.data")?;
    let ckpt = c.path("eval.ckpt")?;
    let report_path = c.path("eval.report")?;
    let model =
        load_checkpoint(&ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let samples = load_dataset(&data)?;
    let report = evaluate(&model, &samples, threads())?;
    let file = fs::File::create(&report_path).with_context(|| report_path.display().to_string())?;
    let mut w = io::BufWriter::new(file);
    report.write_csv(&mut w)?;
    w.flush()?;
    let table = report.summary_table();
    match c.opt::<PathBuf>("eval.summary")? {
        Some(p) => fs::write(&p, table).with_context(|| p.display().to_string())?,
        None => out.write_all(table.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn harmonize(c: &RunConfig) -> Result<i32> {
    let ckpt = c.path("harmonize.ckpt")?;
    let model =
        load_checkpoint(&ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let comp = read_ppm(c.path("harmonize.comp")?)?;
    let mask = read_pgm(c.path("harmonize.mask")?)?;
    let sem = read_ppm(c.path("harmonize.sem")?)?;
    let h = model.harmonize(&comp, &mask, &sem)?;
    write_ppm(&h, c.path("harmonize.out")?)?;
    Ok(EXIT_OK)
}

fn gradcheck(c: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let tol: f64 = c.get("gradcheck.tol")?;
    let instances: usize = c.get("gradcheck.instances")?;
    let mut failed = 0;
    for r in verify::gradient_suite(tol)
        .into_iter()
        .chain(verify::invariant_suite(instances))
    {
        writeln!(out, "{r}")?;
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} checks failed");
    }
    Ok(EXIT_OK)
}

fn bt_rank(c: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let path = c.path("bt.pairs")?;
    let file = fs::File::open(&path).with_context(|| path.display().to_string())?;
    let data = PairwiseWins::from_csv(io::BufReader::new(file))
        .with_context(|| path.display().to_string())?;
    let fit = bt_fit(&data, c.get("bt.tol")?, c.get("bt.max_iter")?)?;
    for (label, &w) in data.labels().iter().zip(&fit.winless) {
        if w {
            writeln!(err, "warning: {label} never won; its score is 0")?;
        }
    }
    write_scores_csv(out, data.labels(), &fit.scores)?;
    Ok(EXIT_OK)
}
