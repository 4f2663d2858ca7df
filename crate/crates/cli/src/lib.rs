//! The `certcomp` command line: train, prune, quantize, certify and eval.

pub mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tracing::info;

use certcomp_core::bounds::certify_batch;
use certcomp_core::checkpoint::Checkpoint;
use certcomp_core::compress::{compute_mask, materialize, quantize_weights, Granularity};
use certcomp_core::data::{Dataset, Split};
use certcomp_core::eval::{evaluate, EvalReport};
use certcomp_core::train::{train_with, MetricsLog, TrainOptions, TrainState};
use certcomp_core::{Error, NetView, Network, Variant};

pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const IO: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Idx(_) | Error::Checkpoint(_) | Error::Dataset(_) => exit::IO,
        Error::Divergence { .. } => exit::DIVERGENCE,
        _ => exit::CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "certcomp", version, about = "Compression-aware certified training")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network; writes metrics.csv, epoch_NNN.ckpt and final.ckpt.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are done.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Prune a checkpoint; writes pruned.ckpt.
    Prune {
        checkpoint: PathBuf,
        /// Scope, structure and score, e.g. `lul1`, `gsl2`.
        #[arg(long, default_value = "lul1")]
        method: String,
        #[arg(long)]
        ratio: f64,
    },
    /// Quantize weights and biases; writes quantized.ckpt.
    Quantize {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// One scale per tensor instead of one per layer.
        #[arg(long)]
        per_tensor: bool,
    },
    /// Per-sample IBP verdicts on the test split; writes certify.csv.
    Certify {
        checkpoint: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Standard and certified accuracy per variant; writes eval.csv.
    Eval {
        checkpoint: PathBuf,
        /// Radius; repeatable. Defaults to the configured list.
        #[arg(long)]
        eps: Vec<f64>,
        /// Variant such as `none`, `lul1:0.7`, `gsl2:0.5`, `int8`; repeatable.
        #[arg(long)]
        variant: Vec<String>,
    },
}

impl Cli {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn run_config(&self) -> certcomp_core::Result<RunConfig> {
        let mut cfg = match &self.common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.common.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> certcomp_core::Result<()> {
    let cfg = cli.run_config()?;
    fs::create_dir_all(&cfg.out)?;
    match &cli.command {
        Command::Train { resume, stop_after } => cmd_train(&cfg, resume.as_deref(), *stop_after),
        Command::Prune {
            checkpoint,
            method,
            ratio,
        } => cmd_prune(&cfg, checkpoint, method, *ratio),
        Command::Quantize {
            checkpoint,
            bits,
            per_tensor,
        } => cmd_quantize(&cfg, checkpoint, *bits, *per_tensor),
        Command::Certify { checkpoint, eps } => cmd_certify(&cfg, checkpoint, *eps),
        Command::Eval {
            checkpoint,
            eps,
            variant,
        } => cmd_eval(&cfg, checkpoint, eps, variant),
    }
}

/// Load a checkpoint and check it against the configured dataset.
fn load_for(ds: &Dataset, path: &Path) -> certcomp_core::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.network.input_shape() != ds.input_shape.as_slice() || ck.network.classes() != ds.classes {
        return Err(Error::Config(format!(
            "{}: network expects input {:?} and {} classes, dataset `{}` has {:?} and {}",
            path.display(),
            ck.network.input_shape(),
            ck.network.classes(),
            ds.name,
            ds.input_shape,
            ds.classes
        )));
    }
    Ok(ck)
}

/// Keep the header and every row up to `iteration` of an existing log.
fn truncated_log(path: &Path, iteration: u64) -> certcomp_core::Result<String> {
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.parse::<u64>().ok())
                .is_some_and(|it| it <= iteration);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<usize>) -> certcomp_core::Result<()> {
    let ds = cfg.dataset()?;
    let arch = cfg.architecture(&ds)?;
    let tc = cfg.train_config()?;
    let mut set = cfg.compression_set()?;
    let metrics_path = cfg.out.join("metrics.csv");
    let header = MetricsLog {
        element_labels: set.elements().iter().map(|e| e.label()).collect(),
        rows: Vec::new(),
    }
    .header();

    let (mut net, state, prefix) = match resume {
        Some(p) => {
            let ck = load_for(&ds, p)?;
            if ck.network.architecture() != &arch {
                return Err(Error::Config(format!(
                    "{}: checkpoint architecture differs from the configured one",
                    p.display()
                )));
            }
            if ck.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "{}: checkpoint seed {} differs from run seed {}",
                    p.display(),
                    ck.seed,
                    cfg.seed
                )));
            }
            let state = TrainState::from_checkpoint(&ck)?;
            let prefix = if metrics_path.exists() {
                truncated_log(&metrics_path, state.iteration)?
            } else {
                format!("{header}\n")
            };
            info!(epoch = state.epoch, iteration = state.iteration, "resuming");
            (ck.network, Some(state), prefix)
        }
        None => (Network::build(arch, cfg.seed)?, None, format!("{header}\n")),
    };

    let mut csv = BufWriter::new(fs::File::create(&metrics_path)?);
    csv.write_all(prefix.as_bytes())?;
    let mut write_err = None;
    let mut on_row = |row: &certcomp_core::train::MetricsRow| {
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", MetricsLog::format_row(row)) {
                write_err = Some(e);
            }
        }
    };
    info!(
        dataset = %ds.name,
        train = ds.train.len(),
        params = net.num_params(),
        elements = set.elements().len(),
        "training"
    );
    let result = train_with(
        &mut net,
        &ds.train,
        &tc,
        &mut set,
        TrainOptions {
            checkpoint_dir: Some(cfg.out.clone()),
            resume: state,
            stop_after,
            on_row: Some(&mut on_row),
        },
    );
    if let Some(e) = write_err {
        return Err(e.into());
    }
    csv.flush()?;
    let outcome = result?;
    let mut ck = Checkpoint::new(net, cfg.seed);
    ck.iteration = outcome.state.iteration;
    ck.epoch = outcome.state.epoch;
    ck.optimizer = Some(outcome.state.adam);
    ck.save(&cfg.out.join("final.ckpt"))?;
    info!(out = %cfg.out.display(), "done");
    Ok(())
}

pub fn cmd_prune(cfg: &RunConfig, path: &Path, method: &str, ratio: f64) -> certcomp_core::Result<()> {
    let ds = cfg.dataset()?;
    let mut ck = load_for(&ds, path)?;
    let mut spec = config::parse_method(method)?;
    spec.ratio = ratio;
    let mask = compute_mask(&ck.network, &spec, None)?;
    info!(sparsity = mask.sparsity(), "pruned");
    ck.network = materialize(&ck.network, &mask)?;
    ck.mask = Some(mask);
    ck.optimizer = None;
    ck.save(&cfg.out.join("pruned.ckpt"))
}

pub fn cmd_quantize(cfg: &RunConfig, path: &Path, bits: u32, per_tensor: bool) -> certcomp_core::Result<()> {
    let ds = cfg.dataset()?;
    let mut ck = load_for(&ds, path)?;
    let gran = if per_tensor {
        Granularity::PerTensor
    } else {
        Granularity::PerLayer
    };
    let (net, plan) = quantize_weights(&ck.network, bits, gran)?;
    ck.network = net;
    ck.quant = Some(plan);
    ck.optimizer = None;
    ck.save(&cfg.out.join("quantized.ckpt"))
}

/// `index,label,pred,certified` for every sample of `split`.
pub fn certify_csv(net: &Network, split: &Split, eps: f64) -> certcomp_core::Result<String> {
    let shape = net.input_shape().to_vec();
    let view = NetView::new(net);
    let mut out = String::from("index,label,pred,certified\n");
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = split.batch(chunk, &shape)?;
        let preds = net.predict_batch(&x)?;
        let cert = certify_batch(&view, &x, &labels, eps)?;
        for (k, &i) in chunk.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", labels[k], preds[k], u8::from(cert[k])));
        }
    }
    Ok(out)
}

pub fn cmd_certify(cfg: &RunConfig, path: &Path, eps: Option<f64>) -> certcomp_core::Result<()> {
    let ds = cfg.dataset()?;
    let ck = load_for(&ds, path)?;
    let eps = eps.unwrap_or_else(|| cfg.eval_eps()[0]);
    let csv = certify_csv(&ck.network, &ds.test, eps)?;
    let certified = csv.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    info!(eps, certified, n = ds.test.len(), "certified");
    fs::write(cfg.out.join("certify.csv"), csv)?;
    Ok(())
}

pub fn eval_reports(
    net: &Network,
    split: &Split,
    eps: &[f64],
    variants: &[Variant],
) -> certcomp_core::Result<Vec<EvalReport>> {
    eps.iter().map(|&e| evaluate(net, split, e, variants)).collect()
}

pub fn cmd_eval(cfg: &RunConfig, path: &Path, eps: &[f64], variants: &[String]) -> certcomp_core::Result<()> {
    let ds = cfg.dataset()?;
    let ck = load_for(&ds, path)?;
    let eps = if eps.is_empty() { cfg.eval_eps() } else { eps.to_vec() };
    let variants = if variants.is_empty() {
        cfg.variants()?
    } else {
        variants.iter().map(|v| v.parse()).collect::<certcomp_core::Result<Vec<Variant>>>()?
    };
    let reports = eval_reports(&ck.network, &ds.test, &eps, &variants)?;
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.to_csv();
        let skip = if i == 0 { 0 } else { body.find('\n').map_or(0, |n| n + 1) };
        csv.push_str(&body[skip..]);
        print!("{}", r.to_table());
    }
    fs::write(cfg.out.join("eval.csv"), csv)?;
    Ok(())
}
