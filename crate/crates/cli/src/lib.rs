//! Command implementations behind the `fwformer` binary.
//!
//! Every subcommand is a plain function taking a [`RunConfig`], so the same
//! code paths are reachable from tests without spawning a process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fwformer::data::{self, Sample};
use fwformer::heads::{self, count_ops, MixerKind, MixerSpec, OrthoTrace};
use fwformer::model::config::{parse_kv, take};
use fwformer::model::{evaluate, Checkpoint, Model, ModelConfig, Shortcut, TrainConfig, Trainer};
use fwformer::nn::ParamStore;
use fwformer::profiler::{average_traces, fmt_sig, total_energy, EnergyReport};
use fwformer::spiking::LifParams;
use fwformer::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fwformer::Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingPath(_) | CliError::Usage(_) => 2,
            CliError::Core(fwformer::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fwformer", version, about = "Spiking transformer with Fourier and wavelet token mixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ssa, fft1d, fft2d, wt-haar, wt-db1, wt-bior11, wt-rbio11 or wt-combined.
    #[arg(long)]
    pub head: Option<String>,
    /// vanilla or ms.
    #[arg(long)]
    pub shortcut: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write per-epoch metrics plus a checkpoint.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time token-mixing heads on random spikes.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated head names.
        #[arg(long, default_value = "ssa,fft1d")]
        heads: String,
    },
    /// Per-layer synaptic operations and energy of a checkpoint.
    Energy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train an attention model, logging query/key overlap every step.
    Ortho(CommonArgs),
    /// Write a synthetic moving-bar dataset as CSV event files.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 25)]
        test_per_class: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Moving-bar samples generated in memory.
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    },
    /// `<root>/{train,test}/<class>/<sample>.csv`.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub time_steps: usize,
    pub batch: usize,
    pub batches: usize,
    pub warmup: usize,
    pub input_rate: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_len: 64,
            dim: 256,
            time_steps: 4,
            batch: 16,
            batches: 100,
            warmup: 10,
            input_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: PathBuf,
    /// Stop training once test accuracy reaches this value.
    pub stop_at_acc: Option<f64>,
    /// Inputs are real-valued images rather than event counts.
    pub static_input: bool,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            data: DataSource::Synthetic {
                train_per_class: 100,
                test_per_class: 25,
                seed: 1,
            },
            out: PathBuf::from("runs"),
            stop_at_acc: None,
            static_input: false,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses configuration text; absent keys keep their defaults.
    pub fn from_text(text: &str) -> CliResult<Self> {
        let map = parse_kv(text)?;
        let d = RunConfig::default();
        let mut train_map = map.clone();
        train_map.entry("lr".into()).or_insert_with(|| d.train.lr.to_string());
        let data = match map.get("data").map(String::as_str) {
            None | Some("synthetic") => DataSource::Synthetic {
                train_per_class: take(&map, "train_per_class", 100)?,
                test_per_class: take(&map, "test_per_class", 25)?,
                seed: take(&map, "data_seed", 1)?,
            },
            Some(p) => DataSource::Dir(PathBuf::from(p)),
        };
        let stop: f64 = take(&map, "stop_at_acc", -1.0)?;
        let bd = BenchConfig::default();
        Ok(RunConfig {
            model: ModelConfig::from_map(&map)?,
            train: TrainConfig::from_map(&train_map)?,
            data,
            out: PathBuf::from(take(&map, "out", d.out.display().to_string())?),
            stop_at_acc: (stop >= 0.0).then_some(stop),
            static_input: take(&map, "static_input", false)?,
            bench: BenchConfig {
                seq_len: take(&map, "bench_seq_len", bd.seq_len)?,
                dim: take(&map, "bench_dim", bd.dim)?,
                time_steps: take(&map, "bench_time_steps", bd.time_steps)?,
                batch: take(&map, "bench_batch", bd.batch)?,
                batches: take(&map, "bench_batches", bd.batches)?,
                warmup: take(&map, "bench_warmup", bd.warmup)?,
                input_rate: take(&map, "bench_input_rate", bd.input_rate)?,
            },
        })
    }

    /// Loads `--config` (if any) and applies the remaining flags on top.
    pub fn from_args(args: &CommonArgs) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|_| CliError::MissingPath(path.clone()))?;
                Self::from_text(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &args.out {
            cfg.out = out.clone();
        }
        if let Some(h) = &args.head {
            cfg.model.mixer.kind = h.parse::<MixerKind>()?;
        }
        if let Some(s) = &args.shortcut {
            cfg.model.shortcut = s.parse::<Shortcut>()?;
        }
        if let Some(w) = args.workers {
            cfg.train.workers = w;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn ensure_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| fwformer::Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        Ok(())
    }

    /// Train and test samples for this configuration.
    pub fn load_data(&self) -> CliResult<(Vec<Sample>, Vec<Sample>)> {
        let t = self.model.time_steps;
        match &self.data {
            DataSource::Synthetic {
                train_per_class,
                test_per_class,
                seed,
            } => Ok((
                data::moving_bar_samples(*train_per_class, t, *seed)?,
                data::moving_bar_samples(*test_per_class, t, *seed ^ 0x5eed)?,
            )),
            DataSource::Dir(root) => {
                for split in ["train", "test"] {
                    let p = root.join(split);
                    if !p.is_dir() {
                        return Err(CliError::MissingPath(p));
                    }
                }
                Ok((
                    data::load_event_split(root, "train", t)?,
                    data::load_event_split(root, "test", t)?,
                ))
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| fwformer::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            fmt_sig(r.train_loss),
            fmt_sig(r.train_acc),
            fmt_sig(r.test_loss),
            fmt_sig(r.test_acc),
            fmt_sig(r.lr)
        );
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
    pub ortho: OrthoTrace,
}

impl TrainOutcome {
    pub fn best_test_acc(&self) -> f64 {
        self.metrics.iter().map(|m| m.test_acc).fold(0.0, f64::max)
    }
}

/// Trains per `cfg` without touching the filesystem.
pub fn train_model(cfg: &RunConfig, track_ortho: bool) -> CliResult<TrainOutcome> {
    let (mut train, test) = cfg.load_data()?;
    let bs = cfg.train.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = (cfg.train.epochs * steps_per_epoch) as u64;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), total)?;
    trainer.track_ortho = track_ortho;
    let test_batches = data::batches(&test, 50)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let mut metrics = Vec::new();
    let mut ortho = OrthoTrace::default();
    for epoch in 1..=cfg.train.epochs {
        train.shuffle(&mut rng);
        let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
        let lr = trainer.current_lr();
        for (x, y) in data::batches(&train, bs)? {
            let r = trainer.train_step(&x, &y)?;
            loss += r.loss * y.len() as f64;
            acc += r.accuracy * y.len() as f64;
            n += y.len();
            if let Some(s) = r.ortho {
                ortho.push(s);
            }
        }
        let (test_acc, test_loss) = evaluate(&trainer.model, &test_batches)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss / n as f64,
            train_acc: acc / n as f64,
            test_loss,
            test_acc,
            lr,
        });
        if cfg.stop_at_acc.is_some_and(|target| test_acc >= target) {
            break;
        }
    }
    Ok(TrainOutcome {
        trainer,
        metrics,
        ortho,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let outcome = train_model(cfg, false)?;
    cfg.ensure_out()?;
    write_file(&cfg.out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    Checkpoint {
        model: outcome.trainer.model.clone(),
        opt: outcome.trainer.opt.clone(),
    }
    .save(cfg.out.join("checkpoint.fwc"))?;
    Ok(outcome)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingPath(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

/// Accuracy and mean loss of a checkpoint on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<(f64, f64)> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = RunConfig {
        model: ck.model.config.clone(),
        ..cfg.clone()
    };
    let (_, test) = cfg.load_data()?;
    let (acc, loss) = evaluate(&ck.model, &data::batches(&test, 50)?)?;
    cfg.ensure_out()?;
    write_file(
        &cfg.out.join("eval.csv"),
        &format!("split,accuracy,loss\ntest,{},{}\n", fmt_sig(acc), fmt_sig(loss)),
    )?;
    Ok((acc, loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub head: String,
    pub fwd_ms: f64,
    pub fwd_sd_ms: f64,
    pub train_ms: f64,
    pub train_sd_ms: f64,
    pub macs: u64,
}

pub const BENCH_HEADER: &str = "head,fwd_ms,fwd_sd_ms,train_ms,train_sd_ms,macs";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.head,
            fmt_sig(r.fwd_ms),
            fmt_sig(r.fwd_sd_ms),
            fmt_sig(r.train_ms),
            fmt_sig(r.train_sd_ms),
            r.macs
        );
    }
    s
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn run_token_mixer(store: &ParamStore, spec: &MixerSpec, x: &Tensor, training: bool) -> CliResult<()> {
    let mut g = fwformer::nn::Graph::new(store, training, LifParams::default());
    let xv = g.tape.constant(x.clone());
    let y = heads::head(&mut g, xv, "mix", spec)?;
    if training {
        let loss = g.tape.sum(y);
        g.tape.backward(loss)?;
    }
    Ok(())
}

/// Wall time of the token-mixing sub-layer (head, batch norm, spiking layer)
/// on random spikes `[T, B, N, D]`: inference forward, then forward plus backward.
pub fn cmd_bench(cfg: &RunConfig, head_names: &[String]) -> CliResult<Vec<BenchRow>> {
    if head_names.len() < 2 {
        return Err(CliError::Usage("bench needs at least two heads to compare".into()));
    }
    let b = &cfg.bench;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x = Tensor::bernoulli(&[b.time_steps, b.batch, b.seq_len, b.dim], b.input_rate, &mut rng);
    let mut rows = Vec::new();
    for name in head_names {
        let spec = MixerSpec {
            kind: name.parse()?,
            ..cfg.model.mixer
        };
        spec.validate(b.dim)?;
        let mut store = ParamStore::new();
        heads::init_head(&mut store, "mix", &spec, b.dim, &mut rng);
        let mut timings = [Vec::new(), Vec::new()];
        for (slot, training) in [(0, false), (1, true)] {
            for i in 0..b.warmup + b.batches {
                let start = Instant::now();
                run_token_mixer(&store, &spec, &x, training)?;
                if i >= b.warmup {
                    timings[slot].push(start.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
        let (fwd_ms, fwd_sd_ms) = mean_sd(&timings[0]);
        let (train_ms, train_sd_ms) = mean_sd(&timings[1]);
        rows.push(BenchRow {
            head: spec.kind.name(),
            fwd_ms,
            fwd_sd_ms,
            train_ms,
            train_sd_ms,
            macs: count_ops(&spec, b.seq_len, b.dim),
        });
    }
    cfg.ensure_out()?;
    write_file(&cfg.out.join("bench.csv"), &bench_csv(&rows))?;
    Ok(rows)
}

/// Energy report of a model averaged over the test split.
pub fn energy_report(model: &Model, samples: &[Sample], static_input: bool) -> CliResult<EnergyReport> {
    let runs = data::batches(samples, 50)?
        .iter()
        .map(|(x, _)| model.record_rates(x))
        .collect::<fwformer::Result<Vec<_>>>()?;
    Ok(total_energy(&average_traces(&runs)?, static_input)?)
}

pub fn cmd_energy(cfg: &RunConfig, checkpoint: &Path) -> CliResult<EnergyReport> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = RunConfig {
        model: ck.model.config.clone(),
        ..cfg.clone()
    };
    let (_, test) = cfg.load_data()?;
    let report = energy_report(&ck.model, &test, cfg.static_input)?;
    cfg.ensure_out()?;
    write_file(&cfg.out.join("energy.txt"), &report.to_text())?;
    Ok(report)
}

pub fn ortho_csv(trace: &OrthoTrace) -> String {
    let mut s = String::from("step,score\n");
    for (i, v) in trace.scores.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, fmt_sig(*v));
    }
    s
}

/// Trains an attention model and writes one overlap score per step.
pub fn cmd_ortho(cfg: &RunConfig) -> CliResult<OrthoTrace> {
    let mut cfg = cfg.clone();
    cfg.model.mixer.kind = MixerKind::Ssa;
    let outcome = train_model(&cfg, true)?;
    cfg.ensure_out()?;
    write_file(&cfg.out.join("ortho.csv"), &ortho_csv(&outcome.ortho))?;
    Ok(outcome.ortho)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = RunConfig::from_args(&args)?;
            let out = cmd_train(&cfg)?;
            print!("{}", metrics_csv(&out.metrics));
            println!("checkpoint: {}", cfg.out.join("checkpoint.fwc").display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = RunConfig::from_args(&common)?;
            let (acc, loss) = cmd_eval(&cfg, &checkpoint)?;
            println!("accuracy={} loss={}", fmt_sig(acc), fmt_sig(loss));
        }
        Command::Bench { common, heads } => {
            let cfg = RunConfig::from_args(&common)?;
            let names: Vec<String> = heads.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            print!("{}", bench_csv(&cmd_bench(&cfg, &names)?));
        }
        Command::Energy { common, checkpoint } => {
            let cfg = RunConfig::from_args(&common)?;
            print!("{}", cmd_energy(&cfg, &checkpoint)?.to_text());
        }
        Command::Ortho(args) => {
            let cfg = RunConfig::from_args(&args)?;
            print!("{}", ortho_csv(&cmd_ortho(&cfg)?));
        }
        Command::GenData {
            common,
            train_per_class,
            test_per_class,
        } => {
            let cfg = RunConfig::from_args(&common)?;
            data::write_moving_bar_dataset(&cfg.out, train_per_class, test_per_class, cfg.train.seed)?;
            println!("wrote {}", cfg.out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_overrides_defaults() {
        let cfg = RunConfig::from_text("head = wt-db1\nepochs = 3\ndata = /tmp/x\nstop_at_acc = 0.95\n").unwrap();
        assert_eq!(cfg.model.mixer.kind.name(), "wt-db1");
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.data, DataSource::Dir(PathBuf::from("/tmp/x")));
        assert_eq!(cfg.stop_at_acc, Some(0.95));
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
    }

    #[test]
    fn flags_win_over_file() {
        let args = CommonArgs {
            seed: Some(7),
            head: Some("fft2d".into()),
            shortcut: Some("ms".into()),
            workers: Some(2),
            ..CommonArgs::default()
        };
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.mixer.kind, MixerKind::Fft2d);
        assert_eq!(cfg.model.shortcut, Shortcut::Membrane);
        assert_eq!(cfg.train.workers, 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::MissingPath("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(fwformer::Error::Config("bad".into())).exit_code(), 2);
        assert_eq!(CliError::Core(fwformer::Error::Training("nan".into())).exit_code(), 1);
    }

    #[test]
    fn csv_rows_use_nine_significant_digits() {
        let rows = [EpochMetrics {
            epoch: 1,
            train_loss: 1.0 / 3.0,
            train_acc: 0.5,
            test_loss: 2.0,
            test_acc: 0.25,
            lr: 1e-3,
        }];
        let text = metrics_csv(&rows);
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line.split(',').nth(1), Some("0.333333333"));
        let back: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(back[1..], [0.5, 2.0, 0.25, 1e-3]);
    }
}
