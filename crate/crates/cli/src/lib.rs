//! Command-line front end: `train`, `init`, `infer`, `eval`, `grad-check`
//! and `bench-scan`.
//!
//! Exit codes: 0 success, 1 check or metric failure, 2 configuration or
//! input error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use omamba::battery::{run_battery, BatteryOptions};
use omamba::checkpoint::Checkpoint;
use omamba::config::RunConfig;
use omamba::data::{is_image_path, load_image, load_pairs, save_image, PairedDataset};
use omamba::net::Network;
use omamba::ssm::{discretize, scan_parallel, scan_sequential, Evaluator};
use omamba::train::{enhance, evaluate, mean_scores, train_loop, RunOutputs, TrainState, CHECKPOINT_FILE};
use omamba::{DType, Error, ParamStore, Real, RngState};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

/// Checkpoint metadata key holding the full run configuration as TOML.
pub const CONFIG_META: &str = "config";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "omamba", version, about = "Dual-branch selective state-space image enhancement")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable, later ones win. Keys may be dotted
    /// (`train.patch`) or a unique leaf name (`patch`).
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for `bench-scan`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dtype: Option<DType>,
    #[arg(long, global = true)]
    pub evaluator: Option<Evaluator>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on `<data.root>/<data.train_split>`.
    Train {
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a freshly initialized checkpoint without training.
    Init,
    /// Enhance images with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files or directories of images.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Per-image and mean PSNR/SSIM on a paired split.
    Eval {
        /// Without a checkpoint the degraded inputs are scored as they are.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root; defaults to `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient battery in f64.
    GradCheck {
        /// Adds an op with a wrong backward rule, which must be reported.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Sequential vs parallel scan timings and differences.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 64, 256])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16])]
        states: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 8])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Metric(_) => EXIT_CHECK_FAILED,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self {
            code: EXIT_INPUT,
            message: format!("csv: {e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

impl Common {
    /// File, then `--override`s, then the dedicated flags.
    pub fn run_config(&self, embedded: Option<&str>) -> CliResult<RunConfig> {
        let mut ovs = self.overrides.clone();
        if let Some(s) = self.seed {
            ovs.push(format!("train.seed={s}"));
        }
        if let Some(d) = self.dtype {
            ovs.push(format!("net.dtype=\"{d}\""));
        }
        if let Some(e) = self.evaluator {
            ovs.push(format!("net.evaluator=\"{e}\""));
        }
        if let Some(o) = &self.out {
            ovs.push(format!("run.out_dir={}", toml_string(&o.to_string_lossy())));
        }
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError {
                code: EXIT_INPUT,
                message: format!("cannot read config {}: {e}", p.display()),
            })?),
            None => embedded.map(str::to_string),
        };
        Ok(RunConfig::from_sources(text.as_deref(), &ovs)?)
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Runs a parsed command; `Ok` carries the exit code.
pub fn run(cli: &Cli) -> CliResult<u8> {
    let c = &cli.common;
    match &cli.command {
        Command::Train { resume } => cmd_train(c, resume.as_deref()),
        Command::Init => cmd_init(c),
        Command::Infer { checkpoint, input } => cmd_infer(c, checkpoint, input),
        Command::Eval { checkpoint, data, split } => cmd_eval(c, checkpoint.as_deref(), data.as_deref(), split),
        Command::GradCheck { inject_fault } => cmd_grad_check(c, *inject_fault),
        Command::BenchScan {
            lengths,
            states,
            dims,
            batch,
            repeats,
        } => cmd_bench_scan(c, lengths, states, dims, *batch, *repeats),
    }
}

fn build<T: Real>(cfg: &RunConfig) -> CliResult<(Network, ParamStore<T>, RngState)> {
    let mut ps = ParamStore::new();
    let mut rng = RngState::new(cfg.train.seed);
    let net = Network::build(&cfg.net, &mut ps, &mut rng)?;
    Ok((net, ps, rng))
}

fn load_split(root: &Path, split: &str) -> CliResult<PairedDataset> {
    let ds = load_pairs(root, split)?;
    log::info!("{} pairs in {}", ds.pairs.len(), root.join(split).display());
    Ok(ds)
}

fn cmd_train(c: &Common, resume: Option<&Path>) -> CliResult<u8> {
    let ck = resume.map(Checkpoint::load).transpose()?;
    let embedded = ck.as_ref().map(|k| k.meta(CONFIG_META)).transpose()?;
    let cfg = c.run_config(embedded)?;
    match cfg.net.dtype {
        DType::F32 => train_typed::<f32>(&cfg, ck.as_ref()),
        DType::F64 => train_typed::<f64>(&cfg, ck.as_ref()),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, resume: Option<&Checkpoint>) -> CliResult<u8> {
    let train = load_split(&cfg.data.root, &cfg.data.train_split)?;
    let val = if cfg.data.val_split.is_empty() {
        None
    } else if cfg.data.root.join(&cfg.data.val_split).is_dir() {
        Some(load_split(&cfg.data.root, &cfg.data.val_split)?)
    } else {
        log::warn!(
            "validation split {} not found; skipping validation",
            cfg.data.root.join(&cfg.data.val_split).display()
        );
        None
    };
    let (net, mut ps, rng) = build::<T>(cfg)?;
    let mut state = match resume {
        Some(ck) => TrainState::from_checkpoint(ck, &mut ps)?,
        None => TrainState::new(&ps, rng),
    };
    log::info!("{} parameters, starting at iteration {}", ps.count(), state.k);
    let dir = cfg.run.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let text = cfg.to_toml()?;
    std::fs::write(dir.join(CONFIG_FILE), &text)?;
    let out = RunOutputs {
        dir: Some(dir.clone()),
        meta: vec![(CONFIG_META.to_string(), text)],
        wall_time: cfg.run.log_wall_time,
    };
    let s = train_loop(&net, &mut ps, &mut state, &train, val.as_ref(), &cfg.train, &out)?;
    println!("iterations: {}", s.iterations);
    println!("final_loss: {}", s.final_loss);
    if let (Some(p), Some(q)) = (s.best_psnr_db, s.best_ssim) {
        println!("best_psnr_db: {p:.4}");
        println!("best_ssim: {q:.5}");
    }
    println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
    Ok(EXIT_OK)
}

fn cmd_init(c: &Common) -> CliResult<u8> {
    let cfg = c.run_config(None)?;
    let (_, ps, rng) = build::<f64>(&cfg)?;
    let dir = &cfg.run.out_dir;
    std::fs::create_dir_all(dir)?;
    let mut ck = TrainState::new(&ps, rng).to_checkpoint(&ps);
    ck.set_meta(CONFIG_META, cfg.to_toml()?);
    let path = dir.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    println!("checkpoint: {}", path.display());
    Ok(EXIT_OK)
}

/// Checkpoint plus its configuration; `--config` and flags override the
/// embedded one.
fn open_checkpoint(c: &Common, path: &Path) -> CliResult<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = c.run_config(ck.meta.get(CONFIG_META).map(String::as_str))?;
    Ok((ck, cfg))
}

fn restore<T: Real>(ck: &Checkpoint, cfg: &RunConfig) -> CliResult<(Network, ParamStore<T>)> {
    let (net, mut ps, _) = build::<T>(cfg)?;
    ck.load_params(&mut ps)?;
    Ok((net, ps))
}

fn collect_images(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_image_path(f))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Dataset {
                path: p.clone(),
                msg: "input not found".into(),
            }
            .into());
        }
    }
    Ok(out)
}

fn cmd_infer(c: &Common, checkpoint: &Path, inputs: &[PathBuf]) -> CliResult<u8> {
    let (ck, cfg) = open_checkpoint(c, checkpoint)?;
    let files = collect_images(inputs)?;
    match cfg.net.dtype {
        DType::F32 => infer_typed::<f32>(c, &ck, &cfg, &files),
        DType::F64 => infer_typed::<f64>(c, &ck, &cfg, &files),
    }
}

fn infer_typed<T: Real>(c: &Common, ck: &Checkpoint, cfg: &RunConfig, files: &[PathBuf]) -> CliResult<u8> {
    let (net, ps) = restore::<T>(ck, cfg)?;
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("enhanced"));
    std::fs::create_dir_all(&dir)?;
    for f in files {
        let img = load_image(f)?;
        let out = enhance(&net, &ps, &img)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = dir.join(format!("{stem}.png"));
        save_image(&dest, &out)?;
        println!("{} -> {}", f.display(), dest.display());
    }
    Ok(EXIT_OK)
}

fn cmd_eval(c: &Common, checkpoint: Option<&Path>, data: Option<&Path>, split: &str) -> CliResult<u8> {
    match checkpoint {
        Some(p) => {
            let (ck, cfg) = open_checkpoint(c, p)?;
            let (net, ps) = restore::<f64>(&ck, &cfg)?;
            let root = data.map(Path::to_path_buf).unwrap_or(cfg.data.root);
            let ds = load_split(&root, split)?;
            write_scores(c, &evaluate(&net, &ps, &ds, 0)?)
        }
        None => {
            let cfg = c.run_config(None)?;
            let root = data.map(Path::to_path_buf).unwrap_or(cfg.data.root);
            let ds = load_split(&root, split)?;
            let scores = ds
                .pairs
                .iter()
                .map(|p| omamba::train::score(&p.name, &p.input.cast::<f64>(), &p.target.cast()))
                .collect::<Result<Vec<_>, _>>()?;
            write_scores(c, &scores)
        }
    }
}

pub const EVAL_FILE: &str = "eval.csv";

fn write_scores(c: &Common, scores: &[omamba::train::ImageScore]) -> CliResult<u8> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(EVAL_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["filename", "psnr_db", "ssim"])?;
    for s in scores {
        w.write_record([s.name.clone(), s.psnr_db.to_string(), s.ssim.to_string()])?;
    }
    let (p, q) = mean_scores(scores);
    w.write_record(["mean".to_string(), p.to_string(), q.to_string()])?;
    w.flush()?;
    println!("mean_psnr_db: {p:.4}");
    println!("mean_ssim: {q:.5}");
    println!("report: {}", path.display());
    Ok(EXIT_OK)
}

fn cmd_grad_check(c: &Common, inject_fault: bool) -> CliResult<u8> {
    if c.dtype == Some(DType::F32) {
        log::warn!("grad-check always runs in f64");
    }
    let opts = BatteryOptions {
        evaluator: c.evaluator.unwrap_or_default(),
        seed: c.seed.unwrap_or(0),
        inject_fault,
    };
    let results = run_battery(&opts, |r| match &r.max_rel_error {
        Ok(e) => println!(
            "{:<28} {:>10.3e}  tol {:.0e}  {}",
            r.name,
            e,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ),
        Err(msg) => println!("{:<28} error: {msg}  FAIL", r.name),
    });
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} items within tolerance", results.len());
        Ok(EXIT_OK)
    } else {
        println!("failing items: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub state: usize,
    pub dim: usize,
    pub evaluator: Evaluator,
    pub wall_ms: f64,
    pub max_abs_diff: f64,
}

/// One sequential and one parallel row per configuration, ordered by
/// length, then state size, then dimension.
pub fn bench_scan<T: Real>(lengths: &[usize], states: &[usize], dims: &[usize], batch: usize, repeats: usize, seed: u64) -> omamba::Result<Vec<BenchRow>> {
    let (mut ls, mut ns, mut ds) = (lengths.to_vec(), states.to_vec(), dims.to_vec());
    for v in [&mut ls, &mut ns, &mut ds] {
        v.sort_unstable();
    }
    if ls.iter().chain(&ns).chain(&ds).any(|&x| x == 0) || batch == 0 {
        return Err(Error::Config("bench-scan extents must be positive".into()));
    }
    let mut rng = RngState::new(seed);
    let mut rows = Vec::new();
    for &l in &ls {
        for &n in &ns {
            for &d in &ds {
                let a = rng.uniform_tensor::<T>(vec![n], -3.0, -0.05);
                let b = rng.uniform_tensor::<T>(vec![batch, l, n], -1.0, 1.0);
                let dt = rng.uniform_tensor::<T>(vec![batch, l, d], 0.01, 1.0);
                let cm = rng.uniform_tensor::<T>(vec![batch, l, n], -1.0, 1.0);
                let skip = rng.uniform_tensor::<T>(vec![d], -1.0, 1.0);
                let x = rng.uniform_tensor::<T>(vec![batch, l, d], -1.0, 1.0);
                let disc = discretize(&a, &b, &dt)?;
                let timed = |f: &dyn Fn() -> omamba::Result<omamba::Tensor<T>>| -> omamba::Result<(f64, omamba::Tensor<T>)> {
                    let t0 = Instant::now();
                    let mut y = f()?;
                    for _ in 1..repeats.max(1) {
                        y = f()?;
                    }
                    Ok((t0.elapsed().as_secs_f64() * 1e3 / repeats.max(1) as f64, y))
                };
                let (ts, ys) = timed(&|| scan_sequential(&disc, &cm, &skip, &x))?;
                let (tp, yp) = timed(&|| scan_parallel(&disc, &cm, &skip, &x))?;
                let diff = ys.max_abs_diff(&yp);
                for (evaluator, wall_ms) in [(Evaluator::Sequential, ts), (Evaluator::Parallel, tp)] {
                    rows.push(BenchRow {
                        length: l,
                        state: n,
                        dim: d,
                        evaluator,
                        wall_ms,
                        max_abs_diff: diff,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn cmd_bench_scan(c: &Common, lengths: &[usize], states: &[usize], dims: &[usize], batch: usize, repeats: usize) -> CliResult<u8> {
    let seed = c.seed.unwrap_or(0);
    let rows = match c.dtype.unwrap_or(DType::F64) {
        DType::F32 => bench_scan::<f32>(lengths, states, dims, batch, repeats, seed)?,
        DType::F64 => bench_scan::<f64>(lengths, states, dims, batch, repeats, seed)?,
    };
    let sink: Box<dyn std::io::Write> = match &c.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            Box::new(std::fs::File::create(p)?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["length", "state", "dim", "evaluator", "wall_ms", "max_abs_diff"])?;
    for r in &rows {
        w.write_record([
            r.length.to_string(),
            r.state.to_string(),
            r.dim.to_string(),
            r.evaluator.to_string(),
            format!("{:.4}", r.wall_ms),
            format!("{:e}", r.max_abs_diff),
        ])?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overrides_after_user_overrides() {
        let c = Common {
            overrides: vec!["train.seed=3".into(), "patch=64".into()],
            seed: Some(9),
            dtype: Some(DType::F64),
            evaluator: Some(Evaluator::Parallel),
            out: Some(PathBuf::from("some dir/x")),
            ..Default::default()
        };
        let cfg = c.run_config(None).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.patch, 64);
        assert_eq!(cfg.net.dtype, DType::F64);
        assert_eq!(cfg.net.evaluator, Evaluator::Parallel);
        assert_eq!(cfg.run.out_dir, PathBuf::from("some dir/x"));
    }

    #[test]
    fn bench_rows_cover_the_grid_in_order() {
        let rows = bench_scan::<f64>(&[8, 2], &[3], &[2, 1], 1, 1, 0).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        let ls: Vec<usize> = rows.iter().map(|r| r.length).collect();
        assert_eq!(ls, [2, 2, 2, 2, 8, 8, 8, 8]);
        assert!(rows.iter().all(|r| r.max_abs_diff <= 1e-10));
        assert!(bench_scan::<f64>(&[0], &[1], &[1], 1, 1, 0).is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_INPUT);
        assert_eq!(CliError::from(Error::NonFiniteGradient { name: "w".into() }).code, EXIT_CHECK_FAILED);
    }
}
