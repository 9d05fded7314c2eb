//! Command-line front end: dataset generation, training, sampling, the
//! conditional tasks and the evaluation/benchmark reports, all reproducible
//! from a flat `key=value` config plus flags.

use clap::{Args, CommandFactory, Parser, Subcommand};
use hilbert_diff::config::TrainConfig;
use hilbert_diff::error::Error;
use hilbert_diff::field::Field;
use hilbert_diff::tasks::TaskContext;
use hilbert_diff::trainer::{generate_toy, Trainer};
use hilbert_diff::{eval, io, oracles};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hilbert-diff", version, about = "Resolution-free denoising diffusion on mollified fields")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Flags shared by every subcommand; unset flags defer to the config file,
/// which defers to built-in defaults.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value config file (`#` comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Subsampling rate: each item trains on round(m/rate) coordinates
    #[arg(long)]
    rate: Option<usize>,
    /// Training steps for `train`/`bench`, reverse-process steps otherwise
    #[arg(long)]
    steps: Option<usize>,
    /// Grid resolution (training or output, per subcommand)
    #[arg(long)]
    res: Option<usize>,
    /// Checkpoint to load
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output file or directory, per subcommand
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reverse-process driver: ddim | ancestral
    #[arg(long)]
    sampler: Option<String>,
    /// Guidance strength for inpainting
    #[arg(long)]
    lambda: Option<f64>,
    /// Noise level the partial chains start from (0 = task default)
    #[arg(long)]
    t_start: Option<usize>,
    /// Regression target: noisepred | x0pred
    #[arg(long)]
    param_mode: Option<String>,
    /// Worker cap (0 = all cores); HILBERT_DIFF_THREADS caps it further
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reproducible toy dataset as .idf field files
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of fields to generate
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Run or resume the training loop
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw fields from a trained model
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of fields to draw (seeds seed, seed+1, ...)
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Lift a coarse field to a finer grid through a partial reverse chain
    Superres {
        /// Input field (.idf or .png)
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Replace masked values, steering the chain toward the observed ones
    Inpaint {
        /// Observed field (.idf or .png)
        input: PathBuf,
        /// Mask field (.idf or .png); values > 0 mark observed points
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Denoising-loss curve and cross-resolution statistics of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Train-step wall time and peak memory across subsampling rates
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference audit of the network gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Compare every fast path against its brute-force reference
    OracleSuite {
        #[command(flatten)]
        common: Common,
    },
}

enum AppError {
    /// Bad invocation: message plus usage text, exit 2.
    Usage(String),
    /// Failure while doing the work: message, exit 1.
    Runtime(Error),
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            eprintln!("Run 'hilbert-diff help' for details.");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// CLI flags as config overrides; `steps` lands on `steps_key`.
fn overrides(c: &Common, steps_key: &'static str) -> Vec<(&'static str, String)> {
    let mut o: Vec<(&'static str, String)> = Vec::new();
    if let Some(v) = c.seed {
        o.push(("seed", v.to_string()));
    }
    if let Some(v) = c.rate {
        o.push(("rate", v.to_string()));
    }
    if let Some(v) = c.steps {
        o.push((steps_key, v.to_string()));
    }
    if let Some(v) = c.res {
        o.push(("res", v.to_string()));
    }
    if let Some(v) = &c.sampler {
        o.push(("sampler", v.clone()));
    }
    if let Some(v) = c.lambda {
        o.push(("lambda", v.to_string()));
    }
    if let Some(v) = c.t_start {
        o.push(("t_start", v.to_string()));
    }
    if let Some(v) = &c.param_mode {
        o.push(("param_mode", v.clone()));
    }
    if let Some(v) = c.threads {
        o.push(("threads", v.to_string()));
    }
    if let Some(v) = &c.out {
        o.push(("out", v.display().to_string()));
    }
    o
}

fn apply_flags(cfg: &mut TrainConfig, c: &Common, steps_key: &'static str) -> Result<(), AppError> {
    let pairs = overrides(c, steps_key);
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (*k, v.as_str())))
        .map_err(|e| usage(e.to_string()))
}

/// Config file (if any) plus flag overrides.
fn load_config(c: &Common, steps_key: &'static str) -> Result<TrainConfig, AppError> {
    let mut cfg = match &c.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("config file not found: {}", path.display())));
            }
            let (cfg, warnings) = TrainConfig::from_file(path)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            cfg
        }
        None => TrainConfig::default(),
    };
    apply_flags(&mut cfg, c, steps_key)?;
    init_threads(cfg.threads);
    Ok(cfg)
}

/// Checkpoint context with config-file and flag overrides layered on top of
/// the embedded run description (shape keys stay fixed once loaded).
fn load_context(c: &Common, steps_key: &'static str) -> Result<TaskContext, AppError> {
    let ckpt = c.ckpt.as_ref().ok_or_else(|| usage("--ckpt is required for this command"))?;
    let mut ctx = TaskContext::from_checkpoint(ckpt)?;
    if let Some(path) = &c.config {
        if !path.is_file() {
            return Err(usage(format!("config file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        for w in ctx.config_mut().apply_text(&text)? {
            eprintln!("warning: {w}");
        }
    }
    apply_flags(ctx.config_mut(), c, steps_key)?;
    init_threads(ctx.config().threads);
    Ok(ctx)
}

/// Cap the worker pool: explicit setting, then HILBERT_DIFF_THREADS, then
/// all available cores. Safe to call once per process.
fn init_threads(requested: usize) {
    let env_cap = std::env::var("HILBERT_DIFF_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let auto = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut n = if requested == 0 { auto } else { requested };
    if let Some(cap) = env_cap {
        n = n.min(cap);
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn load_field_any(path: &Path) -> Result<Field, Error> {
    if has_ext(path, "png") {
        io::load_png(path)
    } else {
        io::load_field(path)
    }
}

fn save_field_any(path: &Path, field: &Field) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    if has_ext(path, "png") {
        io::save_png(path, field)
    } else {
        io::save_field(path, field)
    }
}

/// `base.png` -> `base_003.png` for multi-output runs.
fn indexed_path(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
    path.with_file_name(format!("{stem}_{i:03}.{ext}"))
}

fn run(cmd: Command) -> Result<(), AppError> {
    match cmd {
        Command::GenData { common, count } => {
            let cfg = load_config(&common, "train_steps")?;
            let dir = PathBuf::from(&cfg.out);
            let paths = generate_toy(&cfg.data, count, cfg.res, cfg.channels, cfg.seed, &dir)?;
            println!("wrote {} '{}' fields at {}x{} to {}", paths.len(), cfg.data, cfg.res, cfg.res, dir.display());
            Ok(())
        }
        Command::Train { common } => {
            let mut trainer = match &common.ckpt {
                Some(path) => {
                    if common.config.is_some() {
                        eprintln!("warning: --config is ignored when resuming from --ckpt");
                    }
                    let mut t = Trainer::from_checkpoint(path)?;
                    apply_flags(t.config_mut(), &common, "train_steps")?;
                    init_threads(t.config().threads);
                    t
                }
                None => Trainer::new(&load_config(&common, "train_steps")?)?,
            };
            let out = PathBuf::from(&trainer.config().out);
            let total = trainer.config().train_steps;
            let report_every = (total / 20).max(1);
            trainer.run(&out, |s| {
                if s.step % report_every == 0 || s.step == total {
                    eprintln!("step {}/{total}  loss {:.5}  ({:.0} ms)", s.step, s.loss, s.wall_ms);
                }
            })?;
            println!("trained {} steps -> {}", trainer.completed_steps(), out.join("model.idck").display());
            Ok(())
        }
        Command::Sample { common, count } => {
            let ctx = load_context(&common, "sample_steps")?;
            let cfg = ctx.config();
            let res = if cfg.res == 0 { 32 } else { cfg.res };
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out).join("sample.png"));
            for i in 0..count {
                let drawn = ctx.sample(res, cfg.seed.wrapping_add(i as u64))?;
                let path = if count == 1 { out.clone() } else { indexed_path(&out, i) };
                save_field_any(&path, &drawn.restored)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Superres { input, common } => {
            let target = common.res.ok_or_else(|| usage("--res (target resolution) is required for superres"))?;
            let ctx = load_context(&common, "sample_steps")?;
            let coarse = load_field_any(&input)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&ctx.config().out).join(format!("superres_{target}.png")));
            let fine = ctx.super_resolve(&coarse, target, ctx.config().seed)?;
            save_field_any(&out, &fine.restored)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Inpaint { input, mask, common } => {
            let ctx = load_context(&common, "sample_steps")?;
            let observed = load_field_any(&input)?;
            let mask_field = load_field_any(&mask)?;
            if mask_field.num_points() != observed.num_points() {
                return Err(AppError::Runtime(Error::InvalidArgument(format!(
                    "mask has {} points but the field has {}",
                    mask_field.num_points(),
                    observed.num_points()
                ))));
            }
            // Any positive value in the mask's first channel marks a point as observed.
            let d = mask_field.channels();
            let known: Vec<bool> = (0..mask_field.num_points()).map(|p| mask_field.values()[p * d] > 0.0).collect();
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&ctx.config().out).join("inpaint.png"));
            let filled = ctx.inpaint(&observed, &known, ctx.config().seed)?;
            save_field_any(&out, &filled.restored)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { common } => {
            let ctx = load_context(&common, "sample_steps")?;
            let cfg = ctx.config().clone();
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let steps = ctx.schedule().steps();
            // Eight noise levels spread over the schedule.
            let ts: Vec<usize> = {
                let mut ts: Vec<usize> = (1..=8).map(|k| (k * steps).div_ceil(8)).collect();
                ts.dedup();
                ts
            };
            let curve = eval::denoise_mse_curve(&ctx, &ts, 4, cfg.seed)?;
            let curve_path = out.join("curve.csv");
            std::fs::write(&curve_path, eval::curve_csv(&curve)).map_err(Error::from)?;
            println!("wrote {}", curve_path.display());
            let rows = eval::discretisation_report(&ctx, &[cfg.res, cfg.res * 2], 4, cfg.seed)?;
            let report_path = out.join("report.csv");
            std::fs::write(&report_path, eval::report_csv(&rows)).map_err(Error::from)?;
            println!("wrote {}", report_path.display());
            Ok(())
        }
        Command::Bench { common } => {
            let mut cfg = load_config(&common, "train_steps")?;
            let steps_per_rate = common.steps.unwrap_or(10);
            cfg.train_steps = steps_per_rate;
            let rows = eval::rate_bench(&cfg, &[1, 2, 4, 8], steps_per_rate)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let path = out.join("bench.csv");
            std::fs::write(&path, eval::bench_csv(&rows)).map_err(Error::from)?;
            for r in &rows {
                println!(
                    "rate {:>2}: {:>6} coords/item, median step {:.1} ms, peak rss {} kB",
                    r.rate, r.coords_used, r.median_wall_ms, r.peak_rss_kb
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common, "train_steps")?;
            let report = gradcheck(&cfg, common.ckpt.as_deref())?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(AppError::Runtime(Error::InvalidArgument(format!(
                    "{} gradient coordinates disagree with finite differences",
                    report.failures.len()
                ))))
            }
        }
        Command::OracleSuite { common } => {
            init_threads(common.threads.unwrap_or(0));
            let rows = oracles::run_suite()?;
            let mut all_ok = true;
            println!("{:<30} {:>12} {:>9} {:>9}  result", "check", "max error", "tol", "ms");
            for r in &rows {
                all_ok &= r.passed();
                println!(
                    "{:<30} {:>12.3e} {:>9.0e} {:>9.1}  {}",
                    r.name,
                    r.max_err,
                    r.tol,
                    r.wall_ms,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
            if all_ok {
                println!("all {} reference checks passed", rows.len());
                Ok(())
            } else {
                Err(AppError::Runtime(Error::InvalidArgument("reference checks failed".into())))
            }
        }
    }
}

/// Audit the configured architecture's gradients on a small probe grid;
/// parameters come from the checkpoint when one is given.
fn gradcheck(cfg: &TrainConfig, ckpt: Option<&Path>) -> Result<hilbert_diff::grad::GradCheckReport, Error> {
    use hilbert_diff::denoiser::Denoiser;
    use hilbert_diff::field::RegularGrid;
    use rand::{RngExt, SeedableRng};

    let probe_res = 8;
    let mut net_cfg = cfg.net_config();
    net_cfg.train_res = probe_res;
    net_cfg.inner_res = net_cfg.inner_res.clamp(2, 4);
    let net = match ckpt {
        Some(path) => Denoiser::from_params(net_cfg, io::load_checkpoint(path)?.params)?,
        None => Denoiser::new(net_cfg, cfg.seed)?,
    };
    let grid = RegularGrid::square(probe_res)?;
    let plans = net.plans_for(&grid.coords(), probe_res)?;
    let m = grid.num_points();
    let d = cfg.channels;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    let x = hilbert_diff::grad::Tensor::new(&[m, d], (0..m * d).map(|_| rng.random::<f64>() - 0.5).collect())?;
    let target = hilbert_diff::grad::Tensor::new(&[m, d], (0..m * d).map(|_| rng.random::<f64>() - 0.5).collect())?;
    let mut params = net.params().clone();
    hilbert_diff::grad::grad_check(&mut params, 32, cfg.seed, |tape, vars| {
        let xv = tape.input(x.clone());
        let tv = tape.input(target.clone());
        let out = net.forward(tape, xv, 3, &plans, vars)?;
        let diff = tape.sub(out, tv)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean_all(sq))
    })
}
