//! Acceptance gate: every release-blocking property of the crate, one
//! printed line per criterion. Runs as a plain binary (no harness) so the
//! expensive artifacts — notably the trained 32x32 model — are built once
//! and reused by the criteria that need them.

use hilbert_diff::config::TrainConfig;
use hilbert_diff::denoiser::{Denoiser, NetConfig};
use hilbert_diff::diffusion::loss_simple;
use hilbert_diff::error::Error;
use hilbert_diff::field::{downsample_to_grid, Field, RegularGrid, KNN_DEFAULT_K};
use hilbert_diff::mollifier::{pixel_variance_to_length_scale, Mollifier};
use hilbert_diff::tasks::TaskContext;
use hilbert_diff::trainer::{gaussian_bumps, Trainer};
use hilbert_diff::{eval, grad, oracles};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

type Outcome = Result<String, String>;

fn fail(msg: impl Into<String>) -> Outcome {
    Err(msg.into())
}

fn err_str(e: Error) -> String {
    format!("error: {e}")
}

/// Training/sampling setup shared by criteria 7, 8 and 10: bump fields at
/// 32x32, quarter-coordinate subsampling, 5000 Adam steps.
struct TrainedModel {
    ctx: TaskContext,
    losses: Vec<f64>,
    train_wall_s: f64,
    native: Vec<Field>,
    fine: Vec<Field>,
}

const TRAIN_STEPS: usize = 5000;
const DRAWS: usize = 128;

fn acceptance_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(
        "seed = 1\nres = 32\nrate = 4\nbatch = 16\ntrain_steps = 5000\nwidth = 32\ntime_dim = 64\nsample_steps = 50\n",
    )
    .expect("static config");
    cfg
}

fn train_model() -> Result<TrainedModel, String> {
    let cfg = acceptance_config();
    let mut trainer = Trainer::new(&cfg).map_err(err_str)?;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(TRAIN_STEPS);
    for step in 1..=TRAIN_STEPS {
        let stats = trainer.train_step().map_err(err_str)?;
        losses.push(stats.loss);
        if step % 500 == 0 {
            eprintln!(
                "  [train] step {step}/{TRAIN_STEPS}  loss {:.5}  ({:.0} s elapsed)",
                stats.loss,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let train_wall_s = start.elapsed().as_secs_f64();
    let ctx = TaskContext::new(trainer.network().clone(), trainer.config().clone()).map_err(err_str)?;

    let draw = |res: usize, base: u64| -> Result<Vec<Field>, String> {
        let start = Instant::now();
        let fields = (0..DRAWS)
            .map(|i| ctx.sample(res, base + i as u64).map(|s| s.restored))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err_str)?;
        eprintln!("  [draws] {DRAWS} samples at {res}x{res} in {:.0} s", start.elapsed().as_secs_f64());
        Ok(fields)
    };
    let native = draw(32, 40_000)?;
    let fine = draw(64, 50_000)?;
    Ok(TrainedModel { ctx, losses, train_wall_s, native, fine })
}

fn flatten(fields: &[Field]) -> Vec<Vec<f64>> {
    fields.iter().map(|f| f.values().to_vec()).collect()
}

fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, String> {
    Ok(eval::mmd2_median(a, b).map_err(err_str)?.max(0.0).sqrt())
}

// 1-4: closed forms against dense/brute-force references.
fn criterion_oracle(rows: &[oracles::SuiteCheck], name: &str, extra: &str) -> Outcome {
    let row = rows.iter().find(|r| r.name == name).ok_or(format!("missing check {name}"))?;
    let detail = format!("max err {:.2e} (tol {:.0e}) in {:.2} s{extra}", row.max_err, row.tol, row.wall_ms / 1e3);
    if !row.passed() {
        return fail(detail);
    }
    if name == "posterior-conditioning" && row.wall_ms > 5000.0 {
        return fail(format!("{detail}; over the 5 s budget"));
    }
    Ok(detail)
}

// 5: finite differences through the whole multi-scale network.
fn criterion_gradients() -> Outcome {
    let net = Denoiser::new(NetConfig::new(1, 8), 3).map_err(err_str)?;
    let grid = RegularGrid::square(8).map_err(err_str)?;
    let plans = net.plans_for(&grid.coords(), 8).map_err(err_str)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() - 0.5).collect() };
    let x = grad::Tensor::new(&[64, 1], draw(64)).map_err(err_str)?;
    let target = grad::Tensor::new(&[64, 1], draw(64)).map_err(err_str)?;
    let mut params = net.params().clone();
    let report = grad::grad_check(&mut params, 32, 5, |tape, vars| {
        let xv = tape.input(x.clone());
        let tv = tape.input(target.clone());
        let out = net.forward(tape, xv, 3, &plans, vars)?;
        let diff = tape.sub(out, tv)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean_all(sq))
    })
    .map_err(err_str)?;
    let detail = format!(
        "{} coords over {} tensors, max rel err {:.2e} (tol 1e-4)",
        report.checked,
        params.len(),
        report.max_rel_err
    );
    if report.passed() && report.max_rel_err <= 1e-4 {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 6: smooth -> restore round trips at the pixel-sized kernel scale.
fn criterion_inversion() -> Outcome {
    let res = 32;
    // length scale = (one pixel)^2
    let l = 1.0 / (res * res) as f64;
    assert!((pixel_variance_to_length_scale(2.0, res) - l).abs() < 1e-15);
    let moll = Mollifier::new(l).map_err(err_str)?;
    let mut worst_wiener = f64::INFINITY;
    let mut worst_exact = f64::INFINITY;
    for seed in 0..32 {
        let image = gaussian_bumps(res, 1, 60_000 + seed).map_err(err_str)?;
        let smoothed = moll.mollify(&image).map_err(err_str)?;
        let wiener = moll.wiener_inverse(&smoothed, 1e-2).map_err(err_str)?;
        let exact = moll.exact_inverse(&smoothed).map_err(err_str)?;
        worst_wiener = worst_wiener.min(eval::psnr(&wiener, &image, 2.0).map_err(err_str)?);
        worst_exact = worst_exact.min(eval::psnr(&exact, &image, 2.0).map_err(err_str)?);
    }
    let detail =
        format!("32 images: wiener psnr >= {worst_wiener:.1} dB (need 30), exact >= {worst_exact:.1} dB (need 60)");
    if worst_wiener >= 30.0 && worst_exact >= 60.0 {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 7: subsampled training converges and the samples match the data.
fn criterion_training(model: &TrainedModel) -> Outcome {
    let head: f64 = model.losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = model.losses[TRAIN_STEPS - 100..].iter().sum::<f64>() / 100.0;
    let ratio = tail / head;

    let held_out: Vec<Field> =
        (0..2 * DRAWS).map(|i| gaussian_bumps(32, 1, 10_000 + i as u64)).collect::<Result<_, _>>().map_err(err_str)?;
    let held_flat = flatten(&held_out);
    let model_vs_data = mmd(&flatten(&model.native), &held_flat[..DRAWS])?;
    let null = mmd(&held_flat[..DRAWS], &held_flat[DRAWS..])?;

    let detail = format!(
        "loss {head:.3} -> {tail:.4} (ratio {ratio:.3}, need <= 0.1); mmd {model_vs_data:.4} vs null {null:.4} (need <= 3x); {:.0} s wall",
        model.train_wall_s
    );
    if ratio <= 0.1 && model_vs_data <= 3.0 * null && model.train_wall_s <= 2700.0 {
        Ok(detail)
    } else {
        fail(detail)
    }
}

fn mean_std(fields: &[Field], channel: usize) -> (f64, f64) {
    let d = fields[0].channels();
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for f in fields {
        for p in 0..f.num_points() {
            let v = f.values()[p * d + channel];
            sum += v;
            sumsq += v * v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    (mean, (sumsq / n as f64 - mean * mean).max(0.0).sqrt())
}

fn mean_spectrum(fields: &[Field]) -> Result<Vec<f64>, String> {
    let mut acc: Vec<f64> = Vec::new();
    for f in fields {
        let spec = eval::radial_spectrum(f).map_err(err_str)?;
        if acc.is_empty() {
            acc = vec![0.0; spec.len()];
        }
        for (a, s) in acc.iter_mut().zip(&spec) {
            *a += s / fields.len() as f64;
        }
    }
    Ok(acc)
}

// 8: the 32x32-trained model samples coherently at 64x64.
fn criterion_resolution(model: &TrainedModel) -> Outcome {
    let (m32, s32) = mean_std(&model.native, 0);
    let (m64, s64) = mean_std(&model.fine, 0);
    // Sample means sit near zero, so they are compared on the field scale.
    let mean_ok = (m64 - m32).abs() <= 0.2 * s32.max(m32.abs());
    let std_ok = (s64 - s32).abs() <= 0.2 * s32;

    let spec32 = mean_spectrum(&model.native)?;
    let spec64 = mean_spectrum(&model.fine)?;
    let band = 1..=8usize;
    let mut worst_bin = 0.0f64;
    for k in band.clone() {
        worst_bin = worst_bin.max((spec64[k] - spec32[k]).abs() / spec32[k]);
    }
    let detail = format!(
        "mean {m32:.3} vs {m64:.3}, std {s32:.3} vs {s64:.3}, spectrum bins {:?} max rel dev {worst_bin:.3} (all need <= 0.2)",
        band
    );
    if mean_ok && std_ok && worst_bin <= 0.2 {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 9: subsampling must buy train-step time, with exact coordinate counts.
fn criterion_speedup() -> Outcome {
    let mut cfg = acceptance_config();
    cfg.train_steps = 12;
    let rows = eval::rate_bench(&cfg, &[1, 2, 4, 8], 12).map_err(err_str)?;
    let m = 32 * 32;
    let mut by_rate: Vec<(usize, f64, usize)> = rows.iter().map(|r| (r.rate, r.median_wall_ms, r.coords_used)).collect();
    by_rate.sort_by_key(|&(rate, _, _)| rate);
    // coords_used counts the whole batch: batch items at m/rate points each.
    let counts_ok = by_rate.iter().all(|&(rate, _, coords)| coords == cfg.batch * (m / rate));
    let times: Vec<f64> = by_rate.iter().map(|&(_, t, _)| t).collect();
    let monotone = times.windows(2).all(|w| w[0] >= w[1]);
    let detail = format!(
        "median step ms by rate 1/2/4/8: {:.1}/{:.1}/{:.1}/{:.1}; coords exact: {counts_ok}",
        times[0], times[1], times[2], times[3]
    );
    if monotone && counts_ok {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 10: reconstruction guidance pulls the known region toward the data.
fn criterion_inpainting(model: &TrainedModel) -> Outcome {
    let ctx = &model.ctx;
    let m = 32 * 32;

    // lambda = 0 must take exactly the unguided path, bit for bit.
    let observed0 = gaussian_bumps(32, 1, 20_000).map_err(err_str)?;
    let mask_all = vec![true; m];
    {
        let mut zero_ctx =
            TaskContext::new(ctx.network().clone(), ctx.config().clone()).map_err(err_str)?;
        zero_ctx.config_mut().lambda = 0.0;
        let guided = zero_ctx.inpaint(&observed0, &mask_all, 777).map_err(err_str)?;
        let plain = zero_ctx.sample(32, 777).map_err(err_str)?;
        if guided.restored.values() != plain.restored.values() {
            return fail("lambda = 0 does not reproduce the unguided chain bit-for-bit");
        }
    }

    let mut wins = 0;
    let mut cases = Vec::new();
    for case in 0..16u64 {
        let observed = gaussian_bumps(32, 1, 20_100 + case).map_err(err_str)?;
        let mut rng = ChaCha8Rng::seed_from_u64(900 + case);
        let mask: Vec<bool> = if case % 2 == 0 {
            (0..m).map(|_| rng.random::<bool>()).collect()
        } else {
            // centre block hidden, border observed
            (0..m).map(|p| { let (y, x) = (p / 32, p % 32); !(8..24).contains(&y) || !(8..24).contains(&x) }).collect()
        };
        let known_mse = |field: &Field| -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for p in 0..m {
                if mask[p] {
                    let d = field.values()[p] - observed.values()[p];
                    sum += d * d;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let seed = 30_000 + case;
        let unguided = ctx.sample(32, seed).map_err(err_str)?;
        let unguided_mse = known_mse(&unguided.restored);
        let mut best = f64::INFINITY;
        for lambda in [0.1, 1.0, 10.0] {
            let mut guided_ctx =
                TaskContext::new(ctx.network().clone(), ctx.config().clone()).map_err(err_str)?;
            guided_ctx.config_mut().lambda = lambda;
            let filled = guided_ctx.inpaint(&observed, &mask, seed).map_err(err_str)?;
            best = best.min(known_mse(&filled.restored));
        }
        if best <= unguided_mse {
            wins += 1;
        }
        cases.push(format!("{best:.3}<={unguided_mse:.3}"));
        eprintln!("  [inpaint] case {case}: best guided {best:.4} vs unguided {unguided_mse:.4}");
    }
    let detail = format!("guided beats unguided on the known region in {wins}/16 cases (need >= 14)");
    if wins >= 14 {
        Ok(detail)
    } else {
        fail(format!("{detail}; per case: {}", cases.join(" ")))
    }
}

// 11: every subcommand writes byte-identical outputs from (config, seed).
fn criterion_cli_determinism() -> Outcome {
    use std::process::Command;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_text = "res = 8\nwidth = 16\nkernel_size = 5\ninner_res = 4\ntime_dim = 16\nsteps = 20\ntrain_steps = 4\nbatch = 2\nrate = 2\nckpt_every = 2\nsample_steps = 3\nout = run_out\n";
    std::fs::write(dir.path().join("run.cfg"), cfg_text).map_err(|e| e.to_string())?;

    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_hilbert-diff"))
            .current_dir(dir.path())
            .env("HILBERT_DIFF_THREADS", "1")
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
        }
        Ok(out.stdout)
    };
    let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| format!("{name}: {e}"));
    let strip_cols = |bytes: &[u8], keep: &[usize]| -> String {
        String::from_utf8_lossy(bytes)
            .lines()
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                keep.iter().map(|&i| cols[i]).collect::<Vec<_>>().join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };

    // (label, args, primary outputs to compare byte-for-byte)
    run(&["train", "--config", "run.cfg"])?;
    let pairs: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("gen-data", vec!["gen-data", "--config", "run.cfg", "--count", "2", "--out", "data"], vec![
            "data/bumps_0000.idf",
            "data/bumps_0001.idf",
        ]),
        ("sample", vec!["sample", "--ckpt", "run_out/model.idck", "--seed", "5", "--out", "s.png"], vec!["s.png"]),
        (
            "superres",
            vec![
                "superres",
                "data/bumps_0000.idf",
                "--ckpt",
                "run_out/model.idck",
                "--res",
                "16",
                "--t-start",
                "4",
                "--out",
                "up.idf",
            ],
            vec!["up.idf"],
        ),
        (
            "inpaint",
            vec![
                "inpaint",
                "data/bumps_0000.idf",
                "--mask",
                "data/bumps_0000.idf",
                "--ckpt",
                "run_out/model.idck",
                "--t-start",
                "4",
                "--out",
                "fill.idf",
            ],
            vec!["fill.idf"],
        ),
        ("eval", vec!["eval", "--ckpt", "run_out/model.idck", "--out", "ev"], vec!["ev/curve.csv", "ev/report.csv"]),
    ];
    for (label, args, outputs) in &pairs {
        run(args)?;
        let first: Vec<Vec<u8>> = outputs.iter().map(|o| read(o)).collect::<Result<_, _>>()?;
        run(args)?;
        for (o, a) in outputs.iter().zip(&first) {
            if &read(o)? != a {
                return fail(format!("{label}: {o} differs between identical runs"));
            }
        }
    }

    // train: checkpoint bytes and the timing-free metrics columns
    let ckpt = read("run_out/model.idck")?;
    let metrics = strip_cols(&read("run_out/metrics.csv")?, &[0, 1, 3]);
    std::fs::remove_dir_all(dir.path().join("run_out")).map_err(|e| e.to_string())?;
    run(&["train", "--config", "run.cfg"])?;
    if read("run_out/model.idck")? != ckpt || strip_cols(&read("run_out/metrics.csv")?, &[0, 1, 3]) != metrics {
        return fail("train: checkpoint or metrics differ between identical runs");
    }

    // bench: rates and coordinate counts are the reproducible columns
    run(&["bench", "--config", "run.cfg", "--steps", "2", "--out", "b1"])?;
    run(&["bench", "--config", "run.cfg", "--steps", "2", "--out", "b2"])?;
    if strip_cols(&read("b1/bench.csv")?, &[0, 1]) != strip_cols(&read("b2/bench.csv")?, &[0, 1]) {
        return fail("bench: rate/coordinate columns differ between identical runs");
    }

    // audits: stdout identical (oracle table modulo its timing column)
    let g1 = run(&["gradcheck", "--config", "run.cfg"])?;
    let g2 = run(&["gradcheck", "--config", "run.cfg"])?;
    if g1 != g2 {
        return fail("gradcheck: reports differ between identical runs");
    }
    let strip_ms = |bytes: &[u8]| -> String {
        String::from_utf8_lossy(bytes)
            .lines()
            .map(|l| {
                let mut cols: Vec<&str> = l.split_whitespace().collect();
                if cols.len() == 5 {
                    cols.remove(3);
                }
                cols.join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let o1 = run(&["oracle-suite"])?;
    let o2 = run(&["oracle-suite"])?;
    if strip_ms(&o1) != strip_ms(&o2) {
        return fail("oracle-suite: tables differ between identical runs");
    }
    Ok("9 subcommands re-run byte-identically (timing columns excluded)".into())
}

// Module-contract extra: super-resolution must beat noising-and-denoising
// the coarse input at the same start level, measured back on the input grid.
fn extra_superres(model: &TrainedModel) -> Outcome {
    let mut ctx = TaskContext::new(model.ctx.network().clone(), model.ctx.config().clone()).map_err(err_str)?;
    let t_start = ctx.schedule().steps() / 4;
    ctx.config_mut().t_start = t_start;
    let grid16 = RegularGrid::square(16).map_err(err_str)?;
    let (mut sr_total, mut base_total) = (0.0, 0.0);
    for case in 0..32u64 {
        let full = gaussian_bumps(32, 1, 70_000 + case).map_err(err_str)?;
        let input = downsample_to_grid(&full, &grid16, KNN_DEFAULT_K).map_err(err_str)?;
        let sr = ctx.super_resolve(&input, 32, 80_000 + case).map_err(err_str)?;
        let back = downsample_to_grid(&sr.restored, &grid16, KNN_DEFAULT_K).map_err(err_str)?;
        sr_total += loss_simple(&back, &input).map_err(err_str)?;
        let baseline = ctx.denoise_from(&input, t_start, 80_000 + case).map_err(err_str)?;
        base_total += loss_simple(&baseline, &input).map_err(err_str)?;
    }
    let detail = format!(
        "32 paired cases at t_start {t_start}: mean mse {:.4} (super-resolved) vs {:.4} (noise-denoise baseline)",
        sr_total / 32.0,
        base_total / 32.0
    );
    if sr_total < base_total {
        Ok(detail)
    } else {
        fail(detail)
    }
}

fn main() {
    let t0 = Instant::now();
    let mut failures = 0usize;
    let mut report = |label: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {label:<22} {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL  {label:<22} {detail}");
        }
    };

    let suite = oracles::run_suite();
    match &suite {
        Ok(rows) => {
            report("1 posterior-oracle", criterion_oracle(rows, "posterior-conditioning", " (1-d grids 8/16/64, 3 scales, t <= 10)"));
            report("2 marginal-closure", criterion_oracle(rows, "marginal-composition", ""));
            report("3 param-equivalence", criterion_oracle(rows, "parameterization-equivalence", " (100 states)"));
            report("4 sparse-dense-conv", criterion_oracle(rows, "sparse-dense-conv", " (20 cases)"));
        }
        Err(e) => {
            for label in ["1 posterior-oracle", "2 marginal-closure", "3 param-equivalence", "4 sparse-dense-conv"] {
                report(label, fail(format!("suite error: {e}")));
            }
        }
    }
    report("5 gradient-integrity", criterion_gradients());
    report("6 mollifier-inversion", criterion_inversion());

    match train_model() {
        Ok(model) => {
            report("7 subsampled-training", criterion_training(&model));
            report("8 resolution-transfer", criterion_resolution(&model));
            report("9 subsampling-speedup", criterion_speedup());
            report("10 guided-inpainting", criterion_inpainting(&model));
            report("extra superres-paired", extra_superres(&model));
        }
        Err(e) => {
            for label in ["7 subsampled-training", "8 resolution-transfer", "9 subsampling-speedup", "10 guided-inpainting", "extra superres-paired"] {
                report(label, fail(format!("training failed: {e}")));
            }
        }
    }
    report("11 cli-determinism", criterion_cli_determinism());

    println!(
        "acceptance: {} of 12 checks passed in {:.0} s",
        12 - failures,
        t0.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
