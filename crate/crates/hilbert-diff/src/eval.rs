//! Quality and performance measurement: kernel two-sample tests, spectral
//! statistics, per-noise-level loss curves, cross-resolution consistency
//! reports, and subsampling-rate timing.

use crate::config::TrainConfig;
use crate::diffusion::{forward_sample, loss_simple, ParamMode};
use crate::error::{Error, Result};
use crate::fft;
use crate::field::{downsample_to_grid, Field, RegularGrid};
use crate::tasks::TaskContext;
use crate::trainer::{make_example, Trainer};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over the pooled vectors — the usual bandwidth
/// heuristic for the Gaussian kernel.
pub fn median_pairwise_distance(pooled: &[Vec<f64>]) -> Result<f64> {
    if pooled.len() < 2 {
        return Err(Error::invalid("bandwidth heuristic needs at least two vectors"));
    }
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(&pooled[i], &pooled[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    if median <= 0.0 {
        return Err(Error::invalid("all pooled vectors coincide; bandwidth is degenerate"));
    }
    Ok(median)
}

/// Unbiased squared maximum mean discrepancy under the Gaussian kernel
/// `k(a, b) = exp(-|a - b|^2 / (2 bandwidth^2))`. Needs two vectors per side;
/// identical lists give a value <= 0.
pub fn mmd2(xs: &[Vec<f64>], ys: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    let (n, m) = (xs.len(), ys.len());
    if n < 2 || m < 2 {
        return Err(Error::invalid(format!("mmd needs >= 2 samples per side, got {n} and {m}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let dim = xs[0].len();
    if xs.iter().chain(ys).any(|v| v.len() != dim) {
        return Err(Error::shape("mmd", "samples must share one flattened length"));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp();
    // Row sums are collected in index order before the final reduction, so
    // the result is bit-identical for any worker count.
    let row_sums = |aa: &[Vec<f64>], bb: &[Vec<f64>], skip_diag: bool| -> f64 {
        use rayon::prelude::*;
        (0..aa.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for (j, b) in bb.iter().enumerate() {
                    if !(skip_diag && i == j) {
                        s += k(&aa[i], b);
                    }
                }
                s
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    };
    let kxx = row_sums(xs, xs, true);
    let kyy = row_sums(ys, ys, true);
    let kxy = row_sums(xs, ys, false);
    Ok(kxx / (n * (n - 1)) as f64 + kyy / (m * (m - 1)) as f64 - 2.0 * kxy / (n * m) as f64)
}

/// `mmd2` with the median-distance bandwidth computed on the pooled samples.
pub fn mmd2_median(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    let pooled: Vec<Vec<f64>> = xs.iter().chain(ys).cloned().collect();
    mmd2(xs, ys, median_pairwise_distance(&pooled)?)
}

/// Peak signal-to-noise ratio between two fields for the given value range.
pub fn psnr(a: &Field, b: &Field, peak: f64) -> Result<f64> {
    let mse = loss_simple(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Radially averaged power spectrum of a square grid field, channels
/// averaged. The transform is normalized by the point count, so smooth
/// fields sampled at different resolutions agree on shared low bins; bin `r`
/// holds the mean power at integer radius `r`, up to the axis Nyquist.
pub fn radial_spectrum(field: &Field) -> Result<Vec<f64>> {
    let grid = field.grid().ok_or(Error::NotOnGrid)?;
    if grid.ndim() != 2 || grid.dims()[0] != grid.dims()[1] {
        return Err(Error::invalid("radial spectrum expects a square 2-d grid"));
    }
    let side = grid.dims()[0];
    let m = grid.num_points();
    let d = field.channels();
    let nbins = side / 2 + 1;
    let mut power = vec![0.0; nbins];
    let mut count = vec![0usize; nbins];
    let signed = |k: usize| if k <= side / 2 { k as f64 } else { k as f64 - side as f64 };
    let mut chan = vec![0.0; m];
    for c in 0..d {
        for i in 0..m {
            chan[i] = field.values()[i * d + c];
        }
        let spec = fft::fft_real(&chan, grid.dims());
        for ky in 0..side {
            for kx in 0..side {
                let r = (signed(ky).powi(2) + signed(kx).powi(2)).sqrt().round() as usize;
                if r < nbins {
                    let v = spec[ky * side + kx] / m as f64;
                    power[r] += v.norm_sqr();
                    if c == 0 {
                        count[r] += 1;
                    }
                }
            }
        }
    }
    Ok(power
        .iter()
        .zip(&count)
        .map(|(p, &c)| p / (c * d) as f64)
        .collect())
}

/// Mean prediction loss at each requested noise level, averaged over `draws`
/// fresh training examples; the regression target follows the network's
/// output convention.
pub fn denoise_mse_curve(
    ctx: &TaskContext,
    ts: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if draws == 0 {
        return Err(Error::invalid("the loss curve needs at least one draw"));
    }
    let cfg = ctx.config();
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut total = 0.0;
        for _ in 0..draws {
            let data_seed = rng.random();
            let noise_seed = rng.random();
            let x0 = make_example(&cfg.data, cfg.res, cfg.channels, data_seed)?;
            let state = forward_sample(&x0, t, ctx.schedule(), ctx.mollifier(), noise_seed)?;
            let plans = ctx.network().plans_for_field(&state.x_t)?;
            let f = ctx.network().predict(&state.x_t, t, &plans)?;
            let target = match cfg.param_mode {
                ParamMode::NoisePred => &state.mollified_noise,
                ParamMode::X0Pred => &x0,
            };
            total += loss_simple(&f, target)?;
        }
        rows.push((t, total / draws as f64));
    }
    Ok(rows)
}

/// One row of the cross-resolution consistency report.
#[derive(Clone, Debug)]
pub struct ResolutionRow {
    pub res: usize,
    /// Per-channel mean over all sampled values.
    pub mean: Vec<f64>,
    /// Per-channel standard deviation over all sampled values.
    pub std: Vec<f64>,
    /// Radially averaged power spectrum, averaged over the samples.
    pub spectrum: Vec<f64>,
    /// Squared discrepancy against the native-resolution batch after
    /// resampling onto the native grid; the native row compares the batch
    /// with itself, so values <= 0 are the expected null there.
    pub mmd2_vs_native: f64,
}

fn batch_stats(samples: &[Field], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut count = 0usize;
    for s in samples {
        for (i, v) in s.values().iter().enumerate() {
            mean[i % channels] += v;
        }
        count += s.num_points();
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let mut var = vec![0.0; channels];
    for s in samples {
        for (i, v) in s.values().iter().enumerate() {
            let d = v - mean[i % channels];
            var[i % channels] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
    (mean, std)
}

/// Draw `n_samples` fields at every resolution and compare their statistics
/// and spectra against the training resolution; samples resampled onto the
/// native grid feed the discrepancy column.
pub fn discretisation_report(
    ctx: &TaskContext,
    res_list: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ResolutionRow>> {
    if n_samples < 2 {
        return Err(Error::invalid("the resolution report needs at least two samples"));
    }
    let native_res = ctx.config().res;
    let channels = ctx.config().channels;
    let native_grid = RegularGrid::square(native_res)?;
    let draw_batch = |res: usize, seed_base: u64| -> Result<Vec<Field>> {
        (0..n_samples)
            .map(|i| Ok(ctx.sample(res, seed_base.wrapping_add(i as u64))?.restored))
            .collect()
    };
    let native = draw_batch(native_res, seed)?;
    let native_flat: Vec<Vec<f64>> = native.iter().map(|f| f.values().to_vec()).collect();
    let mut rows = Vec::with_capacity(res_list.len());
    for (ri, &res) in res_list.iter().enumerate() {
        // the native row reuses the native batch so its discrepancy is a null
        let batch = if res == native_res {
            native.clone()
        } else {
            draw_batch(res, seed.wrapping_add(((ri + 1) * n_samples) as u64))?
        };
        let (mean, std) = batch_stats(&batch, channels);
        let mut spectrum = vec![0.0; res / 2 + 1];
        for s in &batch {
            for (acc, v) in spectrum.iter_mut().zip(radial_spectrum(s)?) {
                *acc += v / n_samples as f64;
            }
        }
        let resampled: Vec<Vec<f64>> = batch
            .iter()
            .map(|f| Ok(downsample_to_grid(f, &native_grid, ctx.config().knn_k)?.values().to_vec()))
            .collect::<Result<_>>()?;
        let mmd2_vs_native = mmd2_median(&native_flat, &resampled)?;
        rows.push(ResolutionRow { res, mean, std, spectrum, mmd2_vs_native });
    }
    Ok(rows)
}

/// One row of the subsampling-rate benchmark.
#[derive(Clone, Debug)]
pub struct RateBenchRow {
    pub rate: usize,
    /// Coordinates one optimizer step touches (whole batch).
    pub coords_used: usize,
    pub median_wall_ms: f64,
    /// Peak resident set size of the process after the steps, in kilobytes.
    pub peak_rss_kb: u64,
}

/// Peak resident memory of this process in kilobytes, from the kernel's
/// high-water mark; 0 when the accounting file is unavailable.
pub fn peak_rss_kb() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|rest| rest.trim().trim_end_matches("kB").trim().parse().ok())
        .unwrap_or(0)
}

/// Time `steps_per_rate` optimizer steps at every subsampling rate with all
/// other settings fixed. Rates run sparsest first so the memory high-water
/// mark reflects each row's own workload as it grows.
pub fn rate_bench(cfg: &TrainConfig, rates: &[usize], steps_per_rate: usize) -> Result<Vec<RateBenchRow>> {
    if rates.is_empty() || steps_per_rate == 0 {
        return Err(Error::invalid("the rate benchmark needs rates and at least one step"));
    }
    let mut order: Vec<usize> = rates.to_vec();
    order.sort_unstable_by(|a, b| b.cmp(a));
    order.dedup();
    let mut rows = Vec::with_capacity(order.len());
    for rate in order {
        let mut run_cfg = cfg.clone();
        run_cfg.rate = rate;
        let mut trainer = Trainer::new(&run_cfg)?;
        let mut walls = Vec::with_capacity(steps_per_rate);
        let mut coords = 0;
        for _ in 0..steps_per_rate {
            let stats = trainer.train_step()?;
            walls.push(stats.wall_ms);
            coords = stats.coords_used;
        }
        walls.sort_by(|a, b| a.partial_cmp(b).expect("wall times are finite"));
        let mid = walls.len() / 2;
        let median_wall_ms = if walls.len() % 2 == 0 { 0.5 * (walls[mid - 1] + walls[mid]) } else { walls[mid] };
        rows.push(RateBenchRow { rate, coords_used: coords, median_wall_ms, peak_rss_kb: peak_rss_kb() });
    }
    Ok(rows)
}

/// CSV text for a loss curve: `t,mean_loss`.
pub fn curve_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("t,mean_loss\n");
    for (t, loss) in rows {
        out.push_str(&format!("{t},{loss}\n"));
    }
    out
}

/// CSV text for the resolution report:
/// `res,channel,mean,std,mmd2_vs_native,spectrum...` (spectrum
/// semicolon-joined so the row count stays one per resolution and channel).
pub fn report_csv(rows: &[ResolutionRow]) -> String {
    let mut out = String::from("res,channel,mean,std,mmd2_vs_native,spectrum\n");
    for row in rows {
        let spec: Vec<String> = row.spectrum.iter().map(|v| v.to_string()).collect();
        let spec = spec.join(";");
        for c in 0..row.mean.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.res, c, row.mean[c], row.std[c], row.mmd2_vs_native, spec
            ));
        }
    }
    out
}

/// CSV text for the rate benchmark: `rate,coords_used,median_wall_ms,peak_rss_kb`.
pub fn bench_csv(rows: &[RateBenchRow]) -> String {
    let mut out = String::from("rate,coords_used,median_wall_ms,peak_rss_kb\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.rate, r.coords_used, r.median_wall_ms, r.peak_rss_kb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;
    use crate::trainer::stripes;
    use approx::assert_relative_eq;

    fn gaussian_cloud(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
            .collect()
    }

    #[test]
    fn mmd_matches_a_hand_computed_case() {
        let xs = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let ys = vec![vec![0.0, 1.0], vec![2.0, 2.0]];
        let bw = 1.5_f64;
        let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bw * bw)).exp();
        let want = k(&xs[0], &xs[1]) + k(&ys[0], &ys[1])
            - 0.5 * (k(&xs[0], &ys[0]) + k(&xs[0], &ys[1]) + k(&xs[1], &ys[0]) + k(&xs[1], &ys[1]));
        assert_relative_eq!(mmd2(&xs, &ys, bw).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn identical_lists_give_a_nonpositive_unbiased_estimate() {
        let xs = gaussian_cloud(8, 5, 0.0, 1);
        let v = mmd2_median(&xs, &xs).unwrap();
        assert!(v <= 1e-12, "mmd2 of a list with itself must be <= 0, got {v}");
    }

    #[test]
    fn separated_distributions_dominate_the_null() {
        let xs = gaussian_cloud(16, 4, 0.0, 1);
        let ys = gaussian_cloud(16, 4, 0.0, 2);
        let null = mmd2_median(&xs, &ys).unwrap();
        let far = gaussian_cloud(16, 4, 3.0, 3);
        let signal = mmd2_median(&xs, &far).unwrap();
        assert!(signal > 10.0 * null.abs().max(1e-6), "signal {signal} vs null {null}");
        // symmetry
        assert_relative_eq!(signal, mmd2_median(&far, &xs).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn psnr_has_the_textbook_values() {
        let grid = RegularGrid::square(4).unwrap();
        let a = Field::on_grid(grid.clone(), vec![0.5; 16], 1).unwrap();
        let b = Field::on_grid(grid.clone(), vec![0.0; 16], 1).unwrap();
        // mse 0.25 against peak 2 -> 10 log10(16)
        assert_relative_eq!(psnr(&a, &b, 2.0).unwrap(), 10.0 * 16.0_f64.log10(), epsilon = 1e-12);
        assert!(psnr(&a, &a, 2.0).unwrap().is_infinite());
    }

    #[test]
    fn stripe_spectra_peak_at_their_frequency() {
        // stripes with seed 3 pick some integer cycle count; find it by the
        // dominant nonzero bin and confirm concentration
        let f = stripes(32, 1, 3).unwrap();
        let spec = radial_spectrum(&f).unwrap();
        assert_eq!(spec.len(), 17);
        let (peak_bin, peak) = spec.iter().enumerate().skip(1).fold((0, 0.0), |acc, (i, &v)| {
            if v > acc.1 { (i, v) } else { acc }
        });
        assert!((1..=6).contains(&peak_bin), "stripes concentrate at low integer radius, got {peak_bin}");
        let rest: f64 = spec.iter().enumerate().filter(|(i, _)| *i != peak_bin).map(|(_, v)| v).sum();
        assert!(peak > rest, "peak {peak} should dominate the remainder {rest}");

        let flat = Field::on_grid(RegularGrid::square(16).unwrap(), vec![0.25; 256], 1).unwrap();
        let fs = radial_spectrum(&flat).unwrap();
        assert_relative_eq!(fs[0], 0.25 * 0.25, epsilon = 1e-12);
        assert!(fs[1..].iter().all(|v| *v < 1e-20));
    }

    #[test]
    fn smooth_fields_keep_their_low_spectrum_across_resolutions() {
        let bump = |res: usize| {
            let grid = RegularGrid::square(res).unwrap();
            let values = grid
                .coords()
                .chunks(2)
                .map(|c| (-((c[0] - 0.5).powi(2) + (c[1] - 0.5).powi(2)) / (2.0 * 0.15 * 0.15)).exp())
                .collect();
            Field::on_grid(grid, values, 1).unwrap()
        };
        let lo = radial_spectrum(&bump(16)).unwrap();
        let hi = radial_spectrum(&bump(32)).unwrap();
        for r in 0..4 {
            assert!(
                (lo[r] - hi[r]).abs() <= 0.1 * lo[r].max(hi[r]),
                "bin {r}: {} vs {}",
                lo[r],
                hi[r]
            );
        }
        assert!(lo[6] < lo[0], "smooth spectra decay with radius");
    }

    fn tiny_context() -> TaskContext {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(
            "res = 8\nwidth = 16\nkernel_size = 5\ninner_res = 4\ntime_dim = 16\nsteps = 12\nsample_steps = 3\n",
        )
        .unwrap();
        let net = Denoiser::new(cfg.net_config(), 4).unwrap();
        TaskContext::new(net, cfg).unwrap()
    }

    #[test]
    fn zeroed_output_curve_sits_at_the_noise_energy() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("res = 16\nwidth = 16\nkernel_size = 5\ninner_res = 4\ntime_dim = 16\nsteps = 12\n")
            .unwrap();
        let mut net = Denoiser::new(cfg.net_config(), 4).unwrap();
        let pid = net.params().find("project.w").unwrap();
        for v in net.params_mut().tensor_mut(pid).data_mut() {
            *v = 0.0;
        }
        let ctx = TaskContext::new(net, cfg.clone()).unwrap();
        let rows = denoise_mse_curve(&ctx, &[1, 6, 12], 12, 7).unwrap();
        let grid = RegularGrid::square(16).unwrap();
        let want: f64 =
            cfg.mollifier().unwrap().symbol(&grid).iter().map(|s| s * s).sum::<f64>() / grid.num_points() as f64;
        for (t, loss) in rows {
            assert!(
                (loss - want).abs() < 0.35 * want,
                "t={t}: zero-model loss {loss} should sit near {want}"
            );
        }
        // determinism
        assert_eq!(
            denoise_mse_curve(&ctx, &[3], 4, 9).unwrap(),
            denoise_mse_curve(&ctx, &[3], 4, 9).unwrap()
        );
    }

    #[test]
    fn resolution_report_has_null_native_row_and_sane_shapes() {
        let ctx = tiny_context();
        let rows = discretisation_report(&ctx, &[8, 12], 4, 21).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].res, 8);
        assert!(rows[0].mmd2_vs_native <= 1e-9, "native row is a self-comparison null");
        assert_eq!(rows[0].spectrum.len(), 5);
        assert_eq!(rows[1].spectrum.len(), 7);
        for row in &rows {
            assert_eq!(row.mean.len(), 1);
            assert!(row.mean[0].is_finite() && row.std[0].is_finite());
            assert!(row.mmd2_vs_native.is_finite());
        }
        let csv = report_csv(&rows);
        assert!(csv.starts_with("res,channel,mean,std,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rate_bench_rows_track_the_rates() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(
            "res = 8\nwidth = 16\nkernel_size = 5\ninner_res = 4\ntime_dim = 16\nsteps = 12\nbatch = 2\n",
        )
        .unwrap();
        let rows = rate_bench(&cfg, &[1, 2, 4], 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].rate, 4, "sparsest rate runs first");
        let by_rate = |r: usize| rows.iter().find(|row| row.rate == r).unwrap();
        assert_eq!(by_rate(1).coords_used, 2 * 64);
        assert_eq!(by_rate(2).coords_used, 2 * 32);
        assert_eq!(by_rate(4).coords_used, 2 * 16);
        for row in &rows {
            assert!(row.median_wall_ms > 0.0);
        }
        assert!(by_rate(1).peak_rss_kb > 0, "alive processes have a memory high-water mark");
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("4,"));
    }
}
