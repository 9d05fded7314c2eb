//! Training loop: random smooth fields, a random noise level per item, the
//! network evaluated on a random coordinate subset, and one Adam update per
//! batch. Everything is deterministic in the run seed.

use crate::config::TrainConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{forward_sample, ParamMode};
use crate::error::{Error, Result};
use crate::field::{subsample_indices, Field, RegularGrid};
use crate::grad::{Adam, Tape, Tensor};
use crate::io;
use crate::mollifier::Mollifier;
use crate::schedule::NoiseSchedule;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

struct Bump {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

fn draw_bumps(rng: &mut ChaCha8Rng, res: usize) -> Vec<Bump> {
    let count = rng.random_range(1..=4);
    (0..count)
        .map(|_| {
            let cy = rng.random::<f64>();
            let cx = rng.random::<f64>();
            let sigma = rng.random_range(2.0..6.0) / res as f64;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(0.3..1.0);
            Bump { cy, cx, sigma, amp }
        })
        .collect()
}

/// 1-4 signed Gaussian bumps per channel on a square grid, composited
/// additively and clamped to `[-1, 1]`. Centers are uniform over the
/// domain, widths span 2-6 pixels, magnitudes 0.3-1.
pub fn gaussian_bumps(res: usize, channels: usize, seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = RegularGrid::square(res)?;
    let coords = grid.coords();
    let m = grid.num_points();
    let mut values = vec![0.0; m * channels];
    for ch in 0..channels {
        for b in draw_bumps(&mut rng, res) {
            for p in 0..m {
                let dy = coords[2 * p] - b.cy;
                let dx = coords[2 * p + 1] - b.cx;
                values[p * channels + ch] += b.amp * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
            }
        }
    }
    for v in &mut values {
        *v = v.clamp(-1.0, 1.0);
    }
    Field::on_grid(grid, values, channels)
}

/// Sinusoidal stripes with random orientation, integer frequency 1-4, random
/// phase and magnitude 0.5-1 per channel.
pub fn stripes(res: usize, channels: usize, seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = RegularGrid::square(res)?;
    let coords = grid.coords();
    let m = grid.num_points();
    let mut values = vec![0.0; m * channels];
    for ch in 0..channels {
        let theta = rng.random::<f64>() * std::f64::consts::PI;
        let freq = rng.random_range(1..=4) as f64;
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = rng.random_range(0.5..1.0);
        let (s, c) = theta.sin_cos();
        for p in 0..m {
            let u = coords[2 * p] * c + coords[2 * p + 1] * s;
            values[p * channels + ch] = amp * (std::f64::consts::TAU * freq * u + phase).sin();
        }
    }
    Field::on_grid(grid, values, channels)
}

/// Dispatch on the dataset name from the config.
pub fn make_example(name: &str, res: usize, channels: usize, seed: u64) -> Result<Field> {
    match name {
        "bumps" => gaussian_bumps(res, channels, seed),
        "stripes" => stripes(res, channels, seed),
        other => Err(Error::Config(format!("unknown dataset '{other}' (expected bumps|stripes)"))),
    }
}

/// Write `count` example fields as `.idf` files into `dir` and return the
/// paths. File `i` uses seed `seed + i`, so a dataset is reproducible from
/// its generator name, size and seed alone.
pub fn generate_toy(
    name: &str,
    count: usize,
    res: usize,
    channels: usize,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let field = make_example(name, res, channels, seed.wrapping_add(i as u64))?;
        let path = dir.join(format!("{name}_{i:04}.idf"));
        io::save_field(&path, &field)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Per-step report; `loss` is the batch-mean training objective.
#[derive(Clone, Debug)]
pub struct TrainStats {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    /// Total coordinates the batch was evaluated on.
    pub coords_used: usize,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Owns the network, optimizer and schedule of one training run.
pub struct Trainer {
    cfg: TrainConfig,
    net: Denoiser,
    opt: Adam,
    sched: NoiseSchedule,
    moll: Mollifier,
    done: usize,
}

impl Trainer {
    /// Fresh run from a config; network weights derive from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        if cfg.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if cfg.rate < 1 {
            return Err(Error::Config("rate must be at least 1".into()));
        }
        let net = Denoiser::new(cfg.net_config(), cfg.seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            opt: Adam::new(cfg.lr),
            sched: cfg.schedule()?,
            moll: cfg.mollifier()?,
            done: 0,
        })
    }

    /// Resume from a checkpoint; the embedded run description rebuilds the
    /// config, so only the file path is needed.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let ck = io::load_checkpoint(path)?;
        let cfg = TrainConfig::from_meta(&ck.meta)?;
        let net = Denoiser::from_params(cfg.net_config(), ck.params)?;
        let (opt, done) = match ck.optimizer {
            Some((t, m, v)) => (Adam::from_state(cfg.lr, t, m, v), t as usize),
            None => (Adam::new(cfg.lr), 0),
        };
        Ok(Self {
            net,
            opt,
            sched: cfg.schedule()?,
            moll: cfg.mollifier()?,
            done,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Mutable run settings, e.g. to extend `train_steps` on a resumed run.
    /// Network-shape keys have no effect once the trainer exists.
    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.cfg
    }

    pub fn network(&self) -> &Denoiser {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Denoiser {
        &mut self.net
    }

    pub fn completed_steps(&self) -> usize {
        self.done
    }

    /// Optimizer steps recorded in the Adam state.
    pub fn opt_step_count(&self) -> usize {
        self.opt.state().0 as usize
    }

    /// Write parameters, run description and optimizer state.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (t, m, v) = self.opt.state();
        // Before the first update Adam has no moments to persist.
        let opt = if t == 0 { None } else { Some((t, m, v)) };
        io::save_checkpoint(path, self.net.params(), &self.cfg.to_meta(), opt)
    }

    /// One item of a batch: noised subset, regression target on the same
    /// subset, noise level and loss weight. Consumes exactly four draws from
    /// `rng` regardless of the subsampling rate, so runs that differ only in
    /// `rate` see the same fields, noise and noise levels.
    fn draw_item(&self, rng: &mut ChaCha8Rng) -> Result<(Field, Field, usize, f64)> {
        let data_seed = rng.random();
        let noise_seed = rng.random();
        let t = rng.random_range(1..=self.sched.steps());
        let sub_seed = rng.random();
        let x0 = make_example(&self.cfg.data, self.cfg.res, self.cfg.channels, data_seed)?;
        let state = forward_sample(&x0, t, &self.sched, &self.moll, noise_seed)?;
        let mut sub_rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let idx = subsample_indices(x0.num_points(), self.cfg.rate as f64, &mut sub_rng)?;
        let x_t = state.x_t.take_rows(&idx)?;
        // noisepred regresses the mollified noise; x0pred regresses the
        // clean field under the posterior-matching weight.
        let (target, weight) = match self.cfg.param_mode {
            ParamMode::NoisePred => (state.mollified_noise.take_rows(&idx)?, 1.0),
            ParamMode::X0Pred => {
                let c = self.sched.coefficients_at(t);
                let s2 = if c.sigma2 > 0.0 { c.sigma2 } else { c.beta };
                let w = c.alpha_bar_prev.sqrt() * c.beta / (2.0 * s2 * (1.0 - c.alpha_bar));
                (x0.take_rows(&idx)?, w)
            }
        };
        Ok((x_t, target, t, weight))
    }

    /// Batch-mean loss at a given step index without touching the network,
    /// drawn from the same item stream `train_step` would use.
    pub fn batch_loss(&self, step: usize) -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.cfg.seed, step));
        let mut loss_sum = 0.0;
        let mut coords_used = 0;
        for _ in 0..self.cfg.batch {
            let (x_t, target, t, weight) = self.draw_item(&mut rng)?;
            let plans = self.net.plans_for_field(&x_t)?;
            let f = self.net.predict(&x_t, t, &plans)?;
            loss_sum += weight * crate::diffusion::loss_simple(&f, &target)?;
            coords_used += x_t.num_points();
        }
        Ok((loss_sum / self.cfg.batch as f64, coords_used))
    }

    /// Loss and parameter gradients for one item on its own tape.
    fn item_pass(&self, x_t: &Field, target: &Field, t: usize, weight: f64) -> Result<(f64, Vec<Option<Tensor>>)> {
        let d = self.cfg.channels;
        let m = x_t.num_points();
        let tape = Tape::new();
        let plans = self.net.plans_for_field(x_t)?;
        let pvars = self.net.param_vars(&tape, &plans)?;
        let x = tape.input(Tensor::new(&[m, d], x_t.values().to_vec())?);
        let f = self.net.forward(&tape, x, t, &plans, &pvars)?;
        let want = tape.input(Tensor::new(&[m, d], target.values().to_vec())?);
        let diff = tape.sub(f, want)?;
        let loss = tape.scale(tape.mean_all(tape.mul(diff, diff)?), weight);
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((loss_val, pvars.iter().map(|v| grads.wrt(*v).cloned()).collect()))
    }

    /// One optimizer step over a fresh batch. Deterministic given
    /// `(config, step index)`, so resumed runs continue the same trajectory.
    pub fn train_step(&mut self) -> Result<TrainStats> {
        let start = Instant::now();
        let step = self.done + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.cfg.seed, step));
        let n_params = self.net.params().len();
        let mut grad_sum: Vec<Option<Tensor>> = vec![None; n_params];
        let mut loss_sum = 0.0;
        let mut coords_used = 0;
        for _ in 0..self.cfg.batch {
            let (x_t, target, t, weight) = self.draw_item(&mut rng)?;
            let (loss, grads) = self.item_pass(&x_t, &target, t, weight)?;
            loss_sum += loss;
            coords_used += x_t.num_points();
            for (slot, g) in grad_sum.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        let loss = loss_sum / self.cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        let scale = 1.0 / self.cfg.batch as f64;
        let grads: Vec<Tensor> = grad_sum
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(mut g) => {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                    g
                }
                None => Tensor::zeros(self.net.params().tensor(i).shape()),
            })
            .collect();
        self.opt.step(self.net.params_mut(), &grads)?;
        self.done = step;
        Ok(TrainStats {
            step,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            coords_used,
        })
    }

    /// Train up to `cfg.train_steps`, appending `metrics.csv` and renewing
    /// `model.idck` in `out_dir` every `cfg.ckpt_every` steps and at the end.
    pub fn run(&mut self, out_dir: impl AsRef<Path>, mut on_step: impl FnMut(&TrainStats)) -> Result<()> {
        let out = out_dir.as_ref();
        std::fs::create_dir_all(out)?;
        let metrics_path = out.join("metrics.csv");
        let mut metrics = if self.done == 0 || !metrics_path.exists() {
            let mut f = std::fs::File::create(&metrics_path)?;
            writeln!(f, "step,loss,wall_ms,coords_used")?;
            f
        } else {
            std::fs::OpenOptions::new().append(true).open(&metrics_path)?
        };
        while self.done < self.cfg.train_steps {
            let stats = match self.train_step() {
                Ok(s) => s,
                Err(e @ Error::Diverged(_)) => {
                    // Preserve the state that blew up for post-mortems.
                    self.save(out.join("diverged.idck"))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(metrics, "{},{},{},{}", stats.step, stats.loss, stats.wall_ms, stats.coords_used)?;
            if stats.step % self.cfg.ckpt_every == 0 {
                metrics.flush()?;
                self.save(out.join("model.idck"))?;
            }
            on_step(&stats);
        }
        metrics.flush()?;
        // Unconditional so a zero-step run still leaves a usable checkpoint.
        self.save(out.join("model.idck"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(
            "res = 8\nwidth = 16\nkernel_size = 5\ninner_res = 4\ntime_dim = 16\nsteps = 20\ntrain_steps = 4\nbatch = 2\nrate = 2\nckpt_every = 2\n",
        )
        .unwrap();
        cfg
    }

    #[test]
    fn generators_are_seed_deterministic_and_bounded() {
        let a = gaussian_bumps(16, 1, 7).unwrap();
        let b = gaussian_bumps(16, 1, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.values().iter().any(|v| v.abs() > 0.05), "bumps must not be flat");
        let c = gaussian_bumps(16, 1, 8).unwrap();
        assert_ne!(a.values(), c.values());

        let s = stripes(16, 2, 3).unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.values(), stripes(16, 2, 3).unwrap().values());
        assert!(s.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(make_example("plasma", 8, 1, 0).is_err());
    }

    #[test]
    fn untrained_zero_output_loss_matches_the_noise_energy() {
        // With the output projection zeroed the network emits exactly zero,
        // so the noise-regression loss is mean |T xi|^2, whose expectation is
        // the operator's squared-symbol sum over the point count.
        let mut cfg = tiny_config();
        cfg.apply_text("res = 16\nrate = 1\nbatch = 8\ninner_res = 4\n").unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        let pid = tr.net.params().find("project.w").unwrap();
        for v in tr.net.params_mut().tensor_mut(pid).data_mut() {
            *v = 0.0;
        }
        let stats = tr.train_step().unwrap();
        let grid = RegularGrid::square(cfg.res).unwrap();
        let symbol = cfg.mollifier().unwrap().symbol(&grid);
        let want: f64 = symbol.iter().map(|s| s * s).sum::<f64>() / grid.num_points() as f64;
        assert!(want < 0.95, "mollifier must suppress energy for this check to discriminate");
        assert!(
            (stats.loss - want).abs() < 0.3 * want,
            "zero-net loss {} should be near the noise energy {want}",
            stats.loss
        );
    }

    #[test]
    fn train_steps_are_deterministic_in_the_seed() {
        let cfg = tiny_config();
        let mut a = Trainer::new(&cfg).unwrap();
        let mut b = Trainer::new(&cfg).unwrap();
        for _ in 0..2 {
            let sa = a.train_step().unwrap();
            let sb = b.train_step().unwrap();
            assert_eq!(sa.loss, sb.loss);
            assert_eq!(sa.coords_used, sb.coords_used);
        }
        assert_eq!(a.net.params().tensor(0).data(), b.net.params().tensor(0).data());
        assert_eq!(a.completed_steps(), 2);
        // expected subset size: batch * round(m / rate)
        assert_eq!(a.train_step().unwrap().coords_used, 2 * 32);
    }

    #[test]
    fn a_short_run_reduces_the_loss() {
        let mut cfg = tiny_config();
        cfg.apply_text("train_steps = 40\nbatch = 4\nlr = 0.003\n").unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..cfg.train_steps {
            losses.push(tr.train_step().unwrap().loss);
        }
        let head: f64 = losses[..8].iter().sum::<f64>() / 8.0;
        let tail: f64 = losses[losses.len() - 8..].iter().sum::<f64>() / 8.0;
        assert!(
            tail < 0.8 * head,
            "loss should drop: first-8 mean {head}, last-8 mean {tail}"
        );
    }

    #[test]
    fn checkpoints_resume_the_optimizer_and_config() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.idck");
        let cfg = tiny_config();
        let mut tr = Trainer::new(&cfg).unwrap();
        tr.train_step().unwrap();
        tr.train_step().unwrap();
        tr.save(&path).unwrap();

        let mut back = Trainer::from_checkpoint(&path).unwrap();
        assert_eq!(back.completed_steps(), 2);
        assert_eq!(back.config(), &cfg);
        // parameters round-trip through f32 storage
        for i in 0..tr.net.params().len() {
            for (a, b) in tr.net.params().tensor(i).data().iter().zip(back.net.params().tensor(i).data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        let stats = back.train_step().unwrap();
        assert_eq!(stats.step, 3);
        assert_eq!(back.opt_step_count(), 3);
    }

    #[test]
    fn poisoned_parameters_surface_as_divergence() {
        let cfg = tiny_config();
        let mut tr = Trainer::new(&cfg).unwrap();
        tr.net.params_mut().tensor_mut(0).data_mut()[0] = f64::NAN;
        match tr.train_step() {
            Err(Error::Diverged(step)) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bump_centers_cover_the_domain_uniformly() {
        // Chi-square occupancy test on a 4x4 partition of the unit square:
        // 10^4 centers, 15 degrees of freedom, reject below p = 0.01 via the
        // critical value 30.578.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 16];
        let mut n = 0;
        while n < 10_000 {
            for b in draw_bumps(&mut rng, 32) {
                if n == 10_000 {
                    break;
                }
                let iy = ((b.cy * 4.0) as usize).min(3);
                let ix = ((b.cx * 4.0) as usize).min(3);
                counts[iy * 4 + ix] += 1;
                n += 1;
            }
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 30.578, "chi-square {chi2} exceeds the p=0.01 critical value");
    }

    #[test]
    fn mean_loss_is_invariant_to_the_subsampling_rate() {
        // With frozen random parameters the expected loss is a per-coordinate
        // mean, so it cannot depend on how many coordinates are kept.
        let mut means = Vec::new();
        for rate in [1usize, 2, 4, 8] {
            let mut cfg = tiny_config();
            cfg.apply_text(&format!("res = 16\ninner_res = 4\nrate = {rate}\n")).unwrap();
            let tr = Trainer::new(&cfg).unwrap();
            let total: f64 = (1..=200).map(|s| tr.batch_loss(s).unwrap().0).sum();
            means.push(total / 200.0);
        }
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(0.0, f64::max);
        assert!(hi <= 1.1 * lo, "rate-dependent means {means:?}");
    }

    #[test]
    fn toy_datasets_are_reproducible_files() {
        let dir = tempdir().unwrap();
        let paths = generate_toy("stripes", 3, 8, 1, 5, dir.path().join("a")).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[0].ends_with("stripes_0000.idf"));
        let again = generate_toy("stripes", 3, 8, 1, 5, dir.path().join("b")).unwrap();
        for (p, q) in paths.iter().zip(&again) {
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
        }
        let loaded = io::load_field(&paths[2]).unwrap();
        let direct = stripes(8, 1, 7).unwrap();
        for (a, b) in loaded.values().iter().zip(direct.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn reloaded_checkpoints_predict_bit_identically() {
        // The first save truncates to f32; after that, save -> load is the
        // identity, so two reloads agree exactly.
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let mut tr = Trainer::new(&cfg).unwrap();
        tr.train_step().unwrap();
        tr.save(dir.path().join("a.idck")).unwrap();
        let a = Trainer::from_checkpoint(dir.path().join("a.idck")).unwrap();
        a.save(dir.path().join("b.idck")).unwrap();
        let b = Trainer::from_checkpoint(dir.path().join("b.idck")).unwrap();
        let x = gaussian_bumps(cfg.res, cfg.channels, 99).unwrap();
        let plans = a.network().plans_for_field(&x).unwrap();
        let fa = a.network().predict(&x, 3, &plans).unwrap();
        let fb = b.network().predict(&x, 3, &plans).unwrap();
        assert_eq!(fa.values(), fb.values());
    }

    #[test]
    fn zero_step_runs_still_write_the_initial_checkpoint() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.apply_text("train_steps = 0\n").unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        tr.run(dir.path(), |_| {}).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1, "header only");
        let back = Trainer::from_checkpoint(dir.path().join("model.idck")).unwrap();
        assert_eq!(back.completed_steps(), 0);
        assert_eq!(back.config(), &cfg);
    }

    #[test]
    fn diverging_runs_dump_their_state() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let mut tr = Trainer::new(&cfg).unwrap();
        tr.net.params_mut().tensor_mut(0).data_mut()[0] = f64::NAN;
        match tr.run(dir.path(), |_| {}) {
            Err(Error::Diverged(1)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(dir.path().join("diverged.idck").exists());
    }

    #[test]
    fn run_writes_metrics_and_a_loadable_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let mut tr = Trainer::new(&cfg).unwrap();
        let mut seen = 0;
        tr.run(dir.path(), |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,wall_ms,coords_used");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,"));
        let ck = io::load_checkpoint(dir.path().join("model.idck")).unwrap();
        assert_eq!(ck.params.len(), tr.net.params().len());
        assert!(ck.optimizer.is_some());
    }
}
