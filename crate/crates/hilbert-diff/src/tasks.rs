//! Checkpoint-driven generation tasks: unconditional sampling at any grid
//! resolution, super-resolution of a coarse field, and mask-guided
//! inpainting via gradients of a reconstruction loss through the network.

use crate::config::{GuidanceMode, SamplerKind, TrainConfig};
use crate::denoiser::{Denoiser, ForwardPlans};
use crate::diffusion::{
    ancestral_step, ddim_step, ddim_times, estimate_mollified_x0, forward_sample, lincomb_fields,
    noise_estimate_from_x0pred, ParamMode,
};
use crate::error::{Error, Result};
use crate::field::{downsample_to_grid, Field, InterpPlan, RegularGrid};
use crate::grad::{Tape, Tensor};
use crate::io;
use crate::mollifier::Mollifier;
use crate::schedule::NoiseSchedule;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

/// Kernel entries below this are dropped when the smoothing operator is
/// expressed as a sparse map for backpropagation.
const PLAN_TOL: f64 = 1e-14;

/// Result of a generation task: the smoothed field the reverse chain lands
/// on, and an approximately desmoothed version clamped to the data range.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub mollified: Field,
    pub restored: Field,
}

/// Precomputed inpainting state: the smoothed observation the masked loss
/// compares against, per-value mask weights, and the guidance settings.
struct Guidance {
    target: Field,
    mask: Vec<f64>,
    lambda: f64,
    mode: GuidanceMode,
    /// Smoothing operator as a sparse map, for networks that predict the
    /// clean field and therefore need `T` on the tape.
    moll_plan: Option<Arc<InterpPlan>>,
}

/// Network plus run settings, usually rebuilt from a checkpoint.
pub struct TaskContext {
    net: Denoiser,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    moll: Mollifier,
}

impl TaskContext {
    pub fn new(net: Denoiser, cfg: TrainConfig) -> Result<Self> {
        Ok(Self {
            sched: cfg.schedule()?,
            moll: cfg.mollifier()?,
            net,
            cfg,
        })
    }

    /// Rebuild network and settings from a checkpoint's embedded description.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let ck = io::load_checkpoint(path)?;
        let cfg = TrainConfig::from_meta(&ck.meta)?;
        let net = Denoiser::from_params(cfg.net_config(), ck.params)?;
        TaskContext::new(net, cfg)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.cfg
    }

    pub fn network(&self) -> &Denoiser {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.moll
    }

    /// Approximate inverse of the smoothing operator, clamped to `[-1, 1]`.
    pub fn demollify(&self, field: &Field) -> Result<Field> {
        let mut out = self.moll.wiener_inverse(field, self.cfg.wiener_eps)?;
        for v in out.values_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(out)
    }

    /// Network output reinterpreted as a smoothed-noise prediction,
    /// whichever quantity the network was trained to emit.
    fn noise_view(&self, x_t: &Field, f: &Field, t: usize) -> Result<Field> {
        match self.cfg.param_mode {
            ParamMode::NoisePred => Ok(f.clone()),
            ParamMode::X0Pred => noise_estimate_from_x0pred(x_t, f, t, &self.sched, &self.moll),
        }
    }

    /// Network prediction at `x_t`, plus — when guided — the gradient of the
    /// masked reconstruction loss `sum mask * (Tx0_est - T observed)^2` with
    /// respect to the input coordinates.
    fn predict_guided(
        &self,
        x_t: &Field,
        t: usize,
        plans: &ForwardPlans,
        guide: Option<&Guidance>,
    ) -> Result<(Field, Option<Field>)> {
        let guide = match guide {
            Some(g) if g.lambda != 0.0 => g,
            _ => return Ok((self.net.predict(x_t, t, plans)?, None)),
        };
        if guide.mode == GuidanceMode::Frozen {
            // Treat the smoothed-noise prediction as constant: the clean
            // estimate is then affine in x with slope 1/sqrt(alpha_bar).
            let f = self.net.predict(x_t, t, plans)?;
            let noise = self.noise_view(x_t, &f, t)?;
            let est = estimate_mollified_x0(x_t, &noise, t, &self.sched)?;
            let scale = 2.0 / self.sched.alpha_bar(t).sqrt();
            let grad: Vec<f64> = est
                .values()
                .iter()
                .zip(guide.target.values())
                .zip(&guide.mask)
                .map(|((e, o), m)| scale * m * (e - o))
                .collect();
            return Ok((f, Some(x_t.with_values(grad)?)));
        }
        let m = x_t.num_points();
        let d = x_t.channels();
        let tape = Tape::new();
        let pvars = self.net.param_vars(&tape, plans)?;
        let x = tape.input(Tensor::new(&[m, d], x_t.values().to_vec())?);
        let f = self.net.forward(&tape, x, t, plans, &pvars)?;
        // Clean-estimate on the tape: noise networks invert the forward
        // marginal (affine in x and f); clean-field networks push their
        // output through the smoothing operator's sparse form.
        let est = match self.cfg.param_mode {
            ParamMode::NoisePred => {
                let abar = self.sched.alpha_bar(t);
                tape.lincomb(1.0 / abar.sqrt(), x, -(1.0 - abar).sqrt() / abar.sqrt(), f)?
            }
            ParamMode::X0Pred => {
                let plan = guide.moll_plan.as_ref().expect("x0pred guidance carries the operator plan");
                tape.row_map(f, Arc::clone(plan))?
            }
        };
        let mask = tape.input(Tensor::new(&[m, d], guide.mask.clone())?);
        let want = tape.input(Tensor::new(&[m, d], guide.target.values().to_vec())?);
        let diff = tape.mul(tape.sub(est, want)?, mask)?;
        let loss = tape.sum_all(tape.mul(diff, diff)?);
        let grads = tape.backward(loss)?;
        let grad = grads
            .wrt(x)
            .ok_or_else(|| Error::invalid("reconstruction loss has no input gradient"))?
            .data()
            .to_vec();
        let f_field = x_t.with_values(tape.value(f).data().to_vec())?;
        Ok((f_field, Some(x_t.with_values(grad)?)))
    }

    fn apply_guidance(&self, x: Field, grad: Option<Field>, t: usize, guide: Option<&Guidance>) -> Result<Field> {
        match (guide, grad) {
            (Some(g), Some(grad)) => {
                // Guidance strength follows the step's posterior variance, so
                // corrections fade as the chain sharpens.
                let lam = g.lambda * self.sched.beta_tilde(t);
                lincomb_fields(1.0, &x, -lam, &grad)
            }
            _ => Ok(x),
        }
    }

    /// Drive the reverse chain from `x` at `t_start` down to the clean
    /// smoothed estimate. Deterministic in `seed`.
    fn run_chain(&self, mut x: Field, t_start: usize, seed: u64, guide: Option<&Guidance>) -> Result<Field> {
        let plans = self.net.plans_for_field(&x)?;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        match self.cfg.sampler {
            SamplerKind::Ddim => {
                let times = ddim_times(t_start, self.cfg.sample_steps)?;
                for (i, &t) in times.iter().enumerate() {
                    let t_prev = times.get(i + 1).copied().unwrap_or(0);
                    let (f, grad) = self.predict_guided(&x, t, &plans, guide)?;
                    let noise = self.noise_view(&x, &f, t)?;
                    x = ddim_step(&x, &noise, t, t_prev, &self.sched)?;
                    x = self.apply_guidance(x, grad, t, guide)?;
                }
            }
            SamplerKind::Ancestral => {
                for t in (1..=t_start).rev() {
                    let step_seed = master.random();
                    let (f, grad) = self.predict_guided(&x, t, &plans, guide)?;
                    x = ancestral_step(&x, &f, t, self.cfg.param_mode, &self.sched, &self.moll, step_seed)?;
                    x = self.apply_guidance(x, grad, t, guide)?;
                }
            }
        }
        Ok(x)
    }

    fn finish(&self, mollified: Field) -> Result<SampleOutput> {
        let restored = self.demollify(&mollified)?;
        Ok(SampleOutput { mollified, restored })
    }

    /// Unconditional draw on an `res x res` grid; any resolution works, the
    /// kernels resample to its pixel spacing.
    pub fn sample(&self, res: usize, seed: u64) -> Result<SampleOutput> {
        self.sample_guided(res, seed, None)
    }

    fn sample_guided(&self, res: usize, seed: u64, guide: Option<&Guidance>) -> Result<SampleOutput> {
        let grid = RegularGrid::square(res)?;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let init_seed = master.random();
        let chain_seed = master.random();
        // At the far end of the schedule the marginal is (almost exactly)
        // the smoothed unit Gaussian, so the chain starts from one.
        let x_start = self.moll.sample_noise(&grid, self.cfg.channels, init_seed)?;
        let x0m = self.run_chain(x_start, self.sched.steps(), chain_seed, guide)?;
        self.finish(x0m)
    }

    /// Refine a coarse grid field onto a strictly finer grid: interpolate,
    /// renoise to `t_start`, and run the reverse chain from there. With
    /// `t_start = 0` the plain interpolation comes back.
    pub fn super_resolve(&self, coarse: &Field, target_res: usize, seed: u64) -> Result<SampleOutput> {
        let grid = coarse.grid().ok_or(Error::NotOnGrid)?;
        if coarse.ndim() != 2 {
            return Err(Error::invalid("super-resolution expects a 2-d grid field"));
        }
        let coarse_res = *grid.dims().iter().max().expect("grids are non-empty");
        if target_res <= coarse_res {
            return Err(Error::invalid(format!(
                "target resolution {target_res} must exceed the input's {coarse_res}"
            )));
        }
        let t_start = self.checked_t_start()?;
        let fine = RegularGrid::square(target_res)?;
        let up = downsample_to_grid(coarse, &fine, self.cfg.knn_k)?;
        if t_start == 0 {
            return Ok(SampleOutput { mollified: up.clone(), restored: up });
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let noise_seed = master.random();
        let chain_seed = master.random();
        let state = forward_sample(&up, t_start, &self.sched, &self.moll, noise_seed)?;
        let x0m = self.run_chain(state.x_t, t_start, chain_seed, None)?;
        self.finish(x0m)
    }

    fn checked_t_start(&self) -> Result<usize> {
        if self.cfg.t_start > self.sched.steps() {
            return Err(Error::invalid(format!(
                "t_start {} exceeds the schedule length {}",
                self.cfg.t_start,
                self.sched.steps()
            )));
        }
        Ok(self.cfg.t_start)
    }

    /// Draw a field that agrees with `observed` where `mask` is true. With
    /// `t_start = 0` the full reverse chain runs from noise and `lambda = 0`
    /// reproduces the unconditional sample bit for bit; `t_start > 0` starts
    /// from the noised observation instead, keeping the output closer to it.
    /// Unknown values of `observed` only leak into the loss target through
    /// smoothing spillover, so fill them with anything plausible.
    pub fn inpaint(&self, observed: &Field, mask: &[bool], seed: u64) -> Result<SampleOutput> {
        let grid = observed.grid().ok_or(Error::NotOnGrid)?;
        if observed.ndim() != 2 || grid.dims()[0] != grid.dims()[1] {
            return Err(Error::invalid("inpainting expects a square 2-d grid field"));
        }
        if mask.len() != observed.num_points() {
            return Err(Error::shape(
                "inpaint",
                format!("{} mask flags for {} points", mask.len(), observed.num_points()),
            ));
        }
        if self.cfg.lambda < 0.0 {
            return Err(Error::invalid(format!("guidance strength must be >= 0, got {}", self.cfg.lambda)));
        }
        let t_start = self.checked_t_start()?;
        let d = observed.channels();
        let moll_plan = match (self.cfg.param_mode, self.cfg.guidance) {
            (ParamMode::X0Pred, GuidanceMode::Full) => Some(Arc::new(self.moll.grid_plan(grid, PLAN_TOL)?)),
            _ => None,
        };
        let guide = Guidance {
            target: self.moll.mollify(observed)?,
            mask: mask
                .iter()
                .flat_map(|&known| std::iter::repeat_n(if known { 1.0 } else { 0.0 }, d))
                .collect(),
            lambda: self.cfg.lambda,
            mode: self.cfg.guidance,
            moll_plan,
        };
        if t_start == 0 {
            return self.sample_guided(grid.dims()[0], seed, Some(&guide));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let noise_seed = master.random();
        let chain_seed = master.random();
        let state = forward_sample(observed, t_start, &self.sched, &self.moll, noise_seed)?;
        let x0m = self.run_chain(state.x_t, t_start, chain_seed, Some(&guide))?;
        self.finish(x0m)
    }

    /// Denoise a forward draw of `x0` from level `t_start` and report the
    /// smoothed field the chain recovers; used for denoising-error studies.
    pub fn denoise_from(&self, x0: &Field, t_start: usize, seed: u64) -> Result<Field> {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let noise_seed = master.random();
        let chain_seed = master.random();
        let state = forward_sample(x0, t_start, &self.sched, &self.moll, noise_seed)?;
        self.run_chain(state.x_t, t_start, chain_seed, None)
    }
}
