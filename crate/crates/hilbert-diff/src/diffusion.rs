//! Closed-form diffusion algebra in the mollified state space.
//!
//! With `T` the mollifier and `alpha_bar_t` from the schedule, the forward
//! process has marginals
//!
//! ```text
//! q(x_t | x_0) = N( sqrt(alpha_bar_t) T x_0,  (1 - alpha_bar_t) T T* )
//! ```
//!
//! and the posterior of one step given the clean field is Gaussian with
//!
//! ```text
//! mean = (sqrt(alpha_bar_{t-1}) beta_t / (1 - alpha_bar_t)) T x_0
//!      + (sqrt(alpha_t) (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)) x_t
//! cov  = beta_tilde_t T T*
//! ```
//!
//! Every covariance in play is a scalar multiple of `T T*`, so states stay
//! expressible as fields and reverse steps reduce to scalar coefficient
//! arithmetic plus applications of `T`. The network can predict either the
//! clean field (`x0pred`) or the mollified noise (`noisepred`); both induce
//! the same posterior mean and the equivalence is oracle-checked in tests.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::mollifier::Mollifier;
use crate::schedule::NoiseSchedule;

/// What the denoising network's output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// The network predicts the clean (unmollified) field `x_0`.
    X0Pred,
    /// The network predicts the mollified noise `T xi` (default).
    NoisePred,
}

impl Default for ParamMode {
    fn default() -> Self {
        ParamMode::NoisePred
    }
}

impl std::str::FromStr for ParamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x0pred" => Ok(ParamMode::X0Pred),
            "noisepred" => Ok(ParamMode::NoisePred),
            other => Err(Error::invalid(format!("unknown param mode '{other}' (expected x0pred|noisepred)"))),
        }
    }
}

impl std::fmt::Display for ParamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamMode::X0Pred => "x0pred",
            ParamMode::NoisePred => "noisepred",
        })
    }
}

/// A forward draw `x_t` together with the mollified quantities that produced
/// it; training targets read straight from here.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub x_t: Field,
    /// `T x_0`.
    pub mollified_x0: Field,
    /// `T xi`, the regression target for `noisepred` training.
    pub mollified_noise: Field,
}

fn check_same_support(op: &'static str, a: &Field, b: &Field) -> Result<()> {
    if a.num_points() != b.num_points() || a.channels() != b.channels() || a.ndim() != b.ndim() {
        return Err(Error::shape(
            op,
            format!(
                "{}x{} ({}-d) vs {}x{} ({}-d)",
                a.num_points(),
                a.channels(),
                a.ndim(),
                b.num_points(),
                b.channels(),
                b.ndim()
            ),
        ));
    }
    Ok(())
}

/// `ca * a + cb * b` over matching fields, keeping `a`'s coordinates.
pub fn lincomb_fields(ca: f64, a: &Field, cb: f64, b: &Field) -> Result<Field> {
    check_same_support("lincomb_fields", a, b)?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| ca * x + cb * y)
        .collect();
    a.with_values(values)
}

/// Draw `x_t ~ q(x_t | x_0)` on the grid of `x0`, deterministically in `seed`.
pub fn forward_sample(
    x0: &Field,
    t: usize,
    sched: &NoiseSchedule,
    moll: &Mollifier,
    seed: u64,
) -> Result<DiffusionState> {
    let grid = x0.grid().ok_or(Error::NotOnGrid)?;
    let mollified_x0 = moll.mollify(x0)?;
    let mollified_noise = moll.sample_noise(grid, x0.channels(), seed)?;
    let abar = sched.alpha_bar(t);
    let x_t = lincomb_fields(abar.sqrt(), &mollified_x0, (1.0 - abar).sqrt(), &mollified_noise)?;
    Ok(DiffusionState { x_t, mollified_x0, mollified_noise })
}

/// Mean field and variance multiplier of `q(x_{t-1} | x_t, x_0)`; the
/// covariance is `beta_tilde_t * T T*`.
pub fn posterior_params(
    x_t: &Field,
    x0: &Field,
    t: usize,
    sched: &NoiseSchedule,
    moll: &Mollifier,
) -> Result<(Field, f64)> {
    check_same_support("posterior_params", x_t, x0)?;
    let c = sched.coefficients_at(t);
    let coef_x0 = c.alpha_bar_prev.sqrt() * c.beta / (1.0 - c.alpha_bar);
    let coef_xt = c.alpha.sqrt() * (1.0 - c.alpha_bar_prev) / (1.0 - c.alpha_bar);
    let mean = lincomb_fields(coef_x0, &moll.mollify(x0)?, coef_xt, x_t)?;
    Ok((mean, c.beta_tilde))
}

/// Posterior mean with the network's clean-field prediction standing in for
/// `x_0`.
pub fn mu_from_x0pred(
    x_t: &Field,
    predicted_x0: &Field,
    t: usize,
    sched: &NoiseSchedule,
    moll: &Mollifier,
) -> Result<Field> {
    Ok(posterior_params(x_t, predicted_x0, t, sched, moll)?.0)
}

/// Posterior mean with the network's mollified-noise prediction substituted
/// through the marginal identity; no operator application is needed.
pub fn mu_from_noisepred(
    x_t: &Field,
    predicted_noise: &Field,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Field> {
    check_same_support("mu_from_noisepred", x_t, predicted_noise)?;
    let c = sched.coefficients_at(t);
    lincomb_fields(
        1.0 / c.alpha.sqrt(),
        x_t,
        -c.beta / (c.alpha.sqrt() * (1.0 - c.alpha_bar).sqrt()),
        predicted_noise,
    )
}

/// Estimate `T x_0` from `x_t` and predicted mollified noise by inverting the
/// forward marginal.
pub fn estimate_mollified_x0(
    x_t: &Field,
    predicted_noise: &Field,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Field> {
    check_same_support("estimate_mollified_x0", x_t, predicted_noise)?;
    let abar = sched.alpha_bar(t);
    lincomb_fields(
        1.0 / abar.sqrt(),
        x_t,
        -(1.0 - abar).sqrt() / abar.sqrt(),
        predicted_noise,
    )
}

/// Mollified-noise estimate implied by a clean-field prediction; used to
/// drive the deterministic sampler from `x0pred` networks.
pub fn noise_estimate_from_x0pred(
    x_t: &Field,
    predicted_x0: &Field,
    t: usize,
    sched: &NoiseSchedule,
    moll: &Mollifier,
) -> Result<Field> {
    let abar = sched.alpha_bar(t);
    lincomb_fields(
        1.0 / (1.0 - abar).sqrt(),
        x_t,
        -abar.sqrt() / (1.0 - abar).sqrt(),
        &moll.mollify(predicted_x0)?,
    )
}

/// One stochastic reverse step. `f_out` is interpreted per `mode`; fresh
/// mollified noise scaled by `sigma_t` is added except where the schedule
/// makes the step deterministic (`sigma2 = 0`, i.e. `t = 1` under
/// `beta_tilde`). Requires a grid state because noise is drawn through `T`.
pub fn ancestral_step(
    x_t: &Field,
    f_out: &Field,
    t: usize,
    mode: ParamMode,
    sched: &NoiseSchedule,
    moll: &Mollifier,
    seed: u64,
) -> Result<Field> {
    check_same_support("ancestral_step", x_t, f_out)?;
    let grid = x_t.grid().ok_or(Error::NotOnGrid)?.clone();
    let c = sched.coefficients_at(t);
    let sigma = c.sigma2.sqrt();
    match mode {
        ParamMode::X0Pred => {
            // x_{t-1} = coef_xt x_t + T( coef_x0 f_out + sigma xi ): the
            // prediction and the white noise share one operator application.
            let coef_x0 = c.alpha_bar_prev.sqrt() * c.beta / (1.0 - c.alpha_bar);
            let coef_xt = c.alpha.sqrt() * (1.0 - c.alpha_bar_prev) / (1.0 - c.alpha_bar);
            let mut inner = f_out.values().iter().map(|v| coef_x0 * v).collect::<Vec<_>>();
            if sigma > 0.0 {
                let white = white_noise_on(&grid, x_t.channels(), seed)?;
                for (v, w) in inner.iter_mut().zip(white.values()) {
                    *v += sigma * w;
                }
            }
            let pushed = moll.mollify(&Field::on_grid(grid, inner, x_t.channels())?)?;
            lincomb_fields(coef_xt, x_t, 1.0, &pushed)
        }
        ParamMode::NoisePred => {
            let mu = mu_from_noisepred(x_t, f_out, t, sched)?;
            if sigma > 0.0 {
                let noise = moll.sample_noise(&grid, x_t.channels(), seed)?;
                lincomb_fields(1.0, &mu, sigma, &noise)
            } else {
                Ok(mu)
            }
        }
    }
}

fn white_noise_on(grid: &crate::field::RegularGrid, channels: usize, seed: u64) -> Result<Field> {
    use rand::{RngExt, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.num_points() * channels)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    Field::on_grid(grid.clone(), values, channels)
}

/// One deterministic reverse step from `t` to `t_prev < t` driven by a
/// mollified-noise prediction:
///
/// ```text
/// x_{t_prev} = sqrt(alpha_bar_{t_prev}) * Tx0_est + sqrt(1 - alpha_bar_{t_prev}) * f_out
/// ```
///
/// With `alpha_bar_0 = 1`, stepping to `t_prev = 0` returns the clean
/// mollified estimate itself.
pub fn ddim_step(
    x_t: &Field,
    f_out: &Field,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Field> {
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let tx0 = estimate_mollified_x0(x_t, f_out, t, sched)?;
    let abar_prev = sched.alpha_bar(t_prev);
    lincomb_fields(abar_prev.sqrt(), &tx0, (1.0 - abar_prev).sqrt(), f_out)
}

/// Strided descending timestep sequence for deterministic sampling: `count`
/// approximately evenly spaced values from `t_start` down to 1. The driver
/// appends the final hop to `t = 0` itself.
pub fn ddim_times(t_start: usize, count: usize) -> Result<Vec<usize>> {
    if t_start == 0 || count == 0 {
        return Err(Error::invalid("ddim schedule needs t_start >= 1 and count >= 1"));
    }
    let count = count.min(t_start);
    if count == 1 {
        return Ok(vec![t_start]);
    }
    let step = (t_start - 1) as f64 / (count - 1) as f64;
    let mut times: Vec<usize> = (0..count)
        .map(|i| (t_start as f64 - i as f64 * step).round() as usize)
        .collect();
    times.dedup();
    Ok(times)
}

/// Mean squared error over every coordinate and channel; dividing by the
/// count makes the value comparable across subsample rates.
pub fn loss_simple(f_out: &Field, target: &Field) -> Result<f64> {
    check_same_support("loss_simple", f_out, target)?;
    let n = f_out.values().len() as f64;
    Ok(f_out
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Weighted clean-field regression loss for `x0pred` training:
/// `w_t * mean((f_out - x0)^2)` with
/// `w_t = sqrt(alpha_bar_{t-1}) beta_t / (2 sigma_t^2 (1 - alpha_bar_t))`.
///
/// A zero `sigma2` (the deterministic `t = 1` posterior) falls back to
/// `beta_t` so the weight stays finite.
pub fn loss_x0(f_out: &Field, x0: &Field, t: usize, sched: &NoiseSchedule, sigma2: f64) -> Result<f64> {
    check_same_support("loss_x0", f_out, x0)?;
    let c = sched.coefficients_at(t);
    let sigma2 = if sigma2 > 0.0 { sigma2 } else { c.beta };
    let weight = c.alpha_bar_prev.sqrt() * c.beta / (2.0 * sigma2 * (1.0 - c.alpha_bar));
    let n = f_out.values().len() as f64;
    let mse = f_out
        .values()
        .iter()
        .zip(x0.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(weight * mse)
}
