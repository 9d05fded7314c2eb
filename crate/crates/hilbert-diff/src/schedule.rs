//! Discrete-time noise schedule for the diffusion process.
//!
//! The default is the squared-cosine schedule: with offset `s`,
//!
//! ```text
//! f(t) = cos^2( ((t/T + s) / (1 + s)) * pi/2 ),   alpha_bar_t = f(t) / f(0)
//! ```
//!
//! realized through per-step rates `beta_t = 1 - f(t)/f(t-1)` clipped to
//! `MAX_BETA`, with `alpha_t = 1 - beta_t` and `alpha_bar` their running
//! product. The convention `alpha_bar_0 = 1` makes the `t = 1` posterior
//! deterministic (`beta_tilde_1 = 0`).

use crate::error::{Error, Result};

/// Standard cosine-schedule offset.
pub const COSINE_S: f64 = 0.008;

/// Clip for per-step rates, keeping every step a proper Gaussian transition.
pub const MAX_BETA: f64 = 0.999;

/// Which per-step reverse variance `sigma_t^2` the sampler uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sigma2Choice {
    /// The forward rate `beta_t` (upper bound).
    Beta,
    /// The posterior variance `beta_tilde_t` (lower bound, default).
    BetaTilde,
}

impl Default for Sigma2Choice {
    fn default() -> Self {
        Sigma2Choice::BetaTilde
    }
}

/// Everything the reverse step needs at one timestep.
#[derive(Clone, Copy, Debug)]
pub struct StepCoefficients {
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub beta_tilde: f64,
    pub sigma2: f64,
}

/// Precomputed schedule tables, 1-indexed by timestep through the accessors.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Sigma2Choice,
}

impl NoiseSchedule {
    /// Squared-cosine schedule over `steps` timesteps.
    pub fn cosine(steps: usize, s: f64, max_beta: f64, sigma2: Sigma2Choice) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(s > 0.0) || !(max_beta > 0.0 && max_beta < 1.0) {
            return Err(Error::invalid(format!(
                "schedule parameters out of range: s={s}, max_beta={max_beta}"
            )));
        }
        let t_total = steps as f64;
        let f = |t: f64| {
            let angle = ((t / t_total + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            angle.cos().powi(2)
        };
        let mut beta = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut running = 1.0;
        for t in 1..=steps {
            let b = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(max_beta);
            let a = 1.0 - b;
            running *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(running);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar, sigma2 })
    }

    /// Cosine schedule with the standard `s` and clip values.
    pub fn cosine_default(steps: usize) -> Result<Self> {
        NoiseSchedule::cosine(steps, COSINE_S, MAX_BETA, Sigma2Choice::default())
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma2_choice(&self) -> Sigma2Choice {
        self.sigma2
    }

    pub fn with_sigma2(mut self, sigma2: Sigma2Choice) -> Self {
        self.sigma2 = sigma2;
        self
    }

    fn check_t(&self, t: usize) {
        assert!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside schedule range 1..={}",
            self.steps()
        );
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check_t(t);
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check_t(t);
        self.alpha[t - 1]
    }

    /// Running product of alphas; `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        self.check_t(t);
        self.alpha_bar[t - 1]
    }

    /// Posterior variance multiplier `beta_tilde_t`; zero at `t = 1`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.check_t(t);
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Reverse-step variance under this schedule's [`Sigma2Choice`].
    pub fn sigma2(&self, t: usize) -> f64 {
        match self.sigma2 {
            Sigma2Choice::Beta => self.beta(t),
            Sigma2Choice::BetaTilde => self.beta_tilde(t),
        }
    }

    pub fn coefficients_at(&self, t: usize) -> StepCoefficients {
        StepCoefficients {
            beta: self.beta(t),
            alpha: self.alpha(t),
            alpha_bar: self.alpha_bar(t),
            alpha_bar_prev: self.alpha_bar(t - 1),
            beta_tilde: self.beta_tilde(t),
            sigma2: self.sigma2(t),
        }
    }
}
