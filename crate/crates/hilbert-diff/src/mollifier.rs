//! The smoothing operator `T`: circular convolution with a Gaussian kernel.
//!
//! White noise on a refining grid has no sensible continuum limit, so the
//! diffusion in this crate perturbs data with *mollified* noise `T xi`
//! instead. `T` convolves with the heat kernel
//!
//! ```text
//! K(y, l) = (4 pi l)^(-n/2) * exp(-|y|^2 / (4 l))
//! ```
//!
//! sampled at grid offsets with circular wrap and normalized to unit mass, so
//! constants pass through unchanged. On a regular grid `T` diagonalizes in
//! the Fourier basis; all applications (forward, adjoint, exact and Wiener
//! inverses, noise sampling) are per-frequency multiplications. `T` is
//! symmetric, hence its own adjoint, and `T T*` has the squared symbol.
//!
//! Length scales are quoted in domain units. Pixel-variance blur strengths
//! convert via [`pixel_variance_to_length_scale`]: a Gaussian with variance
//! `v` px^2 at resolution `R` has `l = v / (2 R^2)` because `K(., l)` carries
//! variance `2 l` per axis.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{Field, InterpPlan, RegularGrid};

/// Length scale below which the operator is treated as the identity would be
/// meaningless; `new` rejects non-positive values instead.
const MIN_SYMBOL_FOR_EXACT_INVERSE: f64 = 1e-12;

/// Gaussian mollifier with circular boundary, diagonal in frequency space.
///
/// Construction is cheap; the per-grid frequency symbol is computed on first
/// use and cached, so a `Mollifier` can be shared across threads and grids.
pub struct Mollifier {
    l: f64,
    symbols: Mutex<HashMap<Vec<usize>, Arc<Vec<f64>>>>,
}

impl Mollifier {
    pub fn new(l: f64) -> Result<Self> {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::invalid(format!("length scale must be positive, got {l}")));
        }
        Ok(Mollifier { l, symbols: Mutex::new(HashMap::new()) })
    }

    pub fn length_scale(&self) -> f64 {
        self.l
    }

    /// Kernel mass at every grid offset (circular wrap), normalized to sum 1.
    /// Entry `s` (or `(s, t)` flattened row-major) is the weight applied to
    /// the value `s` steps away under circular indexing.
    pub fn kernel_weights(&self, grid: &RegularGrid) -> Vec<f64> {
        let dims = grid.dims();
        let prefactor = (4.0 * std::f64::consts::PI * self.l).powf(-(dims.len() as f64) / 2.0);
        let wrap = |s: usize, n: usize| {
            let o = if s <= n / 2 { s as f64 } else { s as f64 - n as f64 };
            o / n as f64
        };
        let mut w: Vec<f64> = match *dims {
            [m] => (0..m)
                .map(|s| {
                    let y = wrap(s, m);
                    prefactor * (-y * y / (4.0 * self.l)).exp()
                })
                .collect(),
            [h, wd] => {
                let mut out = Vec::with_capacity(h * wd);
                for s in 0..h {
                    let y0 = wrap(s, h);
                    for t in 0..wd {
                        let y1 = wrap(t, wd);
                        out.push(prefactor * (-(y0 * y0 + y1 * y1) / (4.0 * self.l)).exp());
                    }
                }
                out
            }
            _ => unreachable!("grids are validated to 1 or 2 axes"),
        };
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        w
    }

    /// The operator as an explicit sparse row map over a grid, keeping kernel
    /// entries above `tol`. Matches `mollify` up to the dropped tail and lets
    /// differentiable pipelines apply the operator as a plain linear map.
    pub fn grid_plan(&self, grid: &RegularGrid, tol: f64) -> Result<InterpPlan> {
        let kernel = self.kernel_weights(grid);
        let m = grid.num_points();
        let significant: Vec<(usize, f64)> =
            kernel.iter().copied().enumerate().filter(|(_, w)| *w > tol).collect();
        if significant.is_empty() {
            return Err(Error::invalid("tolerance removed the whole kernel"));
        }
        let mut sources = Vec::with_capacity(m * significant.len());
        let mut weights = Vec::with_capacity(m * significant.len());
        let mut offsets = Vec::with_capacity(m + 1);
        offsets.push(0);
        match *grid.dims() {
            [n] => {
                for p in 0..n {
                    for &(q, w) in &significant {
                        sources.push(((p + n - q) % n) as u32);
                        weights.push(w);
                    }
                    offsets.push(sources.len());
                }
            }
            [h, wd] => {
                for py in 0..h {
                    for px in 0..wd {
                        for &(q, w) in &significant {
                            let (sy, sx) = ((py + h - q / wd) % h, (px + wd - q % wd) % wd);
                            sources.push((sy * wd + sx) as u32);
                            weights.push(w);
                        }
                        offsets.push(sources.len());
                    }
                }
            }
            _ => unreachable!("grids are validated to 1 or 2 axes"),
        }
        Ok(InterpPlan { sources, weights, offsets, num_sources: m })
    }

    /// Real frequency symbol of the operator on `grid` (the DFT of the kernel
    /// weights; real because the wrapped kernel is even).
    pub fn symbol(&self, grid: &RegularGrid) -> Arc<Vec<f64>> {
        let mut cache = self.symbols.lock().expect("symbol cache lock");
        if let Some(s) = cache.get(grid.dims()) {
            return Arc::clone(s);
        }
        let spec = fft::fft_real(&self.kernel_weights(grid), grid.dims());
        let symbol: Arc<Vec<f64>> = Arc::new(spec.into_iter().map(|c| c.re).collect());
        cache.insert(grid.dims().to_vec(), Arc::clone(&symbol));
        symbol
    }

    fn apply_symbol(&self, field: &Field, gain: impl Fn(f64) -> f64) -> Result<Field> {
        let grid = field.grid().ok_or(Error::NotOnGrid)?.clone();
        let symbol = self.symbol(&grid);
        let d = field.channels();
        let m = field.num_points();
        let mut out = vec![0.0; m * d];
        let mut chan = vec![0.0; m];
        for c in 0..d {
            for i in 0..m {
                chan[i] = field.values()[i * d + c];
            }
            let mut spec = fft::fft_real(&chan, grid.dims());
            for (v, s) in spec.iter_mut().zip(symbol.iter()) {
                *v *= gain(*s);
            }
            let back = fft::ifft_to_real(spec, grid.dims());
            for i in 0..m {
                out[i * d + c] = back[i];
            }
        }
        Field::on_grid(grid, out, d)
    }

    /// Apply `T` to a grid field.
    pub fn mollify(&self, field: &Field) -> Result<Field> {
        self.apply_symbol(field, |s| s)
    }

    /// Apply the adjoint `T*`. The kernel is even, so `T* = T`; this entry
    /// point exists so call sites say which operator they mean.
    pub fn adjoint(&self, field: &Field) -> Result<Field> {
        self.mollify(field)
    }

    /// Draw `T xi` where `xi` is unit white noise, i.e. a Gaussian field with
    /// covariance `T T*`. Deterministic in `seed`; values are drawn row-major
    /// with the channel index fastest.
    pub fn sample_noise(&self, grid: &RegularGrid, channels: usize, seed: u64) -> Result<Field> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = grid.num_points();
        let white: Vec<f64> = (0..m * channels).map(|_| rng.sample(StandardNormal)).collect();
        self.mollify(&Field::on_grid(grid.clone(), white, channels)?)
    }

    /// Exact deconvolution: divide by the symbol. Fails when any frequency's
    /// symbol is below `1e-12` in magnitude, which happens for large length
    /// scales where high frequencies are annihilated beyond recovery.
    pub fn exact_inverse(&self, field: &Field) -> Result<Field> {
        let grid = field.grid().ok_or(Error::NotOnGrid)?;
        let symbol = self.symbol(grid);
        if let Some(k) = symbol.iter().position(|s| s.abs() < MIN_SYMBOL_FOR_EXACT_INVERSE) {
            let freq = match *grid.dims() {
                [_] => vec![k],
                [_, w] => vec![k / w, k % w],
                _ => unreachable!(),
            };
            return Err(Error::IllConditioned { freq, magnitude: symbol[k].abs() });
        }
        self.apply_symbol(field, |s| 1.0 / s)
    }

    /// Regularized deconvolution with per-frequency gain `s / (s^2 + eps^2)`.
    /// The gain never exceeds `1 / (2 eps)`, so noise at killed frequencies is
    /// attenuated instead of amplified.
    pub fn wiener_inverse(&self, field: &Field, eps: f64) -> Result<Field> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("wiener eps must be positive, got {eps}")));
        }
        self.apply_symbol(field, |s| s / (s * s + eps * eps))
    }
}

/// Convert a blur strength quoted as Gaussian variance in squared pixels at
/// resolution `res` into the kernel's length scale `l` in domain units.
pub fn pixel_variance_to_length_scale(variance_px: f64, res: usize) -> f64 {
    0.5 * variance_px / (res as f64 * res as f64)
}
