//! Finite-difference validation of the tape's adjoints.

use super::{ParamSet, Tape, Var};
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Relative tolerance on each compared derivative.
pub const REL_TOL: f64 = 1e-4;
/// Magnitudes below this floor are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coordinates checked, max relative error {:.3e}, {} failures",
            self.checked,
            self.max_rel_err,
            self.failures.len()
        )?;
        for fail in self.failures.iter().take(8) {
            write!(
                f,
                "\n  {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                fail.param, fail.index, fail.analytic, fail.numeric, fail.rel_err
            )?;
        }
        Ok(())
    }
}

/// Compare the tape's adjoints against central finite differences of the
/// scalar loss built by `build`. Up to `samples_per_tensor` coordinates are
/// sampled from each parameter tensor (all of them when the tensor is
/// smaller); `build` is re-run on a fresh tape for every probe, so it must be
/// deterministic in the parameter values.
pub fn grad_check<F>(
    params: &mut ParamSet,
    samples_per_tensor: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamSet| -> Result<(f64, Option<(Tape, Vec<Var>, Var)>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = (0..params.len()).map(|i| tape.input(params.tensor(i).clone())).collect();
        let loss = build(&tape, &vars)?;
        let value = tape.value(loss).item();
        Ok((value, Some((tape, vars, loss))))
    };

    let (_, recorded) = eval(params)?;
    let (tape, vars, loss) = recorded.unwrap();
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for p in 0..params.len() {
        let n = params.tensor(p).len();
        let picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, samples_per_tensor).into_vec()
        };
        for j in picks {
            let orig = params.tensor(p).data()[j];
            params.tensor_mut(p).data_mut()[j] = orig + FD_STEP;
            let plus = eval(params)?.0;
            params.tensor_mut(p).data_mut()[j] = orig - FD_STEP;
            let minus = eval(params)?.0;
            params.tensor_mut(p).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.wrt(vars[p]).map_or(0.0, |t| t.data()[j]);
            let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
            let rel_err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err > REL_TOL {
                report.failures.push(GradCheckFailure {
                    param: params.name(p).to_string(),
                    index: j,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;
    use rand::{RngExt, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    #[test]
    fn small_mlp_passes_the_sweep() {
        let mut params = ParamSet::new();
        params.push("w1", rand_tensor(&[3, 8], 1));
        params.push("b1", rand_tensor(&[8], 2));
        params.push("w2", rand_tensor(&[8, 2], 3));
        let x = rand_tensor(&[5, 3], 4);
        let report = grad_check(&mut params, 32, 0, |t, v| {
            let xin = t.input(x.clone());
            let h = t.add_bias(t.matmul(xin, v[0])?, v[1])?;
            let h = t.silu(h);
            let y = t.matmul(h, v[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checked >= 32);
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        // stop-gradient makes the analytic derivative x instead of 2x; the
        // sweep must flag every sampled coordinate.
        let mut params = ParamSet::new();
        params.push("x", rand_tensor(&[4], 5));
        let report = grad_check(&mut params, 32, 0, |t, v| {
            let d = t.detach(v[0]);
            let y = t.mul(v[0], d)?;
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 4);
    }

    #[test]
    fn sampling_respects_the_per_tensor_budget() {
        let mut params = ParamSet::new();
        params.push("big", rand_tensor(&[100], 6));
        params.push("small", rand_tensor(&[3], 7));
        let report = grad_check(&mut params, 10, 1, |t, v| {
            let a = t.mul(v[0], v[0])?;
            let b = t.mul(v[1], v[1])?;
            let sa = t.sum_all(a);
            let sb = t.sum_all(b);
            Ok(t.add(sa, sb)?)
        })
        .unwrap();
        assert_eq!(report.checked, 13);
        assert!(report.passed(), "{report}");
    }
}
