//! Thin rustfft wrapper: unitary-unnormalized forward/inverse transforms over
//! 1-d and 2-d row-major buffers, with per-thread plan caching.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_1d_inplace(data: &mut [Complex<f64>], inverse: bool) {
    PLANNER.with(|p| {
        let fft = if inverse {
            p.borrow_mut().plan_fft_inverse(data.len())
        } else {
            p.borrow_mut().plan_fft_forward(data.len())
        };
        fft.process(data);
    });
}

/// In-place FFT over a row-major buffer with the given axis extents
/// (1 or 2 axes). The inverse includes the `1/m` normalization, so
/// `fft_nd(fft_nd(x, false), true) == x` up to rounding.
pub fn fft_nd(data: &mut [Complex<f64>], dims: &[usize], inverse: bool) {
    match *dims {
        [_] => fft_1d_inplace(data, inverse),
        [h, w] => {
            for row in data.chunks_mut(w) {
                fft_1d_inplace(row, inverse);
            }
            let mut col = vec![Complex::default(); h];
            for j in 0..w {
                for i in 0..h {
                    col[i] = data[i * w + j];
                }
                fft_1d_inplace(&mut col, inverse);
                for i in 0..h {
                    data[i * w + j] = col[i];
                }
            }
        }
        _ => panic!("fft_nd supports 1 or 2 axes"),
    }
    if inverse {
        let scale = 1.0 / dims.iter().product::<usize>() as f64;
        for v in data {
            *v *= scale;
        }
    }
}

/// Forward transform of a real buffer.
pub fn fft_real(values: &[f64], dims: &[usize]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_nd(&mut buf, dims, false);
    buf
}

/// Inverse transform, discarding the (numerically tiny) imaginary residue.
pub fn ifft_to_real(mut buf: Vec<Complex<f64>>, dims: &[usize]) -> Vec<f64> {
    fft_nd(&mut buf, dims, true);
    buf.into_iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn round_trip_recovers_input() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        for dims in [vec![24], vec![4, 6]] {
            let back = ifft_to_real(fft_real(&x, &dims), &dims);
            for (a, b) in back.iter().zip(&x) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dc_bin_is_the_sum() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let spec = fft_real(&x, &[4]);
        assert_relative_eq!(spec[0].re, 10.0, epsilon = 1e-12);
        assert_relative_eq!(spec[0].im, 0.0, epsilon = 1e-12);
    }
}
