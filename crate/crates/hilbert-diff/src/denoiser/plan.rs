//! Tap-plan construction for the scattered depthwise convolution, plus
//! kernel-grid resampling so one trained kernel serves every resolution.

use crate::error::Result;
use crate::field::PointIndex;
use crate::grad::{SparseConvPlan, SparseTap, Tensor};

/// Offsets this close to a kernel cell collapse to a single tap.
const SNAP: f64 = 1e-9;

/// Kernel side length at `resolution`, keeping the physical footprint of the
/// `base_side` kernel trained at `train_res`: `2*round(r*resolution) + 1`.
pub fn kernel_side_for(base_side: usize, train_res: usize, resolution: usize) -> usize {
    let r = (base_side as f64 - 1.0) / 2.0 / train_res as f64;
    2 * ((r * resolution as f64).round() as usize) + 1
}

/// Half-width of a `side`-cell kernel whose taps are spaced `1/resolution`.
pub fn kernel_radius(side: usize, resolution: usize) -> f64 {
    (side as f64 - 1.0) / 2.0 / resolution as f64
}

fn split_cell(u: f64) -> (usize, f64) {
    let mut a = u.floor() as usize;
    let mut f = u - a as f64;
    if f > 1.0 - SNAP {
        a += 1;
        f = 0.0;
    } else if f < SNAP {
        f = 0.0;
    }
    (a, f)
}

fn make_tap(dst: u32, src: u32, u0: f64, u1: f64, side: usize, scale: f64) -> SparseTap {
    let (a0, f0) = split_cell(u0);
    let (a1, f1) = split_cell(u1);
    if f0 == 0.0 && f1 == 0.0 {
        return SparseTap {
            dst,
            src,
            ncells: 1,
            cells: [(a0 * side + a1) as u32, 0, 0, 0],
            weights: [scale, 0.0, 0.0, 0.0],
        };
    }
    let b0 = (a0 + 1).min(side - 1);
    let b1 = (a1 + 1).min(side - 1);
    let raw = [
        ((a0 * side + a1) as u32, (1.0 - f0) * (1.0 - f1)),
        ((a0 * side + b1) as u32, (1.0 - f0) * f1),
        ((b0 * side + a1) as u32, f0 * (1.0 - f1)),
        ((b0 * side + b1) as u32, f0 * f1),
    ];
    let mut cells = [0u32; 4];
    let mut weights = [0.0f64; 4];
    let mut n = 0;
    for (cell, w) in raw {
        if w > 0.0 {
            cells[n] = cell;
            weights[n] = w * scale;
            n += 1;
        }
    }
    SparseTap { dst, src, ncells: n as u8, cells, weights }
}

/// Build the tap list of a depthwise convolution over one 2-d point cloud:
/// every neighbour within the infinity-norm kernel radius contributes one
/// tap whose kernel value is read bilinearly at the continuous offset and
/// averaged over the neighbourhood size. Exact cell hits — all of them, on a
/// matching grid — collapse to single-cell taps.
pub fn build_sparse_plan(coords: &[f64], side: usize, resolution: usize) -> Result<SparseConvPlan> {
    let index = PointIndex::build(coords, 2)?;
    let m = coords.len() / 2;
    let r = kernel_radius(side, resolution);
    let res = resolution as f64;
    let hi = side as f64 - 1.0;
    let mut taps = Vec::with_capacity(m * 4);
    for i in 0..m {
        let c = &coords[2 * i..2 * i + 2];
        let neigh = index.in_box(c, r);
        let scale = 1.0 / neigh.len() as f64;
        for j in neigh {
            let u0 = ((c[0] - coords[2 * j]) + r) * res;
            let u1 = ((c[1] - coords[2 * j + 1]) + r) * res;
            taps.push(make_tap(
                i as u32,
                j as u32,
                u0.clamp(0.0, hi),
                u1.clamp(0.0, hi),
                side,
                scale,
            ));
        }
    }
    Ok(SparseConvPlan { taps, num_points: m, kernel_cells: side * side })
}

/// Resample a `side x side` kernel grid (stored `side*side x channels`,
/// trained with tap spacing `1/train_res`) onto a `new_side` grid with
/// spacing `1/resolution`, matching cells by physical offset; positions
/// outside the trained footprint clamp to the edge.
pub fn kernel_resize(
    kernel: &Tensor,
    side: usize,
    train_res: usize,
    new_side: usize,
    resolution: usize,
) -> Result<Tensor> {
    let channels = kernel.shape()[1];
    let r_base = kernel_radius(side, train_res);
    let r_new = kernel_radius(new_side, resolution);
    let hi = side as f64 - 1.0;
    let mut data = vec![0.0; new_side * new_side * channels];
    let src = kernel.data();
    for a0 in 0..new_side {
        let u0 = ((a0 as f64 / resolution as f64 - r_new) + r_base) * train_res as f64;
        let (i0, f0) = split_cell(u0.clamp(0.0, hi));
        let j0 = (i0 + 1).min(side - 1);
        for a1 in 0..new_side {
            let u1 = ((a1 as f64 / resolution as f64 - r_new) + r_base) * train_res as f64;
            let (i1, f1) = split_cell(u1.clamp(0.0, hi));
            let j1 = (i1 + 1).min(side - 1);
            let dst = &mut data[(a0 * new_side + a1) * channels..][..channels];
            for c in 0..channels {
                let k00 = src[(i0 * side + i1) * channels + c];
                let k01 = src[(i0 * side + j1) * channels + c];
                let k10 = src[(j0 * side + i1) * channels + c];
                let k11 = src[(j0 * side + j1) * channels + c];
                dst[c] = (1.0 - f0) * ((1.0 - f1) * k00 + f1 * k01) + f0 * ((1.0 - f1) * k10 + f1 * k11);
            }
        }
    }
    Tensor::new(&[new_side * new_side, channels], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RegularGrid;
    use crate::grad::sparse_conv_values;
    use crate::oracles;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn kernel_side_tracks_the_physical_footprint() {
        assert_eq!(kernel_side_for(7, 32, 32), 7);
        assert_eq!(kernel_side_for(7, 32, 64), 13);
        assert_eq!(kernel_side_for(7, 32, 16), 5);
        assert_eq!(kernel_side_for(5, 16, 16), 5);
        assert_eq!(kernel_side_for(7, 32, 128), 25);
    }

    #[test]
    fn grid_plans_collapse_to_single_cell_taps() {
        let grid = RegularGrid::square(16).unwrap();
        let plan = build_sparse_plan(&grid.coords(), 7, 16).unwrap();
        assert!(plan.taps.iter().all(|t| t.ncells == 1));
        // An interior point sees the full 7x7 neighbourhood; corners see 4x4.
        let centre_taps = plan.taps.iter().filter(|t| t.dst == 8 * 16 + 8).count();
        assert_eq!(centre_taps, 49);
        let corner_taps = plan.taps.iter().filter(|t| t.dst == 0).count();
        assert_eq!(corner_taps, 16);
    }

    #[test]
    fn every_point_contributes_a_centre_tap_to_itself() {
        let coords = randv(60, 1).iter().map(|v| (v + 1.0) / 2.0).collect::<Vec<_>>();
        let side = 7;
        let plan = build_sparse_plan(&coords, side, 32).unwrap();
        let centre = (side / 2) * side + side / 2;
        for p in 0..plan.num_points as u32 {
            assert!(
                plan.taps
                    .iter()
                    .any(|t| t.dst == p && t.src == p && t.ncells == 1 && t.cells[0] == centre as u32),
                "point {p} lacks a self tap at the kernel centre"
            );
        }
    }

    #[test]
    fn planned_convolution_matches_direct_scan_on_grids_and_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            let channels = 1 + case % 3;
            let (coords, resolution): (Vec<f64>, usize) = if case % 2 == 0 {
                let side = [8, 16, 32][case % 3];
                (RegularGrid::square(side).unwrap().coords(), side)
            } else {
                let m = 20 + (case * 9) % 180;
                ((0..2 * m).map(|_| rng.random::<f64>()).collect(), 16 + 8 * (case % 3))
            };
            let side = [5, 7][case % 2];
            let m = coords.len() / 2;
            let values = randv(m * channels, 100 + case as u64);
            let kernel = randv(side * side * channels, 200 + case as u64);

            let plan = build_sparse_plan(&coords, side, resolution).unwrap();
            let got = sparse_conv_values(&plan, &values, &kernel, channels);
            let want = oracles::depthwise_conv_direct(&coords, &values, channels, &kernel, side, resolution);
            let worst = got
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-6, "case {case}: max deviation {worst}");
        }
    }

    #[test]
    fn resize_at_the_training_resolution_is_the_identity() {
        let kernel = Tensor::new(&[49, 3], randv(49 * 3, 5)).unwrap();
        let out = kernel_resize(&kernel, 7, 32, 7, 32).unwrap();
        assert_eq!(out.data(), kernel.data());
    }

    #[test]
    fn doubling_the_resolution_interleaves_kernel_cells() {
        // 7 -> 13 at 2x: even new cells land exactly on old cells, odd ones
        // split the difference between neighbours.
        let side = 7;
        let kernel = Tensor::new(&[side * side, 2], randv(side * side * 2, 6)).unwrap();
        let out = kernel_resize(&kernel, side, 32, 13, 64).unwrap();
        let k = kernel.data();
        let o = out.data();
        for a0 in 0..side {
            for a1 in 0..side {
                for c in 0..2 {
                    let want = k[(a0 * side + a1) * 2 + c];
                    let got = o[((2 * a0) * 13 + 2 * a1) * 2 + c];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
        for a0 in 0..side {
            for a1 in 0..side - 1 {
                for c in 0..2 {
                    let want = 0.5 * (k[(a0 * side + a1) * 2 + c] + k[(a0 * side + a1 + 1) * 2 + c]);
                    let got = o[((2 * a0) * 13 + 2 * a1 + 1) * 2 + c];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resized_kernel_represents_the_same_function_on_a_finer_grid() {
        // Convolving a smooth field on a 16-grid with the base kernel and on
        // a 32-grid with the resized kernel must approximate the same
        // continuous operation: compare at the shared coarse points.
        let base_side = 5;
        let train_res = 16;
        let channels = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Smooth low-frequency kernel and field so discretisation error is small.
        let kernel: Vec<f64> = (0..base_side * base_side)
            .map(|i| {
                let (a, b) = (i / base_side, i % base_side);
                ((a as f64 - 2.0) / 2.0).cos() * ((b as f64 - 2.0) / 2.0).cos() + 0.1 * rng.random::<f64>()
            })
            .collect();
        let smooth = |y: f64, x: f64| (2.0 * std::f64::consts::PI * y).sin() + (2.0 * std::f64::consts::PI * x).cos();

        let coarse = RegularGrid::square(16).unwrap();
        let cc = coarse.coords();
        let vals_c: Vec<f64> = (0..256).map(|i| smooth(cc[2 * i], cc[2 * i + 1])).collect();
        let plan_c = build_sparse_plan(&cc, base_side, train_res).unwrap();
        let out_c = sparse_conv_values(&plan_c, &vals_c, &kernel, channels);

        let fine = RegularGrid::square(32).unwrap();
        let fc = fine.coords();
        let vals_f: Vec<f64> = (0..1024).map(|i| smooth(fc[2 * i], fc[2 * i + 1])).collect();
        let new_side = kernel_side_for(base_side, train_res, 32);
        let kt = Tensor::new(&[base_side * base_side, 1], kernel.clone()).unwrap();
        let kernel_f = kernel_resize(&kt, base_side, train_res, new_side, 32).unwrap();
        let plan_f = build_sparse_plan(&fc, new_side, 32).unwrap();
        let out_f = sparse_conv_values(&plan_f, &vals_f, kernel_f.data(), channels);

        // Interior coarse point (i, j) coincides with fine point (2i, 2j)
        // offset by half a fine pixel; compare via the nearest fine sample.
        let mut diffs = Vec::new();
        for i in 4..12 {
            for j in 4..12 {
                let coarse_v = out_c[i * 16 + j];
                let fi = 2 * i;
                let fj = 2 * j;
                let fine_v = 0.25
                    * (out_f[fi * 32 + fj] + out_f[fi * 32 + fj + 1] + out_f[(fi + 1) * 32 + fj]
                        + out_f[(fi + 1) * 32 + fj + 1]);
                diffs.push((coarse_v - fine_v).abs());
            }
        }
        let mean_dev = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let scale = out_c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(mean_dev < 0.1 * scale, "mean deviation {mean_dev} vs scale {scale}");
    }
}
