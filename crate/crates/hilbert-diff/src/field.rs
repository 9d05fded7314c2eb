//! Fields sampled at points of the unit domain, and the coordinate machinery
//! (grids, random subsampling, exact k-nearest-neighbour interpolation) used
//! to move values between point sets.
//!
//! A [`Field`] pairs `m` coordinates in `[0, 1]^n` (`n` = 1 or 2) with one
//! value row of `d` channels per point. A field either lives on a full
//! [`RegularGrid`] — in which case coordinates are implied by the grid — or on
//! an arbitrary scattered coordinate set such as a random grid subsample.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense rectangular grid of pixel-centre points covering `[0, 1]^n`.
///
/// Point `(i, j)` of an `h x w` grid sits at `((i + 0.5) / h, (j + 0.5) / w)`;
/// rows are stored row-major, so flat index `p = i * w + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegularGrid {
    dims: Vec<usize>,
}

impl RegularGrid {
    /// One- or two-dimensional grid with the given extent per axis.
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::invalid(format!(
                "grid must have 1 or 2 axes, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("grid axes must be non-empty"));
        }
        Ok(RegularGrid { dims: dims.to_vec() })
    }

    /// Square two-dimensional grid.
    pub fn square(side: usize) -> Result<Self> {
        RegularGrid::new(&[side, side])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_points(&self) -> usize {
        self.dims.iter().product()
    }

    /// Grid spacing along each axis.
    pub fn spacings(&self) -> Vec<f64> {
        self.dims.iter().map(|&d| 1.0 / d as f64).collect()
    }

    /// Pixel-centre coordinates of every point, row-major, `m x n` flat.
    pub fn coords(&self) -> Vec<f64> {
        match self.dims[..] {
            [m] => (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect(),
            [h, w] => {
                let mut out = Vec::with_capacity(h * w * 2);
                for i in 0..h {
                    let y = (i as f64 + 0.5) / h as f64;
                    for j in 0..w {
                        out.push(y);
                        out.push((j as f64 + 0.5) / w as f64);
                    }
                }
                out
            }
            _ => unreachable!("grids are validated to 1 or 2 axes"),
        }
    }
}

/// Values of a `d`-channel function observed at `m` points of `[0, 1]^n`.
#[derive(Clone, Debug)]
pub struct Field {
    coords: Vec<f64>,
    values: Vec<f64>,
    ndim: usize,
    channels: usize,
    grid: Option<RegularGrid>,
}

impl Field {
    /// Field covering every point of `grid`; `values` is `m x channels` row-major.
    pub fn on_grid(grid: RegularGrid, values: Vec<f64>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("field must have at least one channel"));
        }
        let m = grid.num_points();
        if values.len() != m * channels {
            return Err(Error::shape(
                "field",
                format!("{} values for {m} points x {channels} channels", values.len()),
            ));
        }
        Ok(Field {
            coords: grid.coords(),
            values,
            ndim: grid.ndim(),
            channels,
            grid: Some(grid),
        })
    }

    /// All-zero field on `grid`.
    pub fn zeros_on(grid: RegularGrid, channels: usize) -> Self {
        let m = grid.num_points();
        Field::on_grid(grid, vec![0.0; m * channels], channels)
            .expect("zero fill always matches the grid")
    }

    /// Field at an arbitrary coordinate set; `coords` is `m x ndim` row-major.
    pub fn scattered(coords: Vec<f64>, ndim: usize, values: Vec<f64>, channels: usize) -> Result<Self> {
        if ndim == 0 || ndim > 2 {
            return Err(Error::invalid(format!("fields support 1 or 2 dims, got {ndim}")));
        }
        if channels == 0 {
            return Err(Error::invalid("field must have at least one channel"));
        }
        if coords.len() % ndim != 0 {
            return Err(Error::shape("field", format!("{} coords not divisible by ndim {ndim}", coords.len())));
        }
        let m = coords.len() / ndim;
        if values.len() != m * channels {
            return Err(Error::shape(
                "field",
                format!("{} values for {m} points x {channels} channels", values.len()),
            ));
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("coordinates must lie in [0, 1]"));
        }
        Ok(Field { coords, values, ndim, channels, grid: None })
    }

    pub fn num_points(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The grid this field covers, when it covers one in full.
    pub fn grid(&self) -> Option<&RegularGrid> {
        self.grid.as_ref()
    }

    /// Flat `m x ndim` coordinate matrix.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Flat `m x channels` value matrix.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Replace the value matrix, keeping coordinates and shape.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Field> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "with_values",
                format!("{} values, field holds {}", values.len(), self.values.len()),
            ));
        }
        let mut out = self.clone();
        out.values = values;
        Ok(out)
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.ndim..(i + 1) * self.ndim]
    }

    pub fn value_row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Scattered field holding the given rows (coordinates and values).
    pub fn take_rows(&self, rows: &[usize]) -> Result<Field> {
        let m = self.num_points();
        let mut coords = Vec::with_capacity(rows.len() * self.ndim);
        let mut values = Vec::with_capacity(rows.len() * self.channels);
        for &r in rows {
            if r >= m {
                return Err(Error::invalid(format!("row {r} out of range for {m} points")));
            }
            coords.extend_from_slice(self.point(r));
            values.extend_from_slice(self.value_row(r));
        }
        Field::scattered(coords, self.ndim, values, self.channels)
    }
}

/// Sorted row indices for keeping `round(m / rate)` of `m` rows, drawn without
/// replacement.
pub fn subsample_indices(m: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(rate >= 1.0) {
        return Err(Error::invalid(format!("subsample rate must be >= 1, got {rate}")));
    }
    let keep = ((m as f64 / rate).round() as usize).max(1).min(m);
    // Partial Fisher-Yates over an index pool, then sort for stable row order.
    let mut pool: Vec<usize> = (0..m).collect();
    for i in 0..keep {
        let j = rng.random_range(i..m);
        pool.swap(i, j);
    }
    let mut idx = pool[..keep].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Random row subsample of a field at the given rate, seeded and deterministic.
pub fn subsample(field: &Field, rate: f64, seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = subsample_indices(field.num_points(), rate, &mut rng)?;
    field.take_rows(&idx)
}

/// Uniform bucket index over a point set, used for exact nearest-neighbour
/// and box queries. Cell size matches the expected point spacing, so lookups
/// touch O(1) cells for roughly uniform sets.
pub struct PointIndex {
    coords: Vec<f64>,
    ndim: usize,
    cells_per_axis: usize,
    // Bucket p lists point indices whose cell flattens to p, ascending.
    buckets: Vec<Vec<u32>>,
}

impl PointIndex {
    pub fn build(coords: &[f64], ndim: usize) -> Result<Self> {
        if ndim == 0 || ndim > 2 {
            return Err(Error::invalid(format!("point index supports 1 or 2 dims, got {ndim}")));
        }
        if coords.len() % ndim != 0 {
            return Err(Error::shape("point_index", format!("{} coords, ndim {ndim}", coords.len())));
        }
        let m = coords.len() / ndim;
        if m == 0 {
            return Err(Error::EmptySource);
        }
        let cells_per_axis = (m as f64).powf(1.0 / ndim as f64).round().max(1.0) as usize;
        let n_buckets = cells_per_axis.pow(ndim as u32);
        let mut buckets = vec![Vec::new(); n_buckets];
        for i in 0..m {
            let cell = Self::cell_of(&coords[i * ndim..(i + 1) * ndim], cells_per_axis);
            buckets[cell].push(i as u32);
        }
        Ok(PointIndex { coords: coords.to_vec(), ndim, cells_per_axis, buckets })
    }

    fn cell_of(point: &[f64], cells: usize) -> usize {
        let clamp = |x: f64| ((x * cells as f64) as usize).min(cells - 1);
        match *point {
            [x] => clamp(x),
            [y, x] => clamp(y) * cells + clamp(x),
            _ => unreachable!(),
        }
    }

    fn dist2(&self, i: usize, query: &[f64]) -> f64 {
        let p = &self.coords[i * self.ndim..(i + 1) * self.ndim];
        p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Exact `k` nearest points to `query`, sorted by (distance, index); ties
    /// in distance resolve toward the lower index. Returns all points when
    /// `k` exceeds the set size.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let m = self.coords.len() / self.ndim;
        let k = k.min(m);
        if k == 0 {
            return Vec::new();
        }
        let cells = self.cells_per_axis as i64;
        let cell_size = 1.0 / self.cells_per_axis as f64;
        let q_cell: [i64; 2] = match self.ndim {
            1 => [Self::cell_of(query, self.cells_per_axis) as i64, 0],
            _ => {
                let c = Self::cell_of(query, self.cells_per_axis);
                [(c / self.cells_per_axis) as i64, (c % self.cells_per_axis) as i64]
            }
        };
        // (distance^2, index), kept sorted ascending, at most k entries.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let push = |best: &mut Vec<(f64, usize)>, d2: f64, idx: usize| {
            let entry = (d2, idx);
            let pos = best.partition_point(|e| *e <= entry);
            if pos < k {
                best.insert(pos, entry);
                best.truncate(k);
            }
        };
        for ring in 0..=cells {
            for cell in self.ring_cells(q_cell, ring) {
                for &i in &self.buckets[cell] {
                    push(&mut best, self.dist2(i as usize, query), i as usize);
                }
            }
            // Any point in an unvisited ring differs from the query by at
            // least `ring * cell_size` along some axis; stop once the k-th
            // candidate is strictly closer than that bound.
            let unseen = (ring as f64 * cell_size).powi(2);
            if best.len() == k && best[k - 1].0 < unseen {
                break;
            }
        }
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    /// Flat bucket ids at Chebyshev cell-distance `ring` from `center`, clamped
    /// to the index bounds, in deterministic scan order.
    fn ring_cells(&self, center: [i64; 2], ring: i64) -> Vec<usize> {
        let cells = self.cells_per_axis as i64;
        let in_range = |c: i64| (0..cells).contains(&c);
        let mut out = Vec::new();
        if self.ndim == 1 {
            if ring == 0 {
                out.push(center[0] as usize);
            } else {
                for c in [center[0] - ring, center[0] + ring] {
                    if in_range(c) {
                        out.push(c as usize);
                    }
                }
            }
            return out;
        }
        for dy in -ring..=ring {
            let y = center[0] + dy;
            if !in_range(y) {
                continue;
            }
            let edge = dy.abs() == ring;
            let dxs: &[i64] = if edge { &[0] } else { &[-ring, ring] };
            if edge {
                for x in (center[1] - ring).max(0)..=(center[1] + ring).min(cells - 1) {
                    out.push((y * cells + x) as usize);
                }
            } else {
                for &dx in dxs {
                    let x = center[1] + dx;
                    if in_range(x) {
                        out.push((y * cells + x) as usize);
                    }
                }
            }
        }
        out
    }

    /// Indices of all points within the axis-aligned box `center +- radius`
    /// (infinity norm), ascending. A tiny fuzz keeps exactly-on-boundary grid
    /// points inside despite rounding in the coordinate arithmetic.
    pub fn in_box(&self, center: &[f64], radius: f64) -> Vec<usize> {
        let fuzz = 1e-12;
        let cells = self.cells_per_axis as i64;
        let lo = |c: f64| (((c - radius - fuzz) * self.cells_per_axis as f64).floor() as i64).clamp(0, cells - 1);
        let hi = |c: f64| (((c + radius + fuzz) * self.cells_per_axis as f64).floor() as i64).clamp(0, cells - 1);
        let mut out = Vec::new();
        let scan = |bucket: usize, out: &mut Vec<usize>| {
            for &i in &self.buckets[bucket] {
                let p = &self.coords[i as usize * self.ndim..(i as usize + 1) * self.ndim];
                if p.iter().zip(center).all(|(a, b)| (a - b).abs() <= radius + fuzz) {
                    out.push(i as usize);
                }
            }
        };
        match self.ndim {
            1 => {
                for c in lo(center[0])..=hi(center[0]) {
                    scan(c as usize, &mut out);
                }
            }
            _ => {
                for y in lo(center[0])..=hi(center[0]) {
                    for x in lo(center[1])..=hi(center[1]) {
                        scan((y * cells + x) as usize, &mut out);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Sparse row-linear map sending values at a source point set to values at a
/// destination point set: `out[i] = sum_j weights[i][j] * src[sources[i][j]]`,
/// applied per channel. Rows are stored flattened with an offsets table.
#[derive(Clone, Debug)]
pub struct InterpPlan {
    pub sources: Vec<u32>,
    pub weights: Vec<f64>,
    /// Row `i` owns entries `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
    pub num_sources: usize,
}

impl InterpPlan {
    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.sources[r.clone()], &self.weights[r])
    }

    /// Apply the map to an `m_src x channels` value matrix.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_rows() * channels];
        for i in 0..self.num_rows() {
            let (srcs, ws) = self.row(i);
            let dst = &mut out[i * channels..(i + 1) * channels];
            for (&s, &w) in srcs.iter().zip(ws) {
                let row = &src[s as usize * channels..(s as usize + 1) * channels];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

/// Inverse-distance weights over the exact `k` nearest sources for every
/// destination point.
///
/// Weights are `w_i = (1 / (d_i + eps)) / sum_j (1 / (d_j + eps))` with
/// `eps = 1e-8`; a destination that coincides exactly with a source copies
/// that source alone (the lowest such index when several coincide).
pub fn interp_plan(src_coords: &[f64], ndim: usize, dst_coords: &[f64], k: usize) -> Result<InterpPlan> {
    if k == 0 {
        return Err(Error::invalid("interpolation needs k >= 1"));
    }
    let index = PointIndex::build(src_coords, ndim)?;
    let m_src = src_coords.len() / ndim;
    let m_dst = dst_coords.len() / ndim;
    let mut sources = Vec::with_capacity(m_dst * k.min(m_src));
    let mut weights = Vec::with_capacity(m_dst * k.min(m_src));
    let mut offsets = Vec::with_capacity(m_dst + 1);
    offsets.push(0);
    const EPS: f64 = 1e-8;
    for i in 0..m_dst {
        let q = &dst_coords[i * ndim..(i + 1) * ndim];
        let near = index.nearest(q, k);
        if let Some(&(hit, _)) = near.iter().find(|(_, d)| *d == 0.0) {
            sources.push(hit as u32);
            weights.push(1.0);
        } else {
            let inv: Vec<f64> = near.iter().map(|(_, d)| 1.0 / (d + EPS)).collect();
            let total: f64 = inv.iter().sum();
            for ((s, _), w) in near.iter().zip(&inv) {
                sources.push(*s as u32);
                weights.push(w / total);
            }
        }
        offsets.push(sources.len());
    }
    Ok(InterpPlan { sources, weights, offsets, num_sources: m_src })
}

/// Interpolate a field onto new coordinates by inverse-distance-weighted
/// exact k-nearest neighbours (default `k = 4` via [`KNN_DEFAULT_K`]).
pub fn knn_interpolate(src: &Field, dst_coords: &[f64], k: usize) -> Result<Field> {
    let plan = interp_plan(src.coords(), src.ndim(), dst_coords, k)?;
    let values = plan.apply(src.values(), src.channels());
    Field::scattered(dst_coords.to_vec(), src.ndim(), values, src.channels())
}

/// Interpolate a scattered field onto every point of a regular grid.
pub fn downsample_to_grid(src: &Field, grid: &RegularGrid, k: usize) -> Result<Field> {
    if grid.ndim() != src.ndim() {
        return Err(Error::shape(
            "downsample_to_grid",
            format!("grid is {}-d, field is {}-d", grid.ndim(), src.ndim()),
        ));
    }
    let interpolated = knn_interpolate(src, &grid.coords(), k)?;
    Field::on_grid(grid.clone(), interpolated.values().to_vec(), src.channels())
}

/// Default neighbour count for interpolation between point sets.
pub const KNN_DEFAULT_K: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_coords(m: usize, ndim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m * ndim).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn grid_coords_are_pixel_centres() {
        let g = RegularGrid::new(&[4]).unwrap();
        assert_eq!(g.coords(), vec![0.125, 0.375, 0.625, 0.875]);

        let g = RegularGrid::new(&[2, 4]).unwrap();
        let c = g.coords();
        // point (i=1, j=2) is flat index 6
        assert_eq!(&c[12..14], &[0.75, 0.625]);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(RegularGrid::new(&[]).is_err());
        assert!(RegularGrid::new(&[2, 2, 2]).is_err());
        assert!(RegularGrid::new(&[0, 4]).is_err());
    }

    #[test]
    fn subsample_keeps_expected_rows() {
        let g = RegularGrid::square(8).unwrap();
        let f = Field::on_grid(g, (0..64).map(|v| v as f64).collect(), 1).unwrap();
        let sub = subsample(&f, 4.0, 7).unwrap();
        assert_eq!(sub.num_points(), 16);
        assert!(sub.grid().is_none());
        // Values still match their coordinates' original rows.
        for i in 0..sub.num_points() {
            let p = sub.point(i);
            let row = ((p[0] * 8.0 - 0.5).round() as usize) * 8 + (p[1] * 8.0 - 0.5).round() as usize;
            assert_eq!(sub.value_row(i)[0], row as f64);
        }
    }

    #[test]
    fn subsample_is_seed_deterministic() {
        let g = RegularGrid::square(8).unwrap();
        let f = Field::zeros_on(g, 1);
        let a = subsample(&f, 2.0, 3).unwrap();
        let b = subsample(&f, 2.0, 3).unwrap();
        let c = subsample(&f, 2.0, 4).unwrap();
        assert_eq!(a.coords(), b.coords());
        assert_ne!(a.coords(), c.coords());
    }

    #[test]
    fn subsample_rejects_rates_below_one() {
        let f = Field::zeros_on(RegularGrid::square(4).unwrap(), 1);
        assert!(subsample(&f, 0.5, 0).is_err());
    }

    #[test]
    fn nearest_matches_brute_force() {
        for (m, ndim, seed) in [(10, 2, 1), (100, 2, 2), (1000, 2, 3), (64, 1, 4)] {
            let coords = random_coords(m, ndim, seed);
            let index = PointIndex::build(&coords, ndim).unwrap();
            let queries = random_coords(50, ndim, seed + 100);
            for q in queries.chunks(ndim) {
                for k in [1, 4, 7] {
                    let got = index.nearest(q, k);
                    let want = oracles::brute_force_knn(&coords, ndim, q, k);
                    assert_eq!(
                        got.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
                        want.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
                        "m={m} ndim={ndim} k={k} q={q:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn nearest_breaks_ties_toward_lower_index() {
        // Four corners equidistant from the centre query.
        let coords = vec![0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75];
        let index = PointIndex::build(&coords, 2).unwrap();
        let near = index.nearest(&[0.5, 0.5], 2);
        assert_eq!(near[0].0, 0);
        assert_eq!(near[1].0, 1);
    }

    #[test]
    fn nearest_with_k_beyond_size_returns_all() {
        let coords = vec![0.2, 0.2, 0.8, 0.8];
        let index = PointIndex::build(&coords, 2).unwrap();
        assert_eq!(index.nearest(&[0.0, 0.0], 10).len(), 2);
    }

    #[test]
    fn in_box_matches_brute_force() {
        for (m, seed) in [(50, 5), (500, 6)] {
            let coords = random_coords(m, 2, seed);
            let index = PointIndex::build(&coords, 2).unwrap();
            for q in random_coords(20, 2, seed + 1).chunks(2) {
                let got = index.in_box(q, 0.1);
                let want = oracles::brute_force_in_box(&coords, 2, q, 0.1);
                assert_eq!(got, want, "q={q:?}");
            }
        }
    }

    #[test]
    fn interpolation_copies_exact_hits() {
        let g = RegularGrid::square(4).unwrap();
        let f = Field::on_grid(g.clone(), (0..16).map(|v| v as f64).collect(), 1).unwrap();
        let out = knn_interpolate(&f, &g.coords(), 4).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn interpolation_weights_prefer_near_sources() {
        let coords = vec![0.1, 0.9];
        let f = Field::scattered(coords, 1, vec![0.0, 1.0], 1).unwrap();
        let out = knn_interpolate(&f, &[0.2], 2).unwrap();
        // Distances 0.1 and 0.7: weight on the near source is 7x larger.
        let w_near = 1.0 / (0.1 + 1e-8);
        let w_far = 1.0 / (0.7 + 1e-8);
        assert_relative_eq!(out.values()[0], w_far / (w_near + w_far), max_relative = 1e-12);
    }

    #[test]
    fn interpolation_requires_sources() {
        let empty = Field::scattered(vec![], 1, vec![], 1);
        // Constructing the empty field is fine; interpolating from it is not.
        let f = empty.unwrap();
        assert!(matches!(knn_interpolate(&f, &[0.5], 2), Err(Error::EmptySource)));
    }

    #[test]
    fn downsample_to_grid_tags_the_grid() {
        let src = Field::scattered(random_coords(40, 2, 9), 2, vec![1.0; 40], 1).unwrap();
        let g = RegularGrid::square(4).unwrap();
        let out = downsample_to_grid(&src, &g, 4).unwrap();
        assert_eq!(out.grid(), Some(&g));
        // Constant fields interpolate to the same constant.
        for v in out.values() {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn interp_weights_form_partition_of_unity(
            m in 2usize..40,
            k in 1usize..6,
            seed in 0u64..500,
        ) {
            let coords = random_coords(m, 2, seed);
            let queries = random_coords(8, 2, seed ^ 0xabcd);
            let plan = interp_plan(&coords, 2, &queries, k).unwrap();
            for i in 0..plan.num_rows() {
                let (_, ws) = plan.row(i);
                let total: f64 = ws.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn subsample_counts_and_uniqueness(m in 1usize..200, rate in 1.0f64..16.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = subsample_indices(m, rate, &mut rng).unwrap();
            let expect = ((m as f64 / rate).round() as usize).clamp(1, m);
            prop_assert_eq!(idx.len(), expect);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < m));
        }
    }
}
