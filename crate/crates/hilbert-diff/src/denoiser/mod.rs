//! Denoising network that reads a field at arbitrary 2-d coordinates.
//!
//! Point features flow through timestep-modulated scattered-convolution
//! blocks, drop onto a small fixed inner grid for a two-level U-Net, and
//! return to the query points by k-nearest-neighbour interpolation. All
//! convolution kernels are continuous functions sampled on cell grids, so
//! the same parameters evaluate at any resolution; only the tap plans and
//! kernel grids are rebuilt.

pub mod plan;

use crate::error::{Error, Result};
use crate::field::{interp_plan, Field, InterpPlan, RegularGrid, KNN_DEFAULT_K};
use crate::grad::{ParamSet, SparseConvPlan, Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Row-normalization epsilon used throughout the network.
pub const NORM_EPS: f64 = 1e-5;

/// Architecture hyper-parameters.
#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Field channels the network denoises.
    pub data_channels: usize,
    /// Feature width of the point stream.
    pub width: usize,
    /// Kernel grid side at the training resolution (odd).
    pub kernel_size: usize,
    /// Resolution whose pixel spacing sets the kernel tap spacing.
    pub train_res: usize,
    /// Side of the fixed inner grid the U-Net runs on (even).
    pub inner_res: usize,
    /// Sinusoidal timestep embedding width (even).
    pub time_dim: usize,
    /// Neighbours used by the grid transfer interpolations.
    pub knn_k: usize,
}

impl NetConfig {
    /// Defaults: width 64, 7x7 kernels, inner grid at a quarter of the
    /// training resolution, 128-dim time embedding.
    pub fn new(data_channels: usize, train_res: usize) -> Self {
        Self {
            data_channels,
            width: 64,
            kernel_size: 7,
            train_res,
            inner_res: (train_res / 4).max(2),
            time_dim: 128,
            knn_k: KNN_DEFAULT_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_channels == 0 {
            return Err(Error::invalid("data_channels must be at least 1"));
        }
        if self.width < 2 {
            return Err(Error::invalid("width must be at least 2"));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!("kernel_size must be odd and >= 3, got {}", self.kernel_size)));
        }
        if self.train_res < 2 {
            return Err(Error::invalid("train_res must be at least 2"));
        }
        if self.inner_res < 2 || self.inner_res % 2 != 0 {
            return Err(Error::invalid(format!("inner_res must be even and >= 2, got {}", self.inner_res)));
        }
        if self.time_dim < 4 || self.time_dim % 2 != 0 {
            return Err(Error::invalid(format!("time_dim must be even and >= 4, got {}", self.time_dim)));
        }
        if self.knn_k == 0 {
            return Err(Error::invalid("knn_k must be at least 1"));
        }
        Ok(())
    }

    /// Physical kernel half-width in domain units.
    pub fn radius(&self) -> f64 {
        plan::kernel_radius(self.kernel_size, self.train_res)
    }
}

/// Parameter indices of one linear layer.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

/// Parameter indices of one 3x3 grid convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvIdx {
    pub k: usize,
    pub b: usize,
}

/// Parameter indices of one scattered-convolution block.
#[derive(Clone, Debug)]
pub struct SparseBlockIdx {
    pub kernel: usize,
    pub scale: Linear,
    pub shift: Linear,
    pub mlp: [Linear; 3],
}

/// Parameter indices of one grid residual block.
#[derive(Clone, Debug)]
pub struct ResBlockIdx {
    pub conv1: ConvIdx,
    pub conv2: ConvIdx,
    pub scale: Linear,
    pub shift: Linear,
    pub shortcut: Option<usize>,
    pub cout: usize,
}

/// Parameter indices of the inner-grid U-Net.
#[derive(Clone, Debug)]
pub struct UnetIdx {
    pub stem: ConvIdx,
    pub e0: ResBlockIdx,
    pub e1: ResBlockIdx,
    pub mid: ResBlockIdx,
    pub d1: ResBlockIdx,
    pub d0: ResBlockIdx,
    pub out: ConvIdx,
}

/// Where every parameter tensor lives inside the flat [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub time_mlp: (Linear, Linear),
    pub lift: Linear,
    pub enc_blocks: Vec<SparseBlockIdx>,
    pub unet: UnetIdx,
    pub skip_proj: Vec<usize>,
    pub dec_blocks: Vec<SparseBlockIdx>,
    pub project: Linear,
}

/// Precomputed geometry for one coordinate set at one resolution; build once
/// and reuse across timesteps.
#[derive(Clone, Debug)]
pub struct ForwardPlans {
    pub sparse: Arc<SparseConvPlan>,
    pub down: Arc<InterpPlan>,
    pub up: Arc<InterpPlan>,
    pub kernel_side: usize,
    pub resolution: usize,
}

/// The denoising network: configuration, flat parameters, and their layout.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub layout: Layout,
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = self.rng.sample(StandardNormal);
                v * std
            })
            .collect();
        self.params.push(name, Tensor::new(shape, data).unwrap())
    }

    /// Fan-in scaled init for layers followed by silu.
    fn he(&mut self, name: &str, fan_in: usize, shape: &[usize]) -> usize {
        self.gaussian(name, shape, (2.0 / fan_in as f64).sqrt())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.params.push(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.he(&format!("{prefix}.w"), fan_in, &[fan_in, out]),
            b: self.zeros(&format!("{prefix}.b"), &[out]),
        }
    }

    fn linear_zero(&mut self, prefix: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.zeros(&format!("{prefix}.w"), &[fan_in, out]),
            b: self.zeros(&format!("{prefix}.b"), &[out]),
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvIdx {
        ConvIdx {
            k: self.he(&format!("{prefix}.k"), 9 * cin, &[9 * cin, cout]),
            b: self.zeros(&format!("{prefix}.b"), &[cout]),
        }
    }

    fn conv_zero(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvIdx {
        ConvIdx {
            k: self.zeros(&format!("{prefix}.k"), &[9 * cin, cout]),
            b: self.zeros(&format!("{prefix}.b"), &[cout]),
        }
    }

    fn sparse_block(&mut self, prefix: &str, cfg: &NetConfig) -> SparseBlockIdx {
        let (w, td, cells) = (cfg.width, cfg.time_dim, cfg.kernel_size * cfg.kernel_size);
        SparseBlockIdx {
            // Row normalization follows immediately, so kernel scale is free.
            kernel: self.gaussian(&format!("{prefix}.kernel"), &[cells, w], 1.0),
            scale: self.linear_zero(&format!("{prefix}.scale"), td, w),
            shift: self.linear_zero(&format!("{prefix}.shift"), td, w),
            mlp: [
                self.linear(&format!("{prefix}.mlp1"), w, w),
                self.linear(&format!("{prefix}.mlp2"), w, w),
                self.linear_zero(&format!("{prefix}.mlp3"), w, w),
            ],
        }
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize, time_dim: usize) -> ResBlockIdx {
        ResBlockIdx {
            conv1: self.conv(&format!("{prefix}.conv1"), cin, cout),
            conv2: self.conv_zero(&format!("{prefix}.conv2"), cout, cout),
            scale: self.linear_zero(&format!("{prefix}.scale"), time_dim, cout),
            shift: self.linear_zero(&format!("{prefix}.shift"), time_dim, cout),
            shortcut: (cin != cout).then(|| self.he(&format!("{prefix}.shortcut.w"), cin, &[cin, cout])),
            cout,
        }
    }
}

/// Sinusoidal position code for a raw timestep index.
fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, dim], data).unwrap()
}

impl Denoiser {
    /// Fresh network with seeded initialization. Residual and output layers
    /// start at zero, so the initial network is an affine channel map.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: ParamSet::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let (w, d, td) = (cfg.width, cfg.data_channels, cfg.time_dim);
        let time_mlp = (b.linear("time.l1", td, td), b.linear("time.l2", td, td));
        let lift = b.linear("lift", d, w);
        let enc_blocks = (1..=3).map(|i| b.sparse_block(&format!("enc{i}"), &cfg)).collect();
        let unet = UnetIdx {
            stem: b.conv("unet.stem", w, w),
            e0: b.res_block("unet.e0", w, w, td),
            e1: b.res_block("unet.e1", w, 2 * w, td),
            mid: b.res_block("unet.mid", 2 * w, 2 * w, td),
            d1: b.res_block("unet.d1", 2 * w, 2 * w, td),
            d0: b.res_block("unet.d0", 2 * w, w, td),
            out: b.conv_zero("unet.out", w, w),
        };
        let skip_proj = vec![b.zeros("skip1.w", &[w, w]), b.zeros("skip2.w", &[w, w])];
        let dec_blocks = (1..=3).map(|i| b.sparse_block(&format!("dec{i}"), &cfg)).collect();
        let project = b.linear("project", w, d);
        let layout = Layout { time_mlp, lift, enc_blocks, unet, skip_proj, dec_blocks, project };
        Ok(Self { cfg, params: b.params, layout })
    }

    /// Rebuild a network around checkpointed parameters; shapes must match
    /// the layout that `cfg` produces.
    pub fn from_params(cfg: NetConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::shape(
                "denoiser_params",
                format!("{} tensors, layout wants {}", params.len(), reference.params.len()),
            ));
        }
        for i in 0..params.len() {
            if params.name(i) != reference.params.name(i)
                || params.tensor(i).shape() != reference.params.tensor(i).shape()
            {
                return Err(Error::shape(
                    "denoiser_params",
                    format!(
                        "tensor {i}: got {} {:?}, layout wants {} {:?}",
                        params.name(i),
                        params.tensor(i).shape(),
                        reference.params.name(i),
                        reference.params.tensor(i).shape()
                    ),
                ));
            }
        }
        Ok(Self { cfg, params, layout: reference.layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Geometry for one 2-d coordinate set evaluated at `resolution`.
    pub fn plans_for(&self, coords: &[f64], resolution: usize) -> Result<ForwardPlans> {
        let side = plan::kernel_side_for(self.cfg.kernel_size, self.cfg.train_res, resolution);
        let sparse = plan::build_sparse_plan(coords, side, resolution)?;
        let inner_coords = RegularGrid::square(self.cfg.inner_res)?.coords();
        let down = interp_plan(coords, 2, &inner_coords, self.cfg.knn_k)?;
        let up = interp_plan(&inner_coords, 2, coords, self.cfg.knn_k)?;
        Ok(ForwardPlans {
            sparse: Arc::new(sparse),
            down: Arc::new(down),
            up: Arc::new(up),
            kernel_side: side,
            resolution,
        })
    }

    /// Convenience for fields that sit on a square grid.
    pub fn plans_for_field(&self, field: &Field) -> Result<ForwardPlans> {
        if field.ndim() != 2 {
            return Err(Error::invalid("the denoising network supports 2-d fields only"));
        }
        let resolution = match field.grid() {
            Some(g) => g.dims()[0],
            None => self.cfg.train_res,
        };
        self.plans_for(field.coords(), resolution)
    }

    fn kernel_ids(&self) -> Vec<usize> {
        self.layout
            .enc_blocks
            .iter()
            .chain(self.layout.dec_blocks.iter())
            .map(|b| b.kernel)
            .collect()
    }

    /// Push every parameter onto a tape, resampling the scattered-conv
    /// kernels when the plans were built for a different resolution.
    pub fn param_vars(&self, tape: &Tape, plans: &ForwardPlans) -> Result<Vec<Var>> {
        let resize = plans.kernel_side != self.cfg.kernel_size;
        let kernel_ids = self.kernel_ids();
        (0..self.params.len())
            .map(|i| {
                let t = self.params.tensor(i);
                let t = if resize && kernel_ids.contains(&i) {
                    plan::kernel_resize(t, self.cfg.kernel_size, self.cfg.train_res, plans.kernel_side, plans.resolution)?
                } else {
                    t.clone()
                };
                Ok(tape.input(t))
            })
            .collect()
    }

    fn linear_at(&self, tape: &Tape, x: Var, lin: Linear, pvars: &[Var]) -> Result<Var> {
        tape.add_bias(tape.matmul(x, pvars[lin.w])?, pvars[lin.b])
    }

    /// `(1 + scale(temb), shift(temb))` as bias vectors of width `ch`.
    fn modulation(&self, tape: &Tape, temb: Var, scale: Linear, shift: Linear, ch: usize, pvars: &[Var]) -> Result<(Var, Var)> {
        let s = self.linear_at(tape, temb, scale, pvars)?;
        let s = tape.add_scalar(tape.reshape(s, &[ch])?, 1.0);
        let sh = tape.reshape(self.linear_at(tape, temb, shift, pvars)?, &[ch])?;
        Ok((s, sh))
    }

    fn sparse_block(
        &self,
        tape: &Tape,
        x: Var,
        temb: Var,
        idx: &SparseBlockIdx,
        plans: &ForwardPlans,
        pvars: &[Var],
    ) -> Result<Var> {
        let w = self.cfg.width;
        let y = tape.sparse_conv(x, pvars[idx.kernel], plans.sparse.clone())?;
        let y = tape.row_norm(y, NORM_EPS)?;
        let (s, sh) = self.modulation(tape, temb, idx.scale, idx.shift, w, pvars)?;
        let y = tape.add_bias(tape.mul_bias(y, s)?, sh)?;
        let y = self.linear_at(tape, y, idx.mlp[0], pvars)?;
        let y = self.linear_at(tape, tape.silu(y), idx.mlp[1], pvars)?;
        let y = self.linear_at(tape, tape.silu(y), idx.mlp[2], pvars)?;
        tape.add(x, y)
    }

    fn res_block(
        &self,
        tape: &Tape,
        x: Var,
        temb: Var,
        idx: &ResBlockIdx,
        side: usize,
        pvars: &[Var],
    ) -> Result<Var> {
        let y = tape.silu(tape.row_norm(x, NORM_EPS)?);
        let y = tape.add_bias(tape.conv2d(y, pvars[idx.conv1.k], side, side)?, pvars[idx.conv1.b])?;
        let (s, sh) = self.modulation(tape, temb, idx.scale, idx.shift, idx.cout, pvars)?;
        let y = tape.add_bias(tape.mul_bias(tape.row_norm(y, NORM_EPS)?, s)?, sh)?;
        let y = tape.silu(y);
        let y = tape.add_bias(tape.conv2d(y, pvars[idx.conv2.k], side, side)?, pvars[idx.conv2.b])?;
        let shortcut = match idx.shortcut {
            Some(wi) => tape.matmul(x, pvars[wi])?,
            None => x,
        };
        tape.add(shortcut, y)
    }

    fn unet(&self, tape: &Tape, g: Var, temb: Var, pvars: &[Var]) -> Result<Var> {
        let u = &self.layout.unet;
        let n = self.cfg.inner_res;
        let h0 = tape.add_bias(tape.conv2d(g, pvars[u.stem.k], n, n)?, pvars[u.stem.b])?;
        let e0 = self.res_block(tape, h0, temb, &u.e0, n, pvars)?;
        let p = tape.avg_pool2(e0, n, n)?;
        let e1 = self.res_block(tape, p, temb, &u.e1, n / 2, pvars)?;
        let mid = self.res_block(tape, e1, temb, &u.mid, n / 2, pvars)?;
        let d1 = self.res_block(tape, tape.add(mid, e1)?, temb, &u.d1, n / 2, pvars)?;
        let up = tape.upsample2(d1, n / 2, n / 2)?;
        let d0 = self.res_block(tape, up, temb, &u.d0, n, pvars)?;
        let h = tape.add(d0, e0)?;
        tape.add_bias(tape.conv2d(h, pvars[u.out.k], n, n)?, pvars[u.out.b])
    }

    /// Run the network on `x` (an `m x data_channels` tensor var) at
    /// timestep `t` under precomputed plans.
    pub fn forward(&self, tape: &Tape, x: Var, t: usize, plans: &ForwardPlans, pvars: &[Var]) -> Result<Var> {
        let shape = tape.shape_of(x);
        if shape != [plans.sparse.num_points, self.cfg.data_channels] {
            return Err(Error::shape(
                "denoiser_forward",
                format!(
                    "input {shape:?} vs {} points x {} channels",
                    plans.sparse.num_points, self.cfg.data_channels
                ),
            ));
        }
        let lay = &self.layout;
        let temb_in = tape.input(sinusoidal_embedding(t, self.cfg.time_dim));
        let temb = self.linear_at(tape, temb_in, lay.time_mlp.0, pvars)?;
        let temb = self.linear_at(tape, tape.silu(temb), lay.time_mlp.1, pvars)?;

        let mut h = self.linear_at(tape, x, lay.lift, pvars)?;
        let mut skips = Vec::with_capacity(3);
        for idx in &lay.enc_blocks {
            h = self.sparse_block(tape, h, temb, idx, plans, pvars)?;
            skips.push(h);
        }

        let g = tape.row_map(h, plans.down.clone())?;
        let g = self.unet(tape, g, temb, pvars)?;
        let up = tape.row_map(g, plans.up.clone())?;
        let mut h = tape.add(up, skips[2])?;

        h = self.sparse_block(tape, h, temb, &lay.dec_blocks[0], plans, pvars)?;
        let z1 = tape.matmul(skips[1], pvars[lay.skip_proj[0]])?;
        h = self.sparse_block(tape, tape.add(h, z1)?, temb, &lay.dec_blocks[1], plans, pvars)?;
        let z2 = tape.matmul(skips[0], pvars[lay.skip_proj[1]])?;
        h = self.sparse_block(tape, tape.add(h, z2)?, temb, &lay.dec_blocks[2], plans, pvars)?;

        self.linear_at(tape, h, lay.project, pvars)
    }

    /// Evaluate the network on a field without keeping gradients.
    pub fn predict(&self, field: &Field, t: usize, plans: &ForwardPlans) -> Result<Field> {
        let tape = Tape::new();
        let pvars = self.param_vars(&tape, plans)?;
        let x = tape.input(Tensor::new(&[field.num_points(), field.channels()], field.values().to_vec())?);
        let out = self.forward(&tape, x, t, plans, &pvars)?;
        field.with_values(tape.value(out).data().to_vec())
    }
}
