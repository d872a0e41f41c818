//! Convolution, batch normalization and ReLU with explicit backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::tensor::Tensor;

/// Upper bound on im2col buffer elements; larger convolutions are chunked by x-planes.
const COL_BUDGET: usize = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| (d[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1)
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// A z-trivial convolution over `[x, y, 1]` is the same memory walk as
    /// one over `[1, x, y]`; moving y into the fastest slot keeps the inner
    /// im2col loop contiguous for 2-D inputs.
    fn canonical(&self, d: [usize; 3]) -> (ConvGeom, [usize; 3]) {
        if d[2] == 1 && self.kernel[2] == 1 && self.stride[2] == 1 && self.pad[2] == 0 {
            let g = ConvGeom {
                kernel: [1, self.kernel[0], self.kernel[1]],
                stride: [1, self.stride[0], self.stride[1]],
                pad: [0, self.pad[0], self.pad[1]],
            };
            (g, [1, d[0], d[1]])
        } else {
            (*self, d)
        }
    }
}

/// Valid output range along one axis for tap `k`: outputs `o` with `0 <= o*s + k - p < n`.
#[inline]
fn valid_range(out: usize, n: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    // o*s + k - p <= n - 1  =>  o <= (n - 1 + p - k) / s
    let hi = if n + p > k { ((n - 1 + p - k) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Fills `cols` (`[c_in * taps, (x1-x0) * oy * oz]`) for output x-planes `x0..x1`.
/// With `ADD`, scatters `cols` back into `inp` instead (col2im).
fn im2col_impl<T: Real, const ADD: bool>(
    inp: &mut [T],
    c_in: usize,
    d: [usize; 3],
    g: &ConvGeom,
    o: [usize; 3],
    x0: usize,
    x1: usize,
    cols: &mut [T],
) {
    let [nx, ny, nz] = d;
    let [_, oy, oz] = o;
    let [kx, ky, kz] = g.kernel;
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.pad;
    let pc = (x1 - x0) * oy * oz;
    let mut r = 0;
    for c in 0..c_in {
        let chan = c * nx * ny * nz;
        for i in 0..kx {
            for j in 0..ky {
                let (ylo, yhi) = valid_range(oy, ny, j, sy, py);
                for k in 0..kz {
                    let (zlo, zhi) = valid_range(oz, nz, k, sz, pz);
                    let row = &mut cols[r * pc..(r + 1) * pc];
                    r += 1;
                    for ox in x0..x1 {
                        let seg = &mut row[(ox - x0) * oy * oz..(ox - x0 + 1) * oy * oz];
                        let ix = (ox * sx + i) as isize - px as isize;
                        if ix < 0 || ix as usize >= nx {
                            if !ADD {
                                seg.fill(T::zero());
                            }
                            continue;
                        }
                        if !ADD {
                            seg[..ylo * oz].fill(T::zero());
                            seg[yhi * oz..].fill(T::zero());
                        }
                        for y in ylo..yhi {
                            let iy = y * sy + j - py;
                            let base = chan + (ix as usize * ny + iy) * nz;
                            let line = &mut seg[y * oz..(y + 1) * oz];
                            if !ADD {
                                line[..zlo].fill(T::zero());
                                line[zhi..].fill(T::zero());
                            }
                            if sz == 1 {
                                let start = base + zlo + k - pz;
                                let src = &mut inp[start..start + (zhi - zlo)];
                                let dst = &mut line[zlo..zhi];
                                if ADD {
                                    for (s, v) in src.iter_mut().zip(dst.iter()) {
                                        *s += *v;
                                    }
                                } else {
                                    dst.copy_from_slice(src);
                                }
                            } else {
                                for z in zlo..zhi {
                                    let idx = base + z * sz + k - pz;
                                    if ADD {
                                        inp[idx] += line[z];
                                    } else {
                                        line[z] = inp[idx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub geom: ConvGeom,
    /// `[out_c, in_c, kx, ky, kz]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, geom: ConvGeom, rng: &mut R) -> Self {
        let fan_in = in_c * geom.taps();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = (0..out_c * fan_in).map(|_| T::of(normal.sample(rng))).collect();
        Conv3d {
            in_c,
            out_c,
            geom,
            weight,
            bias: vec![T::zero(); out_c],
            grad_weight: vec![T::zero(); out_c * fan_in],
            grad_bias: vec![T::zero(); out_c],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn chunk_planes(&self, o: [usize; 3]) -> usize {
        let per_plane = self.in_c * self.geom.taps() * o[1] * o[2];
        (COL_BUDGET / per_plane.max(1)).clamp(1, o[0].max(1))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_c, "conv input channels");
        let out_dims = self.geom.out_dims(x.spatial());
        let (g, d) = self.geom.canonical(x.spatial());
        let o = g.out_dims(d);
        let rows = self.in_c * g.taps();
        let p_total = o.iter().product::<usize>();
        let planes = self.chunk_planes(o);
        let mut y = Tensor::zeros([x.batch(), self.out_c, out_dims[0], out_dims[1], out_dims[2]]);
        let mut cols = vec![T::zero(); rows * planes * o[1] * o[2]];
        let mut inp = Vec::new();
        for n in 0..x.batch() {
            inp.clear();
            inp.extend_from_slice(x.sample(n));
            let out = y.sample_mut(n);
            let mut x0 = 0;
            while x0 < o[0] {
                let x1 = (x0 + planes).min(o[0]);
                let pc = (x1 - x0) * o[1] * o[2];
                let cols = &mut cols[..rows * pc];
                im2col_impl::<T, false>(&mut inp, self.in_c, d, &g, o, x0, x1, cols);
                let p0 = x0 * o[1] * o[2];
                T::gemm(self.out_c, rows, pc, T::one(), &self.weight, rows, 1, cols, pc, 1, T::zero(), &mut out[p0..], p_total, 1);
                x0 = x1;
            }
            for (co, b) in self.bias.iter().enumerate() {
                for v in &mut out[co * p_total..(co + 1) * p_total] {
                    *v += *b;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (g, d) = self.geom.canonical(x.spatial());
        let o = g.out_dims(d);
        let rows = self.in_c * g.taps();
        let p_total = o.iter().product::<usize>();
        assert_eq!(dy.plane(), p_total, "conv gradient shape");
        let planes = self.chunk_planes(o);
        let mut cols = vec![T::zero(); rows * planes * o[1] * o[2]];
        let mut dcols = if need_dx { vec![T::zero(); cols.len()] } else { Vec::new() };
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
        let mut inp = Vec::new();
        for n in 0..x.batch() {
            let gy = dy.sample(n);
            for (co, gb) in self.grad_bias.iter_mut().enumerate() {
                *gb += gy[co * p_total..(co + 1) * p_total].iter().copied().sum::<T>();
            }
            inp.clear();
            inp.extend_from_slice(x.sample(n));
            let mut x0 = 0;
            while x0 < o[0] {
                let x1 = (x0 + planes).min(o[0]);
                let pc = (x1 - x0) * o[1] * o[2];
                let p0 = x0 * o[1] * o[2];
                let cols = &mut cols[..rows * pc];
                im2col_impl::<T, false>(&mut inp, self.in_c, d, &g, o, x0, x1, cols);
                // dW += dY · colsᵀ
                T::gemm(self.out_c, pc, rows, T::one(), &gy[p0..], p_total, 1, cols, 1, pc, T::one(), &mut self.grad_weight, rows, 1);
                if let Some(dx) = dx.as_mut() {
                    let dcols = &mut dcols[..rows * pc];
                    // dcols = Wᵀ · dY
                    T::gemm(rows, self.out_c, pc, T::one(), &self.weight, 1, rows, &gy[p0..], p_total, 1, T::zero(), dcols, pc, 1);
                    im2col_impl::<T, true>(dx.sample_mut(n), self.in_c, d, &g, o, x0, x1, dcols);
                }
                x0 = x1;
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            grad_gamma: vec![T::zero(); c],
            grad_beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn channel_chunks(x: &Tensor<T>, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let (p, ch) = (x.plane(), x.channels());
        (0..x.batch()).map(move |n| {
            let s = (n * ch + c) * p;
            s..s + p
        })
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let c_n = x.channels();
        let m = (x.batch() * x.plane()) as f64;
        let mut y = Tensor::zeros(x.shape);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![0f64; c_n];
        for c in 0..c_n {
            let mut sum = 0f64;
            for r in Self::channel_chunks(x, c) {
                sum += x.data[r].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut ss = 0f64;
            for r in Self::channel_chunks(x, c) {
                ss += x.data[r].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
            }
            let var = ss / m;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = is;
            let (gm, bt) = (self.gamma[c], self.beta[c]);
            let (tm, tis) = (T::of(mean), T::of(is));
            for r in Self::channel_chunks(x, c) {
                for ((xh, yv), xv) in xhat[r.clone()].iter_mut().zip(&mut y.data[r.clone()]).zip(&x.data[r]) {
                    *xh = (*xv - tm) * tis;
                    *yv = gm * *xh + bt;
                }
            }
            let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
            let k = self.momentum;
            self.running_mean[c] = T::of((1.0 - k) * self.running_mean[c].f64() + k * mean);
            self.running_var[c] = T::of((1.0 - k) * self.running_var[c].f64() + k * unbiased);
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = Tensor::zeros(x.shape);
        for c in 0..x.channels() {
            let is = 1.0 / (self.running_var[c].f64() + self.eps).sqrt();
            let scale = T::of(self.gamma[c].f64() * is);
            let shift = T::of(self.beta[c].f64() - self.running_mean[c].f64() * self.gamma[c].f64() * is);
            for r in Self::channel_chunks(x, c) {
                for (yv, xv) in y.data[r.clone()].iter_mut().zip(&x.data[r]) {
                    *yv = *xv * scale + shift;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let m = (dy.batch() * dy.plane()) as f64;
        let mut dx = Tensor::zeros(dy.shape);
        for c in 0..dy.channels() {
            let (mut sdy, mut sdyx) = (0f64, 0f64);
            for r in Self::channel_chunks(dy, c) {
                for (g, xh) in dy.data[r.clone()].iter().zip(&cache.xhat[r]) {
                    sdy += g.f64();
                    sdyx += g.f64() * xh.f64();
                }
            }
            self.grad_beta[c] += T::of(sdy);
            self.grad_gamma[c] += T::of(sdyx);
            let k = self.gamma[c].f64() * cache.inv_std[c];
            let (a, b) = (T::of(sdy / m), T::of(sdyx / m));
            let tk = T::of(k);
            for r in Self::channel_chunks(dy, c) {
                for ((d, g), xh) in dx.data[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat[r]) {
                    *d = tk * (*g - a - *xh * b);
                }
            }
        }
        dx
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    bn: BnCache<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, geom: ConvGeom, rng: &mut R) -> Self {
        ConvBlock { conv: Conv3d::new(in_c, out_c, geom, rng), bn: BatchNorm::new(out_c) }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, Option<BlockCache<T>>) {
        let z = self.conv.forward(x);
        let (mut y, cache) = if train {
            let (y, c) = self.bn.forward_train(&z);
            (y, Some(BlockCache { bn: c }))
        } else {
            (self.bn.forward_eval(&z), None)
        };
        for v in &mut y.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        (y, cache)
    }

    /// `x` and `out` are the block's input and output from the training forward pass.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        out: &Tensor<T>,
        cache: &BlockCache<T>,
        dout: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut dz = dout.clone();
        for (g, o) in dz.data.iter_mut().zip(&out.data) {
            if *o <= T::zero() {
                *g = T::zero();
            }
        }
        let dbn = self.bn.backward(&cache.bn, &dz);
        self.conv.backward(x, &dbn, need_dx)
    }
}
