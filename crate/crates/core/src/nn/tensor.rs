use super::real::Real;

/// Dense 5-D tensor `[batch, channel, x, y, z]`, z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 5],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Contiguous data of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape[1] * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}

/// Channel concatenation `[a | b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.batch(), b.batch());
    assert_eq!(a.spatial(), b.spatial(), "concat spatial mismatch");
    let (ca, cb, p) = (a.channels(), b.channels(), a.plane());
    let mut out = Tensor::zeros([a.batch(), ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
    for n in 0..a.batch() {
        let dst = out.sample_mut(n);
        dst[..ca * p].copy_from_slice(a.sample(n));
        dst[ca * p..].copy_from_slice(b.sample(n));
    }
    out
}

/// Splits a channel-concatenated gradient back into its parts.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, p) = (g.channels(), g.plane());
    let cb = c - ca;
    let [nb, _, x, y, z] = g.shape;
    let mut a = Tensor::zeros([nb, ca, x, y, z]);
    let mut b = Tensor::zeros([nb, cb, x, y, z]);
    for n in 0..nb {
        let src = g.sample(n);
        a.sample_mut(n).copy_from_slice(&src[..ca * p]);
        b.sample_mut(n).copy_from_slice(&src[ca * p..]);
    }
    (a, b)
}

/// Nearest-neighbour upsampling by integer `factor` per spatial axis.
pub fn upsample<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Tensor<T> {
    let [nb, c, ix, iy, iz] = x.shape;
    let [fx, fy, fz] = factor;
    let (ox, oy, oz) = (ix * fx, iy * fy, iz * fz);
    let mut out = Tensor::zeros([nb, c, ox, oy, oz]);
    for (src, dst) in x.data.chunks(ix * iy * iz).zip(out.data.chunks_mut(ox * oy * oz)) {
        for x_ in 0..ox {
            for y_ in 0..oy {
                let s = ((x_ / fx) * iy + y_ / fy) * iz;
                let d = (x_ * oy + y_) * oz;
                for z_ in 0..oz {
                    dst[d + z_] = src[s + z_ / fz];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: sums each output block into its source voxel.
pub fn upsample_backward<T: Real>(g: &Tensor<T>, factor: [usize; 3]) -> Tensor<T> {
    let [nb, c, ox, oy, oz] = g.shape;
    let [fx, fy, fz] = factor;
    let (ix, iy, iz) = (ox / fx, oy / fy, oz / fz);
    let mut out = Tensor::zeros([nb, c, ix, iy, iz]);
    for (src, dst) in g.data.chunks(ox * oy * oz).zip(out.data.chunks_mut(ix * iy * iz)) {
        for x_ in 0..ox {
            for y_ in 0..oy {
                let d = ((x_ / fx) * iy + y_ / fy) * iz;
                let s = (x_ * oy + y_) * oz;
                for z_ in 0..oz {
                    dst[d + z_ / fz] += src[s + z_];
                }
            }
        }
    }
    out
}
