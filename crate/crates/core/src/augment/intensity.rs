//! Intensity transforms. They touch image channels only; masks pass through.

use ndarray::{Array3, Axis as NdAxis};

use crate::preprocess::Sample;

/// Half-sample symmetric reflection of `i` into `0..n` (`... b a | a b ... | ... y z | z y ...`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D Gaussian taps for `sigma` voxels, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn convolve_axis(data: &Array3<f32>, axis: usize, kernel: &[f64]) -> Array3<f32> {
    let radius = (kernel.len() / 2) as isize;
    let n = data.shape()[axis];
    let mut out = Array3::<f32>::zeros(data.raw_dim());
    let mut line = vec![0f64; n];
    for (src, mut dst) in data.lanes(NdAxis(axis)).into_iter().zip(out.lanes_mut(NdAxis(axis))) {
        for (l, v) in line.iter_mut().zip(src.iter()) {
            *l = *v as f64;
        }
        for (i, d) in dst.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * line[reflect_index(i as isize + k as isize - radius, n)];
            }
            *d = acc as f32;
        }
    }
    out
}

/// Separable isotropic Gaussian filter with reflective boundaries.
pub fn gaussian_filter_3d(data: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return data.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let mut out = data.as_standard_layout().into_owned();
    for axis in 0..3 {
        if data.shape()[axis] > 1 {
            out = convolve_axis(&out, axis, &kernel);
        }
    }
    out
}

/// Blurs every image channel with an isotropic Gaussian of `sigma` voxels.
pub fn gaussian_blur(s: &Sample, sigma: f64) -> Sample {
    assert!(sigma >= 0.0, "blur sigma must be non-negative");
    if sigma == 0.0 {
        return s.clone();
    }
    let mut out = s.clone();
    for (k, ch) in s.image.outer_iter().enumerate() {
        let blurred = gaussian_filter_3d(&ch.to_owned(), sigma);
        out.image.index_axis_mut(NdAxis(0), k).assign(&blurred);
    }
    out
}

/// Per-channel min-max rescale, power `gamma`, rescale back.
///
/// Min and max are taken over supported voxels. A constant channel is left unchanged.
pub fn gamma_transform(s: &Sample, gamma: f64) -> Sample {
    assert!(gamma > 0.0, "gamma must be positive");
    if gamma == 1.0 {
        return s.clone();
    }
    let mut out = s.clone();
    let any_support = s.support.iter().any(|&v| v == 1);
    for mut ch in out.image.outer_iter_mut() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (&v, &sup) in ch.iter().zip(s.support.iter()) {
            if sup == 1 || !any_support {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
        let range = hi - lo;
        if !(range > 0.0) || !range.is_finite() {
            continue;
        }
        ch.mapv_inplace(|v| {
            let t = ((v as f64 - lo) / range).clamp(0.0, 1.0);
            (lo + range * t.powf(gamma)) as f32
        });
    }
    out
}
