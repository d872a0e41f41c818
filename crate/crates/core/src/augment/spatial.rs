//! Geometric transforms. Each builds an output→source coordinate map that is
//! applied identically to every image channel (trilinear), the mask and the
//! support map (nearest neighbour).

use ndarray::{Array3, Array4, Axis as NdAxis};
use rand::Rng;

use super::intensity::gaussian_filter_3d;
use crate::preprocess::Sample;
use crate::volume::{round_half_away, Axis};

fn center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

#[inline]
fn trilinear(ch: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let [_, ny, nz] = dims;
    let mut idx = [[0usize; 2]; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let q = p[a].clamp(0.0, (n - 1) as f64);
        let i0 = q.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        idx[a] = [i0, i1];
        frac[a] = q - i0 as f64;
    }
    let at = |x: usize, y: usize, z: usize| ch[(x * ny + y) * nz + z] as f64;
    let mut acc = 0f64;
    for (ix, wx) in [(idx[0][0], 1.0 - frac[0]), (idx[0][1], frac[0])] {
        if wx == 0.0 {
            continue;
        }
        for (iy, wy) in [(idx[1][0], 1.0 - frac[1]), (idx[1][1], frac[1])] {
            if wy == 0.0 {
                continue;
            }
            for (iz, wz) in [(idx[2][0], 1.0 - frac[2]), (idx[2][1], frac[2])] {
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * at(ix, iy, iz);
            }
        }
    }
    acc as f32
}

/// Nearest voxel of `p`, or `None` outside the grid.
#[inline]
fn nearest(dims: [usize; 3], p: [f64; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = round_half_away(p[a]);
        if r < 0 || r as usize >= dims[a] {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

/// Resamples a sample through an output→source coordinate map.
pub fn warp(s: &Sample, map: impl Fn([f64; 3]) -> [f64; 3]) -> Sample {
    let dims = s.spatial_dims();
    let [nx, ny, nz] = dims;
    let channels = s.channels();
    let src_img = s.image.as_standard_layout();
    let src_mask = s.mask.as_standard_layout();
    let src_sup = s.support.as_standard_layout();
    let img = src_img.as_slice().expect("standard layout");
    let stride = nx * ny * nz;
    let mut image = Array4::<f32>::zeros((channels, nx, ny, nz));
    let mut mask = Array3::<u8>::zeros((nx, ny, nz));
    let mut support = Array3::<u8>::zeros((nx, ny, nz));
    {
        let out = image.as_slice_mut().expect("fresh array");
        let m = mask.as_slice_mut().expect("fresh array");
        let sup = support.as_slice_mut().expect("fresh array");
        let ms = src_mask.as_slice().expect("standard layout");
        let ss = src_sup.as_slice().expect("standard layout");
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let o = (x * ny + y) * nz + z;
                    let p = map([x as f64, y as f64, z as f64]);
                    for c in 0..channels {
                        out[c * stride + o] = trilinear(&img[c * stride..(c + 1) * stride], dims, p);
                    }
                    if let Some([sx, sy, sz]) = nearest(dims, p) {
                        let i = (sx * ny + sy) * nz + sz;
                        m[o] = ms[i];
                        sup[o] = ss[i];
                    }
                }
            }
        }
    }
    Sample { image, mask, support, provenance: s.provenance.clone() }
}

/// Flips image, mask and support along each listed axis.
pub fn mirror(s: &Sample, axes: &[Axis]) -> Sample {
    let mut out = s.clone();
    for &a in axes {
        let ax = a.index();
        out.image.invert_axis(NdAxis(ax + 1));
        out.mask.invert_axis(NdAxis(ax));
        out.support.invert_axis(NdAxis(ax));
    }
    out.image = out.image.as_standard_layout().into_owned();
    out.mask = out.mask.as_standard_layout().into_owned();
    out.support = out.support.as_standard_layout().into_owned();
    out
}

/// Isotropic zoom about the patch center; dims are unchanged.
pub fn scale(s: &Sample, factor: f64) -> Sample {
    assert!(factor > 0.0, "scale factor must be positive");
    if factor == 1.0 {
        return s.clone();
    }
    let c = center(s.spatial_dims());
    warp(s, |p| std::array::from_fn(|a| c[a] + (p[a] - c[a]) / factor))
}

/// Rotation matrix for `transversal_deg` about the vertical axis followed by
/// `sagittal_deg` about the sagittal axis: `R = Rx(sagittal) · Ry(transversal)`.
pub fn rotation_matrix(transversal_deg: f64, sagittal_deg: f64) -> [[f64; 3]; 3] {
    let (st, ct) = transversal_deg.to_radians().sin_cos();
    let (ss, cs) = sagittal_deg.to_radians().sin_cos();
    let ry = [[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cs, -ss], [0.0, ss, cs]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rx[i][k] * ry[k][j]).sum();
        }
    }
    r
}

/// Rigid rotation about the patch center.
pub fn rotate(s: &Sample, transversal_deg: f64, sagittal_deg: f64) -> Sample {
    if transversal_deg == 0.0 && sagittal_deg == 0.0 {
        return s.clone();
    }
    let r = rotation_matrix(transversal_deg, sagittal_deg);
    let c = center(s.spatial_dims());
    // Inverse map: source = c + Rᵀ (p - c).
    warp(s, |p| {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        std::array::from_fn(|i| c[i] + r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticParams {
    /// Smoothing of the control grid, in control-grid cells.
    pub sigma: f64,
    /// Control-point spacing in voxels.
    pub grid_spacing: usize,
    /// Maximum per-component displacement in voxels before smoothing.
    pub magnitude: f64,
}

/// Random displacement field on a coarse control grid, Gaussian-smoothed and
/// trilinearly interpolated to every voxel.
pub fn elastic_deform<R: Rng + ?Sized>(s: &Sample, params: ElasticParams, rng: &mut R) -> Sample {
    let dims = s.spatial_dims();
    let g = params.grid_spacing.max(1);
    let nodes: [usize; 3] = dims.map(|d| (d - 1).div_ceil(g) + 1);
    // Draw unconditionally so the stream advances identically for any magnitude.
    let mut fields: Vec<Array3<f32>> = (0..3)
        .map(|a| {
            Array3::from_shape_fn((nodes[0], nodes[1], nodes[2]), |_| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                if dims[a] > 1 {
                    (u * params.magnitude) as f32
                } else {
                    0.0
                }
            })
        })
        .collect();
    if params.magnitude == 0.0 {
        return s.clone();
    }
    if params.sigma > 0.0 {
        for f in &mut fields {
            *f = gaussian_filter_3d(f, params.sigma);
        }
    }
    let fields: Vec<Vec<f32>> = fields.into_iter().map(|f| f.into_raw_vec_and_offset().0).collect();
    warp(s, |p| {
        let q = p.map(|v| v / g as f64);
        std::array::from_fn(|a| p[a] + trilinear(&fields[a], nodes, q) as f64)
    })
}

/// Foreground centroid in voxel coordinates.
pub fn mask_centroid(mask: &Array3<u8>) -> Option<[f64; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for ((x, y, z), &v) in mask.indexed_iter() {
        if v == 1 {
            sum[0] += x as f64;
            sum[1] += y as f64;
            sum[2] += z as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|v| v / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Provenance;
    use rand::SeedableRng;

    pub(crate) fn blob_sample(dims: [usize; 3], radius: f64) -> Sample {
        let c = center(dims);
        let mask = Array3::from_shape_fn(dims, |(x, y, z)| {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
            u8::from(d2 <= radius * radius)
        });
        let image = Array4::from_shape_fn((1, dims[0], dims[1], dims[2]), |(_, x, y, z)| {
            (x as f32 * 0.1 + y as f32 * 0.01 + z as f32 * 0.3).sin() + mask[[x, y, z]] as f32
        });
        Sample {
            image,
            mask,
            support: Array3::ones(dims),
            provenance: Provenance { case_id: "t".into(), sample_index: None, crop_offset: [0; 3], transforms: vec![] },
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = blob_sample([9, 8, 7], 3.0);
        for axes in [vec![Axis::Sagittal], vec![Axis::Vertical, Axis::Depth], vec![Axis::Sagittal, Axis::Vertical, Axis::Depth]] {
            assert_eq!(mirror(&mirror(&s, &axes), &axes), s);
            assert_eq!(mirror(&s, &axes).foreground_count(), s.foreground_count());
        }
    }

    #[test]
    fn zoom_of_single_voxel_matches_brute_force() {
        let dims = [9, 9, 9];
        let mut s = blob_sample(dims, 0.0);
        assert_eq!(s.foreground_count(), 1);
        s.mask.fill(0);
        s.mask[[4, 4, 4]] = 1;
        let z = scale(&s, 2.0);
        // Brute force: output voxel p is foreground iff round(c + (p - c)/2) == (4,4,4).
        let c = 4.0;
        let count = (0..9)
            .flat_map(|x| (0..9).flat_map(move |y| (0..9).map(move |z| [x, y, z])))
            .filter(|p| p.iter().all(|&v| round_half_away(c + (v as f64 - c) / 2.0) == 4))
            .count();
        assert_eq!(z.foreground_count(), count);
        assert_eq!(count, 8);
    }

    #[test]
    fn identity_parameters() {
        let s = blob_sample([8, 8, 6], 2.5);
        assert_eq!(scale(&s, 1.0), s);
        assert_eq!(rotate(&s, 0.0, 0.0), s);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let e = elastic_deform(&s, ElasticParams { sigma: 0.2, grid_spacing: 4, magnitude: 0.0 }, &mut rng);
        assert_eq!(e, s);
        // Exactly-zero displacement through the warp path is also exact.
        let w = warp(&s, |p| p);
        assert_eq!(w, s);
    }
}
