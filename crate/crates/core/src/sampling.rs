//! Depth activation and Global Spatial Sampling: every voxel center is
//! projected into every camera, its metric depth mapped onto the depth-bin
//! axis, and the camera's depth distribution interpolated at `(bin, h, w)`.
//! Per-camera samples are summed in ascending camera order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::geometry::{project, CameraModel, DepthBins, GridSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthActivation {
    #[default]
    Sigmoid,
    Softmax,
    /// Values are already weights.
    None,
}

/// How a continuous `(bin, h, w)` coordinate reads the distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Linear along all three axes.
    #[default]
    Trilinear,
    /// Nearest depth bin, bilinear over the image plane.
    NearestDepthBilinear,
}

/// Per-camera depth weights over `(bin, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution<T> {
    values: Tensor<T>,
    bins: DepthBins,
    activation: DepthActivation,
}

impl<T: Scalar> DepthDistribution<T> {
    pub fn new(values: Tensor<T>, bins: DepthBins, activation: DepthActivation) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != bins.count {
            return Err(shape_err(format!(
                "depth distribution {:?} does not match {} bins",
                values.shape(),
                bins.count
            )));
        }
        Ok(Self {
            values,
            bins,
            activation,
        })
    }

    pub fn from_logits(logits: &Tensor<T>, mode: DepthActivation, bins: DepthBins) -> Result<Self> {
        Self::new(activate_depth(logits, mode)?, bins, mode)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn bins(&self) -> &DepthBins {
        &self.bins
    }

    pub fn activation(&self) -> DepthActivation {
        self.activation
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Elementwise sigmoid, or softmax along the depth axis of a `D×H×W` tensor.
pub fn activate_depth<T: Scalar>(logits: &Tensor<T>, mode: DepthActivation) -> Result<Tensor<T>> {
    if logits.ndim() != 3 {
        return Err(shape_err(format!("depth logits must be D×H×W, got {:?}", logits.shape())));
    }
    Ok(match mode {
        DepthActivation::None => logits.clone(),
        DepthActivation::Sigmoid => logits.map(|v| T::one() / (T::one() + (-v).exp())),
        DepthActivation::Softmax => {
            let (d, plane) = (logits.shape()[0], logits.shape()[1] * logits.shape()[2]);
            let src = logits.data();
            let mut out = logits.clone();
            let dst = out.data_mut();
            for p in 0..plane {
                let max = (0..d).fold(T::neg_infinity(), |m, b| m.max(src[b * plane + p]));
                let mut total = T::zero();
                for b in 0..d {
                    let e = (src[b * plane + p] - max).exp();
                    dst[b * plane + p] = e;
                    total = total + e;
                }
                for b in 0..d {
                    dst[b * plane + p] = dst[b * plane + p] / total;
                }
            }
            out
        }
    })
}

/// Lattice corners touched by a continuous coordinate: flat offset and weight.
///
/// Corners are enumerated bin-major, then row, then column (the low corner
/// before the high one on each axis); corners outside the tensor are dropped.
fn corners(shape: [usize; 3], coord: (f64, f64, f64), mode: SamplingMode) -> ([(usize, f64); 8], usize) {
    let mut out = [(0usize, 0.0f64); 8];
    let mut n = 0;
    let (d, h, w) = coord;
    if !(d.is_finite() && h.is_finite() && w.is_finite()) {
        return (out, 0);
    }
    let (d_taps, d_count): ([(f64, f64); 2], usize) = match mode {
        SamplingMode::Trilinear => {
            let d0 = d.floor();
            let fd = d - d0;
            ([(d0, 1.0 - fd), (d0 + 1.0, fd)], 2)
        }
        SamplingMode::NearestDepthBilinear => ([((d + 0.5).floor(), 1.0), (0.0, 0.0)], 1),
    };
    let h0 = h.floor();
    let w0 = w.floor();
    let (fh, fw) = (h - h0, w - w0);
    let h_taps = [(h0, 1.0 - fh), (h0 + 1.0, fh)];
    let w_taps = [(w0, 1.0 - fw), (w0 + 1.0, fw)];
    let inside = |v: f64, n: usize| v >= 0.0 && v < n as f64;
    for &(di, dw) in &d_taps[..d_count] {
        if !inside(di, shape[0]) {
            continue;
        }
        for &(hi, hw) in &h_taps {
            if !inside(hi, shape[1]) {
                continue;
            }
            for &(wi, ww) in &w_taps {
                if !inside(wi, shape[2]) {
                    continue;
                }
                let offset = ((di as usize) * shape[1] + hi as usize) * shape[2] + wi as usize;
                out[n] = (offset, dw * hw * ww);
                n += 1;
            }
        }
    }
    (out, n)
}

fn shape3<T: Scalar>(t: &Tensor<T>) -> [usize; 3] {
    [t.shape()[0], t.shape()[1], t.shape()[2]]
}

/// Interpolates a `D×H×W` tensor at a continuous `(bin, row, col)` coordinate
/// with zero padding outside the lattice.
pub fn sample<T: Scalar>(values: &Tensor<T>, coord: (f64, f64, f64), mode: SamplingMode) -> T {
    let (taps, n) = corners(shape3(values), coord, mode);
    let data = values.data();
    taps[..n]
        .iter()
        .fold(T::zero(), |acc, &(o, wgt)| acc + data[o] * T::of_f64(wgt))
}

pub fn sample_trilinear<T: Scalar>(dist: &DepthDistribution<T>, coord: (f64, f64, f64)) -> T {
    sample(&dist.values, coord, SamplingMode::Trilinear)
}

/// Where one voxel center lands in one camera's distribution, if it lands at all.
fn sample_coord(cam: &CameraModel, bins: &DepthBins, spec: &GridSpec, voxel: usize) -> Option<(f64, f64, f64)> {
    let [i, j, k] = spec.unravel(voxel);
    let ip = project(cam, &spec.voxel_center(i, j, k));
    if !ip.in_frustum {
        return None;
    }
    let b = bins.to_bin(ip.d);
    b.valid.then_some((b.coord, ip.h, ip.w))
}

fn check_inputs<T: Scalar>(dists: &[DepthDistribution<T>], cams: &[CameraModel]) -> Result<()> {
    if dists.is_empty() || dists.len() != cams.len() {
        return Err(shape_err(format!(
            "{} depth distributions for {} cameras",
            dists.len(),
            cams.len()
        )));
    }
    for (idx, (dist, cam)) in dists.iter().zip(cams).enumerate() {
        if dist.height() != cam.height() || dist.width() != cam.width() {
            return Err(shape_err(format!(
                "camera {idx}: distribution is {}x{}, camera image is {}x{}",
                dist.height(),
                dist.width(),
                cam.height(),
                cam.width()
            )));
        }
    }
    Ok(())
}

/// Sums every camera's sampled depth weight into a single-channel `nx×ny×nz` grid.
pub fn global_spatial_sampling<T: Scalar>(
    dists: &[DepthDistribution<T>],
    cams: &[CameraModel],
    spec: &GridSpec,
    mode: SamplingMode,
) -> Result<Tensor<T>> {
    check_inputs(dists, cams)?;
    let mut out = Tensor::zeros(&spec.dims());
    out.data_mut().par_iter_mut().enumerate().for_each(|(voxel, slot)| {
        let mut acc = T::zero();
        for (dist, cam) in dists.iter().zip(cams) {
            if let Some(coord) = sample_coord(cam, &dist.bins, spec, voxel) {
                acc = acc + sample(&dist.values, coord, mode);
            }
        }
        *slot = acc;
    });
    Ok(out)
}

/// Adjoint of [`global_spatial_sampling`] with respect to the distributions.
pub fn global_spatial_sampling_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cams: &[CameraModel],
    spec: &GridSpec,
    bins: &[DepthBins],
    mode: SamplingMode,
) -> Result<Vec<Tensor<T>>> {
    if upstream.shape() != spec.dims() {
        return Err(shape_err(format!(
            "upstream {:?} does not match grid {:?}",
            upstream.shape(),
            spec.dims()
        )));
    }
    if bins.len() != cams.len() || cams.is_empty() {
        return Err(shape_err(format!("{} bin layouts for {} cameras", bins.len(), cams.len())));
    }
    let up = upstream.data();
    Ok(cams
        .par_iter()
        .zip(bins.par_iter())
        .map(|(cam, b)| {
            let shape = [b.count, cam.height(), cam.width()];
            let mut grad = Tensor::<T>::zeros(&shape);
            let g = grad.data_mut();
            for (voxel, &u) in up.iter().enumerate() {
                if u == T::zero() {
                    continue;
                }
                if let Some(coord) = sample_coord(cam, b, spec, voxel) {
                    let (taps, n) = corners(shape, coord, mode);
                    for &(o, wgt) in &taps[..n] {
                        g[o] = g[o] + u * T::of_f64(wgt);
                    }
                }
            }
            grad
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bins(count: usize) -> DepthBins {
        DepthBins {
            d_min: 1.0,
            bin_size: 0.5,
            count,
        }
    }

    #[test]
    fn sigmoid_and_softmax() {
        let z = Tensor::<f64>::zeros(&[4, 2, 3]);
        let s = activate_depth(&z, DepthActivation::Sigmoid).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
        let sm = activate_depth(&z, DepthActivation::Softmax).unwrap();
        assert!(sm.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let sat = Tensor::<f64>::from_vec(&[2, 1, 1], vec![20.0, -20.0]).unwrap();
        let s = activate_depth(&sat, DepthActivation::Sigmoid).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-8 && s.data()[1] < 1e-8);
    }

    #[test]
    fn softmax_sums_to_one_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f32>::random_uniform(&[7, 3, 5], -8.0, 8.0, &mut rng);
        let sm = activate_depth(&logits, DepthActivation::Softmax).unwrap();
        for h in 0..3 {
            for w in 0..5 {
                let s: f32 = (0..7).map(|d| sm.at(&[d, h, w])).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn trilinear_on_lattice_and_midpoint() {
        let t = Tensor::<f64>::from_fn(&[4, 5, 6], |i| (i[0] * 31 + i[1] * 7 + i[2]) as f64);
        let dist = DepthDistribution::new(t.clone(), bins(4), DepthActivation::None).unwrap();
        assert_eq!(sample_trilinear(&dist, (2.0, 3.0, 4.0)), t.at(&[2, 3, 4]));
        let mid = sample_trilinear(&dist, (1.0, 2.5, 3.0));
        assert_eq!(mid, 0.5 * (t.at(&[1, 2, 3]) + t.at(&[1, 3, 3])));
    }

    #[test]
    fn zero_padding_outside() {
        let t = Tensor::<f64>::full(&[2, 2, 2], 1.0);
        assert_eq!(sample(&t, (-0.5, 0.0, 0.0), SamplingMode::Trilinear), 0.5);
        assert_eq!(sample(&t, (0.0, -1.0, 0.0), SamplingMode::Trilinear), 0.0);
        assert_eq!(sample(&t, (5.0, 0.0, 0.0), SamplingMode::Trilinear), 0.0);
    }

    #[test]
    fn nearest_depth_mode_snaps_bins() {
        let t = Tensor::<f64>::from_fn(&[3, 2, 2], |i| i[0] as f64 * 10.0 + i[2] as f64);
        assert_eq!(sample(&t, (1.4, 0.0, 0.5), SamplingMode::NearestDepthBilinear), 10.5);
        assert_eq!(sample(&t, (1.6, 0.0, 0.0), SamplingMode::NearestDepthBilinear), 20.0);
        assert_eq!(sample(&t, (1.4, 0.0, 0.0), SamplingMode::Trilinear), 14.0);
    }

    fn forward_cam() -> CameraModel {
        // optical axis along world +Z, 9x9 image
        CameraModel::new(
            CameraModel::intrinsics_matrix(4.0, 4.0, 4.0, 4.0),
            Matrix3::identity(),
            Vector3::zeros(),
            9,
            9,
        )
        .unwrap()
    }

    #[test]
    fn gss_one_hot_alignment_and_summation() {
        // pick
        // a grid whose first center sits on the optical axis.
        let spec = GridSpec::from_origin([-0.5, -0.5, 4.75], 1.0, [1, 1, 1]).unwrap();
        let cam = forward_cam();
        // depth 5.25 -> bin coord (5.25-1)/0.5-0.5 = 8
        let mut v = Tensor::<f64>::zeros(&[10, 9, 9]);
        v.set(&[8, 4, 4], 1.0);
        let dist = DepthDistribution::new(v, bins(10), DepthActivation::None).unwrap();
        let occ = global_spatial_sampling(std::slice::from_ref(&dist), std::slice::from_ref(&cam), &spec, SamplingMode::Trilinear).unwrap();
        assert_eq!(occ.data(), &[1.0]);

        let a = DepthDistribution::new(Tensor::full(&[10, 9, 9], 0.3), bins(10), DepthActivation::None).unwrap();
        let b = DepthDistribution::new(Tensor::full(&[10, 9, 9], 0.5), bins(10), DepthActivation::None).unwrap();
        let occ = global_spatial_sampling(&[a, b], &[cam.clone(), cam.clone()], &spec, SamplingMode::Trilinear).unwrap();
        assert!((occ.data()[0] - 0.8f64).abs() < 1e-15);

        let behind = GridSpec::from_origin([-0.5, -0.5, -6.0], 1.0, [1, 1, 1]).unwrap();
        let occ = global_spatial_sampling(&[dist], &[cam], &behind, SamplingMode::Trilinear).unwrap();
        assert_eq!(occ.data(), &[0.0]);
    }

    #[test]
    fn gss_rejects_mismatches() {
        let spec = GridSpec::from_origin([0.0; 3], 1.0, [1, 1, 1]).unwrap();
        let dist = DepthDistribution::new(Tensor::<f64>::zeros(&[4, 8, 9]), bins(4), DepthActivation::None).unwrap();
        let cam = forward_cam();
        assert!(global_spatial_sampling(std::slice::from_ref(&dist), std::slice::from_ref(&cam), &spec, SamplingMode::Trilinear).is_err());
        assert!(global_spatial_sampling(&[dist.clone(), dist], &[cam], &spec, SamplingMode::Trilinear).is_err());
        let up = Tensor::<f64>::zeros(&[2, 1, 1]);
        assert!(global_spatial_sampling_backward(&up, &[forward_cam()], &spec, &[bins(4)], SamplingMode::Trilinear).is_err());
    }

    #[test]
    fn backward_of_single_lattice_gather() {
        let spec = GridSpec::from_origin([-0.5, -0.5, 4.75], 1.0, [1, 1, 1]).unwrap();
        let up = Tensor::<f64>::full(&[1, 1, 1], 1.0);
        let g = global_spatial_sampling_backward(&up, &[forward_cam()], &spec, &[bins(10)], SamplingMode::Trilinear).unwrap();
        assert_eq!(g[0].at(&[8, 4, 4]), 1.0);
        assert_eq!(g[0].sum(), 1.0);

        let zero = Tensor::<f64>::zeros(&[1, 1, 1]);
        let g = global_spatial_sampling_backward(&zero, &[forward_cam()], &spec, &[bins(10)], SamplingMode::Trilinear).unwrap();
        assert_eq!(g[0].max_abs(), 0.0);
    }
}
