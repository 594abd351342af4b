//! Slow, obviously-correct reference computations.
//!
//! Nothing here calls into the kernels it checks: only the plain data types
//! of `lightocc` (tensors, grids, cameras, label grids) are shared. Every
//! oracle works in `f64` with scalar loops.

use lightocc::geometry::{CameraModel, GridSpec};
use lightocc::volume::LabeledOccupancy;
use lightocc::Tensor;

/// Pinhole projection written out by hand: `(d, h, w, in_frustum)`.
pub fn oracle_project(cam: &CameraModel, p: [f64; 3]) -> (f64, f64, f64, bool) {
    let r = cam.rotation();
    let t = cam.translation();
    let k = cam.intrinsics();
    let mut q = [0.0; 3];
    for row in 0..3 {
        q[row] = r[(row, 0)] * p[0] + r[(row, 1)] * p[1] + r[(row, 2)] * p[2] + t[row];
    }
    let d = q[2];
    if d <= 1e-6 {
        return (d, f64::NAN, f64::NAN, false);
    }
    let w = (k[(0, 0)] * q[0] + k[(0, 1)] * q[1] + k[(0, 2)] * q[2]) / d;
    let h = (k[(1, 1)] * q[1] + k[(1, 2)] * q[2]) / d;
    let inside = h >= 0.0 && h <= (cam.height() - 1) as f64 && w >= 0.0 && w <= (cam.width() - 1) as f64;
    (d, h, w, inside)
}

fn center(spec: &GridSpec, i: usize, j: usize, k: usize) -> [f64; 3] {
    let v = spec.voxel_size;
    [
        spec.x_min + (i as f64 + 0.5) * v,
        spec.y_min + (j as f64 + 0.5) * v,
        spec.z_min + (k as f64 + 0.5) * v,
    ]
}

/// Explicit 8-corner weighted sum with zero padding.
pub fn oracle_trilinear(values: &Tensor<f64>, d: f64, h: f64, w: f64) -> f64 {
    let s = values.shape();
    let (d0, h0, w0) = (d.floor(), h.floor(), w.floor());
    let mut total = 0.0;
    for (dd, wd) in [(d0, 1.0 - (d - d0)), (d0 + 1.0, d - d0)] {
        for (hh, wh) in [(h0, 1.0 - (h - h0)), (h0 + 1.0, h - h0)] {
            for (ww, www) in [(w0, 1.0 - (w - w0)), (w0 + 1.0, w - w0)] {
                let inside = dd >= 0.0
                    && hh >= 0.0
                    && ww >= 0.0
                    && (dd as usize) < s[0]
                    && (hh as usize) < s[1]
                    && (ww as usize) < s[2];
                if inside {
                    total += wd * wh * www * values.at(&[dd as usize, hh as usize, ww as usize]);
                }
            }
        }
    }
    total
}

/// Depth discretization as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct Bins {
    pub d_min: f64,
    pub bin_size: f64,
    pub count: usize,
}

/// Per-voxel, per-camera projection and trilinear read, summed over cameras in order.
pub fn oracle_gss(dists: &[Tensor<f64>], bins: &[Bins], cams: &[CameraModel], spec: &GridSpec) -> Tensor<f64> {
    let mut out = Tensor::zeros(&[spec.nx, spec.ny, spec.nz]);
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            for k in 0..spec.nz {
                let p = center(spec, i, j, k);
                let mut acc = 0.0;
                for ((dist, b), cam) in dists.iter().zip(bins).zip(cams) {
                    let (d, h, w, inside) = oracle_project(cam, p);
                    if !inside {
                        continue;
                    }
                    let coord = (d - b.d_min) / b.bin_size - 0.5;
                    if coord < -0.5 || coord > b.count as f64 - 0.5 {
                        continue;
                    }
                    acc += oracle_trilinear(dist, coord, h, w);
                }
                out.set(&[i, j, k], acc);
            }
        }
    }
    out
}

/// `C×A×K · C×K×B`, optionally divided by `K`.
pub fn oracle_matmul(lhs: &Tensor<f64>, rhs: &Tensor<f64>, mean: bool) -> Tensor<f64> {
    let (c, a, k) = (lhs.shape()[0], lhs.shape()[1], lhs.shape()[2]);
    let b = rhs.shape()[2];
    assert_eq!(rhs.shape(), &[c, k, b], "inner dimensions differ");
    Tensor::from_fn(&[c, a, b], |idx| {
        let mut s = 0.0;
        for kk in 0..k {
            s += lhs.at(&[idx[0], idx[1], kk]) * rhs.at(&[idx[0], kk, idx[2]]);
        }
        if mean {
            s / k as f64
        } else {
            s
        }
    })
}

/// Zero-padded same-size cross-correlation plus bias.
pub fn oracle_conv2d(input: &Tensor<f64>, weights: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (c_in, ha, wb) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (weights.shape()[0], weights.shape()[2]);
    assert_eq!(weights.shape()[1], c_in, "channel mismatch");
    let pad = (k / 2) as isize;
    Tensor::from_fn(&[c_out, ha, wb], |idx| {
        let mut s = bias.at(&[idx[0]]);
        for ci in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let y = idx[1] as isize + u as isize - pad;
                    let x = idx[2] as isize + v as isize - pad;
                    if y >= 0 && x >= 0 && (y as usize) < ha && (x as usize) < wb {
                        s += weights.at(&[idx[0], ci, u, v]) * input.at(&[ci, y as usize, x as usize]);
                    }
                }
            }
        }
        s
    })
}

/// A conv site as a list of `(weights, bias)` layers applied in order.
pub type Layers = Vec<(Tensor<f64>, Tensor<f64>)>;

pub fn oracle_stack(input: &Tensor<f64>, layers: &Layers) -> Tensor<f64> {
    layers
        .iter()
        .fold(input.clone(), |x, (w, b)| oracle_conv2d(&x, w, b))
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |i| a.at(i) + b.at(i))
}

/// Every intermediate of the interaction, each computed with its own loop.
pub struct LtiOracle {
    pub m_bev: Tensor<f64>,
    pub m_fv: Tensor<f64>,
    pub m_sv: Tensor<f64>,
    pub m_s: Tensor<f64>,
    pub e_s: Tensor<f64>,
}

/// `bev: C×X×Y`, `fv: C×Y×Z`, `sv: C×X×Z`; conv sites in the order bev, fv, sv, fuse.
pub fn oracle_lti(bev: &Tensor<f64>, fv: &Tensor<f64>, sv: &Tensor<f64>, convs: [&Layers; 4], mean: bool) -> LtiOracle {
    let (c, nx, ny) = (bev.shape()[0], bev.shape()[1], bev.shape()[2]);
    let nz = fv.shape()[2];
    let scale = |s: f64, n: usize| if mean { s / n as f64 } else { s };
    // BEV-shaped: shares Z
    let m_bev = Tensor::from_fn(&[c, nx, ny], |i| {
        let (ch, x, y) = (i[0], i[1], i[2]);
        scale((0..nz).map(|z| sv.at(&[ch, x, z]) * fv.at(&[ch, y, z])).sum(), nz)
    });
    // FV-shaped: shares X
    let m_fv = Tensor::from_fn(&[c, ny, nz], |i| {
        let (ch, y, z) = (i[0], i[1], i[2]);
        scale((0..nx).map(|x| bev.at(&[ch, x, y]) * sv.at(&[ch, x, z])).sum(), nx)
    });
    // SV-shaped: shares Y
    let m_sv = Tensor::from_fn(&[c, nx, nz], |i| {
        let (ch, x, z) = (i[0], i[1], i[2]);
        scale((0..ny).map(|y| bev.at(&[ch, x, y]) * fv.at(&[ch, y, z])).sum(), ny)
    });
    let i_bev = oracle_stack(&add(bev, &m_bev), convs[0]);
    let i_fv = oracle_stack(&add(fv, &m_fv), convs[1]);
    let i_sv = oracle_stack(&add(sv, &m_sv), convs[2]);
    let m_s = Tensor::from_fn(&[c, nx, ny], |i| {
        let (ch, x, y) = (i[0], i[1], i[2]);
        scale((0..nz).map(|z| i_sv.at(&[ch, x, z]) * i_fv.at(&[ch, y, z])).sum(), nz)
    });
    let e_s = oracle_stack(&add(&i_bev, &m_s), convs[3]);
    LtiOracle {
        m_bev,
        m_fv,
        m_sv,
        m_s,
        e_s,
    }
}

/// Central differences `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every element.
pub fn finite_diff(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for n in 0..x.len() {
        let orig = probe.data()[n];
        probe.data_mut()[n] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[n] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[n] = orig;
        grad.data_mut()[n] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn free_of(labels: &LabeledOccupancy) -> u8 {
    (labels.classes() - 1) as u8
}

fn camera_center(cam: &CameraModel) -> [f64; 3] {
    // c = −Rᵀ t
    let r = cam.rotation();
    let t = cam.translation();
    let mut c = [0.0; 3];
    for a in 0..3 {
        c[a] = -(r[(0, a)] * t[0] + r[(1, a)] * t[1] + r[(2, a)] * t[2]);
    }
    c
}

/// Length of the part of segment `from → to` inside an axis-aligned box.
pub fn segment_box_overlap(from: [f64; 3], to: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let mut len2 = 0.0;
    for a in 0..3 {
        let d = to[a] - from[a];
        len2 += d * d;
        if d == 0.0 {
            if from[a] < lo[a] || from[a] > hi[a] {
                return 0.0;
            }
        } else {
            let (mut ta, mut tb) = ((lo[a] - from[a]) / d, (hi[a] - from[a]) / d);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if t1 > t0 {
        (t1 - t0) * len2.sqrt()
    } else {
        0.0
    }
}

/// Longest piece of the segment from `cam`'s center to voxel `target`'s
/// center that lies inside any other occupied voxel, or `None` when the
/// voxel is outside the camera's frustum.
pub fn max_blocking_overlap(labels: &LabeledOccupancy, spec: &GridSpec, cam: &CameraModel, target: [usize; 3]) -> Option<f64> {
    let free = free_of(labels);
    let v = spec.voxel_size;
    let p = center(spec, target[0], target[1], target[2]);
    if !oracle_project(cam, p).3 {
        return None;
    }
    let o = camera_center(cam);
    let [nx, ny, nz] = labels.dims();
    let mut worst = 0.0f64;
    for a in 0..nx {
        for b in 0..ny {
            for c in 0..nz {
                if [a, b, c] == target || labels.get(a, b, c) == free {
                    continue;
                }
                let lo = [spec.x_min + a as f64 * v, spec.y_min + b as f64 * v, spec.z_min + c as f64 * v];
                let hi = [lo[0] + v, lo[1] + v, lo[2] + v];
                worst = worst.max(segment_box_overlap(o, p, lo, hi));
            }
        }
    }
    Some(worst)
}

/// Visibility by testing the segment against every occupied voxel's box.
pub fn exact_visibility(labels: &LabeledOccupancy, spec: &GridSpec, cams: &[CameraModel], min_crossing: f64) -> Vec<bool> {
    let free = free_of(labels);
    let v = spec.voxel_size;
    let [nx, ny, nz] = labels.dims();
    let mut occupied = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if labels.get(i, j, k) != free {
                    occupied.push([i, j, k]);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = center(spec, i, j, k);
                let seen = cams.iter().any(|cam| {
                    if !oracle_project(cam, p).3 {
                        return false;
                    }
                    let o = camera_center(cam);
                    !occupied.iter().any(|&[a, b, c]| {
                        if [a, b, c] == [i, j, k] {
                            return false;
                        }
                        let lo = [
                            spec.x_min + a as f64 * v,
                            spec.y_min + b as f64 * v,
                            spec.z_min + c as f64 * v,
                        ];
                        let hi = [lo[0] + v, lo[1] + v, lo[2] + v];
                        segment_box_overlap(o, p, lo, hi) > min_crossing
                    })
                });
                out.push(seen);
            }
        }
    }
    out
}

/// Visibility by stepping along each segment at `step` meters and looking
/// up the voxel under every sample point.
pub fn ray_step_visibility(labels: &LabeledOccupancy, spec: &GridSpec, cams: &[CameraModel], step: f64) -> Vec<bool> {
    let free = free_of(labels);
    let v = spec.voxel_size;
    let [nx, ny, nz] = labels.dims();
    let lookup = |q: [f64; 3]| -> Option<[usize; 3]> {
        let f = [
            ((q[0] - spec.x_min) / v).floor(),
            ((q[1] - spec.y_min) / v).floor(),
            ((q[2] - spec.z_min) / v).floor(),
        ];
        let inside = f[0] >= 0.0 && f[1] >= 0.0 && f[2] >= 0.0 && f[0] < nx as f64 && f[1] < ny as f64 && f[2] < nz as f64;
        inside.then(|| [f[0] as usize, f[1] as usize, f[2] as usize])
    };
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = center(spec, i, j, k);
                let seen = cams.iter().any(|cam| {
                    if !oracle_project(cam, p).3 {
                        return false;
                    }
                    let o = camera_center(cam);
                    let len = ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2) + (p[2] - o[2]).powi(2)).sqrt();
                    let n = (len / step).ceil() as usize;
                    (1..n).all(|s| {
                        let t = s as f64 / n as f64;
                        let q = [o[0] + t * (p[0] - o[0]), o[1] + t * (p[1] - o[1]), o[2] + t * (p[2] - o[2])];
                        match lookup(q) {
                            Some(cell) if cell != [i, j, k] => labels.get(cell[0], cell[1], cell[2]) == free,
                            _ => true,
                        }
                    })
                });
                out.push(seen);
            }
        }
    }
    out
}
