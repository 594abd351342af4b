//! Latency microbenchmarks: the TPV path against a dense 3D-convolution stack.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::geometry::GridSpec;
use crate::pipeline::{PipelineConfig, Precision};
use crate::sampling::{global_spatial_sampling, DepthActivation, DepthDistribution};
use crate::tensor::{Scalar, Tensor};
use crate::tpv::{extract_tpv, lti_interact, ExtractConvs, LtiConvs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Lti,
    Conv3dRef,
    Gss,
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lti" => Ok(BenchMode::Lti),
            "conv3d_ref" => Ok(BenchMode::Conv3dRef),
            "gss" => Ok(BenchMode::Gss),
            other => Err(Error::Config(format!("unknown bench mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub dims: [usize; 3],
    pub channels: usize,
    pub repeats: usize,
    /// Timed runs in milliseconds; the warm-up run is not included.
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    /// SHA-256 of the output payload of the first timed run.
    pub checksum: String,
    pub checksum_stable: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn checksum<T: Scalar>(t: &Tensor<T>) -> String {
    let digest = Sha256::digest(t.payload_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weights `C_out × C_in × 3 × 3 × 3` for one dense 3D convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn init_uniform(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / ((c_in * 27) as f64).sqrt();
        Self {
            weights: Tensor::random_uniform(&[c_out, c_in, 3, 3, 3], -s, s, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// One zero-padded 3×3×3 convolution over `C×X×Y×Z`, as an im2col GEMM per X slice.
pub fn conv3d<T: Scalar>(input: &Tensor<T>, layer: &Conv3dLayer<T>) -> Result<Tensor<T>> {
    let &[c_in, nx, ny, nz] = input.shape() else {
        return Err(shape_err(format!("conv3d input must be C×X×Y×Z, got {:?}", input.shape())));
    };
    let &[c_out, wc, 3, 3, 3] = layer.weights.shape() else {
        return Err(shape_err(format!("conv3d weights {:?}", layer.weights.shape())));
    };
    if wc != c_in {
        return Err(shape_err(format!("conv3d expects {wc} input channels, got {c_in}")));
    }
    let plane = ny * nz;
    let k = c_in * 27;
    let src = input.data();
    let w = layer.weights.data();
    let b = layer.bias.data();
    let slices: Vec<Vec<T>> = (0..nx)
        .into_par_iter()
        .map(|x| {
            let mut cols = vec![T::zero(); k * plane];
            for c in 0..c_in {
                for dx in 0..3 {
                    let Some(sx) = (x + dx).checked_sub(1).filter(|&s| s < nx) else {
                        continue;
                    };
                    for dy in 0..3 {
                        for dz in 0..3 {
                            let row = ((c * 3 + dx) * 3 + dy) * 3 + dz;
                            let dst = &mut cols[row * plane..(row + 1) * plane];
                            for y in 0..ny {
                                let Some(sy) = (y + dy).checked_sub(1).filter(|&s| s < ny) else {
                                    continue;
                                };
                                let base = ((c * nx + sx) * ny + sy) * nz;
                                for z in 0..nz {
                                    if let Some(sz) = (z + dz).checked_sub(1).filter(|&s| s < nz) {
                                        dst[y * nz + z] = src[base + sz];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut out = vec![T::zero(); c_out * plane];
            for (o, row) in out.chunks_mut(plane).enumerate() {
                row.fill(b[o]);
            }
            T::gemm_raw(
                c_out,
                k,
                plane,
                w,
                k as isize,
                1,
                &cols,
                plane as isize,
                1,
                T::one(),
                &mut out,
                plane as isize,
                1,
            );
            out
        })
        .collect();
    let mut out = vec![T::zero(); c_out * nx * plane];
    for (x, slice) in slices.iter().enumerate() {
        for o in 0..c_out {
            let dst = (o * nx + x) * plane;
            out[dst..dst + plane].copy_from_slice(&slice[o * plane..(o + 1) * plane]);
        }
    }
    Tensor::from_vec(&[c_out, nx, ny, nz], out)
}

fn time_runs<T: Scalar>(repeats: usize, mut run: impl FnMut() -> Result<Tensor<T>>) -> Result<(Vec<f64>, Vec<String>)> {
    run()?;
    let mut times = Vec::with_capacity(repeats);
    let mut sums = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        sums.push(checksum(&out));
    }
    Ok((times, sums))
}

/// Times one stage at the configured grid and channel count. One warm-up
/// run precedes `repeats` timed runs.
pub fn cmd_bench(cfg: &PipelineConfig, mode: BenchMode, repeats: usize) -> Result<BenchResult> {
    cfg.validate()?;
    if repeats < 3 {
        return Err(Error::Config(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    match cfg.precision {
        Precision::F32 => bench_impl::<f32>(cfg, mode, repeats),
        Precision::F64 => bench_impl::<f64>(cfg, mode, repeats),
    }
}

fn bench_impl<T: Scalar>(cfg: &PipelineConfig, mode: BenchMode, repeats: usize) -> Result<BenchResult> {
    let grid: GridSpec = cfg.grid;
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (times, sums) = match mode {
        BenchMode::Lti => {
            let s = cfg.convs;
            let extract = ExtractConvs {
                bev: crate::conv::ConvStack::init_uniform(nz, c, s.extract_bev.kernel, s.extract_bev.layers, &mut rng)?,
                fv: crate::conv::ConvStack::init_uniform(nx, c, s.extract_fv.kernel, s.extract_fv.layers, &mut rng)?,
                sv: crate::conv::ConvStack::init_uniform(ny, c, s.extract_sv.kernel, s.extract_sv.layers, &mut rng)?,
            };
            let lti = LtiConvs {
                bev: crate::conv::ConvStack::init_uniform(c, c, s.lti_bev.kernel, s.lti_bev.layers, &mut rng)?,
                fv: crate::conv::ConvStack::init_uniform(c, c, s.lti_fv.kernel, s.lti_fv.layers, &mut rng)?,
                sv: crate::conv::ConvStack::init_uniform(c, c, s.lti_sv.kernel, s.lti_sv.layers, &mut rng)?,
                fuse: crate::conv::ConvStack::init_uniform(c, c, s.lti_fuse.kernel, s.lti_fuse.layers, &mut rng)?,
            };
            let occ = Tensor::<T>::random_uniform(&dims, 0.0, 1.0, &mut rng);
            time_runs(repeats, || lti_interact(&extract_tpv(&occ, &extract)?, &lti, cfg.mean))?
        }
        BenchMode::Conv3dRef => {
            let layers: Vec<Conv3dLayer<T>> = (0..3).map(|_| Conv3dLayer::init_uniform(c, c, &mut rng)).collect();
            let input = Tensor::<T>::random_uniform(&[c, nx, ny, nz], 0.0, 1.0, &mut rng);
            time_runs(repeats, || {
                let mut x = conv3d(&input, &layers[0])?;
                for l in &layers[1..] {
                    x = conv3d(&x, l)?;
                }
                Ok(x)
            })?
        }
        BenchMode::Gss => {
            let rig = cfg.camera_rig()?;
            let dists = rig
                .cameras
                .iter()
                .map(|cam| {
                    let logits = Tensor::<T>::random_uniform(
                        &[cfg.depth_bins.count, cam.height(), cam.width()],
                        -4.0,
                        4.0,
                        &mut rng,
                    );
                    DepthDistribution::from_logits(&logits, DepthActivation::Sigmoid, cfg.depth_bins)
                })
                .collect::<Result<Vec<_>>>()?;
            time_runs(repeats, || global_spatial_sampling(&dists, &rig.cameras, &grid, cfg.sampling))?
        }
    };
    Ok(BenchResult {
        mode,
        dims,
        channels: c,
        repeats,
        median_ms: median(&times),
        times_ms: times,
        checksum_stable: sums.iter().all(|s| *s == sums[0]),
        checksum: sums[0].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor<f64>, layer: &Conv3dLayer<f64>) -> Tensor<f64> {
        let s = input.shape().to_vec();
        let c_out = layer.weights.shape()[0];
        Tensor::from_fn(&[c_out, s[1], s[2], s[3]], |i| {
            let mut acc = layer.bias.at(&[i[0]]);
            for c in 0..s[0] {
                for d in 0..27 {
                    let off = [d / 9, (d / 3) % 3, d % 3];
                    let p: Vec<isize> = (0..3).map(|a| i[a + 1] as isize + off[a] as isize - 1).collect();
                    if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < s[a + 1]) {
                        acc += layer.weights.at(&[i[0], c, off[0], off[1], off[2]])
                            * input.at(&[c, p[0] as usize, p[1] as usize, p[2] as usize]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::random_uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut rng);
        let mut layer = Conv3dLayer::init_uniform(2, 3, &mut rng);
        layer.bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let fast = conv3d(&input, &layer).unwrap();
        assert!(fast.max_abs_diff(&naive(&input, &layer)).unwrap() < 1e-12);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_runs_every_mode() {
        let cfg = PipelineConfig {
            channels: 4,
            ..Default::default()
        };
        for mode in [BenchMode::Lti, BenchMode::Conv3dRef, BenchMode::Gss] {
            let r = cmd_bench(&cfg, mode, 3).unwrap();
            assert_eq!(r.times_ms.len(), 3);
            assert!(r.checksum_stable);
            assert_eq!(r.checksum.len(), 64);
        }
        assert!(cmd_bench(&cfg, BenchMode::Lti, 2).is_err());
    }
}
