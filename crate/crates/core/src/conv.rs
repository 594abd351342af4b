//! Stride-1, zero same-padded 2D cross-correlation lowered onto GEMM.
//!
//! The input `C_in×A×B` is unfolded into a `(C_in·k·k)×(A·B)` column matrix;
//! column blocks have a fixed width, so results never depend on the number
//! of worker threads.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

const COLUMN_BLOCK: usize = 4096;

/// Weights `C_out×C_in×k×k` and bias `C_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    weights: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] || !(s[2] == 1 || s[2] == 3) {
            return Err(shape_err(format!(
                "conv weights must be C_out×C_in×k×k with k in {{1,3}}, got {s:?}"
            )));
        }
        if bias.shape() != [s[0]] {
            return Err(shape_err(format!(
                "conv bias {:?} does not match {} output channels",
                bias.shape(),
                s[0]
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite {
                what: "conv parameter".into(),
                step: 0,
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[c_out, c_in, k, k]), Tensor::zeros(&[c_out]))
    }

    /// 1×1 identity over `c` channels.
    pub fn identity(c: usize) -> Self {
        let w = Tensor::from_fn(&[c, c, 1, 1], |i| if i[0] == i[1] { T::one() } else { T::zero() });
        Self {
            weights: w,
            bias: Tensor::zeros(&[c]),
        }
    }

    /// Uniform weights in `[−s, s]`, `s = (C_in·k²)^(−1/2)`, zero bias.
    pub fn init_uniform(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let s = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self::new(
            Tensor::random_uniform(&[c_out, c_in, k, k], -s, s, rng),
            Tensor::zeros(&[c_out]),
        )
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }
}

fn plane_dims<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match input.shape() {
        &[c, a, b] => Ok((c, a, b)),
        s => Err(shape_err(format!("conv2d input must be C×A×B, got {s:?}"))),
    }
}

fn im2col<T: Scalar>(input: &[T], c_in: usize, a: usize, b: usize, k: usize) -> Vec<T> {
    let plane = a * b;
    let p = (k / 2) as isize;
    let mut cols = vec![T::zero(); c_in * k * k * plane];
    cols.par_chunks_mut(k * k * plane).enumerate().for_each(|(ci, block)| {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut block[(ky * k + kx) * plane..(ky * k + kx + 1) * plane];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let (b_lo, b_hi) = ((-dx).max(0) as usize, (b as isize - dx).min(b as isize) as usize);
                for y in 0..a {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= a as isize || b_lo >= b_hi {
                        continue;
                    }
                    let s0 = sy as usize * b;
                    let dst = &mut row[y * b + b_lo..y * b + b_hi];
                    let from = (s0 as isize + b_lo as isize + dx) as usize;
                    dst.copy_from_slice(&src[from..from + (b_hi - b_lo)]);
                }
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], c_in: usize, a: usize, b: usize, k: usize) -> Vec<T> {
    let plane = a * b;
    let p = (k / 2) as isize;
    let mut out = vec![T::zero(); c_in * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(ci, dst)| {
        let block = &cols[ci * k * k * plane..(ci + 1) * k * k * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &block[(ky * k + kx) * plane..(ky * k + kx + 1) * plane];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let (b_lo, b_hi) = ((-dx).max(0) as usize, (b as isize - dx).min(b as isize) as usize);
                for y in 0..a {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= a as isize || b_lo >= b_hi {
                        continue;
                    }
                    let from = (sy as usize * b) as isize + b_lo as isize + dx;
                    let target = &mut dst[from as usize..from as usize + (b_hi - b_lo)];
                    for (t, &g) in target.iter_mut().zip(&row[y * b + b_lo..y * b + b_hi]) {
                        *t = *t + g;
                    }
                }
            }
        }
    });
    out
}

/// `out[m×n] = lhs[m×kk] · rhs[kk×n]` (row-major), computed in fixed-width
/// column blocks.
pub(crate) fn gemm_blocked<T: Scalar>(m: usize, kk: usize, n: usize, lhs: &[T], rhs: &[T]) -> Vec<T> {
    let blocks: Vec<(usize, Vec<T>)> = (0..n)
        .step_by(COLUMN_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|j0| {
            let nb = COLUMN_BLOCK.min(n - j0);
            let mut tile = vec![T::zero(); m * nb];
            T::gemm_raw(
                m,
                kk,
                nb,
                lhs,
                kk as isize,
                1,
                &rhs[j0..],
                n as isize,
                1,
                T::zero(),
                &mut tile,
                nb as isize,
                1,
            );
            (j0, tile)
        })
        .collect();
    let mut out = vec![T::zero(); m * n];
    for (j0, tile) in blocks {
        let nb = tile.len() / m.max(1);
        for r in 0..m {
            out[r * n + j0..r * n + j0 + nb].copy_from_slice(&tile[r * nb..(r + 1) * nb]);
        }
    }
    out
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let (c_in, a, b) = plane_dims(input)?;
    if c_in != params.c_in() {
        return Err(shape_err(format!(
            "conv2d: input has {c_in} channels, weights expect {}",
            params.c_in()
        )));
    }
    let k = params.kernel();
    let plane = a * b;
    let rows = c_in * k * k;
    let cols;
    let rhs = if k == 1 {
        input.data()
    } else {
        cols = im2col(input.data(), c_in, a, b, k);
        &cols[..]
    };
    let mut out = gemm_blocked(params.c_out(), rows, plane, params.weights.data(), rhs);
    for (co, chunk) in out.chunks_mut(plane.max(1)).enumerate() {
        let bias = params.bias.data()[co];
        for v in chunk {
            *v = *v + bias;
        }
    }
    Tensor::from_vec(&[params.c_out(), a, b], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2dGrads<T> {
    pub fn into_params(self) -> Conv2dParams<T> {
        Conv2dParams {
            weights: self.weights,
            bias: self.bias,
        }
    }
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
    upstream: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (c_in, a, b) = plane_dims(input)?;
    if c_in != params.c_in() || upstream.shape() != [params.c_out(), a, b] {
        return Err(shape_err(format!(
            "conv2d_backward: input {:?}, weights {:?}, upstream {:?}",
            input.shape(),
            params.weights.shape(),
            upstream.shape()
        )));
    }
    let k = params.kernel();
    let plane = a * b;
    let rows = c_in * k * k;
    let c_out = params.c_out();
    let up = upstream.data();

    let bias: Vec<T> = up
        .chunks(plane.max(1))
        .map(|c| c.iter().fold(T::zero(), |acc, &v| acc + v))
        .collect();

    let cols;
    let col_view = if k == 1 {
        input.data()
    } else {
        cols = im2col(input.data(), c_in, a, b, k);
        &cols[..]
    };
    // dW = up · colsᵀ
    let mut grad_w = vec![T::zero(); c_out * rows];
    T::gemm_raw(
        c_out,
        plane,
        rows,
        up,
        plane as isize,
        1,
        col_view,
        1,
        plane as isize,
        T::zero(),
        &mut grad_w,
        rows as isize,
        1,
    );
    // dcols = Wᵀ · up
    let w = params.weights.data();
    let wt: Vec<T> = (0..rows * c_out).map(|i| w[(i % c_out) * rows + i / c_out]).collect();
    let grad_cols = gemm_blocked(rows, c_out, plane, &wt, up);
    let grad_in = if k == 1 {
        grad_cols
    } else {
        col2im(&grad_cols, c_in, a, b, k)
    };

    Ok(Conv2dGrads {
        input: Tensor::from_vec(&[c_in, a, b], grad_in)?,
        weights: Tensor::from_vec(params.weights.shape(), grad_w)?,
        bias: Tensor::from_vec(&[c_out], bias)?,
    })
}

/// Plain convolutions applied in sequence, without activations between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<T> {
    layers: Vec<Conv2dParams<T>>,
}

impl<T: Scalar> From<Conv2dParams<T>> for ConvStack<T> {
    fn from(p: Conv2dParams<T>) -> Self {
        ConvStack { layers: vec![p] }
    }
}

impl<T: Scalar> ConvStack<T> {
    pub fn new(layers: Vec<Conv2dParams<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("conv stack needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].c_out() != pair[1].c_in() {
                return Err(shape_err(format!(
                    "conv stack: layer emits {} channels, next expects {}",
                    pair[0].c_out(),
                    pair[1].c_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `layers` convolutions, the first mapping `c_in → c_out`, the rest `c_out → c_out`.
    pub fn init_uniform(c_in: usize, c_out: usize, k: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..layers.max(1))
            .map(|i| Conv2dParams::init_uniform(if i == 0 { c_in } else { c_out }, c_out, k, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, layers: usize) -> Result<Self> {
        let layers = (0..layers.max(1))
            .map(|i| Conv2dParams::zeros(if i == 0 { c_in } else { c_out }, c_out, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Conv2dParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv2dParams<T>] {
        &mut self.layers
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].c_in()
    }

    pub fn c_out(&self) -> usize {
        self.layers[self.layers.len() - 1].c_out()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = conv2d(input, &self.layers[0])?;
        for layer in &self.layers[1..] {
            x = conv2d(&x, layer)?;
        }
        Ok(x)
    }

    /// Forward pass that also returns the input of every layer.
    pub fn forward_cached(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let y = conv2d(&x, layer)?;
            inputs.push(x);
            x = y;
        }
        Ok((x, inputs))
    }

    /// Returns the input gradient and a stack-shaped parameter gradient.
    pub fn backward(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<(Tensor<T>, ConvStack<T>)> {
        if inputs.len() != self.layers.len() {
            return Err(shape_err("conv stack backward: cache does not match layer count"));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (layer, x) in self.layers.iter().zip(inputs).rev() {
            let lg = conv2d_backward(x, layer, &g)?;
            g = lg.input.clone();
            grads.push(lg.into_params());
        }
        grads.reverse();
        Ok((g, ConvStack { layers: grads }))
    }
}
