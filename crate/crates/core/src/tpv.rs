//! Tri-perspective-view embeddings.
//!
//! Layouts (C = embedding channels):
//! - BEV `C×X×Y`, extracted with Z as the input channel axis
//! - FV  `C×Y×Z`, extracted with X as the input channel axis
//! - SV  `C×X×Z`, extracted with Y as the input channel axis
//!
//! Lightweight TPV Interaction combines pairs of views with a per-channel
//! matrix product over their shared axis:
//!
//! ```text
//! M_bev = SV[C,X,Z] ⊗ FVᵀ[C,Z,Y]     (shared Z)    I_bev = conv_bev(BEV + M_bev)
//! M_fv  = BEVᵀ[C,Y,X] ⊗ SV[C,X,Z]    (shared X)    I_fv  = conv_fv(FV + M_fv)
//! M_sv  = BEV[C,X,Y] ⊗ FV[C,Y,Z]     (shared Y)    I_sv  = conv_sv(SV + M_sv)
//! M_s   = I_sv[C,X,Z] ⊗ I_fvᵀ[C,Z,Y]               E_s   = conv_fuse(I_bev + M_s)
//! ```

use serde::{Deserialize, Serialize};

use crate::conv::ConvStack;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial axis of the occupancy grid that becomes the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialAxis {
    X,
    Y,
    Z,
}

impl SpatialAxis {
    fn permutation(self) -> [usize; 3] {
        match self {
            SpatialAxis::Z => [2, 0, 1],
            SpatialAxis::X => [0, 1, 2],
            SpatialAxis::Y => [1, 0, 2],
        }
    }

    fn inverse(self) -> [usize; 3] {
        match self {
            SpatialAxis::Z => [1, 2, 0],
            SpatialAxis::X => [0, 1, 2],
            SpatialAxis::Y => [1, 0, 2],
        }
    }
}

fn check_grid<T: Scalar>(occ: &Tensor<T>) -> Result<()> {
    if occ.ndim() != 3 {
        return Err(shape_err(format!("occupancy must be X×Y×Z, got {:?}", occ.shape())));
    }
    Ok(())
}

/// `Z → Z×X×Y`, `X → X×Y×Z`, `Y → Y×X×Z`.
pub fn spatial_to_channel<T: Scalar>(occ: &Tensor<T>, axis: SpatialAxis) -> Result<Tensor<T>> {
    check_grid(occ)?;
    occ.permute(&axis.permutation())
}

/// Inverse of [`spatial_to_channel`].
pub fn channel_to_spatial<T: Scalar>(t: &Tensor<T>, axis: SpatialAxis) -> Result<Tensor<T>> {
    check_grid(t)?;
    t.permute(&axis.inverse())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpvEmbeddings<T> {
    pub bev: Tensor<T>,
    pub fv: Tensor<T>,
    pub sv: Tensor<T>,
}

impl<T: Scalar> TpvEmbeddings<T> {
    pub fn zeros(c: usize, dims: [usize; 3]) -> Self {
        let [x, y, z] = dims;
        TpvEmbeddings {
            bev: Tensor::zeros(&[c, x, y]),
            fv: Tensor::zeros(&[c, y, z]),
            sv: Tensor::zeros(&[c, x, z]),
        }
    }

    /// Channel count and grid dims implied by a consistent triple.
    pub fn dims(&self) -> Result<(usize, [usize; 3])> {
        let (b, f, s) = (self.bev.shape(), self.fv.shape(), self.sv.shape());
        let consistent = b.len() == 3
            && f.len() == 3
            && s.len() == 3
            && b[0] == f[0]
            && b[0] == s[0]
            && b[1] == s[1]
            && b[2] == f[1]
            && f[2] == s[2];
        if !consistent {
            return Err(shape_err(format!(
                "inconsistent TPV embeddings: BEV {b:?}, FV {f:?}, SV {s:?}"
            )));
        }
        Ok((b[0], [b[1], b[2], f[2]]))
    }

    pub fn is_finite(&self) -> bool {
        self.bev.is_finite() && self.fv.is_finite() && self.sv.is_finite()
    }
}

/// The three extraction sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConvs<T> {
    pub bev: ConvStack<T>,
    pub fv: ConvStack<T>,
    pub sv: ConvStack<T>,
}

pub struct ExtractCache<T> {
    bev: Vec<Tensor<T>>,
    fv: Vec<Tensor<T>>,
    sv: Vec<Tensor<T>>,
}

fn check_extract<T: Scalar>(occ: &Tensor<T>, convs: &ExtractConvs<T>) -> Result<()> {
    check_grid(occ)?;
    let [x, y, z] = [occ.shape()[0], occ.shape()[1], occ.shape()[2]];
    if convs.bev.c_in() != z || convs.fv.c_in() != x || convs.sv.c_in() != y {
        return Err(shape_err(format!(
            "extraction convs expect ({}, {}, {}) input channels for BEV/FV/SV, grid is {x}×{y}×{z}",
            convs.bev.c_in(),
            convs.fv.c_in(),
            convs.sv.c_in()
        )));
    }
    let c = convs.bev.c_out();
    if convs.fv.c_out() != c || convs.sv.c_out() != c {
        return Err(shape_err("extraction convs disagree on output channels"));
    }
    Ok(())
}

pub fn extract_tpv<T: Scalar>(occ: &Tensor<T>, convs: &ExtractConvs<T>) -> Result<TpvEmbeddings<T>> {
    Ok(extract_tpv_cached(occ, convs)?.0)
}

pub fn extract_tpv_cached<T: Scalar>(
    occ: &Tensor<T>,
    convs: &ExtractConvs<T>,
) -> Result<(TpvEmbeddings<T>, ExtractCache<T>)> {
    check_extract(occ, convs)?;
    let (bev, cb) = convs.bev.forward_cached(&spatial_to_channel(occ, SpatialAxis::Z)?)?;
    let (fv, cf) = convs.fv.forward_cached(&spatial_to_channel(occ, SpatialAxis::X)?)?;
    let (sv, cs) = convs.sv.forward_cached(&spatial_to_channel(occ, SpatialAxis::Y)?)?;
    Ok((
        TpvEmbeddings { bev, fv, sv },
        ExtractCache {
            bev: cb,
            fv: cf,
            sv: cs,
        },
    ))
}

/// Gradient with respect to the occupancy grid and the three extraction stacks.
pub fn extract_tpv_backward<T: Scalar>(
    convs: &ExtractConvs<T>,
    cache: &ExtractCache<T>,
    upstream: &TpvEmbeddings<T>,
) -> Result<(Tensor<T>, ExtractConvs<T>)> {
    let (gb, pb) = convs.bev.backward(&cache.bev, &upstream.bev)?;
    let (gf, pf) = convs.fv.backward(&cache.fv, &upstream.fv)?;
    let (gs, ps) = convs.sv.backward(&cache.sv, &upstream.sv)?;
    let mut occ = channel_to_spatial(&gb, SpatialAxis::Z)?;
    occ.add_assign(&channel_to_spatial(&gf, SpatialAxis::X)?)?;
    occ.add_assign(&channel_to_spatial(&gs, SpatialAxis::Y)?)?;
    Ok((
        occ,
        ExtractConvs {
            bev: pb,
            fv: pf,
            sv: ps,
        },
    ))
}

fn matmul_dims<T: Scalar>(lhs: &Tensor<T>, rhs: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match (lhs.shape(), rhs.shape()) {
        (&[c, a, k], &[c2, k2, b]) if c == c2 && k == k2 => Ok((c, a, k, b)),
        (l, r) => Err(shape_err(format!("tpv_matmul: {l:?} ⊗ {r:?}"))),
    }
}

/// Per-channel matrix product `C×A×K ⊗ C×K×B → C×A×B`; with `mean_over_vanished`
/// the product is divided by the shared dimension `K`.
pub fn tpv_matmul<T: Scalar>(lhs: &Tensor<T>, rhs: &Tensor<T>, mean_over_vanished: bool) -> Result<Tensor<T>> {
    let (c, a, k, b) = matmul_dims(lhs, rhs)?;
    let (l, r) = (lhs.data(), rhs.data());
    let mut out = vec![T::zero(); c * a * b];
    for ch in 0..c {
        let lc = &l[ch * a * k..(ch + 1) * a * k];
        let rc = &r[ch * k * b..(ch + 1) * k * b];
        let oc = &mut out[ch * a * b..(ch + 1) * a * b];
        for i in 0..a {
            let orow = &mut oc[i * b..(i + 1) * b];
            for kk in 0..k {
                let lv = lc[i * k + kk];
                for (o, &rv) in orow.iter_mut().zip(&rc[kk * b..(kk + 1) * b]) {
                    *o = *o + lv * rv;
                }
            }
        }
    }
    if mean_over_vanished {
        let kt = T::of_usize(k);
        for v in &mut out {
            *v = *v / kt;
        }
    }
    Tensor::from_vec(&[c, a, b], out)
}

/// Gradients of [`tpv_matmul`] with respect to both operands.
pub fn tpv_matmul_backward<T: Scalar>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    upstream: &Tensor<T>,
    mean_over_vanished: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, a, k, b) = matmul_dims(lhs, rhs)?;
    if upstream.shape() != [c, a, b] {
        return Err(shape_err(format!(
            "tpv_matmul_backward: upstream {:?}, expected {:?}",
            upstream.shape(),
            [c, a, b]
        )));
    }
    let g = if mean_over_vanished {
        upstream.scale(T::one() / T::of_usize(k))
    } else {
        upstream.clone()
    };
    // dL = g · Rᵀ, dR = Lᵀ · g
    let dl = tpv_matmul(&g, &rhs.transpose_last()?, false)?;
    let dr = tpv_matmul(&lhs.transpose_last()?, &g, false)?;
    Ok((dl, dr))
}

/// The four interaction sites.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiConvs<T> {
    pub bev: ConvStack<T>,
    pub fv: ConvStack<T>,
    pub sv: ConvStack<T>,
    pub fuse: ConvStack<T>,
}

impl<T: Scalar> LtiConvs<T> {
    /// 1×1 identity convs on every site.
    pub fn identity(c: usize) -> Self {
        let id = || ConvStack::from(crate::conv::Conv2dParams::identity(c));
        LtiConvs {
            bev: id(),
            fv: id(),
            sv: id(),
            fuse: id(),
        }
    }
}

/// Every intermediate of one interaction pass.
#[derive(Debug, Clone)]
pub struct LtiTrace<T> {
    pub m_bev: Tensor<T>,
    pub m_fv: Tensor<T>,
    pub m_sv: Tensor<T>,
    pub i_bev: Tensor<T>,
    pub i_fv: Tensor<T>,
    pub i_sv: Tensor<T>,
    pub m_s: Tensor<T>,
    pub e_s: Tensor<T>,
    cache_bev: Vec<Tensor<T>>,
    cache_fv: Vec<Tensor<T>>,
    cache_sv: Vec<Tensor<T>>,
    cache_fuse: Vec<Tensor<T>>,
}

fn check_lti<T: Scalar>(emb: &TpvEmbeddings<T>, convs: &LtiConvs<T>) -> Result<usize> {
    let (c, _) = emb.dims()?;
    for (name, s) in [("bev", &convs.bev), ("fv", &convs.fv), ("sv", &convs.sv), ("fuse", &convs.fuse)] {
        if s.c_in() != c || s.c_out() != c {
            return Err(shape_err(format!(
                "lti_{name} maps {} → {} channels, embeddings have {c}",
                s.c_in(),
                s.c_out()
            )));
        }
    }
    Ok(c)
}

/// Fuses the three views into the `C×X×Y` spatial embedding.
pub fn lti_interact<T: Scalar>(emb: &TpvEmbeddings<T>, convs: &LtiConvs<T>, mean_over_vanished: bool) -> Result<Tensor<T>> {
    Ok(lti_forward(emb, convs, mean_over_vanished)?.e_s)
}

pub fn lti_forward<T: Scalar>(emb: &TpvEmbeddings<T>, convs: &LtiConvs<T>, mean: bool) -> Result<LtiTrace<T>> {
    check_lti(emb, convs)?;
    let fv_t = emb.fv.transpose_last()?;
    let bev_t = emb.bev.transpose_last()?;

    let m_bev = tpv_matmul(&emb.sv, &fv_t, mean)?;
    let m_fv = tpv_matmul(&bev_t, &emb.sv, mean)?;
    let m_sv = tpv_matmul(&emb.bev, &emb.fv, mean)?;

    let (i_bev, cache_bev) = convs.bev.forward_cached(&emb.bev.add(&m_bev)?)?;
    let (i_fv, cache_fv) = convs.fv.forward_cached(&emb.fv.add(&m_fv)?)?;
    let (i_sv, cache_sv) = convs.sv.forward_cached(&emb.sv.add(&m_sv)?)?;

    let m_s = tpv_matmul(&i_sv, &i_fv.transpose_last()?, mean)?;
    let (e_s, cache_fuse) = convs.fuse.forward_cached(&i_bev.add(&m_s)?)?;

    Ok(LtiTrace {
        m_bev,
        m_fv,
        m_sv,
        i_bev,
        i_fv,
        i_sv,
        m_s,
        e_s,
        cache_bev,
        cache_fv,
        cache_sv,
        cache_fuse,
    })
}

/// Gradients of [`lti_interact`] for the three embeddings and all four conv sites.
pub fn lti_backward<T: Scalar>(
    emb: &TpvEmbeddings<T>,
    convs: &LtiConvs<T>,
    trace: &LtiTrace<T>,
    upstream: &Tensor<T>,
    mean: bool,
) -> Result<(TpvEmbeddings<T>, LtiConvs<T>)> {
    check_lti(emb, convs)?;
    if upstream.shape() != trace.e_s.shape() {
        return Err(shape_err(format!(
            "lti_backward: upstream {:?}, output {:?}",
            upstream.shape(),
            trace.e_s.shape()
        )));
    }
    // E_s = fuse(I_bev + M_s)
    let (d_fuse_in, g_fuse) = convs.fuse.backward(&trace.cache_fuse, upstream)?;
    let (d_i_sv_a, d_i_fv_t) = tpv_matmul_backward(&trace.i_sv, &trace.i_fv.transpose_last()?, &d_fuse_in, mean)?;
    let d_i_bev = d_fuse_in;

    let (d_x_bev, g_bev) = convs.bev.backward(&trace.cache_bev, &d_i_bev)?;
    let (d_x_fv, g_fv) = convs.fv.backward(&trace.cache_fv, &d_i_fv_t.transpose_last()?)?;
    let (d_x_sv, g_sv) = convs.sv.backward(&trace.cache_sv, &d_i_sv_a)?;

    // residual paths
    let mut d_bev = d_x_bev.clone();
    let mut d_fv = d_x_fv.clone();
    let mut d_sv = d_x_sv.clone();

    // M_bev = SV ⊗ FVᵀ
    let (a, b_t) = tpv_matmul_backward(&emb.sv, &emb.fv.transpose_last()?, &d_x_bev, mean)?;
    d_sv.add_assign(&a)?;
    d_fv.add_assign(&b_t.transpose_last()?)?;
    // M_fv = BEVᵀ ⊗ SV
    let (a_t, b) = tpv_matmul_backward(&emb.bev.transpose_last()?, &emb.sv, &d_x_fv, mean)?;
    d_bev.add_assign(&a_t.transpose_last()?)?;
    d_sv.add_assign(&b)?;
    // M_sv = BEV ⊗ FV
    let (a, b) = tpv_matmul_backward(&emb.bev, &emb.fv, &d_x_sv, mean)?;
    d_bev.add_assign(&a)?;
    d_fv.add_assign(&b)?;

    Ok((
        TpvEmbeddings {
            bev: d_bev,
            fv: d_fv,
            sv: d_sv,
        },
        LtiConvs {
            bev: g_bev,
            fv: g_fv,
            sv: g_sv,
            fuse: g_fuse,
        },
    ))
}
