//! The full learnable stack: TPV extraction, interaction and the occupancy head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{Conv2dParams, ConvStack};
use crate::error::{Error, Result};
use crate::head::{fuse, predict_backward, predict_cached, HeadCache, OccupancyHead, Parameters};
use crate::tensor::{Scalar, Tensor};
use crate::tpv::{
    extract_tpv_backward, extract_tpv_cached, lti_backward, lti_forward, ExtractCache, ExtractConvs, LtiConvs,
    LtiTrace, TpvEmbeddings,
};

/// Kernel size and depth of one conv site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSite {
    pub kernel: usize,
    pub layers: usize,
}

impl ConvSite {
    pub const fn new(kernel: usize, layers: usize) -> Self {
        Self { kernel, layers }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.kernel == 1 || self.kernel == 3) || self.layers == 0 || self.layers > 3 {
            return Err(Error::Config(format!(
                "conv site {name}: kernel must be 1 or 3 and layers in 1..=3, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for ConvSite {
    fn default() -> Self {
        Self::new(3, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvSites {
    pub extract_bev: ConvSite,
    pub extract_fv: ConvSite,
    pub extract_sv: ConvSite,
    pub lti_bev: ConvSite,
    pub lti_fv: ConvSite,
    pub lti_sv: ConvSite,
    pub lti_fuse: ConvSite,
    /// BEV layers before the classification conv (may be empty).
    pub bev_layers: usize,
    pub bev_kernel: usize,
    pub head_kernel: usize,
}

impl Default for ConvSites {
    fn default() -> Self {
        let s = ConvSite::default();
        Self {
            extract_bev: s,
            extract_fv: s,
            extract_sv: s,
            lti_bev: s,
            lti_fv: s,
            lti_sv: s,
            lti_fuse: s,
            bev_layers: 1,
            bev_kernel: 3,
            head_kernel: 1,
        }
    }
}

impl ConvSites {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("extract_bev", self.extract_bev),
            ("extract_fv", self.extract_fv),
            ("extract_sv", self.extract_sv),
            ("lti_bev", self.lti_bev),
            ("lti_fv", self.lti_fv),
            ("lti_sv", self.lti_sv),
            ("lti_fuse", self.lti_fuse),
        ] {
            s.validate(name)?;
        }
        if self.bev_layers > 3 {
            return Err(Error::Config(format!("at most 3 BEV layers, got {}", self.bev_layers)));
        }
        for (name, k) in [("bev_kernel", self.bev_kernel), ("head_kernel", self.head_kernel)] {
            if k != 1 && k != 3 {
                return Err(Error::Config(format!("{name} must be 1 or 3, got {k}")));
            }
        }
        Ok(())
    }
}

/// Shape-determining hyperparameters of [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub dims: [usize; 3],
    pub channels: usize,
    pub classes: usize,
    pub sites: ConvSites,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub extract: ExtractConvs<T>,
    pub lti: LtiConvs<T>,
    pub head: OccupancyHead<T>,
}

pub struct ModelTrace<T> {
    extract: ExtractCache<T>,
    emb: TpvEmbeddings<T>,
    lti: LtiTrace<T>,
    head: HeadCache<T>,
}

impl<T> ModelTrace<T> {
    pub fn embeddings(&self) -> &TpvEmbeddings<T> {
        &self.emb
    }

    pub fn interaction(&self) -> &LtiTrace<T> {
        &self.lti
    }
}

enum Init<'a, R> {
    Zeros,
    Uniform(&'a mut R),
}

impl<T: Scalar> Model<T> {
    fn build<R: Rng>(shape: &ModelShape, mut init: Init<'_, R>) -> Result<Self> {
        let ModelShape {
            dims: [_, _, nz],
            channels: c,
            classes,
            sites,
        } = *shape;
        let [nx, ny, _] = shape.dims;
        sites.validate()?;
        if c == 0 || classes < 2 || nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Config(format!("invalid model shape {shape:?}")));
        }
        let mut stack = |c_in: usize, c_out: usize, site: ConvSite| match &mut init {
            Init::Zeros => ConvStack::zeros(c_in, c_out, site.kernel, site.layers),
            Init::Uniform(rng) => ConvStack::init_uniform(c_in, c_out, site.kernel, site.layers, *rng),
        };
        let extract = ExtractConvs {
            bev: stack(nz, c, sites.extract_bev)?,
            fv: stack(nx, c, sites.extract_fv)?,
            sv: stack(ny, c, sites.extract_sv)?,
        };
        let lti = LtiConvs {
            bev: stack(c, c, sites.lti_bev)?,
            fv: stack(c, c, sites.lti_fv)?,
            sv: stack(c, c, sites.lti_sv)?,
            fuse: stack(c, c, sites.lti_fuse)?,
        };
        let bev = if sites.bev_layers == 0 {
            Vec::new()
        } else {
            stack(c, c, ConvSite::new(sites.bev_kernel, sites.bev_layers))?.layers().to_vec()
        };
        let head = stack(c, nz * classes, ConvSite::new(sites.head_kernel, 1))?.layers()[0].clone();
        Ok(Self {
            extract,
            lti,
            head: OccupancyHead { bev, head },
        })
    }

    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        Self::build::<rand::rngs::mock::StepRng>(shape, Init::Zeros)
    }

    pub fn init_uniform(shape: &ModelShape, rng: &mut impl Rng) -> Result<Self> {
        Self::build(shape, Init::Uniform(rng))
    }

    /// Parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U> {
            extract: ExtractConvs {
                bev: cast_stack(&self.extract.bev),
                fv: cast_stack(&self.extract.fv),
                sv: cast_stack(&self.extract.sv),
            },
            lti: LtiConvs {
                bev: cast_stack(&self.lti.bev),
                fv: cast_stack(&self.lti.fv),
                sv: cast_stack(&self.lti.sv),
                fuse: cast_stack(&self.lti.fuse),
            },
            head: OccupancyHead {
                bev: self.head.bev.iter().map(cast_conv).collect(),
                head: cast_conv(&self.head.head),
            },
        };
        // keep the parameter order contract explicit
        debug_assert_eq!(out.tensors_mut().len(), self.tensors().len());
        out
    }

    pub fn forward(&self, occ: &Tensor<T>, f_bev: &Tensor<T>, classes: usize, mean: bool) -> Result<Tensor<T>> {
        Ok(self.forward_cached(occ, f_bev, classes, mean)?.0)
    }

    /// `O_SC` (`X×Y×Z`) and BEV features (`C×X×Y`) to logits (`X×Y×Z×L`).
    pub fn forward_cached(
        &self,
        occ: &Tensor<T>,
        f_bev: &Tensor<T>,
        classes: usize,
        mean: bool,
    ) -> Result<(Tensor<T>, ModelTrace<T>)> {
        let (emb, extract) = extract_tpv_cached(occ, &self.extract)?;
        let lti = lti_forward(&emb, &self.lti, mean)?;
        let fused = fuse(f_bev, &lti.e_s)?;
        let (logits, head) = predict_cached(&fused, &self.head, classes)?;
        Ok((
            logits,
            ModelTrace {
                extract,
                emb,
                lti,
                head,
            },
        ))
    }

    /// Gradients for every parameter and for the occupancy input.
    pub fn backward(&self, trace: &ModelTrace<T>, d_logits: &Tensor<T>, mean: bool) -> Result<(Tensor<T>, Self)> {
        let (d_fused, g_head) = predict_backward(&self.head, &trace.head, d_logits)?;
        let (d_emb, g_lti) = lti_backward(&trace.emb, &self.lti, &trace.lti, &d_fused, mean)?;
        let (d_occ, g_extract) = extract_tpv_backward(&self.extract, &trace.extract, &d_emb)?;
        Ok((
            d_occ,
            Self {
                extract: g_extract,
                lti: g_lti,
                head: g_head,
            },
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn cast_conv<T: Scalar, U: Scalar>(p: &Conv2dParams<T>) -> Conv2dParams<U> {
    Conv2dParams::new(p.weights().cast(), p.bias().cast()).expect("shapes already validated")
}

fn cast_stack<T: Scalar, U: Scalar>(s: &ConvStack<T>) -> ConvStack<U> {
    ConvStack::new(s.layers().iter().map(cast_conv).collect()).expect("shapes already validated")
}

impl<T: Scalar> Parameters<T> for ExtractConvs<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        [&self.bev, &self.fv, &self.sv].into_iter().flat_map(|s| s.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        [&mut self.bev, &mut self.fv, &mut self.sv]
            .into_iter()
            .flat_map(|s| s.tensors_mut())
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for LtiConvs<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        [&self.bev, &self.fv, &self.sv, &self.fuse]
            .into_iter()
            .flat_map(|s| s.tensors())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        [&mut self.bev, &mut self.fv, &mut self.sv, &mut self.fuse]
            .into_iter()
            .flat_map(|s| s.tensors_mut())
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.extract.tensors();
        out.extend(self.lti.tensors());
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.extract.tensors_mut();
        out.extend(self.lti.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }
}
