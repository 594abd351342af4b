//! BEV-CutMix and BEV-space flips, applied consistently to features, labels
//! and visibility.
//!
//! Center cuts are occlusion-safe for cameras mounted at the grid center:
//! every segment from the center to a voxel stays inside that voxel's
//! region, so a region copied from a donor keeps exactly the visibility it
//! had in the donor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabeledOccupancy, VisibilityMask};

/// Post-view-transform training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle<T> {
    /// `C×X×Y`.
    pub features: Tensor<T>,
    pub labels: LabeledOccupancy,
    pub mask: VisibilityMask,
}

impl<T: Scalar> SceneBundle<T> {
    pub fn new(features: Tensor<T>, labels: LabeledOccupancy, mask: VisibilityMask) -> Result<Self> {
        let [nx, ny, _] = labels.dims();
        if features.ndim() != 3 || features.shape()[1] != nx || features.shape()[2] != ny {
            return Err(shape_err(format!(
                "features {:?} do not match label grid {:?}",
                features.shape(),
                labels.dims()
            )));
        }
        if mask.dims() != labels.dims() {
            return Err(shape_err(format!(
                "mask {:?} does not match label grid {:?}",
                mask.dims(),
                labels.dims()
            )));
        }
        Ok(Self { features, labels, mask })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutMixConfig {
    pub cut_x: bool,
    pub cut_y: bool,
    /// Probability that a call mixes at all.
    pub mix_ratio: f64,
    pub seed: u64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self {
            cut_x: true,
            cut_y: false,
            mix_ratio: 1.0,
            seed: 0,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio {} outside [0, 1]", self.mix_ratio)));
        }
        Ok(())
    }
}

/// Where each output pillar came from.
///
/// Regions are indexed `rx·2 + ry`, where `rx = 1` iff `i ≥ cut_x` (and
/// likewise for `ry`); an absent cut puts every pillar in the low half.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub cut_x: Option<usize>,
    pub cut_y: Option<usize>,
    /// Donor sample per region, length 4.
    pub donors: [usize; 4],
}

impl Provenance {
    fn identity() -> Self {
        Self {
            cut_x: None,
            cut_y: None,
            donors: [0; 4],
        }
    }

    pub fn region(&self, i: usize, j: usize) -> usize {
        let rx = self.cut_x.is_some_and(|c| i >= c) as usize;
        let ry = self.cut_y.is_some_and(|c| j >= c) as usize;
        rx * 2 + ry
    }

    pub fn donor(&self, i: usize, j: usize) -> usize {
        self.donors[self.region(i, j)]
    }

    /// Regions actually present in the layout.
    pub fn region_count(&self) -> usize {
        (1 + self.cut_x.is_some() as usize) * (1 + self.cut_y.is_some() as usize)
    }
}

fn check_samples<T: Scalar>(samples: &[SceneBundle<T>]) -> Result<()> {
    let first = samples.first().ok_or_else(|| shape_err("cutmix needs at least one sample"))?;
    for (n, s) in samples.iter().enumerate().skip(1) {
        if s.dims() != first.dims()
            || s.features.shape() != first.features.shape()
            || s.labels.classes() != first.labels.classes()
        {
            return Err(shape_err(format!(
                "sample {n} has grid {:?} / features {:?}, sample 0 has {:?} / {:?}",
                s.dims(),
                s.features.shape(),
                first.dims(),
                first.features.shape()
            )));
        }
    }
    Ok(())
}

/// Copies every pillar from its donor.
pub fn assemble<T: Scalar>(samples: &[SceneBundle<T>], prov: &Provenance) -> Result<SceneBundle<T>> {
    check_samples(samples)?;
    if prov.donors.iter().any(|&d| d >= samples.len()) {
        return Err(shape_err(format!("provenance {prov:?} names a missing sample")));
    }
    let [nx, ny, nz] = samples[0].dims();
    let c = samples[0].channels();
    let mut features = Tensor::zeros(&[c, nx, ny]);
    let mut labels = Vec::with_capacity(nx * ny * nz);
    let mut visible = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            let donor = &samples[prov.donor(i, j)];
            for ch in 0..c {
                features.set(&[ch, i, j], donor.features.at(&[ch, i, j]));
            }
            let start = donor.labels.index(i, j, 0);
            labels.extend_from_slice(&donor.labels.labels()[start..start + nz]);
            visible.extend_from_slice(&donor.mask.flags()[start..start + nz]);
        }
    }
    SceneBundle::new(
        features,
        LabeledOccupancy::new([nx, ny, nz], samples[0].labels.classes(), labels)?,
        VisibilityMask::new([nx, ny, nz], visible)?,
    )
}

fn mix<T: Scalar>(
    samples: &[SceneBundle<T>],
    cfg: &CutMixConfig,
    cut_at: impl Fn(&mut ChaCha8Rng, usize) -> usize,
) -> Result<(SceneBundle<T>, Provenance)> {
    cfg.validate()?;
    check_samples(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let triggered = rng.gen::<f64>() < cfg.mix_ratio;
    if !triggered || !(cfg.cut_x || cfg.cut_y) {
        return Ok((samples[0].clone(), Provenance::identity()));
    }
    if samples.len() < 2 {
        return Err(shape_err("cutmix needs at least two samples to mix"));
    }
    let [nx, ny, _] = samples[0].dims();
    let cut_x = cfg.cut_x.then(|| cut_at(&mut rng, nx));
    let cut_y = cfg.cut_y.then(|| cut_at(&mut rng, ny));
    let mut donors = [0usize; 4];
    for (r, d) in donors.iter_mut().enumerate() {
        let used = (r / 2 == 0 || cut_x.is_some()) && (r % 2 == 0 || cut_y.is_some());
        if used {
            *d = rng.gen_range(0..samples.len());
        }
    }
    let prov = Provenance { cut_x, cut_y, donors };
    Ok((assemble(samples, &prov)?, prov))
}

/// Center-anchored BEV-CutMix. The cut on an axis of length `n` is at
/// `n / 2` (rounded down), so for odd `n` the middle index joins the upper
/// region.
pub fn cutmix<T: Scalar>(samples: &[SceneBundle<T>], cfg: &CutMixConfig) -> Result<(SceneBundle<T>, Provenance)> {
    mix(samples, cfg, |_, n| n / 2)
}

/// Cuts at uniformly random positions instead of the center. Kept only to
/// show that off-center cuts break visibility consistency.
pub fn cutmix_random_position<T: Scalar>(
    samples: &[SceneBundle<T>],
    cfg: &CutMixConfig,
) -> Result<(SceneBundle<T>, Provenance)> {
    mix(samples, cfg, |rng, n| if n > 1 { rng.gen_range(1..n) } else { 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipAxis {
    X,
    Y,
}

impl FlipAxis {
    fn grid_axis(self) -> usize {
        match self {
            FlipAxis::X => 0,
            FlipAxis::Y => 1,
        }
    }
}

/// Reverses one BEV axis of features, labels and mask together, with the given probability.
pub fn bev_flip<T: Scalar>(bundle: &SceneBundle<T>, axis: FlipAxis, probability: f64, seed: u64) -> Result<SceneBundle<T>> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::Config(format!("flip probability {probability} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen::<f64>() >= probability {
        return Ok(bundle.clone());
    }
    let a = axis.grid_axis();
    Ok(SceneBundle {
        features: bundle.features.flip_axis(a + 1),
        labels: bundle.labels.flipped(a),
        mask: bundle.mask.flipped(a),
    })
}
