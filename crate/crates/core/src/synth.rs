//! Synthetic scenes with analytic ground truth: voxel-aligned boxes on a
//! ground layer, depth distributions rendered by ray marching, and
//! segment-traversal visibility.

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, DepthBins, GridSpec};
use crate::sampling::{DepthActivation, DepthDistribution};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabeledOccupancy, VisibilityMask, DEFAULT_CLASSES, GROUND_CLASS};

/// Crossings shorter than this (meters) are grazing contacts, not occlusions.
pub const MIN_CROSSING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u8,
}

impl SceneBox {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    /// Cells whose bottom face is at or below this height are ground.
    pub z: f64,
    pub class: u8,
}

/// Scene description as stored next to the label grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub grid: GridSpec,
    pub classes: usize,
    pub boxes: Vec<SceneBox>,
    pub ground: Option<GroundPlane>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub doc: SceneDoc,
    pub labels: LabeledOccupancy,
}

/// The free label for a class count: always the last id.
pub fn free_label(classes: usize) -> u8 {
    (classes - 1) as u8
}

fn ground_label(classes: usize) -> u8 {
    if classes == DEFAULT_CLASSES {
        GROUND_CLASS
    } else {
        0
    }
}

impl SceneDoc {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("class count {} outside [2, 256]", self.classes)));
        }
        let (lo, hi) = (self.grid.min_corner(), self.grid.max_corner());
        for (n, b) in self.boxes.iter().enumerate() {
            let ordered = (0..3).all(|a| b.min[a] <= b.max[a]);
            let inside = (0..3).all(|a| b.min[a] >= lo[a] - 1e-9 && b.max[a] <= hi[a] + 1e-9);
            if !ordered || !inside || b.class as usize >= self.classes {
                return Err(Error::Config(format!("box {n} invalid: {b:?}")));
            }
        }
        if let Some(g) = self.ground {
            if g.class as usize >= self.classes {
                return Err(Error::Config(format!("ground class {} ≥ {}", g.class, self.classes)));
            }
        }
        Ok(())
    }

    /// Ground first, then boxes in order (later boxes win), by voxel-center containment.
    pub fn rasterize(&self) -> Result<LabeledOccupancy> {
        self.validate()?;
        let g = &self.grid;
        let mut labels = LabeledOccupancy::filled(g.dims(), self.classes, free_label(self.classes))?;
        for i in 0..g.nx {
            for j in 0..g.ny {
                for k in 0..g.nz {
                    let c = g.voxel_center(i, j, k);
                    let mut label = None;
                    if let Some(gp) = self.ground {
                        if g.z_min + k as f64 * g.voxel_size <= gp.z + 1e-9 {
                            label = Some(gp.class);
                        }
                    }
                    for b in &self.boxes {
                        if b.contains(&c) {
                            label = Some(b.class);
                        }
                    }
                    if let Some(l) = label {
                        labels.set(i, j, k, l)?;
                    }
                }
            }
        }
        Ok(labels)
    }
}

impl SyntheticScene {
    pub fn from_doc(doc: SceneDoc) -> Result<Self> {
        let labels = doc.rasterize()?;
        Ok(Self { doc, labels })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.doc.grid
    }

    pub fn free(&self) -> u8 {
        free_label(self.doc.classes)
    }
}

/// Random voxel-aligned boxes standing on a one-layer ground, away from the
/// ego pillars around the origin. Uses the 18-class label set.
pub fn generate_scene(spec: &GridSpec, n_boxes: usize, seed: u64) -> Result<SyntheticScene> {
    generate_scene_with_classes(spec, n_boxes, seed, DEFAULT_CLASSES)
}

pub fn generate_scene_with_classes(spec: &GridSpec, n_boxes: usize, seed: u64, classes: usize) -> Result<SyntheticScene> {
    spec.validate()?;
    if classes < 3 {
        return Err(Error::Config("scene synthesis needs a ground, a box and a free class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = spec.voxel_size;
    let ground = ground_label(classes);
    let box_classes: Vec<u8> = (0..free_label(classes)).filter(|&c| c != ground).collect();
    let [nx, ny, nz] = spec.dims();
    // ego keep-out: pillars whose footprint comes within one voxel of the origin
    let ego = |i0: usize, i1: usize, j0: usize, j1: usize| {
        let (x0, x1) = (spec.x_min + i0 as f64 * v, spec.x_min + i1 as f64 * v);
        let (y0, y1) = (spec.y_min + j0 as f64 * v, spec.y_min + j1 as f64 * v);
        x0 < v && x1 > -v && y0 < v && y1 > -v
    };
    let mut boxes = Vec::with_capacity(n_boxes);
    let stand = usize::from(nz > 1);
    for _ in 0..n_boxes {
        for _attempt in 0..64 {
            let sx = rng.gen_range(1..=3.min(nx));
            let sy = rng.gen_range(1..=3.min(ny));
            let sz = rng.gen_range(1..=(nz - stand).div_ceil(2).max(1));
            let i0 = rng.gen_range(0..=nx - sx);
            let j0 = rng.gen_range(0..=ny - sy);
            if ego(i0, i0 + sx, j0, j0 + sy) {
                continue;
            }
            let k0 = stand;
            let class = *box_classes.choose(&mut rng).expect("at least one box class");
            boxes.push(SceneBox {
                min: [spec.x_min + i0 as f64 * v, spec.y_min + j0 as f64 * v, spec.z_min + k0 as f64 * v],
                max: [
                    spec.x_min + (i0 + sx) as f64 * v,
                    spec.y_min + (j0 + sy) as f64 * v,
                    spec.z_min + (k0 + sz).min(nz) as f64 * v,
                ],
                class,
            });
            break;
        }
    }
    SyntheticScene::from_doc(SceneDoc {
        grid: *spec,
        classes,
        boxes,
        ground: Some(GroundPlane {
            z: spec.z_min,
            class: ground,
        }),
    })
}

/// One voxel visited by a ray, with the ray parameters where it enters and leaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub voxel: [usize; 3],
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Uniform-grid traversal of `origin + t·dir` for `t ∈ [t_start, t_end]`,
/// visiting voxels in order until `visit` returns `false`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn traverse(
    spec: &GridSpec,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    t_start: f64,
    t_end: f64,
    mut visit: impl FnMut(Crossing) -> bool,
) {
    let lo = spec.min_corner();
    let hi = spec.max_corner();
    let dims = spec.dims();
    let (mut t0, mut t1) = (t_start, t_end);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return;
            }
        } else {
            let (mut ta, mut tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if !(t0 < t1) {
        return;
    }
    let v = spec.voxel_size;
    let p = origin + dir * t0;
    let mut cell = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let f = ((p[a] - lo[a]) / v).floor();
        cell[a] = (f.max(0.0) as isize).min(dims[a] as isize - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (lo[a] + (cell[a] + 1) as f64 * v - origin[a]) / dir[a];
            t_delta[a] = v / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (lo[a] + cell[a] as f64 * v - origin[a]) / dir[a];
            t_delta[a] = -v / dir[a];
        }
    }
    let mut t = t0;
    loop {
        // lowest axis wins ties
        let mut axis = 0;
        for a in 1..3 {
            if t_max[a] < t_max[axis] {
                axis = a;
            }
        }
        let exit = t_max[axis].min(t1).max(t);
        let voxel = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
        if !visit(Crossing {
            voxel,
            t_enter: t,
            t_exit: exit,
        }) || exit >= t1
        {
            return;
        }
        t = exit;
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= dims[axis] as isize {
            return;
        }
        t_max[axis] += t_delta[axis];
    }
}

/// How a rendered hit is spread along the depth axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RenderMode {
    /// Weight 1 in the hit bin only.
    #[default]
    Onehot,
    /// Weight `decay^(k − hit)` in every bin `k ≥ hit`.
    SigmoidLike { decay: f64 },
}

/// Optical-axis depth where the central ray of pixel `(h, w)` enters the
/// first non-free voxel.
pub fn first_hit_depth(labels: &LabeledOccupancy, spec: &GridSpec, cam: &CameraModel, h: usize, w: usize) -> Result<Option<f64>> {
    let dir = cam
        .pixel_ray(h as f64, w as f64)
        .filter(|d| d.iter().all(|c| c.is_finite()) && d.norm() > 0.0)
        .ok_or(Error::DegenerateRay { h, w })?;
    let free = free_label(labels.classes());
    let norm = dir.norm();
    let mut hit = None;
    traverse(spec, &cam.center(), &dir, 0.0, f64::INFINITY, |c| {
        let [i, j, k] = c.voxel;
        if labels.get(i, j, k) != free && (c.t_exit - c.t_enter) * norm > MIN_CROSSING {
            hit = Some(c.t_enter);
            return false;
        }
        true
    });
    Ok(hit)
}

pub fn render_depth_distribution<T: Scalar>(
    scene: &SyntheticScene,
    cam: &CameraModel,
    bins: DepthBins,
    mode: RenderMode,
) -> Result<DepthDistribution<T>> {
    bins.validate()?;
    let (hh, ww) = (cam.height(), cam.width());
    let mut values = Tensor::<T>::zeros(&[bins.count, hh, ww]);
    for h in 0..hh {
        for w in 0..ww {
            let Some(depth) = first_hit_depth(&scene.labels, scene.grid(), cam, h, w)? else {
                continue;
            };
            let Some(b) = bins.containing(depth) else {
                continue;
            };
            match mode {
                RenderMode::Onehot => values.set(&[b, h, w], T::one()),
                RenderMode::SigmoidLike { decay } => {
                    for k in b..bins.count {
                        values.set(&[k, h, w], T::of_f64(decay.powi((k - b) as i32)));
                    }
                }
            }
        }
    }
    DepthDistribution::new(values, bins, DepthActivation::None)
}

/// Whether the segment from `from` to the center of `target` crosses any
/// non-free voxel other than `target` itself.
pub fn segment_blocked(labels: &LabeledOccupancy, spec: &GridSpec, from: &Point3<f64>, target: [usize; 3]) -> bool {
    let to = spec.voxel_center(target[0], target[1], target[2]);
    let dir = to - from;
    let norm = dir.norm();
    let free = free_label(labels.classes());
    let mut blocked = false;
    traverse(spec, from, &dir, 0.0, 1.0, |c| {
        if c.voxel == target {
            return false;
        }
        let [i, j, k] = c.voxel;
        if labels.get(i, j, k) != free && (c.t_exit - c.t_enter) * norm > MIN_CROSSING {
            blocked = true;
            return false;
        }
        true
    });
    blocked
}

/// A voxel is visible when some camera sees its center and the segment from
/// that camera's center crosses no other non-free voxel.
pub fn compute_visibility(labels: &LabeledOccupancy, spec: &GridSpec, cams: &[CameraModel]) -> Result<VisibilityMask> {
    if cams.is_empty() {
        return Err(Error::Config("visibility needs at least one camera".into()));
    }
    if labels.dims() != spec.dims() {
        return Err(crate::error::shape_err(format!(
            "labels {:?} do not match grid {:?}",
            labels.dims(),
            spec.dims()
        )));
    }
    let centers: Vec<Point3<f64>> = cams.iter().map(|c| c.center()).collect();
    let flags = (0..spec.voxel_count())
        .map(|idx| {
            let v = spec.unravel(idx);
            let p = spec.voxel_center(v[0], v[1], v[2]);
            cams.iter()
                .zip(&centers)
                .any(|(cam, o)| project(cam, &p).in_frustum && !segment_blocked(labels, spec, o, v))
        })
        .collect();
    VisibilityMask::new(spec.dims(), flags)
}

/// Fixed random per-class embedding of each pillar's topmost non-free label
/// (zeros for empty pillars): a stand-in for image-derived BEV features.
pub fn synthetic_bev_features<T: Scalar>(labels: &LabeledOccupancy, channels: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Tensor::<f64>::random_uniform(&[labels.classes(), channels], -1.0, 1.0, &mut rng);
    let free = free_label(labels.classes());
    let [nx, ny, nz] = labels.dims();
    let mut out = Tensor::zeros(&[channels, nx, ny]);
    for i in 0..nx {
        for j in 0..ny {
            if let Some(l) = (0..nz).rev().map(|k| labels.get(i, j, k)).find(|&l| l != free) {
                for c in 0..channels {
                    out.set(&[c, i, j], T::of_f64(table.at(&[l as usize, c])));
                }
            }
        }
    }
    out
}
