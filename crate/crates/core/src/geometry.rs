//! Perception volume, pinhole cameras and voxel-to-image projection.
//!
//! World frame: X forward, Y left, Z up (meters). Voxel `(i, j, k)` spans
//! `[x_min + i·v, x_min + (i+1)·v)` along X (likewise Y, Z) and its center is
//! `x_min + (i + 0.5)·v`. Grids are stored x-major: the linear index of
//! `(i, j, k)` is `(i·ny + j)·nz + k`.
//!
//! Camera frame: X right, Y down, Z along the optical axis. A world point `p`
//! maps to `q = R·p + t`, and `d·(w, h, 1)ᵀ = K·q`.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the principal plane are treated as behind the camera.
pub const EPSILON_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecDoc", into = "GridSpecDoc")]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub voxel_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

#[derive(Serialize, Deserialize)]
struct GridSpecDoc {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    z_min: f64,
    z_max: f64,
    voxel_size: f64,
    nx: usize,
    ny: usize,
    nz: usize,
}

impl TryFrom<GridSpecDoc> for GridSpec {
    type Error = Error;

    fn try_from(d: GridSpecDoc) -> Result<Self> {
        let spec = GridSpec {
            x_min: d.x_min,
            x_max: d.x_max,
            y_min: d.y_min,
            y_max: d.y_max,
            z_min: d.z_min,
            z_max: d.z_max,
            voxel_size: d.voxel_size,
            nx: d.nx,
            ny: d.ny,
            nz: d.nz,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<GridSpec> for GridSpecDoc {
    fn from(s: GridSpec) -> Self {
        GridSpecDoc {
            x_min: s.x_min,
            x_max: s.x_max,
            y_min: s.y_min,
            y_max: s.y_max,
            z_min: s.z_min,
            z_max: s.z_max,
            voxel_size: s.voxel_size,
            nx: s.nx,
            ny: s.ny,
            nz: s.nz,
        }
    }
}

impl GridSpec {
    /// Builds a grid from its minimum corner, voxel edge and counts.
    pub fn from_origin(min: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let spec = GridSpec {
            x_min: min[0],
            x_max: min[0] + dims[0] as f64 * voxel_size,
            y_min: min[1],
            y_max: min[1] + dims[1] as f64 * voxel_size,
            z_min: min[2],
            z_max: min[2] + dims[2] as f64 * voxel_size,
            voxel_size,
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The Occ3D-nuScenes volume: ±40 m in X/Y, −1 to 5.4 m in Z, 0.4 m voxels.
    pub fn occ3d() -> Self {
        GridSpec {
            x_min: -40.0,
            x_max: 40.0,
            y_min: -40.0,
            y_max: 40.0,
            z_min: -1.0,
            z_max: 5.4,
            voxel_size: 0.4,
            nx: 200,
            ny: 200,
            nz: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Grid(format!("voxel_size {} must be > 0", self.voxel_size)));
        }
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Grid("voxel counts must be >= 1".into()));
        }
        let axes = [
            ("x", self.x_min, self.x_max, self.nx),
            ("y", self.y_min, self.y_max, self.ny),
            ("z", self.z_min, self.z_max, self.nz),
        ];
        for (name, lo, hi, n) in axes {
            let span = hi - lo;
            let expect = n as f64 * self.voxel_size;
            // one ulp for each of the three terms involved
            let tol = f64::EPSILON * (lo.abs() + hi.abs() + expect.abs());
            if !(span - expect).abs().le(&tol) {
                return Err(Error::Grid(format!(
                    "{name}: extent {span} != {n} * {}",
                    self.voxel_size
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn min_corner(&self) -> Point3<f64> {
        Point3::new(self.x_min, self.y_min, self.z_min)
    }

    pub fn max_corner(&self) -> Point3<f64> {
        Point3::new(self.x_max, self.y_max, self.z_max)
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.ny + j) * self.nz + k
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        [idx / (self.ny * self.nz), (idx / self.nz) % self.ny, idx % self.nz]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        let v = self.voxel_size;
        Point3::new(
            self.x_min + (i as f64 + 0.5) * v,
            self.y_min + (j as f64 + 0.5) * v,
            self.z_min + (k as f64 + 0.5) * v,
        )
    }

    /// Index of the voxel containing `p`, if inside the volume.
    pub fn voxel_of(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let v = self.voxel_size;
        let f = [
            ((p.x - self.x_min) / v).floor(),
            ((p.y - self.y_min) / v).floor(),
            ((p.z - self.z_min) / v).floor(),
        ];
        let dims = self.dims();
        let mut out = [0usize; 3];
        for a in 0..3 {
            if !(f[a] >= 0.0 && f[a] < dims[a] as f64) {
                return None;
            }
            out[a] = f[a] as usize;
        }
        Some(out)
    }
}

/// Metric centers of every voxel, x-major.
pub fn voxel_centers(spec: &GridSpec) -> Vec<Point3<f64>> {
    let mut out = Vec::with_capacity(spec.voxel_count());
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            for k in 0..spec.nz {
                out.push(spec.voxel_center(i, j, k));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraDoc", into = "CameraDoc")]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
}

impl TryFrom<CameraDoc> for CameraModel {
    type Error = Error;

    fn try_from(d: CameraDoc) -> Result<Self> {
        CameraModel::new(
            Matrix3::from_row_slice(&d.k),
            Matrix3::from_row_slice(&d.r),
            Vector3::from_column_slice(&d.t),
            d.h,
            d.w,
        )
    }
}

impl From<CameraModel> for CameraDoc {
    fn from(c: CameraModel) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for col in 0..3 {
                    out[r * 3 + col] = m[(r, col)];
                }
            }
            out
        };
        CameraDoc {
            k: row_major(&c.intrinsics),
            r: row_major(&c.rotation),
            t: [c.translation.x, c.translation.y, c.translation.z],
            h: c.height,
            w: c.width,
        }
    }
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Camera(
                "intrinsics must be upper-triangular with K[2][2] = 1".into(),
            ));
        }
        let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Camera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Camera("image size must be non-zero".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Camera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL
            || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL
        {
            return Err(Error::Camera("rotation must be orthonormal with det 1".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Camera("translation must be finite".into()));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            height,
            width,
        })
    }

    /// Pinhole intrinsics from focal lengths and principal point.
    pub fn intrinsics_matrix(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    /// A camera at `center` whose optical axis points along world heading `yaw`
    /// (radians from +X toward +Y), parallel to the ground, image rows pointing down.
    pub fn looking_along(
        center: Point3<f64>,
        yaw: f64,
        intrinsics: Matrix3<f64>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let translation = -(rotation * center.coords);
        Self::new(intrinsics, rotation, translation, height, width)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn with_rotation(&self, rotation: Matrix3<f64>) -> Result<Self> {
        Self::new(self.intrinsics, rotation, self.translation, self.height, self.width)
    }

    /// World-frame direction of the ray through continuous pixel `(h, w)`,
    /// scaled so that its camera-frame Z component is 1 (ray parameter = depth).
    pub fn pixel_ray(&self, h: f64, w: f64) -> Option<Vector3<f64>> {
        let k_inv = self.intrinsics.try_inverse()?;
        let q = k_inv * Vector3::new(w, h, 1.0);
        Some(self.rotation.transpose() * q)
    }

    /// Inverse of [`project`]: the world point at depth `d` behind pixel `(h, w)`.
    pub fn unproject(&self, d: f64, h: f64, w: f64) -> Option<Point3<f64>> {
        let dir = self.pixel_ray(h, w)?;
        Some(self.center() + dir * d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    /// Metric depth along the optical axis.
    pub d: f64,
    /// Continuous row.
    pub h: f64,
    /// Continuous column.
    pub w: f64,
    pub in_frustum: bool,
}

pub fn project(cam: &CameraModel, p: &Point3<f64>) -> ImagePoint {
    let q = cam.rotation * p.coords + cam.translation;
    let d = q.z;
    let pix = cam.intrinsics * q;
    let (w, h) = if d != 0.0 {
        (pix.x / d, pix.y / d)
    } else {
        (f64::NAN, f64::NAN)
    };
    let in_frustum = d > EPSILON_DEPTH
        && (0.0..=(cam.height - 1) as f64).contains(&h)
        && (0.0..=(cam.width - 1) as f64).contains(&w);
    ImagePoint { d, h, w, in_frustum }
}

/// Uniform depth discretization: bin `k` covers `[d_min + k·bin_size, d_min + (k+1)·bin_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub bin_size: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        DepthBins {
            d_min: 1.0,
            bin_size: 0.5,
            count: 60,
        }
    }
}

impl DepthBins {
    // negated form also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_size > 0.0) || self.count == 0 || !self.d_min.is_finite() {
            return Err(Error::Config(format!("invalid depth bins {self:?}")));
        }
        Ok(())
    }

    pub fn to_bin(&self, d: f64) -> BinCoord {
        depth_to_bin(d, self.d_min, self.bin_size, self.count)
    }

    /// Bin containing depth `d`, if any.
    pub fn containing(&self, d: f64) -> Option<usize> {
        // tolerate rounding of depths computed exactly on a bin edge
        let f = ((d - self.d_min) / self.bin_size + 1e-9).floor();
        (f >= 0.0 && f < self.count as f64).then_some(f as usize)
    }
}

/// Continuous position on the depth-bin axis; integer values are bin centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinCoord {
    pub coord: f64,
    pub valid: bool,
}

pub fn depth_to_bin(d: f64, d_min: f64, bin_size: f64, n_bins: usize) -> BinCoord {
    let coord = (d - d_min) / bin_size - 0.5;
    let valid = coord >= -0.5 && coord <= n_bins as f64 - 0.5;
    BinCoord { coord, valid }
}

/// Grid plus cameras, the on-disk rig document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub grid: GridSpec,
    pub cameras: Vec<CameraModel>,
}

/// Parameters of a ring of outward-looking cameras sharing one mount point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurroundRig {
    pub count: usize,
    pub mount: [f64; 3],
    pub height: usize,
    pub width: usize,
    pub hfov_deg: f64,
    pub first_yaw_deg: f64,
}

impl Default for SurroundRig {
    fn default() -> Self {
        SurroundRig {
            count: 2,
            mount: [0.0, 0.0, 0.5],
            height: 24,
            width: 32,
            hfov_deg: 90.0,
            first_yaw_deg: 0.0,
        }
    }
}

impl CameraRig {
    pub fn surround(grid: GridSpec, cfg: &SurroundRig) -> Result<Self> {
        if cfg.count == 0 {
            return Err(Error::Config("surround rig needs at least one camera".into()));
        }
        let fx = (cfg.width as f64 / 2.0) / (cfg.hfov_deg.to_radians() / 2.0).tan();
        let k = CameraModel::intrinsics_matrix(
            fx,
            fx,
            (cfg.width as f64 - 1.0) / 2.0,
            (cfg.height as f64 - 1.0) / 2.0,
        );
        let center = Point3::from(cfg.mount);
        let cameras = (0..cfg.count)
            .map(|i| {
                let yaw = cfg.first_yaw_deg.to_radians()
                    + i as f64 * std::f64::consts::TAU / cfg.count as f64;
                CameraModel::looking_along(center, yaw, k, cfg.height, cfg.width)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CameraRig { grid, cameras })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rig: CameraRig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        if rig.cameras.is_empty() {
            return Err(Error::Config(format!("{}: rig has no cameras", path.display())));
        }
        Ok(rig)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
