//! Per-voxel semantic labels and camera-visibility flags, stored x-major.

use crate::error::{shape_err, Error, Result};

/// Occ3D-nuScenes class names; the last one is the free (unoccupied) class.
pub const OCC3D_CLASSES: [&str; 18] = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
];

pub const DEFAULT_CLASSES: usize = 18;
pub const FREE_CLASS: u8 = 17;
pub const GROUND_CLASS: u8 = 11;

pub fn class_name(id: usize, classes: usize) -> String {
    if classes == OCC3D_CLASSES.len() {
        OCC3D_CLASSES[id].to_string()
    } else {
        format!("class_{id}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledOccupancy {
    dims: [usize; 3],
    classes: usize,
    labels: Vec<u8>,
}

impl LabeledOccupancy {
    pub fn new(dims: [usize; 3], classes: usize, labels: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&classes) {
            return Err(Error::Format(format!("class count {classes} outside [2, 256]")));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(shape_err(format!(
                "{} labels for a {dims:?} grid",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes,
            });
        }
        Ok(Self {
            dims,
            classes,
            labels,
        })
    }

    pub fn filled(dims: [usize; 3], classes: usize, label: u8) -> Result<Self> {
        Self::new(dims, classes, vec![label; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, label: u8) -> Result<()> {
        if label as usize >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: label as usize,
                classes: self.classes,
            });
        }
        let idx = self.index(i, j, k);
        self.labels[idx] = label;
        Ok(())
    }

    /// Reverses the X (`axis = 0`) or Y (`axis = 1`) axis.
    pub fn flipped(&self, axis: usize) -> Self {
        Self {
            dims: self.dims,
            classes: self.classes,
            labels: flip_grid(&self.labels, self.dims, axis),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    dims: [usize; 3],
    visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn new(dims: [usize; 3], visible: Vec<bool>) -> Result<Self> {
        if visible.len() != dims.iter().product::<usize>() {
            return Err(shape_err(format!(
                "{} visibility flags for a {dims:?} grid",
                visible.len()
            )));
        }
        Ok(Self { dims, visible })
    }

    pub fn all(dims: [usize; 3], visible: bool) -> Self {
        Self {
            dims,
            visible: vec![visible; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn flags(&self) -> &[bool] {
        &self.visible
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.visible[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn flipped(&self, axis: usize) -> Self {
        Self {
            dims: self.dims,
            visible: flip_grid(&self.visible, self.dims, axis),
        }
    }
}

pub(crate) fn flip_grid<V: Copy>(data: &[V], dims: [usize; 3], axis: usize) -> Vec<V> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..nx {
        for j in 0..ny {
            let (si, sj) = match axis {
                0 => (nx - 1 - i, j),
                _ => (i, ny - 1 - j),
            };
            let start = (si * ny + sj) * nz;
            out.extend_from_slice(&data[start..start + nz]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(matches!(
            LabeledOccupancy::new([1, 1, 2], 3, vec![0, 3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        assert!(LabeledOccupancy::new([1, 1, 2], 3, vec![0]).is_err());
    }

    #[test]
    fn flip_moves_index() {
        let mut occ = LabeledOccupancy::filled([3, 2, 2], 18, FREE_CLASS).unwrap();
        occ.set(0, 1, 1, 4).unwrap();
        assert_eq!(occ.flipped(0).get(2, 1, 1), 4);
        assert_eq!(occ.flipped(1).get(0, 0, 1), 4);
        assert_eq!(occ.flipped(0).flipped(0), occ);
    }
}
