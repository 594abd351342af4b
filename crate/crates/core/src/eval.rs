//! Confusion-matrix accumulation and masked mIoU.

use serde_json::{json, Map, Value};

use crate::error::{shape_err, Error, Result};
use crate::volume::{class_name, LabeledOccupancy, VisibilityMask};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    classes: usize,
    free_class: Option<usize>,
    confusion: Vec<u64>,
}

impl EvalReport {
    /// `free_class` is counted but left out of the mean.
    pub fn new(classes: usize, free_class: Option<usize>) -> Result<Self> {
        if classes < 2 || free_class.is_some_and(|f| f >= classes) {
            return Err(Error::Config(format!(
                "invalid report: {classes} classes, free class {free_class:?}"
            )));
        }
        Ok(Self {
            classes,
            free_class,
            confusion: vec![0; classes * classes],
        })
    }

    /// Report for the usual layout where the last class is free.
    pub fn with_free_last(classes: usize) -> Result<Self> {
        Self::new(classes, Some(classes.saturating_sub(1)))
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn free_class(&self) -> Option<usize> {
        self.free_class
    }

    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.confusion[truth * self.classes + pred]
    }

    pub fn visible_voxels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabeledOccupancy, truth: &LabeledOccupancy, mask: &VisibilityMask) -> Result<()> {
        if pred.dims() != truth.dims() || mask.dims() != truth.dims() {
            return Err(shape_err(format!(
                "prediction {:?}, truth {:?}, mask {:?}",
                pred.dims(),
                truth.dims(),
                mask.dims()
            )));
        }
        let l = self.classes;
        let mut delta = vec![0u64; l * l];
        for ((&p, &t), &v) in pred.labels().iter().zip(truth.labels()).zip(mask.flags()) {
            if !v {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= l || t >= l {
                return Err(Error::LabelOutOfRange {
                    label: p.max(t),
                    classes: l,
                });
            }
            delta[t * l + p] += 1;
        }
        for (c, d) in self.confusion.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if other.classes != self.classes || other.free_class != self.free_class {
            return Err(shape_err("merging reports over different class sets"));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    /// `(TP, TP + FP + FN)` for one class.
    fn counts(&self, c: usize) -> (u64, u64) {
        let l = self.classes;
        let tp = self.count(c, c);
        let row: u64 = (0..l).map(|p| self.count(c, p)).sum();
        let col: u64 = (0..l).map(|t| self.count(t, c)).sum();
        (tp, row + col - tp)
    }

    fn semantic(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes).filter(move |&c| Some(c) != self.free_class)
    }

    /// IoU per semantic class, `None` when the class has no support.
    pub fn per_class_iou(&self) -> Vec<(usize, Option<f64>)> {
        self.semantic()
            .map(|c| {
                let (tp, union) = self.counts(c);
                (c, (union > 0).then(|| tp as f64 / union as f64))
            })
            .collect()
    }

    /// Mean IoU over supported semantic classes.
    ///
    /// The mean is formed as an exact fraction and divided once, so small
    /// reports give the correctly rounded value.
    pub fn miou(&self) -> Result<f64> {
        if self.visible_voxels() == 0 {
            return Err(Error::EmptyReport("no visible voxels evaluated"));
        }
        let fractions: Vec<(u64, u64)> = self
            .semantic()
            .map(|c| self.counts(c))
            .filter(|&(_, union)| union > 0)
            .collect();
        if fractions.is_empty() {
            return Err(Error::EmptyReport("no semantic class has support"));
        }
        Ok(exact_mean(&fractions).unwrap_or_else(|| {
            fractions.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / fractions.len() as f64
        }))
    }

    pub fn to_json(&self) -> Result<Value> {
        let mut per_class = Map::new();
        for (c, iou) in self.per_class_iou() {
            per_class.insert(class_name(c, self.classes), iou.map_or(Value::Null, |v| json!(v)));
        }
        Ok(json!({
            "miou": self.miou()?,
            "per_class": per_class,
            "visible_voxels": self.visible_voxels(),
        }))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ(nᵢ/dᵢ) / k` as one division, when numerator and denominator stay
/// exactly representable.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in fractions {
        let (n, d) = (n as u128, d as u128);
        let g = gcd(den, d);
        let lcm = den.checked_mul(d / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(n.checked_mul(lcm / d)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(fractions.len() as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}
