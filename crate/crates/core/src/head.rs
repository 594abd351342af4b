//! BEV fusion, the conv head with Channel-to-Height decoding, masked
//! cross-entropy and plain gradient descent.

use crate::conv::{conv2d, Conv2dParams, ConvStack};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabeledOccupancy, VisibilityMask};

/// Adds the spatial embedding to the BEV features.
pub fn fuse<T: Scalar>(f_bev: &Tensor<T>, e_s: &Tensor<T>) -> Result<Tensor<T>> {
    f_bev.add(e_s)
}

/// `(nz·L)×X×Y → X×Y×nz×L`; channel `c` holds height `c / L`, class `c % L`.
pub fn channel_to_height<T: Scalar>(head_out: &Tensor<T>, classes: usize) -> Result<Tensor<T>> {
    let &[ch, x, y] = head_out.shape() else {
        return Err(shape_err(format!("head output must be C×X×Y, got {:?}", head_out.shape())));
    };
    if classes < 2 || ch % classes != 0 {
        return Err(shape_err(format!("{ch} channels do not factor into heights × {classes} classes")));
    }
    head_out
        .clone()
        .reshape(&[ch / classes, classes, x, y])?
        .permute(&[2, 3, 0, 1])
}

/// Inverse of [`channel_to_height`].
pub fn height_to_channel<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[x, y, z, l] = logits.shape() else {
        return Err(shape_err(format!("logits must be X×Y×Z×L, got {:?}", logits.shape())));
    };
    logits.permute(&[2, 3, 0, 1])?.reshape(&[z * l, x, y])
}

/// BEV conv stack followed by the classification conv.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyHead<T> {
    pub bev: Vec<Conv2dParams<T>>,
    pub head: Conv2dParams<T>,
}

pub struct HeadCache<T> {
    inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> OccupancyHead<T> {
    fn stack(&self) -> Result<ConvStack<T>> {
        let mut layers = self.bev.clone();
        layers.push(self.head.clone());
        ConvStack::new(layers)
    }
}

pub fn predict<T: Scalar>(fused: &Tensor<T>, head: &OccupancyHead<T>, classes: usize) -> Result<Tensor<T>> {
    Ok(predict_cached(fused, head, classes)?.0)
}

pub fn predict_cached<T: Scalar>(
    fused: &Tensor<T>,
    head: &OccupancyHead<T>,
    classes: usize,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let mut inputs = Vec::with_capacity(head.bev.len() + 1);
    let mut x = fused.clone();
    for layer in &head.bev {
        let y = conv2d(&x, layer)?;
        inputs.push(x);
        x = y;
    }
    let out = conv2d(&x, &head.head)?;
    inputs.push(x);
    Ok((channel_to_height(&out, classes)?, HeadCache { inputs }))
}

/// Gradient with respect to the fused BEV input and every head parameter.
pub fn predict_backward<T: Scalar>(
    head: &OccupancyHead<T>,
    cache: &HeadCache<T>,
    d_logits: &Tensor<T>,
) -> Result<(Tensor<T>, OccupancyHead<T>)> {
    let stack = head.stack()?;
    let up = height_to_channel(d_logits)?;
    let (d_in, grads) = stack.backward(&cache.inputs, &up)?;
    let mut layers = grads.layers().to_vec();
    let head_grad = layers.pop().expect("stack has the head layer");
    Ok((
        d_in,
        OccupancyHead {
            bev: layers,
            head: head_grad,
        },
    ))
}

/// Per-voxel argmax over classes; ties go to the lowest class id.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<LabeledOccupancy> {
    let &[x, y, z, l] = logits.shape() else {
        return Err(shape_err(format!("logits must be X×Y×Z×L, got {:?}", logits.shape())));
    };
    let labels = logits
        .data()
        .chunks(l)
        .map(|row| {
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabeledOccupancy::new([x, y, z], l, labels)
}

/// Mean over visible voxels of `−log softmax(logits)[label]`, and its gradient.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabeledOccupancy,
    mask: &VisibilityMask,
) -> Result<(f64, Tensor<T>)> {
    let &[x, y, z, l] = logits.shape() else {
        return Err(shape_err(format!("logits must be X×Y×Z×L, got {:?}", logits.shape())));
    };
    if labels.dims() != [x, y, z] || mask.dims() != [x, y, z] || labels.classes() != l {
        return Err(shape_err(format!(
            "cross_entropy: logits {:?}, labels {:?}/{} classes, mask {:?}",
            logits.shape(),
            labels.dims(),
            labels.classes(),
            mask.dims()
        )));
    }
    let visible = mask.visible_count();
    if visible == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / visible as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; l];
    for (v, ((row, g), (&lab, &vis))) in logits
        .data()
        .chunks(l)
        .zip(grad.data_mut().chunks_mut(l))
        .zip(labels.labels().iter().zip(mask.flags()))
        .enumerate()
    {
        if !vis {
            continue;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a.as_f64()));
        let mut total = 0.0;
        for (p, &a) in probs.iter_mut().zip(row) {
            *p = (a.as_f64() - max).exp();
            total += *p;
        }
        let lse = max + total.ln();
        let nll = lse - row[lab as usize].as_f64();
        if !nll.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss at voxel {v}"),
                step: 0,
            });
        }
        loss += nll;
        for (c, (gc, p)) in g.iter_mut().zip(&probs).enumerate() {
            let onehot = if c == lab as usize { 1.0 } else { 0.0 };
            *gc = T::of_f64((p / total - onehot) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

/// Anything exposing its parameter tensors in a fixed order.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Scalar> Parameters<T> for Conv2dParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![self.weights(), self.bias()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let (w, b) = self.parts_mut();
        vec![w, b]
    }
}

impl<T: Scalar> Parameters<T> for ConvStack<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers().iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

impl<T: Scalar> Parameters<T> for OccupancyHead<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.bev.iter().flat_map(|l| l.tensors()).collect();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.bev.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.extend(self.head.tensors_mut());
        out
    }
}

/// `params ← params − lr·grads`.
pub fn sgd_step<T: Scalar, P: Parameters<T>>(params: &mut P, grads: &P, lr: T) -> Result<()> {
    let gs = grads.tensors();
    let mut ps = params.tensors_mut();
    if gs.len() != ps.len() {
        return Err(shape_err(format!("{} gradients for {} parameters", gs.len(), ps.len())));
    }
    for (p, g) in ps.iter_mut().zip(&gs) {
        if p.shape() != g.shape() {
            return Err(shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    for (p, g) in ps.iter_mut().zip(gs) {
        p.sub_scaled(g, lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::FREE_CLASS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_is_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::random_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::random_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let z = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(fuse(&a, &z).unwrap(), a);
        assert_eq!(fuse(&z, &b).unwrap(), b);
        assert_eq!(fuse(&a, &b).unwrap(), fuse(&b, &a).unwrap());
        assert!(fuse(&a, &Tensor::zeros(&[2, 3, 5])).is_err());
    }

    #[test]
    fn channel_to_height_index_map() {
        let t = Tensor::<f64>::from_fn(&[12, 2, 3], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let logits = channel_to_height(&t, 3).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 4, 3]);
        // channel 7 = height 2, class 1
        assert_eq!(logits.at(&[1, 2, 2, 1]), t.at(&[7, 1, 2]));
        assert_eq!(height_to_channel(&logits).unwrap(), t);
        assert!(channel_to_height(&Tensor::<f64>::zeros(&[10, 2, 2]), 3).is_err());
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let head = OccupancyHead {
            bev: vec![Conv2dParams::<f32>::zeros(4, 4, 3).unwrap()],
            head: Conv2dParams::zeros(4, 2 * 18, 3).unwrap(),
        };
        let logits = predict(&Tensor::zeros(&[4, 3, 3]), &head, 18).unwrap();
        let labels = argmax_labels(&logits).unwrap();
        assert!(labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn identity_head_reshapes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::random_uniform(&[6, 3, 2], -1.0, 1.0, &mut rng);
        let head = OccupancyHead {
            bev: vec![Conv2dParams::identity(6)],
            head: Conv2dParams::identity(6),
        };
        assert_eq!(predict(&x, &head, 3).unwrap(), channel_to_height(&x, 3).unwrap());
    }

    #[test]
    fn uniform_and_saturated_loss() {
        let labels = LabeledOccupancy::filled([2, 2, 2], 18, 4).unwrap();
        let mask = VisibilityMask::all([2, 2, 2], true);
        let (loss, grad) = cross_entropy(&Tensor::<f64>::zeros(&[2, 2, 2, 18]), &labels, &mask).unwrap();
        assert!((loss - 18f64.ln()).abs() < 1e-12);
        assert!((loss - 2.8904).abs() < 1e-4);
        for row in grad.data().chunks(18) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }

        let sat = Tensor::<f64>::from_fn(&[2, 2, 2, 18], |i| if i[3] == 4 { 30.0 } else { 0.0 });
        let (loss, _) = cross_entropy(&sat, &labels, &mask).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn invisible_voxels_have_no_gradient() {
        let labels = LabeledOccupancy::filled([1, 1, 2], 18, FREE_CLASS).unwrap();
        let mask = VisibilityMask::new([1, 1, 2], vec![true, false]).unwrap();
        let (_, grad) = cross_entropy(&Tensor::<f64>::zeros(&[1, 1, 2, 18]), &labels, &mask).unwrap();
        assert!(grad.data()[18..].iter().all(|&g| g == 0.0));
        let none = VisibilityMask::all([1, 1, 2], false);
        assert!(matches!(
            cross_entropy(&Tensor::<f64>::zeros(&[1, 1, 2, 18]), &labels, &none),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn sgd_on_a_square() {
        // f(w) = w², w = 1, grad 2w
        let mut p = Conv2dParams::new(Tensor::<f64>::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let g = Conv2dParams::new(Tensor::full(&[1, 1, 1, 1], 2.0), Tensor::zeros(&[1])).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.weights().data()[0] - 0.8).abs() < 1e-15);

        let wrong = Conv2dParams::new(Tensor::full(&[2, 1, 1, 1], 2.0), Tensor::zeros(&[2])).unwrap();
        assert!(sgd_step(&mut p, &wrong, 0.1).is_err());
    }
}
