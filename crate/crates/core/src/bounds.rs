//! Interval bound propagation, the interval classification loss, and
//! certification.
//!
//! Affine layers push a center/radius pair (`μ' = Wμ + b`, `r' = |W| r`),
//! ReLU acts on the endpoints, and batch norm is a fixed per-channel affine
//! map. Every step is recorded on a [`Tape`], so the loss differentiates with
//! respect to θ and to the input box.

use crate::error::{Error, Result};
use crate::network::{BoundParams, LayerSpec, NetView, Network, ParamRole};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Elementwise lower/upper bounds of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::Shape {
                op: "interval",
                detail: format!("lower {:?} vs upper {:?}", lower.shape(), upper.shape()),
            });
        }
        if lower.data().iter().zip(upper.data()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("interval lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn center(&self) -> Tensor {
        self.lower.zip_map(&self.upper, |l, u| (l + u) / 2.0).expect("same shape")
    }

    pub fn radius(&self) -> Tensor {
        self.lower.zip_map(&self.upper, |l, u| (u - l) / 2.0).expect("same shape")
    }

    /// Whether `other` lies inside `self` elementwise.
    pub fn contains(&self, other: &IntervalTensor) -> bool {
        self.lower.shape() == other.lower.shape()
            && self.lower.data().iter().zip(other.lower.data()).all(|(a, b)| a <= b)
            && self.upper.data().iter().zip(other.upper.data()).all(|(a, b)| a >= b)
    }
}

/// The L∞ ball of radius `radius` around `center`, cut to the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBox {
    center: Tensor,
    radius: f64,
}

impl InputBox {
    pub fn new(center: Tensor, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::Config(format!("box radius must be non-negative, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lower(&self) -> Tensor {
        self.center.map(|x| (x - self.radius).clamp(0.0, 1.0))
    }

    pub fn upper(&self) -> Tensor {
        self.center.map(|x| (x + self.radius).clamp(0.0, 1.0))
    }

    pub fn bounds(&self) -> IntervalTensor {
        IntervalTensor {
            lower: self.lower(),
            upper: self.upper(),
        }
    }

    /// Box bounds as tape values that depend on `center`.
    pub fn on_tape(tape: &mut Tape, center: Var, radius: f64) -> Result<(Var, Var)> {
        let lo = tape.add_scalar(center, -radius)?;
        let lo = tape.clamp(lo, 0.0, 1.0)?;
        let hi = tape.add_scalar(center, radius)?;
        let hi = tape.clamp(hi, 0.0, 1.0)?;
        Ok((lo, hi))
    }
}

/// Propagate `[lower, upper]` (batched) through a view on `tape`; returns
/// logit bounds `(lower, upper)`.
pub fn ibp_forward_on(
    view: &NetView<'_>,
    tape: &mut Tape,
    params: &BoundParams,
    lower: Var,
    upper: Var,
) -> Result<(Var, Var)> {
    let net = view.net;
    let sum = tape.add(lower, upper)?;
    let mut mu = tape.scale(sum, 0.5)?;
    let diff = tape.sub(upper, lower)?;
    let mut r = tape.scale(diff, 0.5)?;
    for (i, layer) in net.layers().iter().enumerate() {
        match *layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let w = params.var(net, i, ParamRole::Weight);
                let w_abs = tape.abs(w)?;
                let (m, rr) = match *layer {
                    LayerSpec::Conv2d { stride, padding, .. } => (
                        tape.conv2d(mu, w, stride, padding)?,
                        tape.conv2d(r, w_abs, stride, padding)?,
                    ),
                    _ => (tape.dense(mu, w)?, tape.dense(r, w_abs)?),
                };
                mu = net.maybe_bias(tape, params, i, m)?;
                r = rr;
            }
            LayerSpec::Relu => {
                let lo = tape.sub(mu, r)?;
                let hi = tape.add(mu, r)?;
                let lo = tape.relu(lo)?;
                let hi = tape.relu(hi)?;
                let s = tape.add(lo, hi)?;
                mu = tape.scale(s, 0.5)?;
                let d = tape.sub(hi, lo)?;
                r = tape.scale(d, 0.5)?;
            }
            LayerSpec::Flatten => {
                mu = net.flatten_on(tape, mu)?;
                r = net.flatten_on(tape, r)?;
            }
            LayerSpec::BatchNorm { .. } => {
                let (scale, shift) = net.bn_affine_on(tape, params, i, view.bn)?;
                let m = tape.channel_scale(mu, scale)?;
                mu = tape.bias_add(m, shift)?;
                let scale_abs = tape.abs(scale)?;
                r = tape.channel_scale(r, scale_abs)?;
            }
        }
    }
    let lo = tape.sub(mu, r)?;
    let hi = tape.add(mu, r)?;
    Ok((lo, hi))
}

/// Logit bounds of a view over explicit input bounds (one sample or a batch).
pub fn ibp_bounds(view: &NetView<'_>, input: &IntervalTensor) -> Result<IntervalTensor> {
    let (lower, single) = view.net.as_batch(&input.lower)?;
    let (upper, _) = view.net.as_batch(&input.upper)?;
    let mut tape = Tape::new();
    let params = view.bind(&mut tape, false)?;
    let lv = tape.constant(lower);
    let uv = tape.constant(upper);
    let (lo, hi) = ibp_forward_on(view, &mut tape, &params, lv, uv)?;
    let (mut lo, mut hi) = (tape.value(lo).clone(), tape.value(hi).clone());
    if single {
        let c = lo.shape()[1];
        lo = lo.reshape(&[c])?;
        hi = hi.reshape(&[c])?;
    }
    Ok(IntervalTensor {
        lower: lo,
        upper: hi,
    })
}

/// Sound bounds on the logits of `net` over `input` (running BN statistics).
pub fn ibp_forward(net: &Network, input: &InputBox) -> Result<IntervalTensor> {
    ibp_bounds(&NetView::new(net), &input.bounds())
}

/// Interval loss `ln(1 + Σ_{i≠y} exp(u_i − l_y))` on a tape, one entry per
/// row of the `[batch, classes]` bounds.
///
/// Implemented as softmax cross-entropy of the worst-case logit vector
/// (`l_y` at the label, `u_i` elsewhere), which is the same quantity.
pub fn ibp_loss_on(tape: &mut Tape, lower: Var, upper: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(upper).shape().to_vec();
    let classes = *shape.last().unwrap_or(&0);
    let mut onehot = Tensor::zeros(&shape);
    for (row, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        onehot.data_mut()[row * classes + y] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let gap = tape.sub(upper, lower)?;
    let gap = tape.mul(gap, onehot)?;
    let worst = tape.sub(upper, gap)?;
    tape.softmax_cross_entropy(worst, labels)
}

/// Interval loss of one sample's logit bounds.
pub fn ibp_loss(bounds: &IntervalTensor, y: usize) -> Result<f64> {
    let (l, u) = (bounds.lower.data(), bounds.upper.data());
    if y >= u.len() {
        return Err(Error::Label {
            label: y,
            classes: u.len(),
        });
    }
    let worst: Vec<f64> = (0..u.len()).map(|i| if i == y { l[y] } else { u[i] }).collect();
    Ok(kernels::log_sum_exp(&worst) - l[y])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    Unknown,
}

/// Whether the label's lower bound beats every other class's upper bound.
pub fn margin_certified(bounds: &IntervalTensor, y: usize) -> bool {
    let (l, u) = (bounds.lower.data(), bounds.upper.data());
    (0..u.len()).all(|i| i == y || l[y] > u[i])
}

pub fn certify(net: &Network, x: &Tensor, y: usize, eps: f64) -> Result<Verdict> {
    let bounds = ibp_forward(net, &InputBox::new(x.clone(), eps)?)?;
    Ok(if margin_certified(&bounds, y) {
        Verdict::Certified
    } else {
        Verdict::Unknown
    })
}

/// Certification verdicts for every row of a batch.
pub fn certify_batch(view: &NetView<'_>, x: &Tensor, labels: &[usize], eps: f64) -> Result<Vec<bool>> {
    let input = InputBox::new(x.clone(), eps)?.bounds();
    let bounds = ibp_bounds(view, &input)?;
    let c = *bounds.upper.shape().last().unwrap_or(&0);
    let (l, u) = (bounds.lower.data(), bounds.upper.data());
    Ok(labels
        .iter()
        .enumerate()
        .map(|(row, &y)| {
            let (l, u) = (&l[row * c..(row + 1) * c], &u[row * c..(row + 1) * c]);
            (0..c).all(|i| i == y || l[y] > u[i])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, LayerSpec};

    fn net_with(arch: Architecture, theta: &[f64]) -> Network {
        let mut net = Network::build(arch, 0).unwrap();
        net.set_flat_params(theta).unwrap();
        net
    }

    #[test]
    fn relu_interval() {
        let net = Network::build(Architecture::new(vec![1], vec![LayerSpec::Relu]), 0).unwrap();
        let b = ibp_bounds(
            &NetView::new(&net),
            &IntervalTensor::new(Tensor::vector(vec![-1.0]), Tensor::vector(vec![2.0])).unwrap(),
        )
        .unwrap();
        assert_eq!((b.lower().data(), b.upper().data()), (&[0.0][..], &[2.0][..]));
    }

    #[test]
    fn sign_split_affine() {
        let net = net_with(
            Architecture::new(vec![2], vec![LayerSpec::Dense { inp: 2, out: 1, bias: false }]),
            &[1.0, -1.0],
        );
        let b = ibp_forward(&net, &InputBox::new(Tensor::vector(vec![0.5, 0.5]), 0.5).unwrap()).unwrap();
        assert_eq!(b.lower().data(), &[-1.0]);
        assert_eq!(b.upper().data(), &[1.0]);
    }

    #[test]
    fn loss_closed_forms() {
        let zero = |n| IntervalTensor::new(Tensor::zeros(&[n]), Tensor::zeros(&[n])).unwrap();
        assert!((ibp_loss(&zero(2), 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((ibp_loss(&zero(3), 1).unwrap() - 3f64.ln()).abs() < 1e-15);
        let far = IntervalTensor::new(Tensor::vector(vec![1e4, -1e4]), Tensor::vector(vec![1e4, -1e4]))
            .unwrap();
        assert!(ibp_loss(&far, 0).unwrap() < 1e-300);
        assert!(matches!(ibp_loss(&zero(2), 2), Err(Error::Label { .. })));
    }

    #[test]
    fn negative_radius_is_rejected() {
        assert!(InputBox::new(Tensor::vector(vec![0.5]), -0.1).is_err());
    }

    #[test]
    fn zero_radius_matches_forward() {
        let net = Network::build(Architecture::mlp(&[3, 5, 2]), 4).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4, 0.9]);
        let b = ibp_forward(&net, &InputBox::new(x.clone(), 0.0).unwrap()).unwrap();
        let y = net.forward(&x).unwrap();
        assert!(b.lower().max_abs_diff(&y) < 1e-9 && b.upper().max_abs_diff(&y) < 1e-9);
        let pred = net.predict(&x).unwrap();
        assert_eq!(certify(&net, &x, pred, 0.0).unwrap(), Verdict::Certified);
        assert_eq!(certify(&net, &x, 1 - pred, 0.0).unwrap(), Verdict::Unknown);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(&[vec![0.1, -0.3, 0.2]]).unwrap());
        let u = tape.constant(Tensor::matrix(&[vec![0.4, 0.1, 0.5]]).unwrap());
        let loss = ibp_loss_on(&mut tape, l, u, &[1]).unwrap();
        let plain = ibp_loss(
            &IntervalTensor::new(Tensor::vector(vec![0.1, -0.3, 0.2]), Tensor::vector(vec![0.4, 0.1, 0.5]))
                .unwrap(),
            1,
        )
        .unwrap();
        assert!((tape.value(loss).data()[0] - plain).abs() < 1e-14);
    }
}
