//! Input-space PGD, the SABR loss, and adversarial weight perturbation.
//!
//! Attack results (adversarial points, weight perturbations) are selected
//! without recording gradients and then enter the training loss as
//! constants.

use rand::Rng;

use crate::bounds::{ibp_forward_on, ibp_loss_on};
use crate::error::{Error, Result};
use crate::network::{BoundParams, NetView, Network, ParamRole};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    /// Full robustness radius ε.
    pub epsilon: f64,
    /// Radius τ of the propagated box; `0 ≤ τ ≤ ε`.
    pub tau: f64,
    pub pgd_steps: usize,
    /// Step length as a fraction of the attack radius.
    pub pgd_step_size: f64,
    pub restarts: usize,
}

impl AttackConfig {
    /// Defaults: τ = 0.4ε, 8 steps of 0.25·radius, one restart.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            tau: 0.4 * epsilon,
            pgd_steps: 8,
            pgd_step_size: 0.25,
            restarts: 1,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// Same τ/ε ratio at a different ε (used by the ε ramp).
    pub fn scaled_to(&self, epsilon: f64) -> Self {
        let ratio = if self.epsilon > 0.0 { self.tau / self.epsilon } else { 0.0 };
        Self {
            epsilon,
            tau: (ratio * epsilon).min(epsilon),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::Config("ε and τ must be non-negative".into()));
        }
        if self.tau > self.epsilon {
            return Err(Error::Config(format!("τ = {} exceeds ε = {}", self.tau, self.epsilon)));
        }
        if self.pgd_steps == 0 || self.restarts == 0 || !(self.pgd_step_size > 0.0) {
            return Err(Error::Config("PGD needs ≥ 1 step, ≥ 1 restart and a positive step".into()));
        }
        Ok(())
    }
}

/// What a PGD search maximizes.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy,
    /// Interval loss of the τ-box placed around the iterate.
    SabrBox(&'a SabrGeometry),
}

/// Per-coordinate geometry of SABR box placement for one batch.
///
/// With `[a, b] = [x − ε, x + ε] ∩ [0, 1]` and `τᵢ = min(τ, (b − a)/2)`, a
/// box center is clamped into `[a + τᵢ, b − τᵢ]` and the box is
/// `[c − τᵢ, c + τᵢ] ∩ [a, b]`, so it always stays inside the clamped ε-ball.
#[derive(Clone, Debug, PartialEq)]
pub struct SabrGeometry {
    outer_lo: Tensor,
    outer_hi: Tensor,
    center_lo: Tensor,
    center_hi: Tensor,
    half: Tensor,
    attack_lo: Tensor,
    attack_hi: Tensor,
    attack_radius: f64,
}

impl SabrGeometry {
    pub fn new(x: &Tensor, epsilon: f64, tau: f64) -> Self {
        let outer_lo = x.map(|v| (v - epsilon).max(0.0));
        let outer_hi = x.map(|v| (v + epsilon).min(1.0));
        let half = outer_lo
            .zip_map(&outer_hi, |a, b| tau.min((b - a) / 2.0))
            .expect("same shape");
        let center_lo = outer_lo.zip_map(&half, |a, t| a + t).expect("same shape");
        let center_hi = outer_hi.zip_map(&half, |b, t| b - t).expect("same shape");
        let radius = epsilon - tau;
        Self {
            attack_lo: x.map(|v| (v - radius).clamp(0.0, 1.0)),
            attack_hi: x.map(|v| (v + radius).clamp(0.0, 1.0)),
            attack_radius: radius,
            outer_lo,
            outer_hi,
            center_lo,
            center_hi,
            half,
        }
    }

    /// The PGD search region `B(x, ε − τ) ∩ [0, 1]`.
    pub fn attack_region(&self) -> (&Tensor, &Tensor) {
        (&self.attack_lo, &self.attack_hi)
    }

    pub fn attack_radius(&self) -> f64 {
        self.attack_radius
    }

    /// Box bounds around `point` on the tape (gradients flow to `point`).
    pub fn box_on(&self, tape: &mut Tape, point: Var) -> Result<(Var, Var)> {
        let c = tape.clamp_elementwise(point, &self.center_lo, &self.center_hi)?;
        let half = tape.constant(self.half.clone());
        let lo = tape.sub(c, half)?;
        let lo = tape.clamp_elementwise(lo, &self.outer_lo, &self.outer_hi)?;
        let hi = tape.add(c, half)?;
        let hi = tape.clamp_elementwise(hi, &self.outer_lo, &self.outer_hi)?;
        Ok((lo, hi))
    }

    /// Plain-valued box bounds around `point`.
    pub fn box_around(&self, point: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = tape.constant(point.clone());
        let (lo, hi) = self.box_on(&mut tape, p)?;
        Ok((tape.value(lo).clone(), tape.value(hi).clone()))
    }
}

/// Per-sample objective values and, if asked, their gradient w.r.t. the
/// batched input.
fn objective_eval(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    objective: Objective<'_>,
    need_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let mut tape = Tape::new();
    let params = view.bind(&mut tape, false)?;
    let xv = if need_grad {
        tape.leaf(x.clone())
    } else {
        tape.constant(x.clone())
    };
    let losses = match objective {
        Objective::CrossEntropy => {
            let logits = view.forward_on(&mut tape, &params, xv)?;
            tape.softmax_cross_entropy(logits, labels)?
        }
        Objective::SabrBox(geom) => {
            let (lo, hi) = geom.box_on(&mut tape, xv)?;
            let (l, u) = ibp_forward_on(view, &mut tape, &params, lo, hi)?;
            ibp_loss_on(&mut tape, l, u, labels)?
        }
    };
    let values = tape.value(losses).data().to_vec();
    let grad = if need_grad {
        let total = tape.sum(losses)?;
        let mut grads = tape.backward(total)?;
        grads.take(xv)
    } else {
        None
    };
    Ok((values, grad))
}

/// Signed-gradient ascent over the per-coordinate box `[lo, hi]` for a
/// batch, keeping per sample the iterate with the highest objective across
/// all steps and restarts.
#[allow(clippy::too_many_arguments)]
pub fn pgd_maximize<R: Rng + ?Sized>(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    lo: &Tensor,
    hi: &Tensor,
    radius: f64,
    cfg: &AttackConfig,
    objective: Objective<'_>,
    rng: &mut R,
) -> Result<Tensor> {
    if radius <= 0.0 {
        return Ok(x.clone());
    }
    let batch = labels.len();
    let row = x.len() / batch.max(1);
    let step = cfg.pgd_step_size * radius;
    let mut best = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; batch];
    for _ in 0..cfg.restarts {
        let data = lo
            .data()
            .iter()
            .zip(hi.data())
            .map(|(&l, &h)| l + rng.random::<f64>() * (h - l))
            .collect();
        let mut cur = Tensor::new(x.shape().to_vec(), data)?;
        for s in 0..=cfg.pgd_steps {
            let last = s == cfg.pgd_steps;
            let (losses, grad) = objective_eval(view, &cur, labels, objective, !last)?;
            for (b, &loss) in losses.iter().enumerate() {
                if loss > best_loss[b] {
                    best_loss[b] = loss;
                    best.data_mut()[b * row..(b + 1) * row]
                        .copy_from_slice(&cur.data()[b * row..(b + 1) * row]);
                }
            }
            if let Some(g) = grad {
                let (l, h) = (lo.data(), hi.data());
                for (i, (v, gi)) in cur.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let dir = if *gi > 0.0 {
                        1.0
                    } else if *gi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *v = (*v + step * dir).clamp(l[i], h[i]);
                }
            }
        }
    }
    Ok(best)
}

/// PGD on cross-entropy within `B(x, radius) ∩ [0, 1]`.
///
/// `x` is one sample or a batch; `labels` has one entry per sample.
pub fn pgd_attack<R: Rng + ?Sized>(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    radius: f64,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let (xb, single) = view.net.as_batch(x)?;
    check_labels(&xb, labels)?;
    let lo = xb.map(|v| (v - radius).clamp(0.0, 1.0));
    let hi = xb.map(|v| (v + radius).clamp(0.0, 1.0));
    let adv = pgd_maximize(view, &xb, labels, &lo, &hi, radius, cfg, Objective::CrossEntropy, rng)?;
    if single {
        adv.reshape(x.shape())
    } else {
        Ok(adv)
    }
}

fn check_labels(xb: &Tensor, labels: &[usize]) -> Result<()> {
    if xb.shape()[0] != labels.len() {
        return Err(Error::Shape {
            op: "attack",
            detail: format!("{} samples but {} labels", xb.shape()[0], labels.len()),
        });
    }
    Ok(())
}

/// Adversarially placed SABR boxes for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SabrSelection {
    pub geometry: SabrGeometry,
    /// PGD points; box centers are these clamped into the feasible range.
    pub points: Tensor,
}

impl SabrSelection {
    /// Boxes for explicit points (no search).
    pub fn fixed(x: &Tensor, points: Tensor, epsilon: f64, tau: f64) -> Self {
        Self {
            geometry: SabrGeometry::new(x, epsilon, tau),
            points,
        }
    }

    pub fn boxes(&self) -> Result<(Tensor, Tensor)> {
        self.geometry.box_around(&self.points)
    }
}

/// Search `B(x, ε − τ)` for the point whose τ-box has the largest interval
/// loss. `x` must be batched.
pub fn sabr_select<R: Rng + ?Sized>(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<SabrSelection> {
    cfg.validate()?;
    check_labels(x, labels)?;
    let geometry = SabrGeometry::new(x, cfg.epsilon, cfg.tau);
    let (lo, hi) = geometry.attack_region();
    let points = pgd_maximize(
        view,
        x,
        labels,
        lo,
        hi,
        geometry.attack_radius(),
        cfg,
        Objective::SabrBox(&geometry),
        rng,
    )?;
    Ok(SabrSelection { geometry, points })
}

/// Per-sample SABR losses on the tape for fixed boxes; gradients reach θ only.
pub fn sabr_loss_on(
    view: &NetView<'_>,
    tape: &mut Tape,
    params: &BoundParams,
    sel: &SabrSelection,
    labels: &[usize],
) -> Result<Var> {
    let p = tape.constant(sel.points.clone());
    let (lo, hi) = sel.geometry.box_on(tape, p)?;
    let (l, u) = ibp_forward_on(view, tape, params, lo, hi)?;
    ibp_loss_on(tape, l, u, labels)
}

/// Mean SABR loss of a batch (or one sample).
pub fn sabr_loss<R: Rng + ?Sized>(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    let (xb, _) = view.net.as_batch(x)?;
    let sel = sabr_select(view, &xb, labels, cfg, rng)?;
    let mut tape = Tape::new();
    let params = view.bind(&mut tape, false)?;
    let losses = sabr_loss_on(view, &mut tape, &params, &sel, labels)?;
    let mean = tape.mean(losses)?;
    Ok(tape.value(mean).data()[0])
}

/// Batch-mean standard (cross-entropy) and certified (SABR) losses.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub std: Var,
    pub cert: Var,
}

impl LossTerms {
    /// `λ·std + (1 − λ)·cert` on the tape.
    pub fn combine(&self, tape: &mut Tape, lambda: f64) -> Result<Var> {
        let a = tape.scale(self.std, lambda)?;
        let b = tape.scale(self.cert, 1.0 - lambda)?;
        tape.add(a, b)
    }
}

pub fn loss_terms_on(
    view: &NetView<'_>,
    tape: &mut Tape,
    params: &BoundParams,
    x: &Tensor,
    labels: &[usize],
    sel: &SabrSelection,
) -> Result<LossTerms> {
    let xv = tape.constant(x.clone());
    let logits = view.forward_on(tape, params, xv)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let std = tape.mean(ce)?;
    let cert = sabr_loss_on(view, tape, params, sel, labels)?;
    let cert = tape.mean(cert)?;
    Ok(LossTerms { std, cert })
}

/// How the AWP radius relates to the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationScale {
    /// `|Δᵢ| ≤ η`.
    Absolute,
    /// `|Δᵢ| ≤ η · max|θ_t|` over the parameter tensor `t` holding `i`.
    TensorRelative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AwpConfig {
    pub eta: f64,
    pub steps: usize,
    pub scale: PerturbationScale,
    /// Parameter roles left unperturbed. Running BN statistics are never
    /// perturbed; they are not parameters.
    pub exclude: Vec<ParamRole>,
}

impl AwpConfig {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            steps: 1,
            scale: PerturbationScale::Absolute,
            exclude: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("η must be non-negative, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("AWP needs at least one step".into()));
        }
        Ok(())
    }

    /// Per-entry radius over θ.
    pub fn radii(&self, net: &Network) -> Vec<f64> {
        let mut r = Vec::with_capacity(net.num_params());
        for p in net.params() {
            let bound = if self.exclude.contains(&p.role) {
                0.0
            } else {
                match self.scale {
                    PerturbationScale::Absolute => self.eta,
                    PerturbationScale::TensorRelative => {
                        self.eta * p.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                    }
                }
            };
            r.extend(std::iter::repeat_n(bound, p.value.len()));
        }
        r
    }
}

/// Additive weight perturbation aligned with θ.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPerturbation {
    delta: Vec<f64>,
}

impl WeightPerturbation {
    pub fn zeros(len: usize) -> Self {
        Self {
            delta: vec![0.0; len],
        }
    }

    pub fn from_vec(delta: Vec<f64>) -> Self {
        Self { delta }
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn max_abs(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|&d| d == 0.0)
    }
}

/// `(std, cert, gradient of std + cert)` at θ + Δ.
fn awp_eval(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    sel: &SabrSelection,
    delta: &[f64],
    need_grad: bool,
) -> Result<(f64, f64, Option<Vec<f64>>)> {
    let shifted = view.shifted(Some(delta));
    let mut tape = Tape::new();
    let params = shifted.bind(&mut tape, need_grad)?;
    let terms = loss_terms_on(&shifted, &mut tape, &params, x, labels, sel)?;
    let std = tape.value(terms.std).data()[0];
    let cert = tape.value(terms.cert).data()[0];
    let grad = if need_grad {
        let total = tape.add(terms.std, terms.cert)?;
        let grads = tape.backward(total)?;
        Some(params.flat_grad(&grads)?)
    } else {
        None
    };
    Ok((std, cert, grad))
}

/// Approximate `argmax_{|Δ| ≤ r} L_std + L_cert` at θ + Δ by projected
/// signed-gradient ascent; SABR boxes in `sel` stay fixed.
///
/// The first step has length r (so one step gives `Δ = r·sign(∇)`), later
/// steps `2r/k`. If neither the summed objective nor the `λ`-weighted loss
/// improves on Δ = 0, the zero perturbation is returned.
pub fn awp_perturb(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    cfg: &AwpConfig,
    sel: &SabrSelection,
) -> Result<WeightPerturbation> {
    cfg.validate()?;
    let n = view.net.num_params();
    if cfg.eta == 0.0 {
        return Ok(WeightPerturbation::zeros(n));
    }
    let radii = cfg.radii(view.net);
    let base_shift = view.shift.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let base = NetView { shift: None, ..*view };
    let with_base = |d: &[f64]| -> Vec<f64> { d.iter().zip(&base_shift).map(|(a, b)| a + b).collect() };

    let (s0, c0, g0) = awp_eval(&base, x, labels, sel, &with_base(&vec![0.0; n]), true)?;
    let weighted = |s: f64, c: f64| lambda * s + (1.0 - lambda) * c;
    let mut best = (vec![0.0; n], s0 + c0, weighted(s0, c0));
    let mut delta = vec![0.0; n];
    let mut grad = g0.expect("requested");
    let factor = if cfg.steps == 1 { 1.0 } else { 2.0 / cfg.steps as f64 };
    for step in 0..cfg.steps {
        for ((d, g), r) in delta.iter_mut().zip(&grad).zip(&radii) {
            let dir = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = (*d + factor * r * dir).clamp(-r, *r);
        }
        let more = step + 1 < cfg.steps;
        let (s, c, g) = awp_eval(&base, x, labels, sel, &with_base(&delta), more)?;
        if s + c > best.1 {
            best = (delta.clone(), s + c, weighted(s, c));
        }
        if let Some(g) = g {
            grad = g;
        }
    }
    let (delta, _, w) = best;
    if w < weighted(s0, c0) {
        return Ok(WeightPerturbation::zeros(n));
    }
    Ok(WeightPerturbation { delta })
}

/// `λ·L_std + (1 − λ)·L_cert` at θ + Δ on the tape, Δ held constant;
/// gradients reach θ.
pub fn awp_loss_on(
    view: &NetView<'_>,
    tape: &mut Tape,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    sel: &SabrSelection,
    delta: &WeightPerturbation,
) -> Result<(BoundParams, LossTerms, Var)> {
    let shift: Vec<f64> = match view.shift {
        Some(s) => s.iter().zip(&delta.delta).map(|(a, b)| a + b).collect(),
        None => delta.delta.clone(),
    };
    let shifted = view.shifted(Some(&shift));
    let params = shifted.bind(tape, true)?;
    let terms = loss_terms_on(&shifted, tape, &params, x, labels, sel)?;
    let total = terms.combine(tape, lambda)?;
    Ok((params, terms, total))
}

/// Value of the AWP loss for a batch: select SABR boxes at θ, find Δ, and
/// evaluate the weighted loss at θ + Δ.
pub fn awp_loss<R: Rng + ?Sized>(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    attack: &AttackConfig,
    cfg: &AwpConfig,
    rng: &mut R,
) -> Result<f64> {
    let (xb, _) = view.net.as_batch(x)?;
    let sel = sabr_select(view, &xb, labels, attack, rng)?;
    let delta = awp_perturb(view, &xb, labels, lambda, cfg, &sel)?;
    let mut tape = Tape::new();
    let (_, _, total) = awp_loss_on(view, &mut tape, &xb, labels, lambda, &sel, &delta)?;
    Ok(tape.value(total).data()[0])
}
