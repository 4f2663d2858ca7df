//! Per-element combined loss and its average over the compression set.

use rand::Rng;

use crate::attack::{awp_loss_on, awp_perturb, loss_terms_on, sabr_select, AttackConfig, SabrSelection};
use crate::error::{Error, Result};
use crate::network::{BnStats, BnUse, Mode, NetView, Network};
use crate::tensor::{Tape, Tensor};

use super::set::{CompressionElement, CompressionSet, ElementKind};

/// Loss values of one element on one batch, with the gradient w.r.t. θ when
/// requested.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementLoss {
    pub index: usize,
    pub std: f64,
    pub cert: f64,
    pub total: f64,
    pub grad: Option<Vec<f64>>,
    /// Clean-input predictions of the view (used for train accuracy).
    pub predictions: Vec<usize>,
}

/// Batch statistics of the view's effective network on clean inputs, in
/// Train mode; `None` in Eval mode or without batch norm.
fn clean_stats(view: &NetView<'_>, x: &Tensor) -> Result<Option<Vec<Option<BnStats>>>> {
    let net = view.net;
    if net.mode() == Mode::Eval || net.bn_stats().iter().all(Option::is_none) {
        return Ok(None);
    }
    let eff = net.with_flat_params(&view.effective_params())?;
    Ok(Some(eff.batch_stats(x)?))
}

fn with_stats<'a>(view: NetView<'a>, stats: &'a Option<Vec<Option<BnStats>>>) -> NetView<'a> {
    match stats {
        Some(s) => view.with_bn(BnUse::Frozen(s)),
        None => view.with_bn(BnUse::Running),
    }
}

/// (L_std, L_cert, combined, gradient, predictions).
type ViewLoss = (f64, f64, f64, Option<Vec<f64>>, Vec<usize>);

/// `λ·L_std + (1 − λ)·L_cert` of one view for fixed SABR boxes, recorded on
/// a fresh tape.
fn view_loss(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    sel: &SabrSelection,
    need_grad: bool,
) -> Result<ViewLoss> {
    let mut tape = Tape::new();
    let params = view.bind(&mut tape, need_grad)?;
    let terms = loss_terms_on(view, &mut tape, &params, x, labels, sel)?;
    let total = terms.combine(&mut tape, lambda)?;
    let value = |t: &Tape, v| t.value(v).data()[0];
    let (s, c, l) = (value(&tape, terms.std), value(&tape, terms.cert), value(&tape, total));
    let preds = predictions_from(view, &mut tape, &params, x)?;
    let grad = if need_grad {
        let grads = tape.backward(total)?;
        Some(params.flat_grad(&grads)?)
    } else {
        None
    };
    Ok((s, c, l, grad, preds))
}

fn predictions_from(
    view: &NetView<'_>,
    tape: &mut Tape,
    params: &crate::network::BoundParams,
    x: &Tensor,
) -> Result<Vec<usize>> {
    let xv = tape.constant(x.clone());
    let logits = view.forward_on(tape, params, xv)?;
    let logits = tape.value(logits);
    let c = *logits.shape().last().unwrap_or(&1);
    Ok(logits.data().chunks(c).map(crate::network::argmax).collect())
}

/// Combined loss of a view: SABR boxes are chosen by PGD on the same view,
/// then held fixed.
pub fn combined_loss<R: Rng + ?Sized>(
    view: &NetView<'_>,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    check_lambda(lambda)?;
    let (xb, _) = view.net.as_batch(x)?;
    let sel = sabr_select(view, &xb, labels, attack, rng)?;
    Ok(view_loss(view, &xb, labels, lambda, &sel, false)?.2)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("λ must lie in [0, 1], got {lambda}")))
    }
}

/// Loss (and gradient) of one compression element on a batch `x`.
#[allow(clippy::too_many_arguments)]
pub fn element_loss<R: Rng + ?Sized>(
    net: &Network,
    index: usize,
    element: &CompressionElement,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    attack: &AttackConfig,
    rng: &mut R,
    need_grad: bool,
) -> Result<ElementLoss> {
    check_lambda(lambda)?;
    let base = NetView::new(net);
    let (s, c, l, grad, predictions) = match &element.kind {
        ElementKind::Identity => {
            let stats = clean_stats(&base, x)?;
            let view = with_stats(base, &stats);
            let sel = sabr_select(&view, x, labels, attack, rng)?;
            view_loss(&view, x, labels, lambda, &sel, need_grad)?
        }
        ElementKind::Prune { .. } => {
            let mask = element
                .mask()
                .ok_or_else(|| Error::Config("prune element used before refresh".into()))?;
            let masked = crate::compress::apply_mask(net, mask)?;
            let stats = clean_stats(&masked, x)?;
            let view = with_stats(masked, &stats);
            let sel = sabr_select(&view, x, labels, attack, rng)?;
            view_loss(&view, x, labels, lambda, &sel, need_grad)?
        }
        ElementKind::QuantProxy { awp } => {
            let stats = clean_stats(&base, x)?;
            let view = with_stats(base, &stats);
            let sel = sabr_select(&view, x, labels, attack, rng)?;
            let delta = awp_perturb(&view, x, labels, lambda, awp, &sel)?;
            let mut tape = Tape::new();
            let (params, terms, total) = awp_loss_on(&view, &mut tape, x, labels, lambda, &sel, &delta)?;
            let value = |t: &Tape, v| t.value(v).data()[0];
            let (s, c, l) = (value(&tape, terms.std), value(&tape, terms.cert), value(&tape, total));
            let shifted = view.shifted(Some(delta.delta()));
            let preds = predictions_from(&shifted, &mut tape, &params, x)?;
            let grad = if need_grad {
                let grads = tape.backward(total)?;
                Some(params.flat_grad(&grads)?)
            } else {
                None
            };
            (s, c, l, grad, preds)
        }
    };
    Ok(ElementLoss {
        index,
        std: s,
        cert: c,
        total: l,
        grad,
        predictions,
    })
}

/// Result of averaging the active elements' losses.
#[derive(Clone, Debug, PartialEq)]
pub struct CactusLoss {
    pub total: f64,
    pub std: f64,
    pub cert: f64,
    pub elements: Vec<ElementLoss>,
    /// Mean of the element gradients.
    pub grad: Option<Vec<f64>>,
}

/// Average the combined losses of every active element of a refreshed set.
///
/// Every element's attack starts from a copy of `rng`, so all variants see
/// the same random initializations. `precomputed` may hold the full-network
/// element already evaluated on this batch with such a copy (for example to
/// seed gradient-based pruning scores).
#[allow(clippy::too_many_arguments)]
pub fn cactus_step<R: Rng + Clone>(
    net: &Network,
    set: &CompressionSet,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    attack: &AttackConfig,
    rng: &R,
    need_grad: bool,
    precomputed: Option<ElementLoss>,
) -> Result<CactusLoss> {
    let mut precomputed = precomputed;
    let mut elements = Vec::new();
    for (i, e) in set.active() {
        let res = match precomputed.take() {
            Some(p) if p.index == i => p,
            other => {
                precomputed = other;
                element_loss(net, i, e, x, labels, lambda, attack, &mut rng.clone(), need_grad)?
            }
        };
        elements.push(res);
    }
    if elements.is_empty() {
        return Err(Error::Config("compression set is empty".into()));
    }
    let n = elements.len() as f64;
    let mean = |f: fn(&ElementLoss) -> f64| elements.iter().map(f).sum::<f64>() / n;
    let grad = if need_grad {
        let mut g = vec![0.0; net.num_params()];
        for e in &elements {
            for (a, b) in g.iter_mut().zip(e.grad.as_ref().expect("requested")) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        Some(g)
    } else {
        None
    };
    Ok(CactusLoss {
        total: mean(|e| e.total),
        std: mean(|e| e.std),
        cert: mean(|e| e.cert),
        elements,
        grad,
    })
}

/// Value of the averaged loss over a refreshed set.
pub fn cactus_loss<R: Rng + Clone>(
    net: &Network,
    set: &CompressionSet,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    attack: &AttackConfig,
    rng: &R,
) -> Result<f64> {
    let (xb, _) = net.as_batch(x)?;
    Ok(cactus_step(net, set, &xb, labels, lambda, attack, rng, false, None)?.total)
}
