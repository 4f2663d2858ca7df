//! The training loop: per batch, refresh the compression set, average the
//! element losses, and take one Adam step on θ.

mod adam;
mod loss;
mod schedule;
mod set;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{debug, info};

pub use adam::{AdamConfig, AdamState};
pub use loss::{cactus_loss, cactus_step, combined_loss, element_loss, CactusLoss, ElementLoss};
pub use schedule::Schedule;
pub use set::{
    default_train_prune, refresh_set, CompressionElement, CompressionSet, ElementKind, RatioSource, Strategy,
};

use crate::attack::AttackConfig;
use crate::checkpoint::Checkpoint;
use crate::data::{epoch_order, Split};
use crate::error::{Error, Result};
use crate::network::{Mode, Network};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// Attack settings at the target ε; ε and τ are scaled down during the
    /// ramp.
    pub attack: AttackConfig,
    pub seed: u64,
    /// Step θ after each element's loss instead of once on their mean.
    pub per_element_updates: bool,
}

impl TrainConfig {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
            schedule: Schedule::default(),
            attack: AttackConfig::new(epsilon),
            seed,
            per_element_updates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.adam.validate()?;
        self.schedule.validate()?;
        self.attack.validate()
    }
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: usize,
    pub adam: AdamState,
}

impl TrainState {
    pub fn fresh(net: &Network) -> Self {
        Self {
            iteration: 0,
            epoch: 0,
            adam: AdamState::new(net.num_params()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let adam = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no optimizer state".into()))?;
        Ok(Self {
            iteration: ck.iteration,
            epoch: ck.epoch,
            adam,
        })
    }
}

/// One metrics line per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub eps: f64,
    pub loss_total: f64,
    pub loss_std: f64,
    pub loss_cert: f64,
    /// Per element of the set; `None` when inactive this iteration.
    pub elements: Vec<Option<f64>>,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub element_labels: Vec<&'static str>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn header(&self) -> String {
        let mut h = String::from("iter,epoch,lambda,eps,loss_total,loss_std,loss_cert");
        for (i, l) in self.element_labels.iter().enumerate() {
            let _ = write!(h, ",elem_{i}_{l}");
        }
        h.push_str(",train_acc");
        h
    }

    pub fn format_row(row: &MetricsRow) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            row.iter, row.epoch, row.lambda, row.eps, row.loss_total, row.loss_std, row.loss_cert
        );
        for e in &row.elements {
            match e {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        let _ = write!(s, ",{}", row.train_acc);
        s
    }

    /// Header plus one line per row, newline terminated.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::format_row(r));
            out.push('\n');
        }
        out
    }
}

/// Per-iteration RNG, reproducible from `(seed, iteration)`.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Write `epoch_NNN.ckpt` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this state instead of starting fresh.
    pub resume: Option<TrainState>,
    /// Stop after this many epochs in total (≤ `epochs`).
    pub stop_after: Option<usize>,
    /// Called with every metrics row as it is produced.
    pub on_row: Option<&'a mut dyn FnMut(&MetricsRow)>,
}

pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub state: TrainState,
}

pub fn train(net: &mut Network, data: &Split, cfg: &TrainConfig, set: &mut CompressionSet) -> Result<TrainOutcome> {
    train_with(net, data, cfg, set, TrainOptions::default())
}

pub fn train_with(
    net: &mut Network,
    data: &Split,
    cfg: &TrainConfig,
    set: &mut CompressionSet,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    set.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut state = opts.resume.take().unwrap_or_else(|| TrainState::fresh(net));
    if state.adam.m.len() != net.num_params() {
        return Err(Error::Config("optimizer state does not match the network".into()));
    }
    let has_bn = net.bn_stats().iter().any(Option::is_some);
    let mut metrics = MetricsLog {
        element_labels: set.elements().iter().map(CompressionElement::label).collect(),
        rows: Vec::new(),
    };
    let input_shape = net.input_shape().to_vec();
    let last_epoch = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    if has_bn {
        net.set_mode(Mode::Train);
    }
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            state.iteration += 1;
            let t = state.iteration;
            let (x, labels) = data.batch(chunk, &input_shape)?;
            let lambda = cfg.schedule.lambda(t);
            let eps = cfg.attack.epsilon * cfg.schedule.eps_fraction(t);
            let attack = cfg.attack.scaled_to(eps);
            let mut rng = iteration_rng(cfg.seed, t);
            let bn_batch = if has_bn { Some(net.batch_stats(&x)?) } else { None };

            let row = if cfg.per_element_updates {
                set.refresh(net, epoch, &mut rng, None)?;
                per_element_step(net, set, &x, &labels, lambda, &attack, &rng, cfg, &mut state)?
            } else {
                let identity = if set.needs_grads() {
                    let e = &set.elements()[0];
                    Some(element_loss(net, 0, e, &x, &labels, lambda, &attack, &mut rng.clone(), true)?)
                } else {
                    None
                };
                let snapshot = identity.as_ref().and_then(|e| e.grad.clone());
                set.refresh(net, epoch, &mut rng, snapshot.as_deref())?;
                let out = cactus_step(net, set, &x, &labels, lambda, &attack, &rng, true, identity)?;
                let grad = out.grad.as_ref().expect("requested");
                guard(out.total, grad, t, epoch)?;
                let mut theta = net.flat_params();
                state.adam.step(&cfg.adam, &mut theta, grad);
                net.set_flat_params(&theta)?;
                summarize(set, &out.elements, out.total, out.std, out.cert, &labels)
            };
            if let Some(stats) = bn_batch {
                net.update_running_stats(&stats, labels.len());
            }
            let row = MetricsRow {
                iter: t,
                epoch: epoch + 1,
                lambda,
                eps,
                ..row
            };
            debug!(iter = t, loss = row.loss_total, "step");
            if let Some(cb) = opts.on_row.as_mut() {
                cb(&row);
            }
            metrics.rows.push(row);
        }
        state.epoch += 1;
        let last = metrics.rows.last();
        info!(
            epoch = state.epoch,
            loss = last.map(|r| r.loss_total),
            train_acc = last.map(|r| r.train_acc),
            "epoch done"
        );
        if let Some(dir) = &opts.checkpoint_dir {
            net.set_mode(Mode::Eval);
            let mut ck = Checkpoint::new(net.clone(), cfg.seed);
            ck.iteration = state.iteration;
            ck.epoch = state.epoch;
            ck.optimizer = Some(state.adam.clone());
            ck.save(&dir.join(format!("epoch_{:03}.ckpt", state.epoch)))?;
            if has_bn {
                net.set_mode(Mode::Train);
            }
        }
    }
    net.set_mode(Mode::Eval);
    Ok(TrainOutcome { metrics, state })
}

fn guard(loss: f64, grad: &[f64], iter: u64, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            iter,
            epoch: epoch + 1,
            detail: format!("loss is {loss}"),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iter,
            epoch: epoch + 1,
            detail: format!("gradient entry {i} is {}", grad[i]),
        });
    }
    Ok(())
}

fn summarize(
    set: &CompressionSet,
    elements: &[ElementLoss],
    total: f64,
    std: f64,
    cert: f64,
    labels: &[usize],
) -> MetricsRow {
    let mut per = vec![None; set.elements().len()];
    for e in elements {
        per[e.index] = Some(e.total);
    }
    let correct = elements[0]
        .predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    MetricsRow {
        iter: 0,
        epoch: 0,
        lambda: 0.0,
        eps: 0.0,
        loss_total: total,
        loss_std: std,
        loss_cert: cert,
        elements: per,
        train_acc: correct as f64 / labels.len() as f64,
    }
}

#[allow(clippy::too_many_arguments)]
fn per_element_step(
    net: &mut Network,
    set: &CompressionSet,
    x: &crate::tensor::Tensor,
    labels: &[usize],
    lambda: f64,
    attack: &AttackConfig,
    rng: &ChaCha8Rng,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<MetricsRow> {
    let mut results = Vec::new();
    for (i, e) in set.active() {
        let res = element_loss(net, i, e, x, labels, lambda, attack, &mut rng.clone(), true)?;
        let grad = res.grad.as_ref().expect("requested");
        guard(res.total, grad, state.iteration, state.epoch)?;
        let mut theta = net.flat_params();
        state.adam.step(&cfg.adam, &mut theta, grad);
        net.set_flat_params(&theta)?;
        results.push(res);
    }
    let n = results.len() as f64;
    let total = results.iter().map(|e| e.total).sum::<f64>() / n;
    let std = results.iter().map(|e| e.std).sum::<f64>() / n;
    let cert = results.iter().map(|e| e.cert).sum::<f64>() / n;
    Ok(summarize(set, &results, total, std, cert, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::network::Architecture;

    #[test]
    fn linear_model_separates_blobs() {
        let data = make_synthetic(SyntheticKind::Blobs, 200, 0.05, 0).unwrap();
        let mut net = Network::build(Architecture::mlp(&[2, 2]), 0).unwrap();
        let mut cfg = TrainConfig::new(0.0, 1);
        cfg.epochs = 5;
        cfg.adam.lr = 0.05;
        let out = train(&mut net, &data.train, &cfg, &mut CompressionSet::identity()).unwrap();
        assert!(out.metrics.rows.iter().all(|r| r.lambda == 1.0));
        let x = crate::tensor::Tensor::new(vec![200, 2], data.train.inputs.clone()).unwrap();
        let preds = net.predict_batch(&x).unwrap();
        assert_eq!(preds, data.train.labels);
    }

    #[test]
    fn metrics_header_lists_elements() {
        let set = CompressionSet::default_cactus();
        let log = MetricsLog {
            element_labels: set.elements().iter().map(CompressionElement::label).collect(),
            rows: vec![],
        };
        assert_eq!(
            log.header(),
            "iter,epoch,lambda,eps,loss_total,loss_std,loss_cert,elem_0_identity,elem_1_prune,train_acc"
        );
    }
}
