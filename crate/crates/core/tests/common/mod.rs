//! Reference implementations for dense ReLU networks, written directly over
//! nested `Vec`s so they share no code with the library's kernels or tape.

#![allow(dead_code)]

use certcomp_core::{Architecture, LayerSpec, Network};
use rand::Rng;

/// Dense layers `(weights[out][in], bias[out])` with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Mlp {
    /// Read the network's dense layers from a flat parameter vector laid out
    /// as weight (row-major, out × in) then bias, layer by layer.
    pub fn from_flat(net: &Network, theta: &[f64]) -> Self {
        let mut pos = 0;
        let mut layers = Vec::new();
        for spec in net.layers() {
            match *spec {
                LayerSpec::Dense { inp, out, bias } => {
                    let w: Vec<Vec<f64>> = (0..out).map(|o| theta[pos + o * inp..pos + (o + 1) * inp].to_vec()).collect();
                    pos += inp * out;
                    let b = if bias {
                        let b = theta[pos..pos + out].to_vec();
                        pos += out;
                        b
                    } else {
                        vec![0.0; out]
                    };
                    layers.push((w, b));
                }
                LayerSpec::Relu => {}
                ref other => panic!("oracle handles dense/relu only, got {other:?}"),
            }
        }
        assert_eq!(pos, theta.len());
        Self { layers }
    }

    pub fn of(net: &Network) -> Self {
        Self::from_flat(net, &net.flat_params())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = w
                .iter()
                .zip(b)
                .map(|(row, bi)| row.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>() + bi)
                .collect();
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// Interval propagation by splitting each weight by sign.
    pub fn interval(&self, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut l, mut u) = (lo.to_vec(), hi.to_vec());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut nl = Vec::with_capacity(w.len());
            let mut nu = Vec::with_capacity(w.len());
            for (row, bi) in w.iter().zip(b) {
                let (mut a, mut c) = (*bi, *bi);
                for ((wk, lk), uk) in row.iter().zip(&l).zip(&u) {
                    if *wk >= 0.0 {
                        a += wk * lk;
                        c += wk * uk;
                    } else {
                        a += wk * uk;
                        c += wk * lk;
                    }
                }
                nl.push(a);
                nu.push(c);
            }
            if i + 1 < self.layers.len() {
                nl.iter_mut().for_each(|v| *v = v.max(0.0));
                nu.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            l = nl;
            u = nu;
        }
        (l, u)
    }
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Cross-entropy of the worst-case logits: lower bound for the true class,
/// upper bounds elsewhere.
pub fn interval_loss(l: &[f64], u: &[f64], y: usize) -> f64 {
    let z: Vec<f64> = (0..u.len()).map(|k| if k == y { l[k] } else { u[k] }).collect();
    cross_entropy(&z, y)
}

/// Box `[c − t, c + t]` inside `B(x, eps) ∩ [0, 1]`, where `t = min(tau,
/// half the feasible width)` and `c` is `p` pulled into the feasible range.
pub fn small_box(x: &[f64], p: &[f64], eps: f64, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for (&xi, &pi) in x.iter().zip(p) {
        let a = (xi - eps).max(0.0);
        let b = (xi + eps).min(1.0);
        let t = tau.min((b - a) / 2.0);
        let c = pi.clamp(a + t, b - t);
        lo.push((c - t).max(a));
        hi.push((c + t).min(b));
    }
    (lo, hi)
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = t[i];
            t[i] = orig + h;
            let up = f(&t);
            t[i] = orig - h;
            let down = f(&t);
            t[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn close(a: f64, n: f64, rel: f64, floor: f64) -> bool {
    let d = (a - n).abs();
    d <= floor || d / a.abs().max(n.abs()) < rel
}

/// Largest violation of `|a − b| ≤ floor or |a − b| / max(|a|, |b|) < rel`,
/// as `(index, analytic, numeric)`.
pub fn worst_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64) -> Option<(usize, f64, f64)> {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| !close(**a, **n, rel, floor))
        .map(|(i, (a, n))| (i, *a, *n))
}

#[derive(Debug, PartialEq)]
pub struct FdReport {
    /// First coordinate that fails, as `(index, analytic, central)`.
    pub mismatch: Option<(usize, f64, f64)>,
    /// Coordinates excused because a kink lies within `h`.
    pub kinks: usize,
}

/// Compare `analytic` with central differences of step `h`.
///
/// The losses are only piecewise smooth. When a ReLU or interval kink lies
/// within `h` of θ the central difference straddles it; such a coordinate
/// shows up as one-sided differences that disagree with each other, and it
/// passes if the analytic value matches the one-sided difference taken on
/// the kink-free side.
pub fn compare_fd(analytic: &[f64], f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64, rel: f64, floor: f64) -> FdReport {
    let mut t = theta.to_vec();
    let f0 = f(&t);
    let mut kinks = 0;
    for i in 0..theta.len() {
        let orig = t[i];
        t[i] = orig + h;
        let up = f(&t);
        t[i] = orig - h;
        let down = f(&t);
        t[i] = orig;
        let central = (up - down) / (2.0 * h);
        if close(analytic[i], central, rel, floor) {
            continue;
        }
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        let kink = !close(fwd, bwd, rel, floor);
        if kink && (close(analytic[i], fwd, rel, floor) || close(analytic[i], bwd, rel, floor)) {
            kinks += 1;
            continue;
        }
        return FdReport {
            mismatch: Some((i, analytic[i], central)),
            kinks,
        };
    }
    FdReport { mismatch: None, kinks }
}

/// Random dense ReLU net of one to three layers with at most 500
/// parameters.
pub fn random_mlp<R: Rng>(rng: &mut R, seed: u64) -> Network {
    loop {
        let depth = rng.random_range(1..=3);
        let mut widths = vec![rng.random_range(2..=6)];
        for _ in 1..depth {
            widths.push(rng.random_range(2..=12));
        }
        widths.push(rng.random_range(2..=4));
        let arch = Architecture::mlp(&widths);
        let net = Network::build(arch, seed).unwrap();
        if net.num_params() <= 500 {
            return net;
        }
    }
}

/// Uniform points in the unit cube, one `Vec` per sample.
pub fn random_inputs<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
}

pub mod grads {
    //! Analytic gradients from the library next to central differences of
    //! the reference losses.

    use super::*;
    use certcomp_core::attack::{sabr_select, sabr_loss_on, AttackConfig, SabrSelection};
    use certcomp_core::bounds::{ibp_forward_on, ibp_loss_on};
    use certcomp_core::train::{cactus_step, default_train_prune, CompressionSet};
    use certcomp_core::{NetView, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const H: f64 = 1e-5;
    pub const REL: f64 = 1e-4;
    pub const FLOOR: f64 = 1e-7;

    pub struct Problem {
        pub x: Vec<Vec<f64>>,
        pub labels: Vec<usize>,
        pub eps: f64,
        pub tau: f64,
        pub lambda: f64,
    }

    impl Problem {
        pub fn random<R: Rng>(rng: &mut R, net: &Network, n: usize) -> Self {
            let dim = net.input_len();
            let classes = net.classes();
            Self {
                x: random_inputs(rng, n, dim),
                labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
                eps: rng.random_range(0.02..0.2),
                tau: 0.0,
                lambda: rng.random_range(0.2..0.8),
            }
            .with_tau_fraction(0.4)
        }

        fn with_tau_fraction(mut self, f: f64) -> Self {
            self.tau = f * self.eps;
            self
        }

        pub fn batch(&self) -> Tensor {
            let dim = self.x[0].len();
            Tensor::new(vec![self.x.len(), dim], self.x.concat()).unwrap()
        }

        pub fn attack(&self) -> AttackConfig {
            AttackConfig::new(self.eps).with_tau(self.tau)
        }
    }

    fn grad_of(net: &Network, mask: Option<&[f64]>, build: impl FnOnce(&NetView<'_>, &mut Tape, &certcomp_core::network::BoundParams) -> certcomp_core::Var) -> Vec<f64> {
        let view = NetView::new(net).masked(mask);
        let mut tape = Tape::new();
        let params = view.bind(&mut tape, true).unwrap();
        let out = build(&view, &mut tape, &params);
        let g = tape.backward(out).unwrap();
        params.flat_grad(&g).unwrap()
    }

    fn ce_ref(mlp: &Mlp, p: &Problem) -> f64 {
        p.x.iter().zip(&p.labels).map(|(x, &y)| cross_entropy(&mlp.forward(x), y)).sum::<f64>() / p.x.len() as f64
    }

    fn sabr_ref(mlp: &Mlp, p: &Problem, points: &Tensor) -> f64 {
        let dim = p.x[0].len();
        p.x.iter()
            .zip(&p.labels)
            .enumerate()
            .map(|(i, (x, &y))| {
                let (lo, hi) = small_box(x, &points.data()[i * dim..(i + 1) * dim], p.eps, p.tau);
                let (l, u) = mlp.interval(&lo, &hi);
                interval_loss(&l, &u, y)
            })
            .sum::<f64>()
            / p.x.len() as f64
    }

    pub type Mismatch = FdReport;

    pub fn cross_entropy_check(net: &Network, p: &Problem) -> Mismatch {
        let x = p.batch();
        let g = grad_of(net, None, |view, tape, params| {
            let xv = tape.constant(x.clone());
            let logits = view.forward_on(tape, params, xv).unwrap();
            let ce = tape.softmax_cross_entropy(logits, &p.labels).unwrap();
            tape.mean(ce).unwrap()
        });
        compare_fd(&g, |t| ce_ref(&Mlp::from_flat(net, t), p), &net.flat_params(), H, REL, FLOOR)
    }

    pub fn interval_check(net: &Network, p: &Problem) -> Mismatch {
        let x = p.batch();
        let lo = x.map(|v| (v - p.eps).max(0.0));
        let hi = x.map(|v| (v + p.eps).min(1.0));
        let g = grad_of(net, None, |view, tape, params| {
            let (l, h) = (tape.constant(lo.clone()), tape.constant(hi.clone()));
            let (l, u) = ibp_forward_on(view, tape, params, l, h).unwrap();
            let loss = ibp_loss_on(tape, l, u, &p.labels).unwrap();
            tape.mean(loss).unwrap()
        });
        // a box around x itself is the full ball
        compare_fd(
            &g,
            |t| {
                let q = Problem {
                    x: p.x.clone(),
                    labels: p.labels.clone(),
                    eps: p.eps,
                    tau: p.eps,
                    lambda: p.lambda,
                };
                sabr_ref(&Mlp::from_flat(net, t), &q, &x)
            },
            &net.flat_params(),
            H,
            REL,
            FLOOR,
        )
    }

    pub fn sabr_check(net: &Network, p: &Problem, seed: u64) -> Mismatch {
        let x = p.batch();
        let view = NetView::new(net);
        let sel = sabr_select(&view, &x, &p.labels, &p.attack(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let g = grad_of(net, None, |view, tape, params| {
            let loss = sabr_loss_on(view, tape, params, &sel, &p.labels).unwrap();
            tape.mean(loss).unwrap()
        });
        compare_fd(&g, |t| sabr_ref(&Mlp::from_flat(net, t), p, &sel.points), &net.flat_params(), H, REL, FLOOR)
    }

    /// Full network plus a half-pruned copy, each with its own boxes.
    pub fn cactus_check(net: &Network, p: &Problem, seed: u64) -> Mismatch {
        let x = p.batch();
        let mut set = CompressionSet::fixed(&[0.5], default_train_prune());
        let rng = ChaCha8Rng::seed_from_u64(seed);
        set.refresh(net, 0, &mut rng.clone(), None).unwrap();
        let out = cactus_step(net, &set, &x, &p.labels, p.lambda, &p.attack(), &rng, true, None).unwrap();
        let masks: Vec<Vec<f64>> = set
            .active()
            .map(|(_, e)| e.mask().map(|m| m.values().to_vec()).unwrap_or_else(|| vec![1.0; net.num_params()]))
            .collect();
        let sels: Vec<SabrSelection> = masks
            .iter()
            .map(|m| {
                let view = NetView::new(net).masked(Some(m));
                sabr_select(&view, &x, &p.labels, &p.attack(), &mut rng.clone()).unwrap()
            })
            .collect();
        let loss = |t: &[f64]| {
            masks
                .iter()
                .zip(&sels)
                .map(|(m, sel)| {
                    let masked: Vec<f64> = t.iter().zip(m).map(|(a, b)| a * b).collect();
                    let mlp = Mlp::from_flat(net, &masked);
                    p.lambda * ce_ref(&mlp, p) + (1.0 - p.lambda) * sabr_ref(&mlp, p, &sel.points)
                })
                .sum::<f64>()
                / masks.len() as f64
        };
        let theta = net.flat_params();
        let value_gap = (loss(&theta) - out.total).abs();
        if value_gap > 1e-10 {
            return FdReport {
                mismatch: Some((usize::MAX, out.total, loss(&theta))),
                kinks: 0,
            };
        }
        compare_fd(out.grad.as_ref().unwrap(), loss, &theta, H, REL, FLOOR)
    }

    /// Random biases so that the bias gradients are exercised off zero.
    pub fn jitter_biases<R: Rng>(net: &mut Network, rng: &mut R) {
        let mut theta = net.flat_params();
        for (i, role) in net.flat_roles().iter().enumerate() {
            if *role == certcomp_core::ParamRole::Bias {
                theta[i] = rng.random_range(-0.3..0.3);
            }
        }
        net.set_flat_params(&theta).unwrap();
    }
}
