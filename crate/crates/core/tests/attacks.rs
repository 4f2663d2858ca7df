mod common;

use common::{cross_entropy, interval_loss, random_mlp, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certcomp_core::attack::{
    awp_loss, awp_perturb, pgd_attack, sabr_loss, sabr_select, AttackConfig, AwpConfig, SabrSelection,
};
use certcomp_core::bounds::{ibp_forward, ibp_loss, InputBox};
use certcomp_core::train::combined_loss;
use certcomp_core::{Architecture, LayerSpec, NetView, Network, Tensor};

fn dense(inp: usize, out: usize, bias: bool) -> LayerSpec {
    LayerSpec::Dense { inp, out, bias }
}

#[test]
fn pgd_finds_the_linear_worst_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = Architecture::new(vec![4], vec![dense(4, 2, true)]);
    for _ in 0..50 {
        let mut net = Network::build(arch.clone(), 0).unwrap();
        let theta: Vec<f64> = (0..10)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random() { v } else { -v }
            })
            .collect();
        net.set_flat_params(&theta).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let y = rng.random_range(0..2);
        let radius = rng.random_range(0.01..0.2);
        let mut cfg = AttackConfig::new(radius);
        cfg.pgd_steps = 20;
        let adv = pgd_attack(&NetView::new(&net), &Tensor::vector(x.clone()), &[y], radius, &cfg, &mut rng).unwrap();
        let other = 1 - y;
        for i in 0..4 {
            let diff = theta[y * 4 + i] - theta[other * 4 + i];
            let expect = (x[i] - radius * diff.signum()).clamp(0.0, 1.0);
            assert!((adv.data()[i] - expect).abs() < 1e-12, "coordinate {i}: {} vs {expect}", adv.data()[i]);
        }
    }
}

#[test]
fn sabr_is_no_looser_than_full_ball_ibp() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..30 {
        let net = Network::build(Architecture::mlp(&[3, 8, 3]), seed).unwrap();
        let x = Tensor::vector((0..3).map(|_| rng.random()).collect());
        let y = rng.random_range(0..3);
        let eps = 0.1;
        let cfg = AttackConfig::new(eps);
        let sabr = sabr_loss(&NetView::new(&net), &x, &[y], &cfg, &mut rng).unwrap();
        let full = ibp_loss(&ibp_forward(&net, &InputBox::new(x, eps).unwrap()).unwrap(), y).unwrap();
        assert!(sabr <= full + 1e-12, "{sabr} > {full}");
    }
}

#[test]
fn zero_tau_is_cross_entropy_at_the_attack_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let net = random_mlp(&mut rng, seed);
        let x = Tensor::new(vec![2, net.input_len()], (0..2 * net.input_len()).map(|_| rng.random()).collect()).unwrap();
        let labels = [rng.random_range(0..net.classes()), rng.random_range(0..net.classes())];
        let cfg = AttackConfig::new(0.1).with_tau(0.0);
        let view = NetView::new(&net);
        let sel = sabr_select(&view, &x, &labels, &cfg, &mut rng.clone()).unwrap();
        let sabr = sabr_loss(&view, &x, &labels, &cfg, &mut rng).unwrap();
        let mlp = Mlp::of(&net);
        let d = net.input_len();
        let ce: f64 = (0..2).map(|i| cross_entropy(&mlp.forward(&sel.points.data()[i * d..(i + 1) * d]), labels[i])).sum::<f64>() / 2.0;
        assert!((sabr - ce).abs() < 1e-9, "{sabr} vs {ce}");
    }
}

/// Two weights, one input, two classes: `logits = [a·x, b·x]`.
fn toy(a: f64, b: f64) -> Network {
    let mut net = Network::build(Architecture::new(vec![1], vec![dense(1, 2, false)]), 0).unwrap();
    net.set_flat_params(&[a, b]).unwrap();
    net
}

/// Cross-entropy plus full-ball interval loss of the toy net, summed over a
/// batch and averaged.
fn toy_objective(a: f64, b: f64, xs: &[f64], ys: &[usize], eps: f64) -> f64 {
    let mlp = Mlp {
        layers: vec![(vec![vec![a], vec![b]], vec![0.0, 0.0])],
    };
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let lo = (x - eps).max(0.0);
            let hi = (x + eps).min(1.0);
            let (l, u) = mlp.interval(&[lo], &[hi]);
            cross_entropy(&mlp.forward(&[x]), y) + interval_loss(&l, &u, y)
        })
        .sum::<f64>()
        / xs.len() as f64
}

fn grid_max(a: f64, b: f64, eta: f64, steps: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..=2 * steps {
        let da = -eta + eta * i as f64 / steps as f64;
        for j in 0..=2 * steps {
            let db = -eta + eta * j as f64 / steps as f64;
            best = best.max(f(a + da, b + db));
        }
    }
    best
}

#[test]
fn one_step_weight_ascent_is_near_the_grid_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let xs: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let ys: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let eps = 0.05;
        let eta = rng.random_range(0.05..0.5);
        let net = toy(a, b);
        let x = Tensor::new(vec![3, 1], xs.clone()).unwrap();
        let sel = SabrSelection::fixed(&x, x.clone(), eps, eps);
        let delta = awp_perturb(&NetView::new(&net), &x, &ys, 0.5, &AwpConfig::new(eta), &sel).unwrap();
        let d = delta.delta();
        let got = toy_objective(a + d[0], b + d[1], &xs, &ys, eps);
        let best = grid_max(a, b, eta, 100, |p, q| toy_objective(p, q, &xs, &ys, eps));
        assert!(got >= 0.9 * best, "{got} < 0.9 · {best}");
    }
}

#[test]
fn weight_perturbation_never_lowers_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..30 {
        let net = random_mlp(&mut rng, seed);
        let d = net.input_len();
        let x = Tensor::new(vec![4, d], (0..4 * d).map(|_| rng.random()).collect()).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..net.classes())).collect();
        let lambda = rng.random_range(0.0..=1.0);
        let attack = AttackConfig::new(0.05);
        let mut cfg = AwpConfig::new(rng.random_range(0.001..0.1));
        cfg.steps = rng.random_range(1..4);
        let view = NetView::new(&net);
        let seed_rng = ChaCha8Rng::seed_from_u64(seed);
        let perturbed = awp_loss(&view, &x, &labels, lambda, &attack, &cfg, &mut seed_rng.clone()).unwrap();
        let clean = combined_loss(&view, &x, &labels, lambda, &attack, &mut seed_rng.clone()).unwrap();
        assert!(perturbed >= clean - 1e-12, "{perturbed} < {clean}");
    }
}
