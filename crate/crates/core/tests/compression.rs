use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certcomp_core::compress::{
    apply_mask, calibrate_quant, compute_mask, materialize, ste_quantize, PruneSpec, QuantSpec, Score, Scope, Structure,
};
use certcomp_core::{Architecture, NetView, Network, ParamRole, Tape, Tensor};

/// Flat indices of the `count` smallest |w| among `indices`, ties to the
/// lower index.
fn smallest(flat: &[f64], indices: &[usize], count: usize) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.sort_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs()).then(a.cmp(&b)));
    v.truncate(count);
    v.sort_unstable();
    v
}

fn weight_ranges(net: &Network) -> Vec<std::ops::Range<usize>> {
    let offsets = net.param_offsets();
    net.params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.role == ParamRole::Weight)
        .map(|(i, p)| offsets[i]..offsets[i] + p.value.len())
        .collect()
}

fn zeros(values: &[f64]) -> Vec<usize> {
    (0..values.len()).filter(|&k| values[k] == 0.0).collect()
}

#[test]
fn unstructured_sparsity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &ratio in &[0.25, 0.5, 0.75, 0.9, 0.95, 0.99] {
        for seed in 0..10 {
            let widths = [rng.random_range(2..20), rng.random_range(1..30), rng.random_range(2..5)];
            let net = Network::build(Architecture::mlp(&widths), seed).unwrap();
            for scope in [Scope::Global, Scope::Local] {
                let mask = compute_mask(&net, &PruneSpec::new(ratio, scope, Structure::Unstructured, Score::L1), None).unwrap();
                let ranges = weight_ranges(&net);
                let d: usize = ranges.iter().map(|r| r.len()).sum();
                let expect: usize = match scope {
                    Scope::Global => (ratio * d as f64).floor() as usize,
                    Scope::Local => ranges.iter().map(|r| (ratio * r.len() as f64).floor() as usize).sum(),
                };
                assert_eq!(mask.pruned(), expect);
                assert_eq!(zeros(mask.values()).len(), expect);
                if scope == Scope::Global {
                    assert_eq!(mask.sparsity(), (ratio * d as f64).floor() / d as f64);
                }
            }
        }
    }
}

#[test]
fn masks_match_a_sort_oracle() {
    for seed in 0..40 {
        let net = Network::build(Architecture::mlp(&[6, 9, 3]), seed).unwrap();
        let flat = net.flat_params();
        let ranges = weight_ranges(&net);
        let ratio = [0.1, 0.3, 0.5, 0.8][seed as usize % 4];

        let all: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let global = compute_mask(&net, &PruneSpec::new(ratio, Scope::Global, Structure::Unstructured, Score::L1), None).unwrap();
        assert_eq!(zeros(global.values()), smallest(&flat, &all, (ratio * all.len() as f64).floor() as usize));

        let local = compute_mask(&net, &PruneSpec::local_l1(ratio), None).unwrap();
        let mut expect: Vec<usize> = ranges
            .iter()
            .flat_map(|r| {
                let idx: Vec<usize> = r.clone().collect();
                smallest(&flat, &idx, (ratio * idx.len() as f64).floor() as usize)
            })
            .collect();
        expect.sort_unstable();
        assert_eq!(zeros(local.values()), expect);

        // l2 ranks the same as l1 elementwise
        let l2 = compute_mask(&net, &PruneSpec::new(ratio, Scope::Global, Structure::Unstructured, Score::L2), None).unwrap();
        assert_eq!(l2.values(), global.values());
    }
}

#[test]
fn structured_pruning_keeps_every_layer_alive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..100 {
        let widths = [4, rng.random_range(1..12), rng.random_range(1..12), 3];
        let net = Network::build(Architecture::mlp(&widths), seed).unwrap();
        let ratio = rng.random_range(0.0..0.99);
        for spec in [
            PruneSpec::new(ratio, Scope::Local, Structure::StructuredChannel, Score::L1),
            PruneSpec::global_structured_l2(ratio),
        ] {
            let Ok(mask) = compute_mask(&net, &spec, None) else {
                // refusing is allowed; emptying a layer is not
                assert_eq!(spec.scope, Scope::Global);
                continue;
            };
            for r in weight_ranges(&net) {
                assert!(mask.values()[r].contains(&1.0), "layer emptied at ratio {ratio}");
            }
        }
    }
}

#[test]
fn masked_view_matches_materialized_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let net = Network::build(Architecture::mlp(&[5, 12, 7, 4]), seed).unwrap();
        let mask = compute_mask(&net, &PruneSpec::local_l1(0.6), None).unwrap();
        let dense = materialize(&net, &mask).unwrap();
        let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random()).collect()).unwrap();
        let a = apply_mask(&net, &mask).unwrap().logits(&x).unwrap();
        let b = NetView::new(&dense).logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn quantization_error_is_half_a_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let bits = rng.random_range(2..=8);
        let weights: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = calibrate_quant(&weights, bits).unwrap();
        for &w in &weights {
            assert!(spec.in_range(w));
            assert!((spec.quantize(w) - w).abs() <= spec.q_step() / 2.0);
        }
        let (lo, hi) = spec.range();
        let wmin = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let wmax = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - wmin).abs() < 1e-12 && (hi - wmax).abs() < 1e-12);
    }
}

#[test]
fn straight_through_gradient_is_blocked_outside_the_range() {
    let spec = QuantSpec::new(3, 0.25, 0.0).unwrap();
    let (lo, hi) = spec.range();
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::vector(vec![lo - 0.3, -0.3, 0.1, 0.6, hi + 0.2]));
    let q = ste_quantize(&mut tape, w, &spec).unwrap();
    assert_eq!(tape.value(q).data(), &[lo, -0.25, 0.0, 0.5, hi]);
    let loss = tape.sum(q).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn quantizer_lands_on_the_grid(bits in 2u32..=8, scale in 1e-4f64..1.0, zero in -1.0f64..1.0, t in -1.0f64..1.0) {
        let spec = QuantSpec::new(bits, scale, zero).unwrap();
        let (lo, hi) = spec.range();
        let w = lo + (t + 1.0) / 2.0 * (hi - lo);
        let q = spec.quantize(w);
        prop_assert!((q - w).abs() <= scale / 2.0);
        prop_assert!(q >= lo && q <= hi);
        prop_assert_eq!(spec.quantize(q), q);
        let code = spec.code(w);
        prop_assert!(code >= spec.q_min && code <= spec.q_max);
    }

    #[test]
    fn clamping_outside_the_range(bits in 2u32..=8, scale in 1e-3f64..1.0, over in 0.0f64..5.0) {
        let spec = QuantSpec::new(bits, scale, 0.0).unwrap();
        let (lo, hi) = spec.range();
        prop_assert_eq!(spec.quantize(hi + over), hi);
        prop_assert_eq!(spec.quantize(lo - over), lo);
    }

    #[test]
    fn pruning_is_monotone_in_ratio(seed in 0u64..1000, a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let net = Network::build(Architecture::mlp(&[4, 10, 3]), seed).unwrap();
        let (small, large) = if a <= b { (a, b) } else { (b, a) };
        let m1 = compute_mask(&net, &PruneSpec::local_l1(small), None).unwrap();
        let m2 = compute_mask(&net, &PruneSpec::local_l1(large), None).unwrap();
        for (x, y) in m1.values().iter().zip(m2.values()) {
            prop_assert!(x >= y);
        }
    }
}
