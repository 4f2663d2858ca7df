use certcomp_bench::{labels, uniform};
use certcomp_core::bounds::ibp_bounds;
use certcomp_core::train::cactus_step;
use certcomp_core::{Architecture, AttackConfig, CompressionSet, InputBox, NetView, Network};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ibp(c: &mut Criterion) {
    let mlp = Network::build(Architecture::mlp(&[784, 128, 128, 10]), 0).unwrap();
    let conv = Network::build(Architecture::conv_small(1, 28, 10), 0).unwrap();
    let x = uniform(&[64, 784], 1);
    let boxes = InputBox::new(x.clone(), 0.1).unwrap().bounds();
    c.bench_function("ibp mlp batch 64", |b| b.iter(|| ibp_bounds(&NetView::new(&mlp), &boxes).unwrap()));
    let img = InputBox::new(x.reshape(&[64, 1, 28, 28]).unwrap(), 0.1).unwrap().bounds();
    c.bench_function("ibp conv_small batch 64", |b| b.iter(|| ibp_bounds(&NetView::new(&conv), &img).unwrap()));
}

fn step(c: &mut Criterion) {
    let net = Network::build(Architecture::mlp(&[784, 128, 128, 10]), 0).unwrap();
    let x = uniform(&[16, 784], 2);
    let y = labels(16, 10, 3);
    let attack = AttackConfig::new(0.1);
    let rng = ChaCha8Rng::seed_from_u64(4);
    for (name, mut set) in [
        ("step identity", CompressionSet::identity()),
        ("step identity+prune", CompressionSet::default_cactus()),
    ] {
        set.refresh(&net, 0, &mut rng.clone(), None).unwrap();
        c.bench_function(name, |b| {
            b.iter(|| cactus_step(&net, &set, &x, &y, 0.75, &attack, &rng, true, None).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = ibp, step
}
criterion_main!(benches);
