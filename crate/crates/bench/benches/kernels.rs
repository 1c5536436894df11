use criterion::{black_box, criterion_group, criterion_main, Criterion};

use segadapt::config::AdaptConfig;
use segadapt::engine::adapt_stream;
use segadapt::model::BnMode;
use segadapt::params::{ParamGroup, Session};
use segadapt::Graph;
use segadapt_bench::{network, ramp, target_scenes};

fn conv(c: &mut Criterion) {
    let x = ramp(&[4, 32, 16, 16], 1);
    let w = ramp(&[32, 32, 3, 3], 2);
    c.bench_function("conv2d 4x32x16x16 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv).map(|v| v[0]))
        })
    });
}

fn forward(c: &mut Criterion) {
    let net = network(true);
    let x = ramp(&[4, 3, 64, 64], 3).map(|v| v * 0.5 + 0.5);
    c.bench_function("network forward batch 4", |b| {
        b.iter(|| {
            let mut s = Session::new(&net.params, &[]);
            let xv = s.graph.constant(x.clone());
            let f = net.forward(&mut s, xv, BnMode::Eval, true).unwrap();
            black_box(s.graph.value(f.o_s.unwrap()).data()[0])
        })
    });
    c.bench_function("network train step batch 4", |b| {
        b.iter(|| {
            let mut s = Session::new(&net.params, &ParamGroup::ALL);
            let xv = s.graph.constant(x.clone());
            let f = net.forward(&mut s, xv, BnMode::Train, true).unwrap();
            let l = s.graph.mean(f.o_s.unwrap());
            s.graph.backward(l).unwrap();
            black_box(s.grads().len())
        })
    });
}

fn adapt(c: &mut Criterion) {
    let net = network(true);
    let scenes = target_scenes(4);
    let cfg = AdaptConfig::default();
    let mut group = c.benchmark_group("adapt");
    group.sample_size(10);
    group.bench_function("trans-consistency 4 samples", |b| {
        b.iter(|| black_box(adapt_stream(&net, &scenes, &cfg, 0, "bench").unwrap().final_miou))
    });
    group.finish();
}

criterion_group!(benches, conv, forward, adapt);
criterion_main!(benches);
