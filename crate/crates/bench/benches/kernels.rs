use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mirrorseg::inference::sliding_window_predict;
use mirrorseg::metrics::connected_components;
use mirrorseg::optimize::pet_loss;
use mirrorseg::{Connectivity, Dims, Graph, MirrorNet, Modality};
use mirrorseg_bench::{desk_network, random_mask, uniform_tensor, uniform_volume};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    group.sample_size(10);
    for (cin, cout, p) in [(1, 8, 32), (8, 8, 32), (16, 16, 16)] {
        let x = uniform_tensor(Dims::cube(1, cin, p), 1);
        let w = uniform_tensor(Dims::new(cout, cin, 3, 3, 3), 2);
        let b = uniform_tensor(Dims::new(1, 1, 1, 1, cout), 3);
        let id = format!("{cin}->{cout} @ {p}^3");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv, bv) = (g.input(&x).unwrap(), g.input(&w).unwrap(), g.input(&b).unwrap());
                g.conv3d(xv, wv, bv, 1, 1).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward+backward", &id), |bench| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.leaf(x.dims(), x.data().to_vec(), true).unwrap();
                let wv = g.leaf(w.dims(), w.data().to_vec(), true).unwrap();
                let bv = g.leaf(b.dims(), b.data().to_vec(), true).unwrap();
                let y = g.conv3d(xv, wv, bv, 1, 1).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn components(c: &mut Criterion) {
    let mut group = c.benchmark_group("connected_components");
    let mask = random_mask([64, 64, 64], 0.3, 4);
    for conn in Connectivity::ALL {
        group.bench_function(BenchmarkId::new("64^3", format!("{conn:?}")), |bench| {
            bench.iter(|| connected_components(&mask, conn).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("mirror_net");
    group.sample_size(10);
    let net = MirrorNet::new(desk_network(), 5).unwrap();
    let ct = uniform_tensor(Dims::cube(1, 1, 32), 6);
    let pet = uniform_tensor(Dims::cube(1, 1, 32), 7);
    let target: Vec<f32> = (0..32 * 32 * 32).map(|i| (i % 17 == 0) as u8 as f32).collect();
    group.bench_function("lesion step 32^3", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = g.bind(net.store(), |n| n.starts_with("pet/")).unwrap();
            let (cv, pv) = (g.input(&ct).unwrap(), g.input(&pet).unwrap());
            let out = net.ct_graph(&mut g, &p, cv).unwrap();
            let logits = net.pet_graph(&mut g, &p, pv, out.bottleneck).unwrap();
            let loss = pet_loss(&mut g, logits, &target, 1e-5).unwrap();
            g.backward(loss).unwrap()
        })
    });
    let ct_v = uniform_volume([64, 64, 64], Modality::CtHu, 8);
    let pet_v = uniform_volume([64, 64, 64], Modality::PetSuv, 9);
    group.bench_function("sliding window 64^3", |bench| {
        bench.iter(|| sliding_window_predict(&net, &ct_v, &pet_v, 32, 0.125).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, components, network);
criterion_main!(benches);
