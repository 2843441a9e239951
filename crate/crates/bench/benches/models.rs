use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tinyvid::dit::{text, Dit, DitConfig, DitExample};
use tinyvid::framepack::{pack, ExampleDesc, PackRequest};
use tinyvid::numerics::{Graph, Rng, Tensor};
use tinyvid::vae3d::{Vae, VaeConfig};

fn framepack(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let descs: Vec<ExampleDesc> = (0..256)
        .map(|_| ExampleDesc { text_len: 4, grid: [[1, 2, 3, 5][rng.below(4)], 4, 4] })
        .collect();
    let req = PackRequest { examples: descs, capacity: 96, patch: 2 };
    c.bench_function("pack_ffd_256", |b| b.iter(|| black_box(pack(&req).unwrap())));
}

fn vae(c: &mut Criterion) {
    let (vae, ps) = Vae::new(VaeConfig::default(), 1).unwrap();
    let video: Tensor<f32> = Rng::new(2).uniform_tensor(&[17, 32, 32, 3], -1.0, 1.0);
    let z = vae.encode_video(&ps, &video).unwrap().mean;
    let mut group = c.benchmark_group("vae");
    group.sample_size(10);
    group.bench_function("encode_17x32x32", |b| b.iter(|| black_box(vae.encode_video(&ps, &video).unwrap())));
    group.bench_function("decode_17x32x32", |b| b.iter(|| black_box(vae.decode_latent(&ps, &z).unwrap())));
    group.finish();
}

fn dit(c: &mut Criterion) {
    let (dit, ps) = Dit::new(DitConfig::default(), 1).unwrap();
    let mut rng = Rng::new(3);
    let ex = DitExample {
        latent: rng.normal_tensor(&[5, 4, 4, dit.cfg.latent_channels], 1.0),
        text: text::caption_tokens(0, 0, 1).unwrap(),
        timestep: 500.0,
    };
    let mut group = c.benchmark_group("dit");
    group.bench_function("forward_5x4x4", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            black_box(dit.forward_single(&mut g, &ps, &ex).unwrap())
        })
    });
    group.bench_function("forward_backward_5x4x4", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let out = dit.forward_single(&mut g, &ps, &ex).unwrap();
            let sq = g.square(out);
            let loss = g.sum(sq);
            black_box(g.backward(loss).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, framepack, vae, dit);
criterion_main!(benches);
