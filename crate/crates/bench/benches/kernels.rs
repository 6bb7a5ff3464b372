use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use stereo_core::volume::{build_allpair_corr, build_group_corr, build_pyramids, lookup};
use stereo_core::{Tape, TensorOf};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> TensorOf<f32> {
    let n: usize = shape.iter().product();
    TensorOf::new(shape, (0..n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap()
}

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    // the recurrent unit's hottest shape: 3x3, 64 -> 64 at quarter resolution
    let (ci, co, h, w) = (64usize, 64usize, 16usize, 32usize);
    group.throughput(Throughput::Elements((co * ci * 9 * h * w) as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, vec![ci, h, w]);
    let wt = rand_tensor(&mut rng, vec![co, ci, 3, 3]);
    let b = rand_tensor(&mut rng, vec![co]);
    group.bench_function("fwd_64x64_quarter", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.constant(wt.clone());
            let bi = tape.constant(b.clone());
            black_box(tape.conv2d_chw(xi, wi, bi, 1, 1).unwrap());
        })
    });
    group.bench_function("fwd_bwd_64x64_quarter", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(wt.clone());
            let bi = tape.leaf(b.clone());
            let y = tape.conv2d_chw(xi, wi, bi, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wi).unwrap().len());
        })
    });
    group.finish();
}

fn bench_correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlation");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fl = rand_tensor(&mut rng, vec![48, 16, 32]);
    let fr = rand_tensor(&mut rng, vec![48, 16, 32]);
    group.bench_function("group_corr_g8_d16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let l = tape.constant(fl.clone());
            let r = tape.constant(fr.clone());
            black_box(build_group_corr(&mut tape, l, r, 8, 16).unwrap());
        })
    });
    group.bench_function("allpair_corr", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let l = tape.constant(fl.clone());
            let r = tape.constant(fr.clone());
            black_box(build_allpair_corr(&mut tape, l, r).unwrap());
        })
    });
    group.finish();
}

fn bench_lookup(c: &mut Criterion) {
    let mut group = c.benchmark_group("lookup");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ve = rand_tensor(&mut rng, vec![8, 16, 16, 32]);
    let va = rand_tensor(&mut rng, vec![1, 32, 16, 32]);
    let dk = rand_tensor(&mut rng, vec![1, 16, 32]);
    group.bench_function("two_level_radius4", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let e = tape.constant(ve.clone());
            let a = tape.constant(va.clone());
            let d = tape.constant(dk.clone());
            let pyr = build_pyramids(&mut tape, e, a, 2).unwrap();
            black_box(lookup(&mut tape, &pyr, d, 4).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, bench_conv2d, bench_correlation, bench_lookup);
criterion_main!(benches);
