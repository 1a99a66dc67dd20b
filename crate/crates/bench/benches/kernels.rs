use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hazefork::metrics::{ciede2000, ssim};
use hazefork::net::{images_to_tensor, DehazeNet, NetworkSpec};
use hazefork::nn::{Conv2d, ConvTranspose2d, Layer, Mode, Tensor4};
use hazefork::regularize::{build_system, solve_cg, CgOptions, EnergyProblem};
use hazefork::synth::procedural_scene;
use hazefork::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn convolutions(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor4::<f32>::uniform([8, 32, 32, 32], 1.0, &mut rng);
    let mut conv = Conv2d::<f32>::new(32, 64, 3, 1, 1, &mut rng);
    c.bench_function("conv 32->64 3x3, 8x32x32", |b| b.iter(|| conv.infer(&x).unwrap()));
    c.bench_function("conv forward+backward", |b| {
        b.iter(|| {
            let y = conv.forward(&x, Mode::Train).unwrap();
            conv.backward(&y).unwrap()
        })
    });
    let small = Tensor4::<f32>::uniform([8, 64, 16, 16], 1.0, &mut rng);
    let deconv = ConvTranspose2d::<f32>::new(64, 64, 4, 2, 1, &mut rng);
    c.bench_function("transposed conv 64->64 4x4/2, 8x16x16", |b| b.iter(|| deconv.infer(&small).unwrap()));
}

fn network(c: &mut Criterion) {
    let net = DehazeNet::<f32>::new(&NetworkSpec::default(), 0).unwrap();
    let patches: Vec<Image> = (0..16).map(|i| procedural_scene(64, 64, i).unwrap().0).collect();
    let input = images_to_tensor(&patches).unwrap();
    c.bench_function("network inference, 16 patches", |b| b.iter(|| net.infer(&input).unwrap()));
}

fn cg(c: &mut Criterion) {
    let mut group = c.benchmark_group("cg solve");
    group.sample_size(10);
    for side in [64usize, 128] {
        let (guide, _) = procedural_scene(side, side, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let observed: Vec<f32> = (0..side * side).map(|_| rng.gen()).collect();
        let mask: Vec<bool> = (0..side * side).map(|_| rng.gen_bool(0.3)).collect();
        let problem = EnergyProblem {
            guide: &guide,
            observed: &observed,
            mask: &mask,
            lambda: 1.0,
            epsilon: 1e-3,
        };
        let system = build_system(&problem).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(side), &system, |b, s| {
            b.iter(|| solve_cg(s, None, &CgOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn quality(c: &mut Criterion) {
    let (a, _) = procedural_scene(256, 256, 1).unwrap();
    let b_img = Image::from_fn(256, 256, |y, x| {
        let p = a.pixel(y, x);
        [0.9 * p[0] + 0.05, 0.9 * p[1] + 0.05, 0.9 * p[2] + 0.05]
    })
    .unwrap();
    c.bench_function("ssim 256x256", |b| b.iter(|| ssim(&a, &b_img).unwrap()));
    c.bench_function("ciede2000 256x256", |b| b.iter(|| ciede2000(&a, &b_img).unwrap()));
}

criterion_group!(benches, convolutions, network, cg, quality);
criterion_main!(benches);
