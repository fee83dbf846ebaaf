//! Criterion benchmarks for the hot kernels: GEMM, convolution, batch norm,
//! image rotation, phantom synthesis, and a whole training step.

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use nigra_core::augment::{rotate_image, Angle, Interp};
use nigra_core::data::{generate_phantom, ClassLabel, PhantomParams};
use nigra_core::layers::{
    batchnorm_forward, conv2d_backward, conv2d_forward, BnParams, ConvSpec,
};
use nigra_core::model::{build_alexnet, Network, Scale};
use nigra_core::tensor::gemm_nn;
use nigra_core::trainer::{sgd_step, zero_velocity, TrainConfig};
use nigra_core::{SeededRng, Shape, Tensor};

fn random_tensor(dims: &[usize], rng: &mut SeededRng) -> Tensor {
    let shape = Shape::new(dims).unwrap();
    let data: Vec<f64> = (0..shape.numel()).map(|_| rng.standard_normal()).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn bench_gemm(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let (m, k, n) = (96, 363, 729);
    let a: Vec<f64> = (0..m * k).map(|_| rng.standard_normal()).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.standard_normal()).collect();
    let mut out = vec![0.0; m * n];
    c.bench_function("gemm_nn 96x363x729", |bencher| {
        bencher.iter(|| {
            gemm_nn(m, k, n, black_box(&a), black_box(&b), &mut out);
            black_box(out[0]);
        })
    });
}

fn conv_fixture(rng: &mut SeededRng) -> (Tensor, ConvSpec) {
    let x = random_tensor(&[8, 16, 16, 16], rng);
    let w = random_tensor(&[32, 16, 3, 3], rng);
    let b = random_tensor(&[32], rng);
    (x, ConvSpec::new(16, 32, (3, 3), (1, 1), (1, 1), w, b).unwrap())
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let (x, spec) = conv_fixture(&mut rng);
    c.bench_function("conv2d_forward 8x16x16x16 k3", |bencher| {
        bencher.iter(|| conv2d_forward(black_box(&x), &spec).unwrap())
    });
    let grad = random_tensor(&[8, 32, 16, 16], &mut rng);
    c.bench_function("conv2d_backward 8x16x16x16 k3", |bencher| {
        bencher.iter(|| conv2d_backward(black_box(&x), &spec, black_box(&grad)).unwrap())
    });
}

fn bench_batchnorm(c: &mut Criterion) {
    let mut rng = SeededRng::new(3);
    let x = random_tensor(&[16, 32, 16, 16], &mut rng);
    let p = BnParams::new(32).unwrap();
    c.bench_function("batchnorm_forward 16x32x16x16", |bencher| {
        bencher.iter_batched(
            || p.clone(),
            |mut p| batchnorm_forward(black_box(&x), &mut p).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_rotate(c: &mut Criterion) {
    let params = PhantomParams::new(ClassLabel::Pd, 4);
    let img = generate_phantom(&params).unwrap();
    let angle = Angle::new(45.0).unwrap();
    c.bench_function("rotate_image 64x64 45deg bilinear", |bencher| {
        bencher.iter(|| rotate_image(black_box(&img), angle, Interp::Bilinear, 0))
    });
}

fn bench_phantom(c: &mut Criterion) {
    let params = PhantomParams::new(ClassLabel::Msa, 5);
    c.bench_function("generate_phantom 64x64", |bencher| {
        bencher.iter(|| generate_phantom(black_box(&params)).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let spec = build_alexnet(3, Scale::Mini).unwrap();
    let mut net = Network::init(spec, 6).unwrap();
    let mut velocity = zero_velocity(&mut net);
    let mut rng = SeededRng::new(7);
    let batch = random_tensor(&[8, 1, 64, 64], &mut rng);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    c.bench_function("train step mini alexnet batch 8", |bencher| {
        bencher.iter(|| {
            let pass = net.forward_train(black_box(&batch), &labels).unwrap();
            let grads = net.backward(&pass).unwrap();
            sgd_step(&mut net, &grads, &mut velocity, &cfg).unwrap();
            black_box(pass.loss);
        })
    });
}

criterion_group!(
    kernels,
    bench_gemm,
    bench_conv,
    bench_batchnorm,
    bench_rotate,
    bench_phantom,
    bench_train_step
);
criterion_main!(kernels);
