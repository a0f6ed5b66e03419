//! Kernel benchmarks comparing the rayon data-parallel path against
//! single-threaded execution. Results are bitwise identical; only wall time
//! differs. Built without the `parallel` feature, only the sequential
//! variants run.

use criterion::{criterion_group, criterion_main, Criterion};

use cgnet::model::{ActKind, CgBlock, CgBlockConfig, ParamStore, Residual};
use cgnet::ops::{self, ConvSpec};
use cgnet::rng::Pcg32;
use cgnet::tensor::Tensor;

struct ConvCase {
    x: Tensor<f32>,
    w: Tensor<f32>,
    spec: ConvSpec,
}

fn conv_standard() -> ConvCase {
    let spec = ConvSpec::square(16, 16, 3, 1, 1, 1, 1, false);
    let mut rng = Pcg32::new(1, 0);
    ConvCase {
        x: Tensor::rand_normal(&mut rng, &[4, 16, 32, 32], 0.0, 1.0).unwrap(),
        w: Tensor::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 0.2).unwrap(),
        spec,
    }
}

fn conv_depthwise_dilated() -> ConvCase {
    let spec = ConvSpec::square(64, 64, 3, 1, 4, 4, 64, false);
    let mut rng = Pcg32::new(2, 0);
    ConvCase {
        x: Tensor::rand_normal(&mut rng, &[4, 64, 16, 16], 0.0, 1.0).unwrap(),
        w: Tensor::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 0.2).unwrap(),
        spec,
    }
}

fn block_case() -> (CgBlock, ParamStore<f32>, Tensor<f32>) {
    let cfg = CgBlockConfig {
        in_channels: 64,
        out_channels: 64,
        dilation: 4,
        downsample: false,
        residual: Residual::Global,
        use_sur: true,
        use_glo: true,
        interchannel_1x1: false,
        glo_reduction: 16,
        activation: ActKind::Prelu,
    };
    let mut store = ParamStore::new();
    let mut rng = Pcg32::new(3, 0);
    let block = CgBlock::new(&mut store, &mut rng, "blk", cfg).unwrap();
    let x = Tensor::rand_normal(&mut rng, &[4, 64, 16, 16], 0.0, 1.0).unwrap();
    (block, store, x)
}

/// One execution mode: plain calls, or inside a fixed-size worker pool.
enum Exec {
    #[cfg(not(feature = "parallel"))]
    Direct,
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool),
}

impl Exec {
    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self {
            #[cfg(not(feature = "parallel"))]
            Exec::Direct => f(),
            #[cfg(feature = "parallel")]
            Exec::Pool(p) => p.install(f),
        }
    }
}

fn variants() -> Vec<(&'static str, Exec)> {
    #[cfg(feature = "parallel")]
    {
        let pool = |n| {
            Exec::Pool(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .unwrap(),
            )
        };
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2);
        vec![("sequential", pool(1)), ("parallel", pool(workers))]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Exec::Direct)]
    }
}

fn bench_conv(c: &mut Criterion) {
    for (name, case) in [
        ("conv3x3_16ch_32px", conv_standard()),
        ("conv3x3_dw_d4_64ch", conv_depthwise_dilated()),
    ] {
        let mut group = c.benchmark_group(name);
        for (variant, exec) in variants() {
            group.bench_function(variant, |b| {
                b.iter(|| exec.run(|| ops::conv2d_forward(&case.x, &case.w, None, &case.spec).unwrap()))
            });
        }
        group.finish();
    }
}

fn bench_conv_backward(c: &mut Criterion) {
    let case = conv_standard();
    let y = ops::conv2d_forward(&case.x, &case.w, None, &case.spec).unwrap();
    let mut rng = Pcg32::new(9, 0);
    let grad = Tensor::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();
    let mut group = c.benchmark_group("conv3x3_backward");
    for (variant, exec) in variants() {
        group.bench_function(variant, |b| {
            b.iter(|| exec.run(|| ops::conv2d_backward(&grad, &case.x, &case.w, &case.spec).unwrap()))
        });
    }
    group.finish();
}

fn bench_batchnorm(c: &mut Criterion) {
    let mut rng = Pcg32::new(4, 0);
    let x = Tensor::<f32>::rand_normal(&mut rng, &[4, 64, 32, 32], 0.0, 1.0).unwrap();
    let gamma = Tensor::full(&[64], 1.0f32).unwrap();
    let beta = Tensor::zeros(&[64]).unwrap();
    let mut group = c.benchmark_group("batchnorm_train");
    for (variant, exec) in variants() {
        group.bench_function(variant, |b| {
            b.iter(|| {
                exec.run(|| {
                    let mut rm = Tensor::zeros(&[64]).unwrap();
                    let mut rv = Tensor::full(&[64], 1.0f32).unwrap();
                    ops::batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1)
                        .unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_block(c: &mut Criterion) {
    let (block, store, x) = block_case();
    let mut group = c.benchmark_group("cg_block_forward");
    for (variant, exec) in variants() {
        group.bench_function(variant, |b| {
            let mut store = store.clone();
            b.iter(|| exec.run(|| block.forward_train(&x, &mut store).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_conv,
    bench_conv_backward,
    bench_batchnorm,
    bench_block
);
criterion_main!(benches);
