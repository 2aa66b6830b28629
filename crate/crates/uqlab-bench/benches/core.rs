//! Hot-path benchmarks: forward passes, loss gradients, MC prediction,
//! and a short training run.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uqlab_core::data::{generate_regression, RegressionTaskSpec};
use uqlab_core::graph::backward;
use uqlab_core::losses::gaussian_nll;
use uqlab_core::model::{
    Activation, Head, InputSpec, ModelInput, ModelSpec, StochasticModel,
};
use uqlab_core::optim::{train, LossKind, TrainConfig};
use uqlab_core::uncertainty::mc_predict_regression;
use uqlab_core::Tensor;

fn hetero_model(hidden: Vec<usize>, rate: f64) -> StochasticModel {
    let n_sites = hidden.len();
    let mut model = StochasticModel::new(ModelSpec {
        input: InputSpec::Dense { dim: 1 },
        hidden,
        activation: Activation::Tanh,
        dropout_rates: vec![rate; n_sites],
        head: Head::RegressionHetero,
    })
    .unwrap();
    model.init_params(0);
    model
}

fn dense_batch(n: usize) -> ModelInput {
    let data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    ModelInput::Dense(Tensor::matrix(n, 1, data).unwrap())
}

fn bench_forward(c: &mut Criterion) {
    let model = hetero_model(vec![32, 32], 0.1);
    let x = dense_batch(64);
    c.bench_function("forward_deterministic_64x32x32", |b| {
        b.iter(|| model.forward_deterministic(&x).unwrap())
    });
    c.bench_function("forward_stochastic_64x32x32", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        b.iter(|| model.forward_stochastic(&x, &mut rng).unwrap())
    });
}

fn bench_nll_backward(c: &mut Criterion) {
    let model = hetero_model(vec![32, 32], 0.0);
    let x = dense_batch(64);
    let target = Tensor::matrix(64, 1, (0..64).map(|i| (i as f64).sin()).collect()).unwrap();
    c.bench_function("gaussian_nll_backward_64", |b| {
        b.iter(|| {
            let pass = model.forward_deterministic(&x).unwrap();
            let loss = gaussian_nll(pass.hetero_output().unwrap(), &target).unwrap();
            backward(&loss.scalar).unwrap();
        })
    });
}

fn bench_mc_predict(c: &mut Criterion) {
    let model = hetero_model(vec![32, 32], 0.1);
    let x = dense_batch(100);
    c.bench_function("mc_predict_regression_100pts_m10", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(11),
            |mut rng| mc_predict_regression(&model, &x, 10, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let data = generate_regression(&RegressionTaskSpec {
        n_train: 256,
        n_val: 64,
        n_test: 0,
        ..RegressionTaskSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        steps_per_epoch: 0,
        lr: 0.01,
        weight_decay: 1e-5,
        seed: 0,
        loss: LossKind::GaussianNll,
        k_samples: 1,
    };
    c.bench_function("train_one_epoch_256ex", |b| {
        b.iter_batched(
            || hetero_model(vec![32, 32], 0.1),
            |mut model| train(&mut model, &data.train, &data.val, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_forward, bench_nll_backward, bench_mc_predict, bench_train_epoch
}
criterion_main!(benches);
