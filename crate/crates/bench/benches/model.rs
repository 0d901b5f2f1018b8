use criterion::{criterion_group, criterion_main, Criterion};
use latflow_core::autodiff::Graph;
use latflow_core::config::Config;
use latflow_core::eval::{ivom, IvomConfig};
use latflow_core::model::{Batch, Decoding, Noise};
use latflow_core::synthia::generate;
use latflow_core::tensor::Tensor;
use latflow_core::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(c: &mut Criterion) {
    let mut config = Config::default();
    config.data.n_train = 256;
    config.data.n_test = 32;
    let config = config.resolve().unwrap();
    let data = generate(&config.data).unwrap();
    let trainer = Trainer::new(config.clone(), &data.train.samples).unwrap();
    let mut model = trainer.model;
    let batch = Batch::from_slice(&data.train.samples[..32]).unwrap();
    let noise = Noise::draw(&model, 32, &mut ChaCha8Rng::seed_from_u64(1));

    c.bench_function("objective_backward_32", |b| {
        b.iter(|| {
            let g = Graph::new();
            let (loss, _) = model.objective(&g, &batch, &noise, &config.objective).unwrap();
            g.backward(loss).unwrap();
            g.gradients(&model.params)
        })
    });

    model.set_training(false);
    let test = &data.test.samples;
    let x_v = Tensor::from_rows(&test.iter().map(|s| s.x_v.clone()).collect::<Vec<_>>()).unwrap();
    let x_t: Vec<Vec<usize>> = test.iter().map(|s| s.x_t.clone()).collect();
    c.bench_function("sample_t_given_v_32x20", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| model.sample_t_given_v(&x_v, 20, Decoding::default(), &mut rng).unwrap())
    });
    c.bench_function("sample_v_given_t_32x20", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| model.sample_v_given_t(&x_t, 20, &mut rng).unwrap())
    });
    let cfg = IvomConfig {
        steps: 50,
        ..IvomConfig::default()
    };
    let mut group = c.benchmark_group("ivom");
    group.sample_size(10);
    group.bench_function("32_targets_50_steps", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        b.iter(|| ivom(&model, &x_t, &x_v, &cfg, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
