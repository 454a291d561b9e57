use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsdiff::config::{Config, ModelConfig, StepSize};
use tsdiff::exec::{map_range, map_range_sequential};
use tsdiff::model::Model;
use tsdiff::oracles::gen_sinusoidal;
use tsdiff::sampler::sample_sequence;
use tsdiff::training::{prepare, Trainer};

fn setup() -> (Trainer, tsdiff::data::Dataset) {
    let raw = gen_sinusoidal(3.0, 1.5, 10.0, 10.0, vec![0.6, 0.0], 32, 1).unwrap();
    let ds = prepare(&raw).unwrap();
    let mut config = Config::default();
    config.model = ModelConfig {
        hidden: 16,
        embed: 8,
        attention_layers: 2,
        diffusion_steps: 100,
        diffusion_hidden: 16,
        solver_h: StepSize::Fixed(0.2),
        ..ModelConfig::default()
    };
    let model = Model::for_dataset(config.model.clone(), &ds, 0).unwrap();
    (Trainer::new(model, config), ds)
}

fn gradients(c: &mut Criterion) {
    let (trainer, ds) = setup();
    let n = ds.len();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    g.bench_function("parallel", |b| {
        b.iter(|| black_box(map_range(n, |i| trainer.sequence_gradient(&ds.sequences[i], i).unwrap().0.total)))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(map_range_sequential(n, |i| trainer.sequence_gradient(&ds.sequences[i], i).unwrap().0.total)))
    });
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let (trainer, _) = setup();
    let model = &trainer.model;
    let draw = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(i as u64);
        sample_sequence(model, &mut rng).unwrap().sequence.len()
    };
    let mut g = c.benchmark_group("synthesis");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(map_range(16, draw))));
    g.bench_function("sequential", |b| b.iter(|| black_box(map_range_sequential(16, draw))));
    g.finish();
}

criterion_group!(benches, gradients, synthesis);
criterion_main!(benches);
