use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jeit_core::corpus::{generate_corpus, CorpusSpec, SplitBundle};
use jeit_core::decoding::{beam_search, FusionConfig};
use jeit_core::lattice::{fill_grid, forward_backward, random_grid};
use jeit_core::losses::{Mode, ObjectiveSpec};
use jeit_core::models::{LabelDecoderConfig, ModelConfig, ModelParams, TextEncoderConfig, Variant};
use jeit_core::numerics::Adam;
use jeit_core::training::{train_step, BatchScheduler, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> SplitBundle {
    generate_corpus(&CorpusSpec {
        paired_count: 400,
        unpaired_count: 20_000,
        ..CorpusSpec::default()
    })
    .expect("bench corpus")
}

fn model(b: &SplitBundle, variant: Variant) -> ModelParams {
    let cfg = ModelConfig {
        variant,
        vocab_size: b.vocab.len(),
        feature_dim: b.paired_train[0].features.cols(),
        encoder_dim: 32,
        encoder_layers: 2,
        label_decoder: LabelDecoderConfig::Recurrent {
            layers: 1,
            width: 32,
            embed_dim: 16,
        },
        blank_decoder_dim: (variant == Variant::Mhat).then_some(16),
        joint_dim: 32,
        text_encoder: TextEncoderConfig {
            layers: 1,
            injection_layer: 1,
            embed_dim: 16,
        },
    };
    ModelParams::init(&cfg, 1).expect("bench model")
}

fn lattice(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward");
    for (t, u) in [(20, 8), (60, 25), (200, 60)] {
        let grid = random_grid(&mut ChaCha8Rng::seed_from_u64(3), t, u);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{t}x{u}")), &grid, |bch, grid| {
            bch.iter(|| forward_backward(black_box(grid)))
        });
    }
    g.finish();

    let b = corpus();
    let mp = model(&b, Variant::Mhat);
    let u = &b.paired_train[0];
    c.bench_function("fill_grid/mhat", |bch| {
        bch.iter(|| fill_grid(&mp, black_box(&u.features), &u.transcript.0).unwrap())
    });
}

fn decoding(c: &mut Criterion) {
    let b = corpus();
    let mut g = c.benchmark_group("beam_search");
    for variant in [Variant::Hat, Variant::Mhat] {
        let mp = model(&b, variant);
        for beam in [1, 4, 8] {
            let f = FusionConfig::no_fusion(beam);
            g.bench_function(BenchmarkId::new(variant.to_string(), beam), |bch| {
                bch.iter(|| {
                    for u in &b.base_test[..10] {
                        black_box(beam_search(&mp, &u.features, &f, None).unwrap());
                    }
                })
            });
        }
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let b = corpus();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for mode in [Mode::Base, Mode::Jeit, Mode::Joist, Mode::Cjjt] {
        let cfg = TrainConfig {
            objective: ObjectiveSpec::default_for(mode, Variant::Mhat),
            ..TrainConfig::default()
        };
        let mut sched = BatchScheduler::new(&b.paired_train, &b.unpaired_text, &cfg).unwrap();
        let batch = sched.batch(0);
        let mut mp = model(&b, Variant::Mhat);
        let mut opt = Adam::new(cfg.optimizer, &mp.params);
        g.bench_function(mode.to_string(), |bch| {
            bch.iter(|| train_step(&mut mp, &mut opt, &batch, &cfg, None, 0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, lattice, decoding, training);
criterion_main!(benches);
