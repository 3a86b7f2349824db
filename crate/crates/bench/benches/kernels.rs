use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roleret_core::data_io::{synth_dataset, SynthSpec};
use roleret_core::eval::{evaluate, evaluate_scores, RelevanceMatrix, ClassOverlap};
use roleret_core::loss::SpaceRelevance;
use roleret_core::model::{ModelConfig, ModelParams};
use roleret_core::nn::{multi_head, AttentionParams, EncoderBlockParams, Tape};
use roleret_core::text_roles::Caption;
use roleret_core::train::{batch_gradients, embed_items, prepare_items, Item, TrainConfig};
use roleret_core::Matrix;

fn attention_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = AttentionParams::init(64, 4, &mut rng).unwrap();
    let mut group = c.benchmark_group("attention_forward");
    for tokens in [3usize, 25, 75] {
        let x = Matrix::random(tokens, 64, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &x, |b, x| {
            b.iter(|| multi_head(black_box(x), &p).unwrap())
        });
    }
    group.finish();
}

fn encoder_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = EncoderBlockParams::init(64, 4, 128, &mut rng).unwrap();
    let x = Matrix::random(3, 64, 1.0, &mut rng);
    c.bench_function("encoder_block_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = p.map(&mut |m| tape.leaf(m.clone()));
            let xi = tape.leaf(x.clone());
            let y = tape.encoder_block(xi, &bound).unwrap();
            let s = tape.squared_norm(y);
            black_box(tape.backward(s, 1.0).unwrap())
        })
    });
}

fn pinned_items() -> (Vec<Item>, TrainConfig) {
    let data = synth_dataset(&SynthSpec::default()).unwrap();
    let cfg = TrainConfig::default();
    let (items, _) = prepare_items(&data, &cfg.model).unwrap();
    (items, cfg)
}

fn train_step(c: &mut Criterion) {
    let (items, cfg) = pinned_items();
    let params = ModelParams::init(&ModelConfig::default()).unwrap();
    let batch: Vec<&Item> = items.iter().take(cfg.batch_size).collect();
    let captions: Vec<Caption> = batch.iter().map(|i| i.caption.clone()).collect();
    let rel = SpaceRelevance::from_captions(&captions).unwrap();
    c.bench_function("batch_gradients_64", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            black_box(batch_gradients(&params, &batch, &cfg, &rel, &mut rng).unwrap())
        })
    });
}

fn evaluation(c: &mut Criterion) {
    let (items, _) = pinned_items();
    let params = ModelParams::init(&ModelConfig::default()).unwrap();
    let (text, video) = embed_items(&params, &items).unwrap();
    let captions: Vec<Caption> = items.iter().map(|i| i.caption.clone()).collect();
    c.bench_function("evaluate_400", |b| b.iter(|| evaluate(&text, &video, &captions).unwrap()));

    let rel = RelevanceMatrix::build(&captions, &captions, &ClassOverlap).unwrap();
    let scores = Matrix::random(400, 400, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    c.bench_function("metrics_only_400", |b| b.iter(|| evaluate_scores(black_box(&scores), &rel)));
}

criterion_group!(benches, attention_forward, encoder_backward, train_step, evaluation);
criterion_main!(benches);
