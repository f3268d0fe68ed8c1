use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use streamdec::model::{backward, forward, speech_step, Mode, StreamCache};
use streamdec::seed::rng_for;
use streamdec::seqlayout::{build_mask, LayoutKind, MaskVariant};
use streamdec::streamdecode::{decode_bti, DecodeConfig};
use streamdec_bench::fixture;

fn masks(c: &mut Criterion) {
    let f = fixture();
    let mut g = c.benchmark_group("mask");
    for variant in [MaskVariant::Causal, MaskVariant::RightChunk] {
        g.bench_function(format!("{variant:?}"), |b| b.iter(|| build_mask(black_box(&f.layout), variant).unwrap()));
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let f = fixture();
    let mask = build_mask(&f.layout, MaskVariant::RightChunk).unwrap();
    let rows = f.layout.len();
    let v = f.vocab.total() as usize;
    let mut g = c.benchmark_group("model");
    g.bench_function(format!("forward_eval_{rows}_rows"), |b| {
        b.iter(|| forward(&f.params, black_box(&f.layout), &mask, Mode::Eval).unwrap())
    });
    g.bench_function(format!("forward_backward_{rows}_rows"), |b| {
        let dlogits = vec![1e-3f32; rows * v];
        b.iter_batched(
            || rng_for(1, &[]),
            |mut rng| {
                let out = forward(&f.params, &f.layout, &mask, Mode::Train(&mut rng)).unwrap();
                backward(out.tape.unwrap(), &dlogits).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    g.bench_function("speech_step_64_frames", |b| {
        b.iter(|| {
            let mut cache = StreamCache::new(&f.params);
            for (pos, &tok) in f.utterance.speech.iter().cycle().take(64).enumerate() {
                black_box(speech_step(&f.params, &mut cache, tok, pos).unwrap());
            }
        })
    });
    g.finish();
}

fn decoding(c: &mut Criterion) {
    let f = fixture();
    let frames = f.utterance.num_frames();
    let mut g = c.benchmark_group("decode");
    for (delta, beam) in [(0, 1), (2, 1), (2, 4)] {
        let cfg = DecodeConfig { mode: LayoutKind::Bti, delta, beam, ..DecodeConfig::default() };
        g.bench_function(format!("bti_{frames}_frames_delta{delta}_beam{beam}"), |b| {
            b.iter(|| decode_bti(&f.params, black_box(&f.utterance.speech), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, masks, model, decoding);
criterion_main!(benches);
