use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rqwav_bench::{audio_batch, desk_config, feature_frames, model};
use rqwav_core::features::logmel_featurize;
use rqwav_core::RandomQuantizer;

fn quantize(c: &mut Criterion) {
    let f = feature_frames(4, 200, 80);
    let q = RandomQuantizer::new(0, 80, 16, 8192, true).unwrap();
    c.bench_function("quantize 4x200 frames, V=8192", |b| b.iter(|| q.quantize(black_box(&f)).unwrap()));
}

fn featurizers(c: &mut Criterion) {
    let cfg = desk_config(4);
    let batch = audio_batch(&cfg, 4).unwrap();
    let m = model(&cfg).unwrap();
    c.bench_function("conv featurize desk batch", |b| b.iter(|| m.featurize(black_box(&batch)).unwrap()));
    c.bench_function("logmel featurize desk batch", |b| {
        b.iter(|| logmel_featurize(black_box(&batch), &cfg.featurizer.logmel).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let cfg = desk_config(4);
    let batch = audio_batch(&cfg, 4).unwrap();
    let m = model(&cfg).unwrap();
    c.bench_function("encode desk batch", |b| b.iter(|| m.encode(black_box(&batch)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = quantize, featurizers, encoder
}
criterion_main!(benches);
