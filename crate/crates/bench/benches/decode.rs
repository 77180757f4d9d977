//! Single-sample decode latency: the greedy baseline against masked
//! parallel decoding, plus the encoder alone for scale.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gref_bench::{desk_model, desk_sessions};
use gref_core::decoding::{ar_decode, omtp_decode};

fn bench_decode(c: &mut Criterion) {
    let model = desk_model();
    let sessions = desk_sessions(4);
    let features: Vec<Vec<Vec<f64>>> = sessions.iter().map(|s| s.feature_matrix()).collect();

    let mut group = c.benchmark_group("single_sample_decode");
    group.sample_size(30);

    group.bench_function("ar_n10", |b| {
        let mut i = 0usize;
        b.iter(|| {
            let f = &features[i % features.len()];
            i += 1;
            black_box(ar_decode(&model, f).unwrap())
        })
    });

    for heads in [2usize, 4] {
        group.bench_function(format!("omtp_n10_h{heads}"), |b| {
            let mut i = 0usize;
            b.iter(|| {
                let f = &features[i % features.len()];
                i += 1;
                black_box(omtp_decode(&model, f, heads).unwrap())
            })
        });
    }

    group.bench_function("encode_only", |b| {
        let mut i = 0usize;
        b.iter(|| {
            let f = &features[i % features.len()];
            i += 1;
            black_box(model.encode(f).unwrap())
        })
    });

    group.finish();
}

criterion_group!(benches, bench_decode);
criterion_main!(benches);
