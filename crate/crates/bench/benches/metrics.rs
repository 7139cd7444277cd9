use criterion::{black_box, criterion_group, criterion_main, Criterion};

use dsside::dataio::{generate_synthetic_scene, SyntheticSpec};
use dsside::metrics::compute_metrics;
use dsside::router::DepthRange;

fn metrics(c: &mut Criterion) {
    let (_, gt) = generate_synthetic_scene(&SyntheticSpec::new(DepthRange::High, 320, 256, 1)).unwrap();
    let (_, pred) = generate_synthetic_scene(&SyntheticSpec::new(DepthRange::High, 320, 256, 2)).unwrap();
    c.bench_function("compute_metrics 320x256", |b| {
        b.iter(|| compute_metrics(black_box(&pred), black_box(&gt)).unwrap())
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
