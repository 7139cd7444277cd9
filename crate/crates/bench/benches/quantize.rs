use criterion::{black_box, criterion_group, criterion_main, Criterion};

use dsside::dataio::{generate_synthetic_scene, SyntheticSpec};
use dsside::quantizer::QuantizationScheme;
use dsside::router::DepthRange;

fn quantize(c: &mut Criterion) {
    let (_, depth) = generate_synthetic_scene(&SyntheticSpec::new(DepthRange::Low, 320, 256, 3)).unwrap();
    let scheme = QuantizationScheme::low_range();
    c.bench_function("quantize_map 320x256", |b| b.iter(|| scheme.quantize_map(black_box(&depth))));
}

criterion_group!(benches, quantize);
criterion_main!(benches);
