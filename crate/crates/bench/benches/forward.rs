use criterion::{black_box, criterion_group, criterion_main, Criterion};

use dsside::dataio::{generate_synthetic_scene, SyntheticSpec};
use dsside::netgraph::{image_tensor, Model, NetworkOptions, NetworkSpec, Variant};
use dsside::router::DepthRange;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward 64x64 m=1/8");
    group.sample_size(20);
    for variant in [Variant::LowDepthRange, Variant::HighDepthRange] {
        let mut opts = NetworkOptions::new(variant);
        opts.width_multiplier = 0.125;
        let model = Model::new(NetworkSpec::build(variant, &opts).unwrap()).unwrap();
        let (image, _) = generate_synthetic_scene(&SyntheticSpec::new(DepthRange::Low, 64, 64, 0)).unwrap();
        let x = image_tensor(&image);
        group.bench_function(format!("{variant:?}"), |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
