use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use cpp_lab::matching::solve_assignment;
use cpp_lab::metrics::{PanSegment, PqAccumulator};
use cpp_lab::model::{Model, ModelConfig};
use cpp_lab::synthdata::{generate_dataset, PanopticSample, Taxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn segments(s: &PanopticSample) -> Vec<PanSegment> {
    s.segments.iter().map(|i| PanSegment { class_id: i.class_id, mask: s.segment_mask(i.id) }).collect()
}

fn hungarian(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("hungarian");
    for (rows, cols) in [(8, 16), (20, 50), (50, 100)] {
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &cost, |b, cost| {
            b.iter(|| solve_assignment(black_box(cost), rows, cols).unwrap())
        });
    }
    group.finish();
}

fn panoptic_quality(c: &mut Criterion) {
    let tax = Taxonomy::default_synthetic();
    let gt = generate_dataset(1, 32, &tax, 64).unwrap();
    let pred = generate_dataset(2, 32, &tax, 64).unwrap();
    let pairs: Vec<(Vec<PanSegment>, Vec<PanSegment>)> = pred.iter().zip(&gt).map(|(p, g)| (segments(p), segments(g))).collect();
    c.bench_function("pq_32_images_64px", |b| {
        b.iter(|| {
            let mut acc = PqAccumulator::default();
            for (p, g) in &pairs {
                acc.add_image(p, g).unwrap();
            }
            acc
        })
    });
}

fn forward(c: &mut Criterion) {
    let tax = Taxonomy::default_synthetic();
    let sample = &generate_dataset(3, 1, &tax, 64).unwrap()[0];
    let classes: Vec<u32> = tax.classes.iter().map(|c| c.id).collect();
    let model = Model::new(ModelConfig::default(), &classes).unwrap();
    c.bench_function("forward_64px", |b| b.iter(|| model.forward(black_box(&sample.image), None).unwrap()));
    c.bench_function("forward_64px_caption", |b| {
        b.iter(|| model.forward(black_box(&sample.image), Some(&sample.caption)).unwrap())
    });
}

criterion_group!(benches, hungarian, panoptic_quality, forward);
criterion_main!(benches);
