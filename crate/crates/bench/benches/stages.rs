use criterion::{criterion_group, criterion_main, Criterion};
use liftrefine::diffusion::{Condition, Denoiser, DenoiserConfig, EpsPredictor};
use liftrefine::losses::{recon_loss, LossConfig};
use liftrefine::model::{ReconConfig, Reconstructor};
use liftrefine::renderer::{render_pixels, rows_to_image};
use liftrefine::{Tape, Tensor};
use liftrefine_bench::orbit_views;

fn conv(c: &mut Criterion) {
    let x = Tensor::from_fn([4, 16, 32, 32], |i| (i as f64 * 0.01).sin());
    let w = Tensor::from_fn([16, 16, 3, 3], |i| (i as f64 * 0.1).cos() * 0.1);
    c.bench_function("conv2d 4x16x32x32 forward+backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (x, w) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
            let loss = x.conv2d(w, None).unwrap().square().mean();
            tape.backward(loss).unwrap()
        })
    });
}

fn reconstructor(c: &mut Criterion) {
    let model = Reconstructor::new(ReconConfig::default(), 0);
    let views = orbit_views(4, 32);
    let (inputs, target) = (&views[..3], &views[3]);
    c.bench_function("reconstruct + full render 32x32 (no grad)", |b| {
        b.iter(|| model.predict_image(inputs, &target.pose).unwrap())
    });

    // One training step's worth of work: 16×16 patch, loss and backward.
    let patch: Vec<(usize, usize)> = (8..24).flat_map(|j| (8..24).map(move |i| (i, j))).collect();
    let truth = Tensor::from_fn([3, 16, 16], |i| target.image.data()[i % target.image.numel()]);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("reconstructor step, 3 inputs, 16x16 patch", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = model.store.bind(&tape);
            let tri = model.reconstruct(&tape, &p, inputs).unwrap();
            let out = render_pixels(&tape, &model.field(&p, tri), &target.pose, &patch, &model.cfg.render, false).unwrap();
            let pred = rows_to_image(out.color, 16, 16).unwrap();
            let loss = recon_loss(pred, tape.constant(truth.clone()), &LossConfig::default()).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    group.finish();
}

fn denoiser(c: &mut Criterion) {
    let cfg = DenoiserConfig::default();
    let model = Denoiser::new(cfg.clone(), 0);
    let cond = Condition {
        feature: Tensor::from_fn([cfg.feature_channels, 32, 32], |i| (i as f64 * 0.05).sin()),
        image: Tensor::full([3, 32, 32], 0.5),
    };
    let x = Tensor::from_fn([3, 32, 32], |i| (i as f64 * 0.3).cos());
    c.bench_function("denoiser guided pair 32x32", |b| {
        b.iter(|| model.predict_pair(&x, 500, &cond).unwrap())
    });
}

criterion_group!(benches, conv, reconstructor, denoiser);
criterion_main!(benches);
