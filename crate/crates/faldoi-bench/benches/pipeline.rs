//! Benchmarks for the three cost centers: the local patch solver that the
//! growing loop calls once per popped pixel, the full-image energy
//! evaluation, and the single-seed pipeline end to end.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use faldoi_bench::translation_scene;
use faldoi_core::energy::{eval_energy, EnergyConfig, Rect};
use faldoi_core::faldoi::{run_faldoi, PipelineConfig};
use faldoi_core::flowio::FlowField;
use faldoi_core::imgproc::to_grayscale;
use faldoi_core::solver::refine_flow;

fn bench_patch_refine(c: &mut Criterion) {
    let (a, b, _) = translation_scene(64, 64);
    let gray_a = to_grayscale(&a).unwrap();
    let gray_b = to_grayscale(&b).unwrap();
    let cfg = EnergyConfig::tv_l1();
    let patch = Rect::centered(32, 32, 11, 64, 64);
    let init = FlowField::filled_constant(11, 11, (2.0, 1.0));
    c.bench_function("patch_refine_11x11", |bench| {
        bench.iter(|| refine_flow(&gray_a, &gray_b, patch, &cfg, &init, 1, 10, None).unwrap())
    });
}

fn bench_eval_energy(c: &mut Criterion) {
    let (a, b, _) = translation_scene(64, 64);
    let gray_a = to_grayscale(&a).unwrap();
    let gray_b = to_grayscale(&b).unwrap();
    let cfg = EnergyConfig::tv_l1();
    let flow = FlowField::filled_constant(64, 64, (2.0, 1.0));
    c.bench_function("eval_energy_64x64", |bench| {
        bench.iter(|| eval_energy(&cfg, &gray_a, &gray_b, &flow, Rect::full(64, 64), None).unwrap())
    });
}

fn bench_run_faldoi(c: &mut Criterion) {
    let (a, b, seeds) = translation_scene(64, 64);
    let mut cfg = PipelineConfig::default();
    // the bench measures throughput, not seed selection, so keep the seed
    // alive regardless of how textured its particular pixel happens to be
    cfg.saliency_threshold = 1e-4;
    c.bench_function("run_faldoi_64x64", |bench| {
        bench.iter(|| run_faldoi(&a, &b, &seeds, &cfg).unwrap())
    });
}

fn quick() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(3))
}

criterion_group! {
    name = benches;
    config = quick();
    targets = bench_patch_refine, bench_eval_energy, bench_run_faldoi
}
criterion_main!(benches);
