use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use timeseed_core::sweep::{run_grid_with, Axis, AxisKind, Execution, GridSpec, Metric};
use timeseed_core::{CouplingSpec, IntegrationConfig, NetworkParams};

fn grid(side: usize) -> GridSpec {
    let base = NetworkParams::from_omegas(&[1.15, 1.15], 1.0, CouplingSpec::dissipative(0.0)).unwrap();
    GridSpec::new(
        Axis::new(AxisKind::Detuning, 0.0, 0.5, side),
        Some(Axis::new(AxisKind::Coupling, 0.0, 0.25, side)),
        base,
        Metric::DeltaObs,
    )
}

fn sweep(c: &mut Criterion) {
    let cfg = IntegrationConfig::default().with_t_end(100.0).with_dt_out(0.1);
    let mut group = c.benchmark_group("grid");
    group.sample_size(10);
    for side in [4usize, 8] {
        let spec = grid(side);
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, side * side), &spec, |b, spec| {
                b.iter(|| run_grid_with(black_box(spec), &cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
