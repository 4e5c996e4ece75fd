use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timeseed_core::sweep::{
    fill_cells, load_grid, parse_grid, run_grid_with, save_grid, write_grid, Axis, AxisKind, Execution, GridResult,
    GridSpec, Metric,
};
use timeseed_core::{CouplingSpec, IntegrationConfig, NetworkParams};

fn spec() -> GridSpec {
    let base = NetworkParams::from_omegas(&[1.15, 1.15], 1.0, CouplingSpec::dissipative(0.0)).unwrap();
    GridSpec::new(
        Axis::new(AxisKind::Detuning, 0.05, 0.3, 3),
        Some(Axis::new(AxisKind::Coupling, 0.02, 0.2, 3)),
        base,
        Metric::DeltaObs,
    )
}

fn cfg() -> IntegrationConfig {
    IntegrationConfig::default().with_t_end(80.0).with_dt_out(0.1)
}

#[test]
fn shuffled_schedules_give_identical_grids() {
    let reference = run_grid_with(&spec(), &cfg(), Execution::Sequential).unwrap();
    assert!(reference.is_complete());
    let mut order: Vec<usize> = (0..reference.values.len()).collect();
    for seed in 0..3u64 {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut grid = GridResult::empty(spec(), cfg());
        for chunk in order.chunks(2) {
            grid = fill_cells(grid, chunk, Execution::Parallel).unwrap();
        }
        assert_eq!(grid, reference);
    }
}

#[test]
fn out_of_range_cells_are_rejected() {
    let grid = GridResult::empty(spec(), cfg());
    assert!(fill_cells(grid, &[9], Execution::Sequential).is_err());
}

#[test]
fn checkpoint_file_round_trips_mid_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.tsg");
    let grid = fill_cells(GridResult::empty(spec(), cfg()), &[0, 4, 8], Execution::Sequential).unwrap();
    save_grid(&grid, &path).unwrap();
    let back = load_grid(&path).unwrap();
    assert_eq!(back, grid);
    assert_eq!(back.pending().len(), 6);
    assert!(!dir.path().join("grid.tsg.partial").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_is_identity(
        values in prop::collection::vec(prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(f64::NAN)], 9),
        mask in prop::collection::vec(any::<bool>(), 9),
    ) {
        let mut grid = GridResult::empty(spec(), cfg());
        for i in 0..9 {
            if mask[i] && values[i].is_finite() {
                grid.values[i] = values[i];
                grid.completed[i] = true;
            }
        }
        let mut buf = Vec::new();
        write_grid(&grid, &mut buf).unwrap();
        let back = parse_grid(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, grid);
    }
}
