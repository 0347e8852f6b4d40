//! Synthetic scenarios, constant baselines and budget sweeps.

mod scenario;
mod sweep;

pub use scenario::{
    gen_synthetic, median_cost_ratio, shift_scenarios, DomainSpec, ScenarioConfig, ShiftSplits, DEFAULT_SHIFT_MASS,
};
pub use sweep::{
    aggregate, baseline_policy, dataset_digest, run_sweep, sign_test_p_value, write_aggregate_csv, write_raw_csv,
    AggregateRow, BaselineKind, CellFailure, Method, SweepConfig, SweepRecord, SweepResult, DEFAULT_BUDGETS,
    DEFAULT_REPEATS, UNPAIRED_RANDOM_RATE,
};
