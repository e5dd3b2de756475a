//! Ablation sweeps on a tiny benchmark: isolation and resumption.

use bnta::ablate::{self, Sweep};
use bnta::config::RunConfig;
use bnta_core::synth::build_benchmark;

fn tiny() -> RunConfig {
    let mut run = RunConfig {
        seed: 2,
        ..RunConfig::default()
    };
    run.data.train_ids = 4;
    run.data.images_per_id = 4;
    run.data.test_ids = 8;
    run.train.epochs = 1;
    run.train.batch_size = 16;
    run.eval.splits = 2;
    run.resolved()
}

#[test]
fn layer_sweep_isolates_groups_and_resumes_to_identical_output() {
    let run = tiny();
    let bench = build_benchmark(&run.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = ablate::run_sweeps(&run, &bench.train, &bench.test, &[Sweep::Layers], dir.path()).unwrap();
    assert_eq!((first.ran, first.reused, first.results.len()), (8, 0, 8));
    for r in &first.results {
        assert!(r.unselected_changes.is_empty(), "{}: {:?}", r.cell, r.unselected_changes);
    }
    let none = first.results.iter().find(|r| r.cell == "none").unwrap();
    assert_eq!(none.summary, none.frozen);
    let csv = std::fs::read(dir.path().join(ablate::COMBINED_CSV)).unwrap();

    let again = ablate::run_sweeps(&run, &bench.train, &bench.test, &[Sweep::Layers], dir.path()).unwrap();
    assert_eq!((again.ran, again.reused), (0, 8));
    assert_eq!(again.results, first.results);
    assert_eq!(std::fs::read(dir.path().join(ablate::COMBINED_CSV)).unwrap(), csv);
}

#[test]
fn interrupted_sweep_only_runs_missing_cells() {
    let run = tiny();
    let bench = build_benchmark(&run.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ablate::run_sweeps(&run, &bench.train, &bench.test, &[Sweep::BnParams], dir.path()).unwrap();
    std::fs::remove_dir_all(dir.path().join("cells/bn_params-mu+beta")).unwrap();
    let resumed = ablate::run_sweeps(&run, &bench.train, &bench.test, &[Sweep::BnParams], dir.path()).unwrap();
    assert_eq!((resumed.ran, resumed.reused), (1, 15));
}
