//! The timed run loop on real structures.

use kotrie::reclaim::{poison_hits, ReclaimConfig};
use kotrie_bench::{run_experiment, ExperimentConfig, Mix, Structure, Subject, BATCH};

#[test]
fn four_workers_on_the_trie_make_progress_without_poisoned_reads() {
    let before = poison_hits();
    let mut config = ExperimentConfig::new(Structure::Kotrie, 10, 4, 1.0, Mix::EQUAL);
    config.reclaim = ReclaimConfig::debug();
    let results = run_experiment(&config).unwrap();
    let r = &results[0];
    assert_eq!(r.counts.len(), 4);
    assert!(r.throughput > 0);
    assert_eq!(r.throughput, r.counts.iter().sum::<u64>());
    assert_eq!(poison_hits(), before);
}

#[test]
fn the_clock_is_checked_once_per_batch() {
    let config = ExperimentConfig::new(Structure::Skiplist, 8, 3, 0.3, Mix::new(1, 1, 0, 8));
    for r in run_experiment(&ExperimentConfig {
        trials: 2,
        ..config
    })
    .unwrap()
    {
        assert!(
            r.counts.iter().all(|&c| c > 0 && c % BATCH == 0),
            "{:?}",
            r.counts
        );
    }
}

#[test]
fn every_structure_stays_near_the_steady_state() {
    for structure in Structure::ALL {
        let config = ExperimentConfig::new(structure, 12, 2, 0.5, Mix::new(1, 4, 1, 1));
        let mut subject = Subject::new(&config);
        subject.prefill(&config, 0).unwrap();
        assert_eq!(subject.size(), 819);
        subject.run(&config, 0).unwrap();
        subject.audit().unwrap();
        let size = subject.size() as f64;
        assert!((size - 819.0).abs() / 819.0 < 0.15, "{structure}: {size}");
    }
}

#[test]
fn workers_are_released_together() {
    // Nobody starts timing before all eight are ready, so each finishes a batch.
    let config = ExperimentConfig::new(Structure::Augtrie, 6, 8, 0.2, Mix::EQUAL);
    let r = &run_experiment(&config).unwrap()[0];
    assert!(r.wall >= config.duration());
    assert!(r.counts.iter().all(|&c| c >= BATCH));
}
