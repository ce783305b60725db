//! Recorded concurrent bursts on a 16-key universe, checked exhaustively.

use kotrie::history::{check, record_burst, Burst, SetSpec};
use kotrie::{AugmentedTrie, ConcurrentSet, SkipList, Trie};

fn bursts<C: ConcurrentSet>(make: impl Fn() -> C, threads: usize, count: u64) {
    for seed in 0..count {
        let set = make();
        let logs = record_burst(
            &set,
            Burst {
                threads,
                ops_per_thread: 60,
                seed,
                yield_chance: 0.2,
            },
        );
        if let Err(e) = check(&SetSpec, &logs) {
            panic!(
                "{} burst {seed} with {threads} threads: {e}\n{logs:?}",
                set.name()
            );
        }
    }
}

#[test]
fn trie_bursts_linearize() {
    for threads in 2..=4 {
        bursts(|| Trie::new(4, 4), threads, 40);
    }
}

#[test]
fn skiplist_bursts_linearize() {
    for threads in 2..=4 {
        bursts(|| SkipList::new(4, 4), threads, 40);
    }
}

#[test]
fn augtrie_bursts_linearize() {
    for threads in 2..=4 {
        bursts(|| AugmentedTrie::new(4, 4), threads, 40);
    }
}

#[test]
fn trie_is_consistent_after_bursts() {
    let mut t = Trie::new(4, 4);
    record_burst(
        &t,
        Burst {
            threads: 4,
            ops_per_thread: 2_000,
            seed: 99,
            yield_chance: 0.1,
        },
    );
    t.audit().unwrap();
}
