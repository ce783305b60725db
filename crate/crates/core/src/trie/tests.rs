use std::collections::BTreeSet;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::*;

fn oracle_predecessor(set: &BTreeSet<u64>, x: u64) -> i64 {
    set.range(..x).next_back().map_or(-1, |&k| k as i64)
}

#[test]
fn sequential_basics() {
    let t = Trie::new(4, 2);
    let mut h = t.register().unwrap();
    assert!(h.insert(5));
    assert!(!h.insert(5));
    assert!(h.search(5));
    assert_eq!(h.predecessor(9), 5);
    assert_eq!(h.predecessor(5), -1);
    assert!(h.remove(5));
    assert!(!h.remove(5));
    assert_eq!(h.predecessor(9), -1);
}

#[test]
fn empty_trie_bits_are_clear() {
    let mut t = Trie::new(3, 1);
    for j in 1..16 {
        assert!(!t.interpreted_bit(j), "index {j}");
    }
    t.audit().unwrap();
}

#[test]
fn sequential_matches_btreeset() {
    for k in [1, 2, 5, 8] {
        let mut t = Trie::new(k, 2);
        let mut set = BTreeSet::new();
        let mut rng = SmallRng::seed_from_u64(u64::from(k));
        {
            let mut h = t.register().unwrap();
            for _ in 0..20_000 {
                let x = rng.gen_range(0..1u64 << k);
                match rng.gen_range(0..4) {
                    0 => assert_eq!(h.insert(x), set.insert(x), "insert {x}"),
                    1 => assert_eq!(h.remove(x), set.remove(&x), "remove {x}"),
                    2 => assert_eq!(h.search(x), set.contains(&x), "search {x}"),
                    _ => assert_eq!(h.predecessor(x), oracle_predecessor(&set, x), "pred {x}"),
                }
                assert_eq!(h.relaxed_predecessor(x), Some(oracle_predecessor(&set, x)));
            }
        }
        t.audit().unwrap();
        assert_eq!(t.keys(), set.iter().copied().collect::<Vec<_>>());
    }
}

#[test]
fn internal_bits_match_subtree_contents() {
    let k = 4;
    let mut t = Trie::new(k, 1);
    let mut set = BTreeSet::new();
    let mut rng = SmallRng::seed_from_u64(7);
    for _ in 0..2_000 {
        let x = rng.gen_range(0..16u64);
        {
            let mut h = t.register().unwrap();
            if rng.gen_bool(0.5) {
                h.insert(x);
                set.insert(x);
            } else {
                h.remove(x);
                set.remove(&x);
            }
            for j in 1..32usize {
                let h_ = k - j.ilog2();
                let lo = ((j << h_) - 16) as u64;
                let any = set.range(lo..lo + (1 << h_)).next().is_some();
                assert_eq!(h.interpreted_bit(j), any, "index {j} after {x}");
            }
        }
        t.audit().unwrap();
    }
}

#[test]
fn concurrent_disjoint_keys_end_consistent() {
    let k = 6;
    let threads = 4u64;
    let mut t = Trie::new(k, threads as usize);
    let finals: Vec<BTreeSet<u64>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|tid| {
                let t = &t;
                s.spawn(move || {
                    let mut h = t.register().unwrap();
                    let mut rng = SmallRng::seed_from_u64(tid);
                    let mut mine = BTreeSet::new();
                    for _ in 0..20_000 {
                        let x = rng.gen_range(0..16) * threads + tid;
                        match rng.gen_range(0..3) {
                            0 => assert_eq!(h.insert(x), mine.insert(x)),
                            1 => assert_eq!(h.remove(x), mine.remove(&x)),
                            _ => {
                                let p = h.predecessor(x);
                                assert!(p < x as i64);
                            }
                        }
                    }
                    mine
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let all: BTreeSet<u64> = finals.into_iter().flatten().collect();
    t.audit().unwrap();
    assert_eq!(t.keys(), all.iter().copied().collect::<Vec<_>>());
    let mut h = t.register().unwrap();
    for x in 0..1u64 << k {
        assert_eq!(h.predecessor(x), oracle_predecessor(&all, x));
    }
}

#[test]
fn concurrent_contended_keys_end_consistent() {
    let mut t = Trie::new(3, 6);
    std::thread::scope(|s| {
        for tid in 0..6u64 {
            let t = &t;
            s.spawn(move || {
                let mut h = t.register().unwrap();
                let mut rng = SmallRng::seed_from_u64(100 + tid);
                for _ in 0..30_000 {
                    let x = rng.gen_range(0..8);
                    match rng.gen_range(0..3) {
                        0 => {
                            h.insert(x);
                        }
                        1 => {
                            h.remove(x);
                        }
                        _ => {
                            let p = h.predecessor(x);
                            assert!((-1..x as i64).contains(&p));
                        }
                    }
                }
            });
        }
    });
    t.audit().unwrap();
    let keys = t.keys();
    let set: BTreeSet<u64> = keys.into_iter().collect();
    let mut h = t.register().unwrap();
    for x in 0..8 {
        assert_eq!(h.predecessor(x), oracle_predecessor(&set, x));
        assert_eq!(h.relaxed_predecessor(x), Some(oracle_predecessor(&set, x)));
    }
}

#[test]
fn reclamation_frees_update_and_query_nodes() {
    let t = Trie::with_config(
        4,
        2,
        ReclaimConfig {
            debug: false,
            quarantine: 0,
        },
    );
    {
        let mut h = t.register().unwrap();
        for r in 0..200 {
            let x = r % 16;
            h.insert(x);
            h.predecessor(x);
            h.remove(x);
        }
    }
    let stats = t.reclaim_stats();
    assert!(stats.freed > 0);
    assert_eq!(stats.double_bags, 0);
    assert_eq!(stats.early_drains, 0);
}
