//! Single-threaded runs of every structure against `BTreeSet`.

use std::collections::BTreeSet;

use kotrie::{AugmentedTrie, ConcurrentSet, SetHandle, SkipList, Trie};
use proptest::prelude::*;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

fn oracle_predecessor(set: &BTreeSet<u64>, x: u64) -> i64 {
    set.range(..x).next_back().map_or(-1, |&k| k as i64)
}

fn replay<C: ConcurrentSet>(set: &C, ops: usize, seed: u64) {
    let k = set.key_bits();
    let mut h = set.register().unwrap();
    let mut model = BTreeSet::new();
    let mut rng = SmallRng::seed_from_u64(seed);
    for i in 0..ops {
        let x = rng.gen_range(0..1u64 << k);
        match rng.gen_range(0..4) {
            0 => assert_eq!(
                h.insert(x),
                model.insert(x),
                "{} op {i}: insert {x}",
                set.name()
            ),
            1 => assert_eq!(
                h.remove(x),
                model.remove(&x),
                "{} op {i}: remove {x}",
                set.name()
            ),
            2 => assert_eq!(
                h.search(x),
                model.contains(&x),
                "{} op {i}: search {x}",
                set.name()
            ),
            _ => assert_eq!(
                h.predecessor(x),
                oracle_predecessor(&model, x),
                "{} op {i}: pred {x}",
                set.name()
            ),
        }
    }
}

#[test]
fn every_structure_matches_the_oracle() {
    for k in [3, 6, 10] {
        replay(&Trie::new(k, 1), 20_000, u64::from(k));
        replay(&SkipList::new(k, 1), 20_000, u64::from(k));
        replay(&AugmentedTrie::new(k, 1), 20_000, u64::from(k));
    }
}

#[test]
fn predecessor_of_zero_is_none() {
    let t = Trie::new(4, 1);
    let mut h = t.register().unwrap();
    for x in 0..16 {
        h.insert(x);
    }
    assert_eq!(h.predecessor(0), -1);
}

#[test]
fn quiescent_pair_example() {
    let t = Trie::new(3, 1);
    let mut h = t.register().unwrap();
    h.insert(1);
    h.insert(3);
    assert_eq!(h.predecessor(2), 1);
    assert_eq!(h.predecessor(4), 3);
}

#[derive(Clone, Debug)]
enum Op {
    Insert(u64),
    Remove(u64),
    Search(u64),
    Predecessor(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..32u64).prop_map(Op::Insert),
        (0..32u64).prop_map(Op::Remove),
        (0..32u64).prop_map(Op::Search),
        (0..32u64).prop_map(Op::Predecessor),
    ]
}

proptest! {
    #[test]
    fn trie_agrees_with_oracle_on_arbitrary_sequences(ops in prop::collection::vec(op(), 1..200)) {
        let mut trie = Trie::new(5, 1);
        let mut model = BTreeSet::new();
        {
            let mut h = trie.register().unwrap();
            for op in ops {
                match op {
                    Op::Insert(x) => prop_assert_eq!(h.insert(x), model.insert(x)),
                    Op::Remove(x) => prop_assert_eq!(h.remove(x), model.remove(&x)),
                    Op::Search(x) => prop_assert_eq!(h.search(x), model.contains(&x)),
                    Op::Predecessor(x) => prop_assert_eq!(h.predecessor(x), oracle_predecessor(&model, x)),
                }
            }
        }
        prop_assert!(trie.audit().is_ok());
        prop_assert_eq!(trie.keys(), model.into_iter().collect::<Vec<_>>());
    }
}
