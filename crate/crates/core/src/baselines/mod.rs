//! Comparison structures sharing the [`ConcurrentSet`](crate::ConcurrentSet)
//! interface: a lock-free skip list and a wait-free augmented trie.

pub mod augtrie;
pub mod skiplist;

pub use augtrie::{AugTrieHandle, AugmentedTrie};
pub use skiplist::{SkipList, SkipListConfig, SkipListHandle};
