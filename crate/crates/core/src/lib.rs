//! Concurrent ordered sets over the bounded universe `0..2^k`.
//!
//! The main structure is [`Trie`], a lock-free binary trie whose `search`
//! takes a constant number of steps and whose `predecessor` is lock-free.
//! It is assembled from:
//!
//! * [`minreg`]: wait-free bounded min registers,
//! * [`alist`]: the sorted announcement lists of in-flight updates,
//! * [`pall`]: the announcement list of in-flight predecessor queries,
//! * [`reclaim`]: epoch-based reclamation with five limbo bags.
//!
//! Two comparison structures live in [`baselines`]. All three implement
//! [`ConcurrentSet`], so harness code can be written once.
//!
//! ```
//! use kotrie::{ConcurrentSet, SetHandle, Trie};
//!
//! let trie = Trie::new(4, 2);
//! let mut h = trie.register().unwrap();
//! assert!(h.insert(1));
//! assert!(h.insert(3));
//! assert_eq!(h.predecessor(3), 1);
//! assert_eq!(h.predecessor(1), -1);
//! ```

pub mod alist;
pub mod baselines;
pub mod history;
pub mod inject;
pub mod minreg;
pub mod node;
pub mod pall;
pub mod reclaim;
pub mod trie;
mod word;

pub use baselines::{AugmentedTrie, SkipList};
pub use reclaim::RegisterError;
pub use trie::Trie;

/// Returned by `predecessor` when no smaller key is present.
pub const NO_KEY: i64 = -1;

/// A concurrent set of keys in `0..2^k` whose operations run through
/// per-thread handles.
pub trait ConcurrentSet: Send + Sync {
    /// Per-thread access point. Holding one reserves a process slot.
    type Handle<'a>: SetHandle
    where
        Self: 'a;

    /// Reserves a process slot for the calling thread.
    fn register(&self) -> Result<Self::Handle<'_>, RegisterError>;

    /// Number of key bits `k`.
    fn key_bits(&self) -> u32;

    /// Short name used in reports and CSV rows.
    fn name(&self) -> &'static str;
}

/// Operations available through a registered handle.
pub trait SetHandle: Send {
    fn insert(&mut self, key: u64) -> bool;
    fn remove(&mut self, key: u64) -> bool;
    fn search(&mut self, key: u64) -> bool;
    /// Largest present key strictly below `key`, or [`NO_KEY`].
    fn predecessor(&mut self, key: u64) -> i64;

    /// Frees everything in this thread's limbo bags.
    ///
    /// # Safety
    /// No thread may be inside an operation on the same structure, and no
    /// thread may start one until this returns.
    unsafe fn drain_limbo(&mut self);
}

/// Pads and aligns a value to its own 64-byte cache line.
#[derive(Default)]
#[repr(align(64))]
pub(crate) struct Line<T>(pub T);

impl<T> std::ops::Deref for Line<T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.0
    }
}
