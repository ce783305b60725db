//! Wait-free augmented trie.
//!
//! Every node of the main trie holds a pointer to the root of an immutable
//! version of its subtrie, and internal versions store the number of keys
//! below them. Queries read the root version once and work top-down on that
//! snapshot. Updates swap the leaf's version and then refresh each ancestor
//! with at most two CAS attempts, which is enough for some successful
//! refresh to have read the new child.
//!
//! Two shortcuts on top of the basic algorithm: a refresh is skipped when
//! the ancestor's version already points at the current children, and a
//! leaf version carries a `completed` flag, set by its creator after the
//! refresh reached the root, so later updates and searches on that key can
//! return without touching the ancestors.

use std::collections::HashSet;
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, Ordering::SeqCst};

use crate::inject::{point, Site};
use crate::reclaim::{
    Debra, ReclaimConfig, ReclaimStats, Record, RecordGuard, RecordKind, RegisterError,
};
use crate::{ConcurrentSet, SetHandle};

pub(crate) struct VersionNode {
    left: *mut VersionNode,
    right: *mut VersionNode,
    /// Keys present below; a leaf's bit.
    sum: u64,
    /// Leaves only.
    completed: AtomicBool,
    guard: RecordGuard,
}

unsafe impl Send for VersionNode {}

unsafe impl Record for VersionNode {
    fn kind(&self) -> RecordKind {
        RecordKind::VersionNode
    }

    fn guard(&self) -> &RecordGuard {
        &self.guard
    }
}

impl VersionNode {
    fn leaf(bit: bool, completed: bool) -> *mut Self {
        Box::into_raw(Box::new(Self {
            left: ptr::null_mut(),
            right: ptr::null_mut(),
            sum: u64::from(bit),
            completed: AtomicBool::new(completed),
            guard: RecordGuard::new(),
        }))
    }

    fn internal(left: *mut Self, right: *mut Self) -> *mut Self {
        Box::into_raw(Box::new(Self {
            left,
            right,
            sum: ver(left).sum + ver(right).sum,
            completed: AtomicBool::new(false),
            guard: RecordGuard::new(),
        }))
    }

    fn is_leaf(&self) -> bool {
        self.left.is_null()
    }
}

#[inline]
fn ver<'a>(p: *mut VersionNode) -> &'a VersionNode {
    let v = unsafe { &*p };
    v.guard.check();
    v
}

pub struct AugmentedTrie {
    k: u32,
    /// Index `1..2^(k+1)`: root at 1, leaf of `x` at `2^k + x`.
    main: Box<[AtomicPtr<VersionNode>]>,
    debra: Debra,
}

unsafe impl Send for AugmentedTrie {}
unsafe impl Sync for AugmentedTrie {}

impl AugmentedTrie {
    pub fn new(k: u32, max_threads: usize) -> Self {
        Self::with_config(k, max_threads, ReclaimConfig::default())
    }

    pub fn with_config(k: u32, max_threads: usize, config: ReclaimConfig) -> Self {
        assert!((1..=26).contains(&k), "key width {k} outside 1..=26");
        let size = 1usize << k;
        let main: Box<[AtomicPtr<VersionNode>]> =
            (0..2 * size).map(|_| AtomicPtr::default()).collect();
        for j in (1..2 * size).rev() {
            let v = if j >= size {
                VersionNode::leaf(false, true)
            } else {
                VersionNode::internal(main[2 * j].load(SeqCst), main[2 * j + 1].load(SeqCst))
            };
            main[j].store(v, SeqCst);
        }
        Self {
            k,
            main,
            debra: Debra::with_config(max_threads, config),
        }
    }

    pub fn register(&self) -> Result<AugTrieHandle<'_>, RegisterError> {
        Ok(AugTrieHandle {
            trie: self,
            pid: self.debra.claim()?,
            _not_sync: PhantomData,
        })
    }

    pub fn reclaim_stats(&self) -> ReclaimStats {
        self.debra.stats()
    }

    fn leaf(&self, x: u64) -> usize {
        (1usize << self.k) + x as usize
    }

    fn size(&self) -> u64 {
        ver(self.main[1].load(SeqCst)).sum
    }

    /// Brings every ancestor of main node `leaf` up to date with at most
    /// two CAS attempts each.
    fn propagate(&self, pid: usize, leaf: usize) {
        let mut j = leaf >> 1;
        while j >= 1 {
            for _ in 0..2 {
                let old = self.main[j].load(SeqCst);
                let left = self.main[2 * j].load(SeqCst);
                let right = self.main[2 * j + 1].load(SeqCst);
                let ov = ver(old);
                if ov.left == left && ov.right == right {
                    break;
                }
                let new = VersionNode::internal(left, right);
                point(Site::TrieNodeCas);
                if self.main[j]
                    .compare_exchange(old, new, SeqCst, SeqCst)
                    .is_ok()
                {
                    unsafe { self.debra.retire(pid, old) };
                    break;
                }
                drop(unsafe { Box::from_raw(new) });
            }
            j >>= 1;
        }
    }

    fn update(&self, pid: usize, x: u64, bit: bool) -> bool {
        let leaf = self.leaf(x);
        let cur = self.main[leaf].load(SeqCst);
        let cv = ver(cur);
        if (cv.sum == 1) == bit {
            if !cv.completed.load(SeqCst) {
                self.propagate(pid, leaf);
            }
            return false;
        }
        let new = VersionNode::leaf(bit, false);
        point(Site::LinkCas);
        match self.main[leaf].compare_exchange(cur, new, SeqCst, SeqCst) {
            Ok(_) => {
                unsafe { self.debra.retire(pid, cur) };
                self.propagate(pid, leaf);
                ver(new).completed.store(true, SeqCst);
                true
            }
            Err(seen) => {
                drop(unsafe { Box::from_raw(new) });
                if !ver(seen).completed.load(SeqCst) {
                    self.propagate(pid, leaf);
                }
                false
            }
        }
    }

    fn search(&self, x: u64) -> bool {
        let lv = ver(self.main[self.leaf(x)].load(SeqCst));
        if lv.completed.load(SeqCst) {
            return lv.sum == 1;
        }
        let mut v = ver(self.main[1].load(SeqCst));
        for level in (0..self.k).rev() {
            if v.sum == 0 {
                return false;
            }
            v = ver(if x >> level & 1 == 1 { v.right } else { v.left });
        }
        v.sum == 1
    }

    fn predecessor(&self, x: u64) -> i64 {
        let mut v = ver(self.main[1].load(SeqCst));
        // Best left sibling seen so far, with the key prefix of its subtrie.
        let mut best: Option<(&VersionNode, u64, u32)> = None;
        for level in (0..self.k).rev() {
            if v.sum == 0 {
                break;
            }
            let prefix = x >> (level + 1);
            if x >> level & 1 == 1 {
                let l = ver(v.left);
                if l.sum > 0 {
                    best = Some((l, prefix << 1, level));
                }
                v = ver(v.right);
            } else {
                v = ver(v.left);
            }
        }
        let Some((mut v, mut prefix, mut level)) = best else {
            return -1;
        };
        while !v.is_leaf() {
            level -= 1;
            let r = ver(v.right);
            if r.sum > 0 {
                v = r;
                prefix = prefix << 1 | 1;
            } else {
                v = ver(v.left);
                prefix <<= 1;
            }
        }
        debug_assert_eq!(level, 0);
        prefix as i64
    }

    /// Quiescent check: every main node's version points at its children's
    /// current versions, every reachable internal version's sum is the sum
    /// of its children's, and the root's sum equals the number of present
    /// leaves. Returns the size.
    pub fn audit(&mut self) -> Result<u64, String> {
        let size = 1usize << self.k;
        for j in 1..size {
            let v = ver(self.main[j].load(SeqCst));
            if v.left != self.main[2 * j].load(SeqCst)
                || v.right != self.main[2 * j + 1].load(SeqCst)
            {
                return Err(format!("main node {j} lags its children"));
            }
        }
        let mut seen = HashSet::new();
        let mut stack = vec![self.main[1].load(SeqCst)];
        while let Some(p) = stack.pop() {
            if !seen.insert(p) {
                continue;
            }
            let v = ver(p);
            if v.guard.is_poisoned() || v.guard.is_bagged() {
                return Err("reachable version node was retired".into());
            }
            if v.is_leaf() {
                if v.sum > 1 {
                    return Err(format!("leaf version with sum {}", v.sum));
                }
                continue;
            }
            if v.sum != ver(v.left).sum + ver(v.right).sum {
                return Err(format!(
                    "version sum {} != {} + {}",
                    v.sum,
                    ver(v.left).sum,
                    ver(v.right).sum
                ));
            }
            stack.push(v.left);
            stack.push(v.right);
        }
        let leaves: u64 = (size..2 * size)
            .map(|j| ver(self.main[j].load(SeqCst)).sum)
            .sum();
        if self.size() != leaves {
            return Err(format!("root sum {} but {leaves} leaves set", self.size()));
        }
        Ok(leaves)
    }

    /// Keys present. Quiescent use only.
    pub fn keys(&mut self) -> Vec<u64> {
        let size = 1usize << self.k;
        (0..size as u64)
            .filter(|&x| ver(self.main[size + x as usize].load(SeqCst)).sum == 1)
            .collect()
    }
}

impl Drop for AugmentedTrie {
    fn drop(&mut self) {
        let mut seen = HashSet::new();
        let mut stack: Vec<_> = self.main.iter().skip(1).map(|a| a.load(SeqCst)).collect();
        while let Some(p) = stack.pop() {
            if p.is_null() || !seen.insert(p) {
                continue;
            }
            let v = unsafe { &*p };
            stack.push(v.left);
            stack.push(v.right);
        }
        for p in seen {
            drop(unsafe { Box::from_raw(p) });
        }
    }
}

pub struct AugTrieHandle<'a> {
    trie: &'a AugmentedTrie,
    pid: usize,
    _not_sync: PhantomData<*mut ()>,
}

unsafe impl Send for AugTrieHandle<'_> {}

impl AugTrieHandle<'_> {
    pub fn pid(&self) -> usize {
        self.pid
    }

    /// Number of keys, read from the root version in one step.
    pub fn size(&mut self) -> u64 {
        self.op(0, |t, _, _| t.size())
    }

    fn op<R>(&mut self, key: u64, f: impl FnOnce(&AugmentedTrie, usize, u64) -> R) -> R {
        assert!(
            key < 1 << self.trie.k,
            "key {key} outside 0..2^{}",
            self.trie.k
        );
        unsafe { self.trie.debra.start_op(self.pid) };
        let r = f(self.trie, self.pid, key);
        unsafe { self.trie.debra.end_op(self.pid) };
        r
    }
}

impl SetHandle for AugTrieHandle<'_> {
    fn insert(&mut self, key: u64) -> bool {
        self.op(key, |t, pid, x| t.update(pid, x, true))
    }

    fn remove(&mut self, key: u64) -> bool {
        self.op(key, |t, pid, x| t.update(pid, x, false))
    }

    fn search(&mut self, key: u64) -> bool {
        self.op(key, |t, _, x| t.search(x))
    }

    fn predecessor(&mut self, key: u64) -> i64 {
        self.op(key, |t, _, x| t.predecessor(x))
    }

    unsafe fn drain_limbo(&mut self) {
        self.trie.debra.drain(self.pid);
    }
}

impl Drop for AugTrieHandle<'_> {
    fn drop(&mut self) {
        self.trie.debra.release(self.pid);
    }
}

impl ConcurrentSet for AugmentedTrie {
    type Handle<'a> = AugTrieHandle<'a>;

    fn register(&self) -> Result<AugTrieHandle<'_>, RegisterError> {
        AugmentedTrie::register(self)
    }

    fn key_bits(&self) -> u32 {
        self.k
    }

    fn name(&self) -> &'static str {
        "augtrie"
    }
}
