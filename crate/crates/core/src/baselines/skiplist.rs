//! Lock-free skip list built from one flag/mark/backlink list per level.
//!
//! Upper-level nodes point at the bottom node of their tower (the *root*);
//! a traversal that meets an upper node whose root is marked unlinks it.
//! A tower is retired as a whole once every node in it has been unlinked,
//! tracked by a reference count on the root, so `down` and `root` pointers
//! never lead to reclaimed memory.

use std::cell::UnsafeCell;
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicI64, AtomicPtr, Ordering::SeqCst};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::inject::{point, Site};
use crate::reclaim::{
    Debra, ReclaimConfig, ReclaimStats, Record, RecordGuard, RecordKind, RegisterError,
};
use crate::word::{AtomicWord, State, Word};
use crate::{ConcurrentSet, Line, SetHandle};

/// Levels used for a 2^20 universe: expected top level plus slack.
pub const DEFAULT_HEIGHT: usize = 20;

#[derive(Clone, Copy, Debug)]
pub struct SkipListConfig {
    pub height: usize,
    /// Tower heights of process `pid` come from a generator seeded by
    /// `(seed, pid)`.
    pub seed: u64,
}

impl Default for SkipListConfig {
    fn default() -> Self {
        Self {
            height: DEFAULT_HEIGHT,
            seed: 0,
        }
    }
}

pub(crate) struct SkipNode {
    succ: AtomicWord,
    backlink: AtomicPtr<SkipNode>,
    key: i64,
    down: *mut SkipNode,
    /// Bottom node of the tower; a root points at itself.
    root: *mut SkipNode,
    guard: RecordGuard,
    // Root only: linked-or-pending nodes of the tower, and its top node.
    refs: AtomicI64,
    top: AtomicPtr<SkipNode>,
}

unsafe impl Send for SkipNode {}

unsafe impl Record for SkipNode {
    fn kind(&self) -> RecordKind {
        RecordKind::SkipNode
    }

    fn guard(&self) -> &RecordGuard {
        &self.guard
    }
}

impl SkipNode {
    fn alloc(key: i64, down: *mut SkipNode, root: *mut SkipNode) -> *mut SkipNode {
        let n = Box::into_raw(Box::new(SkipNode {
            succ: AtomicWord::default(),
            backlink: AtomicPtr::default(),
            key,
            down,
            root,
            guard: RecordGuard::new(),
            refs: AtomicI64::new(1),
            top: AtomicPtr::default(),
        }));
        if root.is_null() {
            unsafe {
                (*n).root = n;
                (*n).top.store(n, SeqCst);
            }
        }
        n
    }
}

#[inline]
fn at<'a>(p: *mut SkipNode) -> &'a SkipNode {
    let n = unsafe { &*p };
    n.guard.check();
    n
}

#[inline]
fn is_marked(p: *mut SkipNode) -> bool {
    at(p).succ.load().state() == State::Marked
}

#[inline]
fn root_marked(p: *mut SkipNode) -> bool {
    is_marked(at(p).root)
}

pub struct SkipList {
    k: u32,
    /// `heads[0]` is the bottom level.
    heads: Box<[*mut SkipNode]>,
    tail: *mut SkipNode,
    config: SkipListConfig,
    debra: Debra,
    rngs: Box<[Line<UnsafeCell<SmallRng>>]>,
}

unsafe impl Send for SkipList {}
unsafe impl Sync for SkipList {}

enum Inserted {
    Linked(*mut SkipNode),
    Duplicate,
}

impl SkipList {
    pub fn new(k: u32, max_threads: usize) -> Self {
        Self::with_config(
            k,
            max_threads,
            SkipListConfig::default(),
            ReclaimConfig::default(),
        )
    }

    pub fn with_config(
        k: u32,
        max_threads: usize,
        config: SkipListConfig,
        reclaim: ReclaimConfig,
    ) -> Self {
        assert!((1..=62).contains(&k), "key width {k} outside 1..=62");
        assert!(config.height >= 1, "skip list needs at least one level");
        let tail = SkipNode::alloc(i64::MAX, ptr::null_mut(), ptr::null_mut());
        let mut heads = Vec::with_capacity(config.height);
        let mut below = ptr::null_mut();
        for _ in 0..config.height {
            let h = SkipNode::alloc(i64::MIN, below, ptr::null_mut());
            at(h).succ.store(Word::link(tail, State::Normal));
            heads.push(h);
            below = h;
        }
        Self {
            k,
            heads: heads.into(),
            tail,
            config,
            debra: Debra::with_config(max_threads, reclaim),
            rngs: (0..max_threads)
                .map(|pid| Line(UnsafeCell::new(Self::rng_for(config.seed, pid))))
                .collect(),
        }
    }

    fn rng_for(seed: u64, pid: usize) -> SmallRng {
        SmallRng::seed_from_u64(seed ^ (pid as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn config(&self) -> SkipListConfig {
        self.config
    }

    pub fn register(&self) -> Result<SkipListHandle<'_>, RegisterError> {
        let pid = self.debra.claim()?;
        unsafe { *self.rngs[pid].0.get() = Self::rng_for(self.config.seed, pid) };
        Ok(SkipListHandle {
            list: self,
            pid,
            _not_sync: PhantomData,
        })
    }

    pub fn reclaim_stats(&self) -> ReclaimStats {
        self.debra.stats()
    }

    fn tower_height(&self, pid: usize) -> usize {
        let rng = unsafe { &mut *self.rngs[pid].0.get() };
        let mut h = 1;
        while h < self.config.height && rng.gen::<bool>() {
            h += 1;
        }
        h
    }

    fn acquire(root: *mut SkipNode) -> bool {
        let refs = &at(root).refs;
        let mut c = refs.load(SeqCst);
        loop {
            if c == 0 {
                return false;
            }
            match refs.compare_exchange(c, c + 1, SeqCst, SeqCst) {
                Ok(_) => return true,
                Err(seen) => c = seen,
            }
        }
    }

    fn release(&self, pid: usize, root: *mut SkipNode) {
        if at(root).refs.fetch_sub(1, SeqCst) == 1 {
            let mut n = at(root).top.load(SeqCst);
            loop {
                let below = at(n).down;
                unsafe { self.debra.retire(pid, n) };
                if n == root {
                    break;
                }
                n = below;
            }
        }
    }

    fn help_marked(&self, pid: usize, prev: *mut SkipNode, del: *mut SkipNode) {
        let next = at(del).succ.load().ptr::<SkipNode>();
        point(Site::SpliceCas);
        if at(prev)
            .succ
            .cas(
                Word::link(del, State::DelFlag),
                Word::link(next, State::Normal),
            )
            .is_ok()
        {
            self.release(pid, at(del).root);
        }
    }

    fn try_mark(&self, pid: usize, del: *mut SkipNode) {
        loop {
            let w = at(del).succ.load();
            match w.state() {
                State::Marked => return,
                State::DelFlag => self.help_flagged(pid, del, w.ptr()),
                _ => {
                    point(Site::MarkCas);
                    let _ = at(del)
                        .succ
                        .cas(w, Word::link(w.ptr::<SkipNode>(), State::Marked));
                }
            }
        }
    }

    fn help_flagged(&self, pid: usize, prev: *mut SkipNode, del: *mut SkipNode) {
        at(del).backlink.store(prev, SeqCst);
        if !is_marked(del) {
            self.try_mark(pid, del);
        }
        self.help_marked(pid, prev, del);
    }

    /// Flags the link from `prev` to `target`. Returns the predecessor used,
    /// whether `target` was still in the list, and whether this call set
    /// the flag.
    fn try_flag(
        &self,
        pid: usize,
        mut prev: *mut SkipNode,
        target: *mut SkipNode,
    ) -> (*mut SkipNode, bool, bool) {
        let flagged = Word::link(target, State::DelFlag);
        loop {
            if at(prev).succ.load() == flagged {
                return (prev, true, false);
            }
            point(Site::DelFlagCas);
            match at(prev)
                .succ
                .cas(Word::link(target, State::Normal), flagged)
            {
                Ok(_) => return (prev, true, true),
                Err(seen) if seen == flagged => return (prev, true, false),
                Err(_) => {
                    while is_marked(prev) {
                        prev = at(prev).backlink.load(SeqCst);
                    }
                    let (p, del) = self.search_right(pid, at(target).key - 1, prev);
                    prev = p;
                    if del != target {
                        return (prev, false, false);
                    }
                }
            }
        }
    }

    /// Returns adjacent nodes `(curr, next)` on `curr`'s level with
    /// `curr.key <= key < next.key`, read from an unmarked `curr`. Unlinks
    /// nodes of deleted towers on the way.
    fn search_right(
        &self,
        pid: usize,
        key: i64,
        mut curr: *mut SkipNode,
    ) -> (*mut SkipNode, *mut SkipNode) {
        loop {
            let w = at(curr).succ.load();
            if w.state() == State::Marked {
                curr = at(curr).backlink.load(SeqCst);
                continue;
            }
            let next = w.ptr::<SkipNode>();
            if at(next).key > key {
                return (curr, next);
            }
            if root_marked(next) {
                let (p, in_list, _) = self.try_flag(pid, curr, next);
                if in_list {
                    self.help_flagged(pid, p, next);
                }
                curr = p;
            } else {
                curr = next;
            }
        }
    }

    fn search_to_level(
        &self,
        pid: usize,
        key: i64,
        level: usize,
    ) -> (*mut SkipNode, *mut SkipNode) {
        let mut curr = self.heads[self.heads.len() - 1];
        for _ in (level + 1..self.heads.len()).rev() {
            curr = self.search_right(pid, key, curr).0;
            curr = at(curr).down;
        }
        self.search_right(pid, key, curr)
    }

    fn insert_node(
        &self,
        pid: usize,
        new: *mut SkipNode,
        mut prev: *mut SkipNode,
        mut next: *mut SkipNode,
    ) -> Inserted {
        let key = at(new).key;
        if at(prev).key == key {
            return Inserted::Duplicate;
        }
        loop {
            let w = at(prev).succ.load();
            if w.state() == State::DelFlag {
                self.help_flagged(pid, prev, w.ptr());
            } else {
                at(new).succ.store(Word::link(next, State::Normal));
                point(Site::LinkCas);
                match at(prev).succ.cas(
                    Word::link(next, State::Normal),
                    Word::link(new, State::Normal),
                ) {
                    Ok(_) => return Inserted::Linked(prev),
                    Err(seen) => {
                        if seen.state() == State::DelFlag {
                            self.help_flagged(pid, prev, seen.ptr());
                        }
                        while is_marked(prev) {
                            prev = at(prev).backlink.load(SeqCst);
                        }
                    }
                }
            }
            (prev, next) = self.search_right(pid, key, prev);
            if at(prev).key == key {
                return Inserted::Duplicate;
            }
        }
    }

    fn delete_node(&self, pid: usize, prev: *mut SkipNode, del: *mut SkipNode) -> bool {
        let (prev, in_list, mine) = self.try_flag(pid, prev, del);
        if in_list {
            self.help_flagged(pid, prev, del);
        }
        mine
    }

    fn insert(&self, pid: usize, key: i64) -> bool {
        let (prev, next) = self.search_to_level(pid, key, 0);
        if at(prev).key == key {
            return false;
        }
        let root = SkipNode::alloc(key, ptr::null_mut(), ptr::null_mut());
        if let Inserted::Duplicate = self.insert_node(pid, root, prev, next) {
            drop(unsafe { Box::from_raw(root) });
            return false;
        }
        let height = self.tower_height(pid);
        let mut last = root;
        for level in 1..height {
            if is_marked(root) || !Self::acquire(root) {
                break;
            }
            let node = SkipNode::alloc(key, last, root);
            at(root).top.store(node, SeqCst);
            let (prev, next) = self.search_to_level(pid, key, level);
            match self.insert_node(pid, node, prev, next) {
                Inserted::Duplicate => {
                    at(root).top.store(last, SeqCst);
                    drop(unsafe { Box::from_raw(node) });
                    self.release(pid, root);
                    break;
                }
                Inserted::Linked(prev) => {
                    if is_marked(root) {
                        self.delete_node(pid, prev, node);
                        break;
                    }
                }
            }
            last = node;
        }
        true
    }

    fn remove(&self, pid: usize, key: i64) -> bool {
        let (prev, del) = self.search_to_level(pid, key - 1, 0);
        if at(del).key != key {
            return false;
        }
        if !self.delete_node(pid, prev, del) {
            return false;
        }
        // Sweeps the rest of the tower out of the upper levels.
        self.search_to_level(pid, key, 1);
        true
    }

    fn search(&self, pid: usize, key: i64) -> bool {
        at(self.search_to_level(pid, key, 0).0).key == key
    }

    fn predecessor(&self, pid: usize, key: i64) -> i64 {
        let curr = self.search_to_level(pid, key - 1, 0).0;
        if curr == self.heads[0] {
            -1
        } else {
            at(curr).key
        }
    }

    fn level_nodes(&self, level: usize) -> Vec<*mut SkipNode> {
        let mut out = Vec::new();
        let mut c = at(self.heads[level]).succ.load().ptr::<SkipNode>();
        while c != self.tail {
            out.push(c);
            c = at(c).succ.load().ptr();
        }
        out
    }

    fn sweep(&self, pid: usize) {
        for &h in self.heads.iter() {
            self.search_right(pid, i64::MAX - 1, h);
        }
    }

    /// Quiescent check after one full traversal of every level: levels are
    /// sorted and unmarked, no surviving upper node belongs to a deleted
    /// tower, and every upper node sits on a node of the same key linked in
    /// the level below. Returns the node count per level.
    pub fn audit(&mut self) -> Result<Vec<usize>, String> {
        {
            let h = self.register().map_err(|e| e.to_string())?;
            unsafe { self.debra.start_op(h.pid) };
            self.sweep(h.pid);
            unsafe { self.debra.end_op(h.pid) };
        }
        let mut counts = Vec::new();
        let mut below: std::collections::HashSet<*mut SkipNode> = Default::default();
        for level in 0..self.heads.len() {
            let nodes = self.level_nodes(level);
            let mut prev_key = i64::MIN;
            for &n in &nodes {
                let nn = at(n);
                if nn.key <= prev_key {
                    return Err(format!("level {level} out of order at key {}", nn.key));
                }
                prev_key = nn.key;
                if nn.succ.load().state() != State::Normal {
                    return Err(format!("level {level} key {} not in normal state", nn.key));
                }
                if level > 0 {
                    if root_marked(n) {
                        return Err(format!("level {level} key {} survives its root", nn.key));
                    }
                    if !below.contains(&nn.down) || at(nn.down).key != nn.key {
                        return Err(format!("level {level} key {} not stacked", nn.key));
                    }
                }
            }
            counts.push(nodes.len());
            below = nodes.into_iter().collect();
        }
        Ok(counts)
    }

    /// Keys at the bottom level. Quiescent use only.
    pub fn keys(&mut self) -> Vec<u64> {
        self.level_nodes(0)
            .into_iter()
            .map(|n| at(n).key as u64)
            .collect()
    }
}

impl Drop for SkipList {
    fn drop(&mut self) {
        if let Ok(pid) = self.debra.claim() {
            unsafe { self.debra.start_op(pid) };
            self.sweep(pid);
            unsafe { self.debra.end_op(pid) };
            self.debra.release(pid);
        }
        for level in 0..self.heads.len() {
            for n in self.level_nodes(level) {
                drop(unsafe { Box::from_raw(n) });
            }
        }
        for &h in self.heads.iter() {
            drop(unsafe { Box::from_raw(h) });
        }
        drop(unsafe { Box::from_raw(self.tail) });
    }
}

pub struct SkipListHandle<'a> {
    list: &'a SkipList,
    pid: usize,
    _not_sync: PhantomData<*mut ()>,
}

unsafe impl Send for SkipListHandle<'_> {}

impl SkipListHandle<'_> {
    pub fn pid(&self) -> usize {
        self.pid
    }

    fn op<R>(&mut self, key: u64, f: impl FnOnce(&SkipList, usize, i64) -> R) -> R {
        assert!(
            key < 1 << self.list.k,
            "key {key} outside 0..2^{}",
            self.list.k
        );
        unsafe { self.list.debra.start_op(self.pid) };
        let r = f(self.list, self.pid, key as i64);
        unsafe { self.list.debra.end_op(self.pid) };
        r
    }
}

impl SetHandle for SkipListHandle<'_> {
    fn insert(&mut self, key: u64) -> bool {
        self.op(key, SkipList::insert)
    }

    fn remove(&mut self, key: u64) -> bool {
        self.op(key, SkipList::remove)
    }

    fn search(&mut self, key: u64) -> bool {
        self.op(key, SkipList::search)
    }

    fn predecessor(&mut self, key: u64) -> i64 {
        self.op(key, SkipList::predecessor)
    }

    unsafe fn drain_limbo(&mut self) {
        self.list.debra.drain(self.pid);
    }
}

impl Drop for SkipListHandle<'_> {
    fn drop(&mut self) {
        self.list.debra.release(self.pid);
    }
}

impl ConcurrentSet for SkipList {
    type Handle<'a> = SkipListHandle<'a>;

    fn register(&self) -> Result<SkipListHandle<'_>, RegisterError> {
        SkipList::register(self)
    }

    fn key_bits(&self) -> u32 {
        self.k
    }

    fn name(&self) -> &'static str {
        "skiplist"
    }
}
