//! Lock-free binary trie over `0..2^k` with constant-step `search`.
//!
//! Membership of `x` is decided by the first active node of `x`'s latest
//! list. Internal trie nodes hold no bits; each points at a delete node of
//! some leaf below it, and its *interpreted bit* is derived from that key's
//! first active node and the two boundary fields of delete nodes. Updates
//! announce themselves in the ascending and descending update lists, and
//! predecessor queries announce themselves in the query list so updates can
//! notify them. A query combines a relaxed walk over the interpreted bits
//! with everything it learned from the announcements.

mod predecessor;

use std::cell::UnsafeCell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicPtr, Ordering::SeqCst};

use crate::alist::{Ruall, Uall};
use crate::inject::{point, Site};
use crate::node::{node, Kind, UpdateNode};
use crate::pall::{NotifyNode, PredecessorList, PredecessorNode};
use crate::reclaim::{Debra, ReclaimConfig, ReclaimStats, Record, RegisterError, ShadowReport};
use crate::{ConcurrentSet, Line, SetHandle};

/// Largest supported key width.
pub const MAX_KEY_BITS: u32 = 24;
/// Default number of process slots.
pub const DEFAULT_MAX_THREADS: usize = 512;

/// Per-process spares and scratch space.
#[derive(Default)]
struct Local {
    spare_ins: Option<Box<UpdateNode>>,
    spare_del: Option<Box<UpdateNode>>,
    spare_notify: Option<Box<NotifyNode>>,
    ikeys: Vec<i64>,
    scratch: predecessor::Scratch,
}

pub struct Trie {
    k: u32,
    latest: Box<[AtomicPtr<UpdateNode>]>,
    /// Index `1..2^k`, root at 1; children of `j` are `2j` and `2j + 1`.
    nodes: Box<[AtomicPtr<UpdateNode>]>,
    uall: Uall,
    ruall: Ruall,
    pall: PredecessorList,
    debra: Debra,
    locals: Box<[Line<UnsafeCell<Local>>]>,
}

// Each `Local` is only touched by the holder of its process slot.
unsafe impl Sync for Trie {}
unsafe impl Send for Trie {}

impl Trie {
    /// An empty trie over `0..2^k` for up to `max_threads` registered
    /// threads, using the reclamation mode from the environment.
    pub fn new(k: u32, max_threads: usize) -> Self {
        Self::with_config(k, max_threads, ReclaimConfig::default())
    }

    pub fn with_config(k: u32, max_threads: usize, config: ReclaimConfig) -> Self {
        assert!(
            (1..=MAX_KEY_BITS).contains(&k),
            "key width {k} outside 1..={MAX_KEY_BITS}"
        );
        let size = 1usize << k;
        let latest: Box<[AtomicPtr<UpdateNode>]> = (0..size)
            .map(|x| {
                let d = UpdateNode::new(Kind::Del, x as i64, k);
                d.set_active();
                d.set_upper0(k);
                let refs = if x == 0 { k } else { x.trailing_zeros().min(k) };
                d.set_dcount(i64::from(refs) + 1);
                AtomicPtr::new(Box::into_raw(d))
            })
            .collect();
        // Each internal node starts out pointing at its leftmost leaf.
        let nodes = (0..size)
            .map(|j| {
                if j == 0 {
                    return AtomicPtr::default();
                }
                let h = k - j.ilog2();
                let leftmost = (j << h) - size;
                AtomicPtr::new(latest[leftmost].load(SeqCst))
            })
            .collect();
        Self {
            k,
            latest,
            nodes,
            uall: Uall::new(max_threads),
            ruall: Ruall::new(max_threads),
            pall: PredecessorList::new(),
            debra: Debra::with_config(max_threads, config),
            locals: (0..max_threads).map(|_| Line::default()).collect(),
        }
    }

    pub fn key_bits(&self) -> u32 {
        self.k
    }

    pub fn register(&self) -> Result<TrieHandle<'_>, RegisterError> {
        Ok(TrieHandle {
            trie: self,
            pid: self.debra.claim()?,
            _not_sync: PhantomData,
        })
    }

    pub fn reclaim_stats(&self) -> ReclaimStats {
        self.debra.stats()
    }

    pub fn verify_shadow(&mut self) -> ShadowReport {
        self.debra.verify_shadow()
    }

    #[inline]
    fn universe(&self) -> usize {
        1 << self.k
    }

    #[inline]
    fn leaf(&self, x: i64) -> usize {
        self.universe() + x as usize
    }

    #[inline]
    fn height(&self, j: usize) -> u32 {
        self.k - j.ilog2()
    }

    #[allow(clippy::mut_from_ref)]
    unsafe fn local(&self, pid: usize) -> &mut Local {
        &mut *self.locals[pid].0.get()
    }

    #[inline]
    fn first_active(&self, x: i64) -> *mut UpdateNode {
        let u = self.latest[x as usize].load(SeqCst);
        let un = unsafe { node(u) };
        if un.is_active() {
            return u;
        }
        let next = un.latest_next();
        if next.is_null() {
            u
        } else {
            next
        }
    }

    #[inline]
    fn is_first_active(&self, u: *mut UpdateNode) -> bool {
        self.first_active(unsafe { node(u) }.key()) == u
    }

    fn kind(u: *mut UpdateNode) -> Kind {
        unsafe { node(u) }.kind()
    }

    /// Interpreted bit of trie index `j` (leaves are `2^k + x`).
    pub(crate) fn interpreted_bit(&self, j: usize) -> bool {
        if j >= self.universe() {
            return Self::kind(self.first_active((j - self.universe()) as i64)) == Kind::Ins;
        }
        let d = self.nodes[j].load(SeqCst);
        let z = unsafe { node(d) }.key();
        let fa = self.first_active(z);
        let fan = unsafe { node(fa) };
        if fan.kind() == Kind::Ins {
            return true;
        }
        let h = self.height(j);
        h >= fan.lower1() || h > fan.upper0()
    }

    fn children_clear(&self, j: usize) -> bool {
        !self.interpreted_bit(2 * j) && !self.interpreted_bit(2 * j + 1)
    }

    /// Sequential predecessor walk over interpreted bits; `None` when a
    /// concurrent update made the walk inconsistent.
    pub(crate) fn relaxed_predecessor(&self, x: i64) -> Option<i64> {
        let mut j = self.leaf(x);
        loop {
            if j == 1 {
                return Some(-1);
            }
            if j & 1 == 1 && self.interpreted_bit(j - 1) {
                j -= 1;
                break;
            }
            j >>= 1;
        }
        while j < self.universe() {
            if self.interpreted_bit(2 * j + 1) {
                j = 2 * j + 1;
            } else if self.interpreted_bit(2 * j) {
                j *= 2;
            } else {
                return None;
            }
        }
        Some((j - self.universe()) as i64)
    }

    fn retire(&self, pid: usize, u: *mut UpdateNode) {
        unsafe { self.debra.retire(pid, u) }
    }

    fn dcount_dec(&self, pid: usize, d: *mut UpdateNode) {
        let left = unsafe { node(d) }.dcount_add(-1);
        debug_assert!(left >= 0, "delete node reference count went negative");
        if left == 0 {
            self.retire(pid, d);
        }
    }

    /// Announces `w` and makes it the first active node of its key,
    /// unlinking the node it displaced.
    fn activate(&self, pid: usize, w: *mut UpdateNode) {
        unsafe {
            self.uall.insert(pid, w);
            self.ruall.insert(pid, w);
        }
        let wn = unsafe { node(w) };
        wn.set_active();
        let old = wn.take_latest_next();
        if !old.is_null() {
            match Self::kind(old) {
                Kind::Ins => self.retire(pid, old),
                Kind::Del => self.dcount_dec(pid, old),
            }
        }
    }

    fn help_activate(&self, pid: usize, w: *mut UpdateNode, prev: *mut UpdateNode) {
        if unsafe { node(w) }.latest_next() == prev {
            self.activate(pid, w);
        }
    }

    fn search(&self, x: i64) -> bool {
        Self::kind(self.first_active(x)) == Kind::Ins
    }

    fn insert(&self, pid: usize, x: i64) -> bool {
        let fa = self.first_active(x);
        if Self::kind(fa) == Kind::Ins {
            return false;
        }
        let local = unsafe { self.local(pid) };
        let i_box = match local.spare_ins.take() {
            Some(b) => {
                b.reset(x, self.k);
                b
            }
            None => UpdateNode::new(Kind::Ins, x, self.k),
        };
        i_box.set_latest_next(fa);
        let i = Box::into_raw(i_box);
        point(Site::LatestCas);
        if let Err(winner) = self.latest[x as usize].compare_exchange(fa, i, SeqCst, SeqCst) {
            local.spare_ins = Some(unsafe { Box::from_raw(i) });
            self.help_activate(pid, winner, fa);
            return false;
        }
        self.activate(pid, i);
        point(Site::Activated);
        let inode = unsafe { node(i) };
        let leaf = self.leaf(x);
        for h in 1..=self.k {
            let j = leaf >> h;
            let z = unsafe { node(self.nodes[j].load(SeqCst)) }.key();
            let d = self.first_active(z);
            let dn = unsafe { node(d) };
            if dn.kind() == Kind::Del && dn.upper0() >= h && dn.lower1() > h {
                inode.set_target(z, d);
                if !self.is_first_active(i) {
                    break;
                }
                dn.lower1_write(h);
            }
        }
        self.notify_all(pid, i);
        unsafe {
            self.uall.remove(i);
            self.ruall.remove(i);
        }
        true
    }

    fn remove(&self, pid: usize, x: i64) -> bool {
        let i = self.first_active(x);
        if Self::kind(i) == Kind::Del {
            return false;
        }
        let (pred1, pnode1) = self.predecessor_inner(pid, x);
        let local = unsafe { self.local(pid) };
        let d_box = match local.spare_del.take() {
            Some(b) => {
                b.reset(x, self.k);
                b
            }
            None => UpdateNode::new(Kind::Del, x, self.k),
        };
        d_box.set_del_pred(pred1, pnode1);
        d_box.set_latest_next(i);
        let d = Box::into_raw(d_box);
        if !unsafe { node(i) }.uall_marked() {
            self.notify_all(pid, i);
        }
        point(Site::LatestCas);
        if let Err(winner) = self.latest[x as usize].compare_exchange(i, d, SeqCst, SeqCst) {
            let local = unsafe { self.local(pid) };
            local.spare_del = Some(unsafe { Box::from_raw(d) });
            self.help_activate(pid, winner, i);
            self.finish_query(pid, pnode1);
            return false;
        }
        self.activate(pid, d);
        point(Site::Activated);
        let inode = unsafe { node(i) };
        let target = inode.target();
        if !target.is_null() && self.first_active(inode.target_key()) == target {
            unsafe { node(target) }.set_stop();
        }
        let (pred2, pnode2) = self.predecessor_inner(pid, x);
        let dn = unsafe { node(d) };
        dn.set_del_pred2(pred2);
        self.clear_ancestors(pid, x, d);
        self.notify_all(pid, d);
        unsafe {
            self.uall.remove(d);
            self.ruall.remove(d);
        }
        self.finish_query(pid, pnode1);
        self.finish_query(pid, pnode2);
        self.dcount_dec(pid, d);
        true
    }

    /// Walks up from leaf `x` pointing trie nodes at `d` while their
    /// subtrees look empty.
    fn clear_ancestors(&self, pid: usize, x: i64, d: *mut UpdateNode) {
        let dn = unsafe { node(d) };
        let leaf = self.leaf(x);
        for h in 1..=self.k {
            let j = leaf >> h;
            let mut failures = 0;
            loop {
                if !self.children_clear(j)
                    || dn.stop()
                    || !self.is_first_active(d)
                    || dn.lower1() != self.k + 1
                {
                    return;
                }
                let old = self.nodes[j].load(SeqCst);
                dn.dcount_add(1);
                point(Site::TrieNodeCas);
                if self.nodes[j]
                    .compare_exchange(old, d, SeqCst, SeqCst)
                    .is_ok()
                {
                    self.dcount_dec(pid, old);
                    if self.children_clear(j) {
                        dn.set_upper0(h);
                    }
                    break;
                }
                self.dcount_dec(pid, d);
                failures += 1;
                if failures == 2 {
                    return;
                }
            }
        }
    }

    /// Tells every announced query about `u` while `u` stays first active.
    fn notify_all(&self, pid: usize, u: *mut UpdateNode) {
        let local = unsafe { self.local(pid) };
        let un = unsafe { node(u) };
        let ukey = un.key();
        local.ikeys.clear();
        let mut c = self.uall.first();
        while let Some(n) = c {
            let nn = unsafe { node(n) };
            if nn.kind() == Kind::Ins && self.is_first_active(n) {
                local.ikeys.push(nn.key());
            }
            c = unsafe { self.uall.read_next(n) };
        }
        if !local.ikeys.is_sorted() {
            local.ikeys.sort_unstable();
        }
        let mut p = self.pall.first();
        while let Some(pn) = p {
            if !self.is_first_active(u) {
                return;
            }
            let q = unsafe { &*pn };
            Record::guard(q).check();
            let below = local.ikeys.partition_point(|&k| k < q.key());
            let max = if below == 0 {
                -1
            } else {
                local.ikeys[below - 1]
            };
            let threshold = unsafe { node(q.cursor_read(&self.ruall)) }.key();
            let msg = Box::into_raw(local.spare_notify.take().unwrap_or_else(NotifyNode::new));
            unsafe { &*msg }.fill(u, ukey, max, threshold);
            loop {
                point(Site::NotifyPush);
                if q.push_notify(msg) {
                    break;
                }
                if !self.is_first_active(u) {
                    local.spare_notify = Some(unsafe { Box::from_raw(msg) });
                    return;
                }
            }
            p = unsafe { self.pall.read_next(pn) };
        }
    }

    /// Unannounces and retires a query node.
    fn finish_query(&self, pid: usize, p: *mut PredecessorNode) {
        unsafe {
            self.pall.remove(p);
            self.debra.retire(pid, p);
        }
    }

    fn predecessor(&self, pid: usize, x: i64) -> i64 {
        let (ans, p) = self.predecessor_inner(pid, x);
        self.finish_query(pid, p);
        ans
    }

    /// Quiescent consistency check: latest lists well formed, every trie
    /// node's interpreted bit equal to the OR of its leaves, and both
    /// announcement lists empty.
    pub fn audit(&mut self) -> Result<(), String> {
        for x in 0..self.universe() {
            let u = self.latest[x].load(SeqCst);
            let un = unsafe { &*u };
            if !un.is_active() {
                return Err(format!("head of key {x} is inactive"));
            }
            if !un.latest_next().is_null() {
                return Err(format!("latest list of key {x} has two nodes at rest"));
            }
            if un.key() != x as i64 {
                return Err(format!("latest list of key {x} holds key {}", un.key()));
            }
        }
        for j in (1..self.universe()).rev() {
            let or = self.interpreted_bit(2 * j) || self.interpreted_bit(2 * j + 1);
            if self.interpreted_bit(j) != or {
                return Err(format!("trie node {j} bit disagrees with its children"));
            }
            let d = unsafe { &*self.nodes[j].load(SeqCst) };
            let h = self.height(j);
            let lo = (j << h) - self.universe();
            if d.kind() != Kind::Del || !(lo..lo + (1 << h)).contains(&(d.key() as usize)) {
                return Err(format!("trie node {j} points outside its subtree"));
            }
        }
        for (name, n) in [
            ("ascending", self.uall.snapshot().len()),
            ("descending", self.ruall.snapshot().len()),
        ] {
            if n != 0 {
                return Err(format!("{name} update list holds {n} nodes at rest"));
            }
        }
        if self.pall.first().is_some() {
            return Err("query list is not empty at rest".into());
        }
        self.uall.audit()?;
        self.ruall.audit()?;
        Ok(())
    }

    /// Keys present, read from the latest lists. Quiescent use only.
    pub fn keys(&mut self) -> Vec<u64> {
        (0..self.universe() as u64)
            .filter(|&x| self.search(x as i64))
            .collect()
    }
}

impl Drop for Trie {
    fn drop(&mut self) {
        let mut owned: Vec<*mut UpdateNode> = Vec::new();
        for a in self.latest.iter().chain(self.nodes.iter().skip(1)) {
            let p = a.load(SeqCst);
            owned.push(p);
            let next = unsafe { &*p }.latest_next();
            if !next.is_null() {
                owned.push(next);
            }
        }
        owned.sort_unstable();
        owned.dedup();
        for p in owned {
            drop(unsafe { Box::from_raw(p) });
        }
        for l in self.locals.iter_mut() {
            *l.0.get_mut() = Local::default();
        }
    }
}

/// A registered thread's access to a [`Trie`].
pub struct TrieHandle<'a> {
    trie: &'a Trie,
    pid: usize,
    _not_sync: PhantomData<*mut ()>,
}

unsafe impl Send for TrieHandle<'_> {}

impl TrieHandle<'_> {
    pub fn pid(&self) -> usize {
        self.pid
    }

    fn check(&self, x: u64) -> i64 {
        assert!(
            x < self.trie.universe() as u64,
            "key {x} outside 0..2^{}",
            self.trie.k
        );
        x as i64
    }

    fn op<R>(&mut self, f: impl FnOnce(&Trie, usize) -> R) -> R {
        unsafe { self.trie.debra.start_op(self.pid) };
        let r = f(self.trie, self.pid);
        unsafe { self.trie.debra.end_op(self.pid) };
        r
    }

    /// The relaxed walk alone: exact when no update runs concurrently.
    pub fn relaxed_predecessor(&mut self, x: u64) -> Option<i64> {
        let x = self.check(x);
        self.op(|t, _| t.relaxed_predecessor(x))
    }

    /// Interpreted bit of trie index `j` (`1..2^k` internal, `2^k + x`
    /// for leaf `x`).
    pub fn interpreted_bit(&mut self, j: usize) -> bool {
        assert!(j >= 1 && j < 2 * self.trie.universe());
        self.op(|t, _| t.interpreted_bit(j))
    }
}

impl SetHandle for TrieHandle<'_> {
    fn insert(&mut self, key: u64) -> bool {
        let x = self.check(key);
        self.op(|t, pid| t.insert(pid, x))
    }

    fn remove(&mut self, key: u64) -> bool {
        let x = self.check(key);
        self.op(|t, pid| t.remove(pid, x))
    }

    fn search(&mut self, key: u64) -> bool {
        let x = self.check(key);
        self.op(|t, _| t.search(x))
    }

    fn predecessor(&mut self, key: u64) -> i64 {
        let x = self.check(key);
        self.op(|t, pid| t.predecessor(pid, x))
    }

    unsafe fn drain_limbo(&mut self) {
        self.trie.debra.drain(self.pid);
    }
}

impl Drop for TrieHandle<'_> {
    fn drop(&mut self) {
        self.trie.debra.release(self.pid);
    }
}

impl ConcurrentSet for Trie {
    type Handle<'a> = TrieHandle<'a>;

    fn register(&self) -> Result<TrieHandle<'_>, RegisterError> {
        Trie::register(self)
    }

    fn key_bits(&self) -> u32 {
        self.k
    }

    fn name(&self) -> &'static str {
        "kotrie"
    }
}

#[cfg(test)]
mod tests;
