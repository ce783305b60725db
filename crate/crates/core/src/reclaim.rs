//! Epoch-based reclamation with [`BAGS`] limbo bags per process.
//!
//! Every operation is bracketed by `start_op`/`end_op`. A retired record
//! goes into the caller's current limbo bag; the bag is emptied the next
//! time the caller rotates back to it, which happens only after the global
//! epoch advanced [`BAGS`] times as seen by that caller. The epoch advances
//! once every process has been seen either quiescent or announcing the
//! current epoch.
//!
//! Setting the environment variable named by [`DEBUG_ENV`] to `1` turns on
//! debug mode for every domain created afterwards (or use
//! [`ReclaimConfig`] directly). In debug mode reclaimed records are
//! poisoned and held in a bounded quarantine instead of being freed at
//! once, so late reads show up in [`poison_hits`], and the epoch-advance
//! rule is re-checked by a shadow log (see [`Debra::verify_shadow`]).

use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::Relaxed, Ordering::SeqCst};

use thiserror::Error;

use crate::Line;

/// Number of limbo bags per process.
pub const BAGS: usize = 5;

/// Environment variable that switches new domains into debug mode.
pub const DEBUG_ENV: &str = "KOTRIE_RECLAIM_DEBUG";

const GUARD_LIVE: u64 = 0x6c69_7665_0000_0001;
const GUARD_BAGGED: u64 = 0x6261_6767_0000_0002;
const GUARD_POISONED: u64 = 0xdead_beef_dead_beef;

static POISON_HITS: AtomicU64 = AtomicU64::new(0);
/// Set once any debug-mode domain exists; gates the per-dereference check.
static CHECKING: AtomicBool = AtomicBool::new(false);

/// Reads of poisoned records observed by this process so far.
pub fn poison_hits() -> u64 {
    POISON_HITS.load(SeqCst)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegisterError {
    #[error("all {0} process slots are in use")]
    Full(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecordKind {
    InsertNode,
    DelNode,
    PredecessorNode,
    VersionNode,
    SkipNode,
}

/// Lifecycle word embedded in every reclaimable record.
#[derive(Debug)]
pub struct RecordGuard(AtomicU64);

impl RecordGuard {
    pub const fn new() -> Self {
        Self(AtomicU64::new(GUARD_LIVE))
    }

    /// Counts a hit if the record has already been reclaimed in debug mode.
    #[inline]
    pub fn check(&self) {
        if CHECKING.load(Relaxed) && self.0.load(Relaxed) == GUARD_POISONED {
            POISON_HITS.fetch_add(1, Relaxed);
        }
    }

    pub fn is_poisoned(&self) -> bool {
        self.0.load(SeqCst) == GUARD_POISONED
    }

    pub fn is_bagged(&self) -> bool {
        self.0.load(SeqCst) == GUARD_BAGGED
    }
}

impl Default for RecordGuard {
    fn default() -> Self {
        Self::new()
    }
}

/// A heap record that may be handed to [`Debra`] for deferred freeing.
///
/// # Safety
/// `guard` must return a field of `self`, and the record must have been
/// allocated with `Box`.
pub unsafe trait Record: Send + 'static {
    fn kind(&self) -> RecordKind;
    fn guard(&self) -> &RecordGuard;
}

struct Retired {
    ptr: *mut (),
    guard: *const RecordGuard,
    free: unsafe fn(*mut ()),
    kind: RecordKind,
    tag: u64,
}

unsafe fn free_box<T>(p: *mut ()) {
    drop(Box::from_raw(p.cast::<T>()));
}

impl Retired {
    unsafe fn free(self) {
        (self.free)(self.ptr);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReclaimConfig {
    /// Poison and quarantine reclaimed records and keep the shadow log.
    pub debug: bool,
    /// Poisoned records kept per process before the oldest is really freed.
    pub quarantine: usize,
}

impl ReclaimConfig {
    pub fn from_env() -> Self {
        let debug = std::env::var(DEBUG_ENV)
            .map(|v| matches!(v.as_str(), "1" | "true" | "yes" | "on"))
            .unwrap_or(false);
        Self {
            debug,
            quarantine: 1 << 16,
        }
    }

    pub fn debug() -> Self {
        Self {
            debug: true,
            ..Self::from_env()
        }
    }
}

impl Default for ReclaimConfig {
    fn default() -> Self {
        Self::from_env()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReclaimStats {
    pub epoch: u64,
    pub retired: u64,
    pub freed: u64,
    /// Records handed to `retire` while already bagged or poisoned.
    pub double_bags: u64,
    /// Records drained with fewer than `BAGS - 1` epoch advances since
    /// they were bagged.
    pub early_drains: u64,
    pub by_kind: [u64; 5],
}

/// Result of [`Debra::verify_shadow`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ShadowReport {
    pub increments: u64,
    pub violations: u64,
}

#[derive(Default)]
struct Counters {
    retired: AtomicU64,
    freed: AtomicU64,
    double_bags: AtomicU64,
    early_drains: AtomicU64,
    by_kind: [AtomicU64; 5],
}

/// Per-process record of the epochs during which it was quiescent.
struct Shadow {
    /// Epoch read just before the last `end_op` announcement; `None` while
    /// inside an operation.
    open_since: Option<u64>,
    covered: Vec<u64>,
    increments: Vec<u64>,
}

impl Shadow {
    fn new() -> Self {
        Self {
            open_since: Some(0),
            covered: Vec::new(),
            increments: Vec::new(),
        }
    }

    fn cover(&mut self, lo: u64, hi: u64) {
        let words = (hi / 64 + 1) as usize;
        if self.covered.len() < words {
            self.covered.resize(words, 0);
        }
        for e in lo..=hi {
            self.covered[(e / 64) as usize] |= 1 << (e % 64);
        }
    }

    fn covers(&self, e: u64) -> bool {
        if matches!(self.open_since, Some(lo) if lo <= e) {
            return true;
        }
        self.covered
            .get((e / 64) as usize)
            .is_some_and(|w| w & (1 << (e % 64)) != 0)
    }
}

const NO_EPOCH: u64 = u64::MAX;

struct Local {
    epoch: u64,
    check: usize,
    bag: usize,
    bags: [Vec<Retired>; BAGS],
    quarantine: VecDeque<Retired>,
    shadow: Shadow,
}

impl Local {
    fn new() -> Self {
        Self {
            epoch: NO_EPOCH,
            check: 1,
            bag: BAGS - 1,
            bags: Default::default(),
            quarantine: VecDeque::new(),
            shadow: Shadow::new(),
        }
    }
}

#[inline]
fn announcement(epoch: u64, quiescent: bool) -> u64 {
    (epoch << 1) | u64::from(quiescent)
}

/// A reclamation domain shared by one data structure's threads.
pub struct Debra {
    epoch: Line<AtomicU64>,
    announce: Box<[Line<AtomicU64>]>,
    claimed: Box<[AtomicBool]>,
    locals: Box<[Line<UnsafeCell<Local>>]>,
    config: ReclaimConfig,
    counters: Counters,
}

// Each `Local` is touched only by the thread holding its slot.
unsafe impl Sync for Debra {}
unsafe impl Send for Debra {}

impl Debra {
    pub fn new(max_threads: usize) -> Self {
        Self::with_config(max_threads, ReclaimConfig::default())
    }

    pub fn with_config(max_threads: usize, config: ReclaimConfig) -> Self {
        assert!(max_threads >= 1, "need at least one process slot");
        if config.debug {
            CHECKING.store(true, SeqCst);
        }
        Self {
            epoch: Line(AtomicU64::new(0)),
            announce: (0..max_threads)
                .map(|_| Line(AtomicU64::new(announcement(0, true))))
                .collect(),
            claimed: (0..max_threads).map(|_| AtomicBool::new(false)).collect(),
            locals: (0..max_threads)
                .map(|_| Line(UnsafeCell::new(Local::new())))
                .collect(),
            config,
            counters: Counters::default(),
        }
    }

    pub fn max_threads(&self) -> usize {
        self.announce.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(SeqCst)
    }

    pub fn config(&self) -> &ReclaimConfig {
        &self.config
    }

    /// Reserves a free process slot.
    pub fn register(&self) -> Result<Participant<'_>, RegisterError> {
        let pid = self.claim()?;
        Ok(Participant {
            domain: self,
            pid,
            _not_sync: PhantomData,
        })
    }

    pub(crate) fn claim(&self) -> Result<usize, RegisterError> {
        self.claimed
            .iter()
            .position(|c| c.compare_exchange(false, true, SeqCst, SeqCst).is_ok())
            .ok_or(RegisterError::Full(self.max_threads()))
    }

    /// Releases a slot reserved by `claim`.
    pub(crate) fn release(&self, pid: usize) {
        // A thread unwinding out of an operation must not pin the epoch.
        let local = unsafe { self.local(pid) };
        let e = if local.epoch == NO_EPOCH {
            0
        } else {
            local.epoch
        };
        self.announce[pid].store(announcement(e, true), SeqCst);
        self.claimed[pid].store(false, SeqCst);
    }

    pub fn stats(&self) -> ReclaimStats {
        let c = &self.counters;
        ReclaimStats {
            epoch: self.epoch(),
            retired: c.retired.load(SeqCst),
            freed: c.freed.load(SeqCst),
            double_bags: c.double_bags.load(SeqCst),
            early_drains: c.early_drains.load(SeqCst),
            by_kind: std::array::from_fn(|i| c.by_kind[i].load(SeqCst)),
        }
    }

    /// Records still waiting in limbo bags or quarantine.
    pub fn pending(&mut self) -> usize {
        self.locals
            .iter_mut()
            .map(|l| {
                let l = l.0.get_mut();
                l.bags.iter().map(Vec::len).sum::<usize>()
            })
            .sum()
    }

    /// Checks, for every epoch advance `e -> e+1` logged in debug mode,
    /// that every process was quiescent at some point while the epoch was
    /// `e`. Intervals are recorded conservatively (widened), so a reported
    /// violation is a real one.
    pub fn verify_shadow(&mut self) -> ShadowReport {
        let locals: Vec<&Local> = self.locals.iter_mut().map(|l| &*l.0.get_mut()).collect();
        let mut report = ShadowReport::default();
        for l in &locals {
            for &e in &l.shadow.increments {
                report.increments += 1;
                if !locals.iter().all(|j| j.shadow.covers(e)) {
                    report.violations += 1;
                }
            }
        }
        report
    }

    /// # Safety
    /// The caller must hold slot `pid`.
    #[allow(clippy::mut_from_ref)]
    unsafe fn local(&self, pid: usize) -> &mut Local {
        &mut *self.locals[pid].0.get()
    }

    /// # Safety
    /// The caller must hold slot `pid` and must not be inside an operation.
    pub(crate) unsafe fn start_op(&self, pid: usize) {
        let local = self.local(pid);
        let n = self.max_threads();
        let e = self.epoch.load(SeqCst);
        if e != local.epoch {
            self.rotate_and_reclaim(local, e);
            local.check = 1;
            local.epoch = e;
        }
        let other = self.announce[(pid + local.check) % n].load(SeqCst);
        if other >> 1 == e || other & 1 == 1 {
            local.check += 1;
            // `>=` rather than `==` so that a single process (nobody else
            // to check) still advances the epoch.
            if local.check >= n
                && self
                    .epoch
                    .compare_exchange(e, e + 1, SeqCst, SeqCst)
                    .is_ok()
                && self.config.debug
            {
                local.shadow.increments.push(e);
            }
        }
        self.announce[pid].store(announcement(e, false), SeqCst);
        if self.config.debug {
            let hi = self.epoch.load(SeqCst);
            if let Some(lo) = local.shadow.open_since.take() {
                local.shadow.cover(lo, hi);
            }
        }
    }

    /// # Safety
    /// The caller must hold slot `pid` and be inside an operation.
    pub(crate) unsafe fn end_op(&self, pid: usize) {
        let local = self.local(pid);
        if self.config.debug {
            local.shadow.open_since = Some(self.epoch.load(SeqCst));
        }
        self.announce[pid].store(announcement(local.epoch, true), SeqCst);
    }

    unsafe fn rotate_and_reclaim(&self, local: &mut Local, now: u64) {
        local.bag = (local.bag + 1) % BAGS;
        let bag = std::mem::take(&mut local.bags[local.bag]);
        let mut bag = bag;
        for r in bag.drain(..) {
            if now.wrapping_sub(r.tag) < (BAGS - 1) as u64 {
                self.counters.early_drains.fetch_add(1, Relaxed);
            }
            self.reclaim(local, r);
        }
        // Keep the allocation for reuse.
        local.bags[local.bag] = bag;
    }

    unsafe fn reclaim(&self, local: &mut Local, r: Retired) {
        let guard = &*r.guard;
        if guard
            .0
            .compare_exchange(GUARD_BAGGED, GUARD_POISONED, SeqCst, SeqCst)
            .is_err()
        {
            self.counters.double_bags.fetch_add(1, Relaxed);
            return;
        }
        if self.config.debug {
            local.quarantine.push_back(r);
            if local.quarantine.len() > self.config.quarantine {
                let old = local.quarantine.pop_front().unwrap();
                self.counters.freed.fetch_add(1, Relaxed);
                old.free();
            }
        } else {
            self.counters.freed.fetch_add(1, Relaxed);
            r.free();
        }
    }

    /// Hands `ptr` to the caller's current limbo bag.
    ///
    /// # Safety
    /// The caller must hold slot `pid` and be inside an operation; `ptr`
    /// must come from `Box::into_raw`, must already be unreachable for
    /// operations that start later, and is not touched by the caller again
    /// after its operation ends.
    pub(crate) unsafe fn retire<R: Record>(&self, pid: usize, ptr: *mut R) {
        let guard = (*ptr).guard();
        let kind = (*ptr).kind();
        if guard
            .0
            .compare_exchange(GUARD_LIVE, GUARD_BAGGED, SeqCst, SeqCst)
            .is_err()
        {
            self.counters.double_bags.fetch_add(1, Relaxed);
            return;
        }
        self.counters.retired.fetch_add(1, Relaxed);
        self.counters.by_kind[kind as usize].fetch_add(1, Relaxed);
        let local = self.local(pid);
        let tag = local.epoch;
        local.bags[local.bag].push(Retired {
            ptr: ptr.cast(),
            guard,
            free: free_box::<R>,
            kind,
            tag,
        });
    }

    /// Frees everything in `pid`'s bags and quarantine.
    ///
    /// # Safety
    /// No process may be inside an operation.
    pub(crate) unsafe fn drain(&self, pid: usize) {
        let local = self.local(pid);
        for b in 0..BAGS {
            for r in std::mem::take(&mut local.bags[b]) {
                self.reclaim(local, r);
            }
        }
        for r in std::mem::take(&mut local.quarantine) {
            self.counters.freed.fetch_add(1, Relaxed);
            r.free();
        }
    }

    /// Kind counts of records currently in limbo, for tests.
    pub fn limbo_kinds(&mut self) -> Vec<RecordKind> {
        self.locals
            .iter_mut()
            .flat_map(|l| {
                let l = l.0.get_mut();
                l.bags.iter().flatten().map(|r| r.kind).collect::<Vec<_>>()
            })
            .collect()
    }
}

impl Drop for Debra {
    fn drop(&mut self) {
        for pid in 0..self.max_threads() {
            unsafe { self.drain(pid) };
        }
    }
}

/// A registered process of a [`Debra`] domain. Dropping it frees the slot.
pub struct Participant<'a> {
    domain: &'a Debra,
    pid: usize,
    _not_sync: PhantomData<*mut ()>,
}

unsafe impl Send for Participant<'_> {}

impl<'a> Participant<'a> {
    pub fn pid(&self) -> usize {
        self.pid
    }

    pub fn domain(&self) -> &'a Debra {
        self.domain
    }

    pub fn start_op(&mut self) {
        unsafe { self.domain.start_op(self.pid) }
    }

    pub fn end_op(&mut self) {
        unsafe { self.domain.end_op(self.pid) }
    }

    /// # Safety
    /// See `Debra::retire`: call between `start_op` and `end_op`, with a
    /// boxed record that no later operation can reach.
    pub unsafe fn retire<R: Record>(&mut self, ptr: *mut R) {
        self.domain.retire(self.pid, ptr)
    }

    /// # Safety
    /// No process may be inside an operation on this domain.
    pub unsafe fn drain(&mut self) {
        self.domain.drain(self.pid)
    }
}

impl Drop for Participant<'_> {
    fn drop(&mut self) {
        self.domain.release(self.pid);
    }
}
