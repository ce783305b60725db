//! Update records shared by a key's latest list, both announcement lists
//! and the trie's internal nodes.
//!
//! The fields are split into four cache-line groups: latest-list fields,
//! ascending-list links, descending-list links, and the insert/delete
//! specific fields.

use std::ptr;
use std::sync::atomic::{
    AtomicBool, AtomicI64, AtomicPtr, AtomicU32, AtomicU8, Ordering::Relaxed, Ordering::SeqCst,
};

use crate::minreg::FlatMinRegister;
use crate::pall::PredecessorNode;
use crate::reclaim::{Record, RecordGuard, RecordKind};
use crate::word::{AtomicWord, Word};
use crate::Line;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Ins = 0,
    Del = 1,
}

/// One list's successor word plus its recovery pointer.
#[derive(Default)]
pub struct Links {
    pub(crate) next: AtomicWord,
    pub(crate) backlink: AtomicPtr<UpdateNode>,
    /// Successful insertions of this node into the list. Never above one.
    pub(crate) inserted: AtomicU32,
}

impl Links {
    fn reset(&self) {
        self.next.store(Word::NULL);
        self.backlink.store(ptr::null_mut(), Relaxed);
        self.inserted.store(0, Relaxed);
    }
}

struct LatestFields {
    guard: RecordGuard,
    key: AtomicI64,
    kind: AtomicU8,
    active: AtomicBool,
    latest_next: AtomicPtr<UpdateNode>,
}

struct Extra {
    // Insert side.
    target: AtomicPtr<UpdateNode>,
    target_key: AtomicI64,
    // Delete side.
    stop: AtomicBool,
    upper0: AtomicU32,
    lower1: FlatMinRegister,
    del_pred_node: AtomicPtr<PredecessorNode>,
    del_pred: AtomicI64,
    del_pred2: AtomicI64,
    dcount: AtomicI64,
}

/// An insert or delete announcement for one key.
#[repr(C)]
pub struct UpdateNode {
    latest: Line<LatestFields>,
    pub(crate) uall: Line<Links>,
    pub(crate) ruall: Line<Links>,
    extra: Line<Extra>,
}

unsafe impl Record for UpdateNode {
    fn kind(&self) -> RecordKind {
        match self.kind() {
            Kind::Ins => RecordKind::InsertNode,
            Kind::Del => RecordKind::DelNode,
        }
    }

    fn guard(&self) -> &RecordGuard {
        &self.latest.guard
    }
}

impl UpdateNode {
    /// A fresh, inactive node. `key_bits` sizes the lower boundary register
    /// (values `0..=key_bits + 1`).
    pub fn new(kind: Kind, key: i64, key_bits: u32) -> Box<Self> {
        Box::new(Self {
            latest: Line(LatestFields {
                guard: RecordGuard::new(),
                key: AtomicI64::new(key),
                kind: AtomicU8::new(kind as u8),
                active: AtomicBool::new(false),
                latest_next: AtomicPtr::default(),
            }),
            uall: Line::default(),
            ruall: Line::default(),
            extra: Line(Extra {
                target: AtomicPtr::default(),
                target_key: AtomicI64::new(-1),
                stop: AtomicBool::new(false),
                upper0: AtomicU32::new(0),
                lower1: FlatMinRegister::new(key_bits + 1).expect("key width fits a word"),
                del_pred_node: AtomicPtr::default(),
                del_pred: AtomicI64::new(-1),
                del_pred2: AtomicI64::new(-1),
                dcount: AtomicI64::new(2),
            }),
        })
    }

    /// A list sentinel; its key sits outside the universe.
    pub(crate) fn sentinel(key: i64) -> Box<Self> {
        let n = Self::new(Kind::Ins, key, 1);
        n.latest.active.store(true, Relaxed);
        n
    }

    /// Prepares an unpublished node for another attempt with `key`.
    pub(crate) fn reset(&self, key: i64, key_bits: u32) {
        let l = &*self.latest;
        l.key.store(key, Relaxed);
        l.active.store(false, Relaxed);
        l.latest_next.store(ptr::null_mut(), Relaxed);
        self.uall.reset();
        self.ruall.reset();
        let e = &*self.extra;
        e.target.store(ptr::null_mut(), Relaxed);
        e.target_key.store(-1, Relaxed);
        e.stop.store(false, Relaxed);
        e.upper0.store(0, Relaxed);
        debug_assert_eq!(e.lower1.bits(), key_bits + 1);
        e.lower1.reset();
        e.del_pred_node.store(ptr::null_mut(), Relaxed);
        e.del_pred.store(-1, Relaxed);
        e.del_pred2.store(-1, Relaxed);
        e.dcount.store(2, SeqCst);
    }

    #[inline]
    pub fn key(&self) -> i64 {
        self.latest.key.load(Relaxed)
    }

    #[inline]
    pub fn kind(&self) -> Kind {
        if self.latest.kind.load(Relaxed) == 0 {
            Kind::Ins
        } else {
            Kind::Del
        }
    }

    #[inline]
    pub fn is_active(&self) -> bool {
        self.latest.active.load(SeqCst)
    }

    pub(crate) fn set_active(&self) {
        self.latest.active.store(true, SeqCst);
    }

    #[inline]
    pub(crate) fn latest_next(&self) -> *mut UpdateNode {
        self.latest.latest_next.load(SeqCst)
    }

    pub(crate) fn set_latest_next(&self, p: *mut UpdateNode) {
        self.latest.latest_next.store(p, SeqCst);
    }

    pub(crate) fn take_latest_next(&self) -> *mut UpdateNode {
        self.latest.latest_next.swap(ptr::null_mut(), SeqCst)
    }

    pub(crate) fn guard(&self) -> &RecordGuard {
        &self.latest.guard
    }

    pub(crate) fn target(&self) -> *mut UpdateNode {
        self.extra.target.load(SeqCst)
    }

    pub(crate) fn target_key(&self) -> i64 {
        self.extra.target_key.load(SeqCst)
    }

    pub(crate) fn set_target(&self, key: i64, node: *mut UpdateNode) {
        self.extra.target_key.store(key, SeqCst);
        self.extra.target.store(node, SeqCst);
    }

    pub(crate) fn stop(&self) -> bool {
        self.extra.stop.load(SeqCst)
    }

    pub(crate) fn set_stop(&self) {
        self.extra.stop.store(true, SeqCst);
    }

    pub fn upper0(&self) -> u32 {
        self.extra.upper0.load(SeqCst)
    }

    pub(crate) fn set_upper0(&self, h: u32) {
        self.extra.upper0.store(h, SeqCst);
    }

    pub fn lower1(&self) -> u32 {
        self.extra.lower1.min_read()
    }

    pub(crate) fn lower1_write(&self, h: u32) {
        self.extra.lower1.min_write(h);
    }

    pub(crate) fn del_pred_node(&self) -> *mut PredecessorNode {
        self.extra.del_pred_node.load(SeqCst)
    }

    pub(crate) fn del_pred(&self) -> i64 {
        self.extra.del_pred.load(SeqCst)
    }

    pub(crate) fn del_pred2(&self) -> i64 {
        self.extra.del_pred2.load(SeqCst)
    }

    pub(crate) fn set_del_pred(&self, key: i64, node: *mut PredecessorNode) {
        self.extra.del_pred.store(key, SeqCst);
        self.extra.del_pred_node.store(node, SeqCst);
    }

    pub(crate) fn set_del_pred2(&self, key: i64) {
        self.extra.del_pred2.store(key, SeqCst);
    }

    pub(crate) fn set_dcount(&self, v: i64) {
        self.extra.dcount.store(v, SeqCst);
    }

    /// Adds `delta` and returns the new count.
    pub(crate) fn dcount_add(&self, delta: i64) -> i64 {
        self.extra.dcount.fetch_add(delta, SeqCst) + delta
    }

    pub fn dcount(&self) -> i64 {
        self.extra.dcount.load(SeqCst)
    }

    /// Times this node was spliced into the ascending list.
    pub fn uall_insertions(&self) -> u32 {
        self.uall.inserted.load(SeqCst)
    }

    pub fn ruall_insertions(&self) -> u32 {
        self.ruall.inserted.load(SeqCst)
    }

    pub fn uall_marked(&self) -> bool {
        self.uall.next.load().state() == crate::word::State::Marked
    }

    pub fn ruall_marked(&self) -> bool {
        self.ruall.next.load().state() == crate::word::State::Marked
    }
}

/// Dereferences a node pointer, counting a hit if it was reclaimed.
///
/// # Safety
/// `p` must be non-null and point to a node that has not been freed.
#[inline]
pub(crate) unsafe fn node<'a>(p: *mut UpdateNode) -> &'a UpdateNode {
    let n = &*p;
    n.guard().check();
    n
}
