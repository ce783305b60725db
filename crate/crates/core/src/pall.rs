//! The announcement list of in-flight predecessor queries and the atomic
//! copy cursor each query uses to walk the descending update list.
//!
//! The list is unsorted: a node is pushed right behind the head by its
//! owner and later removed by the same owner with the usual flag, mark and
//! splice steps. Traversals therefore see the most recent queries first.

use std::ptr;
use std::sync::atomic::{AtomicI64, AtomicPtr, AtomicU64, Ordering::Relaxed, Ordering::SeqCst};

use crate::alist::Ruall;
use crate::inject::{point, Site};
use crate::node::UpdateNode;
use crate::reclaim::{Record, RecordGuard, RecordKind};
use crate::word::{AtomicWord, State, Word};
use crate::Line;

/// A message telling a predecessor query about one update.
pub struct NotifyNode {
    pub(crate) update_node: AtomicPtr<UpdateNode>,
    pub(crate) key: AtomicI64,
    pub(crate) update_node_max: AtomicI64,
    pub(crate) threshold: AtomicI64,
    pub(crate) next: AtomicPtr<NotifyNode>,
}

impl NotifyNode {
    pub(crate) fn new() -> Box<Self> {
        Box::new(Self {
            update_node: AtomicPtr::default(),
            key: AtomicI64::new(-1),
            update_node_max: AtomicI64::new(-1),
            threshold: AtomicI64::new(i64::MAX),
            next: AtomicPtr::default(),
        })
    }

    /// Refills an unpublished node. The stores are published by the push.
    pub(crate) fn fill(&self, update: *mut UpdateNode, key: i64, max: i64, threshold: i64) {
        self.update_node.store(update, Relaxed);
        self.key.store(key, Relaxed);
        self.update_node_max.store(max, Relaxed);
        self.threshold.store(threshold, Relaxed);
    }

    pub(crate) fn update_node(&self) -> *mut UpdateNode {
        self.update_node.load(SeqCst)
    }

    pub(crate) fn key(&self) -> i64 {
        self.key.load(SeqCst)
    }

    pub(crate) fn update_node_max(&self) -> i64 {
        self.update_node_max.load(SeqCst)
    }

    /// Key at the query's cursor when the message was built: `i64::MAX`
    /// before the walk started, `i64::MIN` after it ended.
    pub(crate) fn threshold(&self) -> i64 {
        self.threshold.load(SeqCst)
    }
}

struct ListFields {
    succ: AtomicWord,
    backlink: AtomicPtr<PredecessorNode>,
    guard: RecordGuard,
    key: i64,
}

/// Announcement of one predecessor query.
#[repr(C)]
pub struct PredecessorNode {
    list: Line<ListFields>,
    notify: Line<AtomicPtr<NotifyNode>>,
    /// `ptr | copying`, pointing into the descending update list.
    cursor: Line<AtomicU64>,
}

unsafe impl Record for PredecessorNode {
    fn kind(&self) -> RecordKind {
        RecordKind::PredecessorNode
    }

    fn guard(&self) -> &RecordGuard {
        &self.list.guard
    }
}

impl Drop for PredecessorNode {
    fn drop(&mut self) {
        let mut n = *self.notify.0.get_mut();
        while !n.is_null() {
            let b = unsafe { Box::from_raw(n) };
            n = b.next.load(Relaxed);
        }
    }
}

const COPYING: u64 = 1;

impl PredecessorNode {
    /// A query for `key` whose cursor starts at `start` (the list head).
    pub fn new(key: i64, start: *mut UpdateNode) -> Box<Self> {
        Box::new(Self {
            list: Line(ListFields {
                succ: AtomicWord::default(),
                backlink: AtomicPtr::default(),
                guard: RecordGuard::new(),
                key,
            }),
            notify: Line(AtomicPtr::default()),
            cursor: Line(AtomicU64::new(start as u64)),
        })
    }

    #[inline]
    pub fn key(&self) -> i64 {
        self.list.key
    }

    pub(crate) fn notify_head(&self) -> *mut NotifyNode {
        self.notify.load(SeqCst)
    }

    /// One attempt to push `n` onto the notify list.
    pub(crate) fn push_notify(&self, n: *mut NotifyNode) -> bool {
        let head = self.notify.load(SeqCst);
        unsafe { &*n }.next.store(head, Relaxed);
        self.notify
            .compare_exchange(head, n, SeqCst, SeqCst)
            .is_ok()
    }

    /// Iterates the notify list, newest first.
    pub(crate) fn notifications(&self) -> impl Iterator<Item = &NotifyNode> + '_ {
        let mut n = self.notify_head();
        std::iter::from_fn(move || {
            let cur = unsafe { n.as_ref() }?;
            n = cur.next.load(SeqCst);
            Some(cur)
        })
    }

    /// Atomically moves the cursor from `u` to `u`'s successor and returns
    /// the successor.
    ///
    /// # Safety
    /// Only the owner calls this, with `u` the cursor's current value, a
    /// node of `ruall` that has not been reclaimed.
    pub unsafe fn cursor_copy_next(&self, ruall: &Ruall, u: *mut UpdateNode) -> *mut UpdateNode {
        let copying = u as u64 | COPYING;
        self.cursor.store(copying, SeqCst);
        point(Site::CursorCopyStart);
        let next = unsafe { ruall.resolve_next(u) };
        point(Site::CursorCopyCas);
        match self
            .cursor
            .compare_exchange(copying, next as u64, SeqCst, SeqCst)
        {
            Ok(_) => next,
            Err(seen) => (seen & !COPYING) as *mut UpdateNode,
        }
    }

    /// The cursor's value, completing an in-progress copy if needed.
    pub fn cursor_read(&self, ruall: &Ruall) -> *mut UpdateNode {
        let seen = self.cursor.load(SeqCst);
        if seen & COPYING == 0 {
            return seen as *mut UpdateNode;
        }
        let u = (seen & !COPYING) as *mut UpdateNode;
        let next = unsafe { ruall.resolve_next(u) };
        match self
            .cursor
            .compare_exchange(seen, next as u64, SeqCst, SeqCst)
        {
            Ok(_) => next,
            Err(now) => (now & !COPYING) as *mut UpdateNode,
        }
    }

    pub fn ruall_first(&self, ruall: &Ruall) -> Option<*mut UpdateNode> {
        let n = unsafe { self.cursor_copy_next(ruall, ruall.head()) };
        (n != ruall.tail()).then_some(n)
    }

    /// # Safety
    /// As for [`cursor_copy_next`](Self::cursor_copy_next).
    pub unsafe fn ruall_read_next(
        &self,
        ruall: &Ruall,
        u: *mut UpdateNode,
    ) -> Option<*mut UpdateNode> {
        let n = self.cursor_copy_next(ruall, u);
        (n != ruall.tail()).then_some(n)
    }
}

#[inline]
fn pnode<'a>(p: *mut PredecessorNode) -> &'a PredecessorNode {
    let n = unsafe { &*p };
    n.list.guard.check();
    n
}

#[inline]
fn succ<'a>(p: *mut PredecessorNode) -> &'a AtomicWord {
    &pnode(p).list.succ
}

/// The list of announced predecessor queries, most recent first.
pub struct PredecessorList {
    head: *mut PredecessorNode,
    tail: *mut PredecessorNode,
}

unsafe impl Send for PredecessorList {}
unsafe impl Sync for PredecessorList {}

impl Default for PredecessorList {
    fn default() -> Self {
        Self::new()
    }
}

impl PredecessorList {
    pub fn new() -> Self {
        let head = Box::into_raw(PredecessorNode::new(i64::MIN, ptr::null_mut()));
        let tail = Box::into_raw(PredecessorNode::new(i64::MAX, ptr::null_mut()));
        succ(head).store(Word::link(tail, State::Normal));
        Self { head, tail }
    }

    fn help_marked(&self, prev: *mut PredecessorNode, del: *mut PredecessorNode) -> Word {
        let del_next = succ(del).load().ptr::<PredecessorNode>();
        match succ(prev).cas(
            Word::link(del, State::DelFlag),
            Word::link(del_next, State::Normal),
        ) {
            Ok(_) => Word::link(del_next, State::Normal),
            Err(seen) => seen,
        }
    }

    fn help_remove(&self, prev: *mut PredecessorNode, del: *mut PredecessorNode) -> Word {
        let mut outer = Vec::new();
        let (mut prev, mut del) = (prev, del);
        pnode(del).list.backlink.store(prev, SeqCst);
        let mut w = succ(del).load();
        loop {
            match w.state() {
                State::Marked => {
                    let r = self.help_marked(prev, del);
                    match outer.pop() {
                        None => return r,
                        Some((p, d)) => {
                            (prev, del) = (p, d);
                            w = r;
                        }
                    }
                }
                State::DelFlag => {
                    outer.push((prev, del));
                    prev = del;
                    del = w.ptr();
                    pnode(del).list.backlink.store(prev, SeqCst);
                    w = succ(del).load();
                }
                State::Normal => {
                    let marked = Word::link(w.ptr::<PredecessorNode>(), State::Marked);
                    w = match succ(del).cas(w, marked) {
                        Ok(_) => marked,
                        Err(seen) => seen,
                    };
                }
                State::InsFlag => unreachable!("no descriptors in the query list"),
            }
        }
    }

    /// Pushes `p` right behind the head.
    ///
    /// # Safety
    /// `p` must be a fresh node owned by the caller, kept allocated until
    /// no operation can reach it.
    pub unsafe fn insert(&self, p: *mut PredecessorNode) {
        loop {
            let w = succ(self.head).load();
            match w.state() {
                State::Normal => {
                    succ(p).store(w);
                    if succ(self.head).cas(w, Word::link(p, State::Normal)).is_ok() {
                        return;
                    }
                }
                State::DelFlag => {
                    self.help_remove(self.head, w.ptr());
                }
                s => unreachable!("head in state {s:?}"),
            }
        }
    }

    /// Removes `p`, which the caller inserted earlier.
    ///
    /// # Safety
    /// As for [`insert`](Self::insert); only the owner may call this.
    pub unsafe fn remove(&self, p: *mut PredecessorNode) {
        let mut curr = self.head;
        let mut w = succ(curr).load();
        loop {
            match w.state() {
                State::Normal => {
                    let next = w.ptr::<PredecessorNode>();
                    if next == self.tail {
                        return;
                    }
                    if next != p {
                        curr = next;
                        w = succ(curr).load();
                        continue;
                    }
                    match succ(curr).cas(w, Word::link(p, State::DelFlag)) {
                        Ok(_) => {
                            self.help_remove(curr, p);
                            return;
                        }
                        Err(seen) => w = seen,
                    }
                }
                State::DelFlag => {
                    let flagged = w.ptr::<PredecessorNode>();
                    w = self.help_remove(curr, flagged);
                    if flagged == p {
                        return;
                    }
                }
                State::Marked => {
                    let prev = pnode(curr).list.backlink.load(SeqCst);
                    w = succ(prev).load();
                    if w == Word::link(curr, State::DelFlag) {
                        w = self.help_marked(prev, curr);
                    }
                    curr = prev;
                }
                State::InsFlag => unreachable!("no descriptors in the query list"),
            }
        }
    }

    /// # Safety
    /// `p` must have been inserted and not yet freed.
    pub unsafe fn read_next(&self, p: *mut PredecessorNode) -> Option<*mut PredecessorNode> {
        let n = succ(p).load().ptr::<PredecessorNode>();
        (n != self.tail).then_some(n)
    }

    pub fn first(&self) -> Option<*mut PredecessorNode> {
        unsafe { self.read_next(self.head) }
    }

    /// Keys of the nodes currently reachable. Only meaningful at quiescence.
    pub fn snapshot_keys(&self) -> Vec<i64> {
        let mut out = Vec::new();
        let mut c = self.first();
        while let Some(p) = c {
            out.push(pnode(p).key());
            c = unsafe { self.read_next(p) };
        }
        out
    }
}

impl Drop for PredecessorList {
    fn drop(&mut self) {
        unsafe {
            drop(Box::from_raw(self.head));
            drop(Box::from_raw(self.tail));
        }
    }
}
