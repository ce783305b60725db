//! Sorted announcement lists of in-flight updates.
//!
//! Both lists are lock-free linked lists of [`UpdateNode`]s in the style of
//! Fomitchev and Ruppert (flag, mark, backlink), extended so that many
//! processes may try to insert the *same* node. An inserter first parks its
//! per-process [`InsertDesc`] behind the predecessor (`InsFlag` state);
//! anyone who meets the descriptor completes the insertion or, when the
//! node was already inserted and removed, drops the descriptor instead. The
//! descriptor's sequence number makes every parked word unique, so a late
//! helper can never splice a node back in.
//!
//! [`Uall`] is ordered by ascending key and [`Ruall`] by descending key;
//! equal keys keep insertion order in both.

use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering::SeqCst};

use crate::inject::{point, Site};
use crate::node::{node, Links, UpdateNode};
use crate::word::{State, Word, MAX_PIDS};
use crate::Line;

/// Picks the link fields and the key order of one list.
pub trait Side: Send + Sync + 'static {
    const HEAD_KEY: i64;
    const TAIL_KEY: i64;
    fn links(n: &UpdateNode) -> &Links;
    /// Whether `a` may precede `b` in this list.
    fn le(a: i64, b: i64) -> bool;
}

pub struct Ascending;
pub struct Descending;

impl Side for Ascending {
    const HEAD_KEY: i64 = i64::MIN;
    const TAIL_KEY: i64 = i64::MAX;
    #[inline]
    fn links(n: &UpdateNode) -> &Links {
        &n.uall
    }
    #[inline]
    fn le(a: i64, b: i64) -> bool {
        a <= b
    }
}

impl Side for Descending {
    const HEAD_KEY: i64 = i64::MAX;
    const TAIL_KEY: i64 = i64::MIN;
    #[inline]
    fn links(n: &UpdateNode) -> &Links {
        &n.ruall
    }
    #[inline]
    fn le(a: i64, b: i64) -> bool {
        a >= b
    }
}

pub type Uall = AnnounceList<Ascending>;
pub type Ruall = AnnounceList<Descending>;

/// A process's reusable insertion descriptor.
#[derive(Default)]
pub struct InsertDesc {
    new_node: AtomicPtr<UpdateNode>,
    next: AtomicPtr<UpdateNode>,
    seq: AtomicU64,
}

pub struct AnnounceList<S: Side> {
    head: *mut UpdateNode,
    tail: *mut UpdateNode,
    desc: Box<[Line<InsertDesc>]>,
    _side: PhantomData<S>,
}

unsafe impl<S: Side> Send for AnnounceList<S> {}
unsafe impl<S: Side> Sync for AnnounceList<S> {}

#[inline]
fn links<'a, S: Side>(p: *mut UpdateNode) -> &'a Links {
    S::links(unsafe { node(p) })
}

#[inline]
fn key(p: *mut UpdateNode) -> i64 {
    unsafe { node(p) }.key()
}

impl<S: Side> AnnounceList<S> {
    pub fn new(max_threads: usize) -> Self {
        assert!(max_threads <= MAX_PIDS);
        let head = Box::into_raw(UpdateNode::sentinel(S::HEAD_KEY));
        let tail = Box::into_raw(UpdateNode::sentinel(S::TAIL_KEY));
        S::links(unsafe { &*head })
            .next
            .store(Word::link(tail, State::Normal));
        Self {
            head,
            tail,
            desc: (0..max_threads).map(|_| Line::default()).collect(),
            _side: PhantomData,
        }
    }

    pub fn head(&self) -> *mut UpdateNode {
        self.head
    }

    pub fn tail(&self) -> *mut UpdateNode {
        self.tail
    }

    /// Current sequence number of `pid`'s descriptor.
    pub fn descriptor_seq(&self, pid: usize) -> u64 {
        self.desc[pid].seq.load(SeqCst)
    }

    fn help_marked(&self, prev: *mut UpdateNode, del: *mut UpdateNode) -> Word {
        let del_next = links::<S>(del).next.load().ptr::<UpdateNode>();
        point(Site::SpliceCas);
        let flagged = Word::link(del, State::DelFlag);
        match links::<S>(prev)
            .next
            .cas(flagged, Word::link(del_next, State::Normal))
        {
            Ok(_) => Word::link(del_next, State::Normal),
            Err(seen) => seen,
        }
    }

    fn help_insert(&self, prev: *mut UpdateNode, seq: u64, pid: usize) -> Word {
        let d = &self.desc[pid];
        let new_node = d.new_node.load(SeqCst);
        let next = d.next.load(SeqCst);
        if d.seq.load(SeqCst) != seq {
            return links::<S>(prev).next.load();
        }
        point(Site::HelpInsertInit);
        let init = links::<S>(new_node)
            .next
            .cas(Word::NULL, Word::link(next, State::Normal));
        let replacement = match init {
            Err(seen) if seen.state() == State::Marked => next,
            _ => new_node,
        };
        point(Site::HelpInsertSplice);
        match links::<S>(prev)
            .next
            .cas(Word::desc(seq, pid), Word::link(replacement, State::Normal))
        {
            Ok(_) => {
                if replacement == new_node {
                    links::<S>(new_node).inserted.fetch_add(1, SeqCst);
                }
                Word::link(replacement, State::Normal)
            }
            Err(seen) => seen,
        }
    }

    /// Marks `del` (flagged behind `prev`) and splices it out, first helping
    /// whatever is pending on `del`'s own successor word. Nested flags are
    /// walked with an explicit stack.
    fn help_remove(&self, prev: *mut UpdateNode, del: *mut UpdateNode) -> Word {
        let mut outer: Vec<(*mut UpdateNode, *mut UpdateNode)> = Vec::new();
        let (mut prev, mut del) = (prev, del);
        links::<S>(del).backlink.store(prev, SeqCst);
        let mut w = links::<S>(del).next.load();
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
                State::InsFlag => w = self.help_insert(del, w.seq(), w.pid()),
                State::DelFlag => {
                    outer.push((prev, del));
                    prev = del;
                    del = w.ptr();
                    links::<S>(del).backlink.store(prev, SeqCst);
                    w = links::<S>(del).next.load();
                }
                State::Normal => {
                    point(Site::MarkCas);
                    let marked = Word::link(w.ptr::<UpdateNode>(), State::Marked);
                    w = match links::<S>(del).next.cas(w, marked) {
                        Ok(_) => marked,
                        Err(seen) => seen,
                    };
                }
            }
        }
    }

    /// Steps back from a marked `curr` to its backlink, helping the splice.
    fn retreat(&self, curr: *mut UpdateNode) -> (*mut UpdateNode, Word) {
        let prev = links::<S>(curr).backlink.load(SeqCst);
        let mut w = links::<S>(prev).next.load();
        if w == Word::link(curr, State::DelFlag) {
            w = self.help_marked(prev, curr);
        }
        (prev, w)
    }

    /// Inserts `u` after every node whose key does not exceed its own,
    /// unless `u` is or has been in the list.
    ///
    /// # Safety
    /// `u` must stay allocated while any list operation can reach it, and
    /// no other thread may use `pid` concurrently.
    pub unsafe fn insert(&self, pid: usize, u: *mut UpdateNode) {
        let ul = links::<S>(u);
        if ul.next.load().state() == State::Marked {
            return;
        }
        let ukey = key(u);
        let d = &self.desc[pid];
        d.new_node.store(u, SeqCst);
        let seq = d.seq.load(SeqCst);
        let mut curr = self.head;
        let mut w = links::<S>(curr).next.load();
        loop {
            match w.state() {
                State::Normal => {
                    let next = w.ptr::<UpdateNode>();
                    // Identity ends the search wherever it is seen.
                    if next == u {
                        return;
                    }
                    if S::le(key(next), ukey) {
                        curr = next;
                        w = links::<S>(curr).next.load();
                        continue;
                    }
                    if ul.next.load().state() == State::Marked {
                        return;
                    }
                    d.next.store(next, SeqCst);
                    point(Site::InsFlagCas);
                    match links::<S>(curr).next.cas(w, Word::desc(seq, pid)) {
                        Ok(_) => {
                            self.help_insert(curr, seq, pid);
                            d.seq.store(seq + 1, SeqCst);
                            return;
                        }
                        Err(seen) => w = seen,
                    }
                }
                State::InsFlag => w = self.help_insert(curr, w.seq(), w.pid()),
                State::DelFlag => {
                    if w.ptr::<UpdateNode>() == u {
                        return;
                    }
                    w = self.help_remove(curr, w.ptr());
                }
                State::Marked => (curr, w) = self.retreat(curr),
            }
        }
    }

    /// Removes `u` if it is in the list.
    ///
    /// # Safety
    /// `u` must stay allocated while any list operation can reach it.
    pub unsafe fn remove(&self, u: *mut UpdateNode) {
        let ukey = key(u);
        let mut curr = self.head;
        let mut w = links::<S>(curr).next.load();
        loop {
            match w.state() {
                State::Normal => {
                    let next = w.ptr::<UpdateNode>();
                    if !S::le(key(next), ukey) {
                        return;
                    }
                    if next != u {
                        curr = next;
                        w = links::<S>(curr).next.load();
                        continue;
                    }
                    point(Site::DelFlagCas);
                    match links::<S>(curr).next.cas(w, Word::link(u, State::DelFlag)) {
                        Ok(_) => {
                            self.help_remove(curr, u);
                            return;
                        }
                        Err(seen) => w = seen,
                    }
                }
                State::InsFlag => w = self.help_insert(curr, w.seq(), w.pid()),
                State::DelFlag => {
                    let flagged = w.ptr::<UpdateNode>();
                    if !S::le(key(flagged), ukey) {
                        return;
                    }
                    w = self.help_remove(curr, flagged);
                    if flagged == u {
                        return;
                    }
                }
                State::Marked => (curr, w) = self.retreat(curr),
            }
        }
    }

    /// The successor of `u` (possibly the tail), looking through a parked
    /// descriptor. A removed node yields its successor at removal time.
    ///
    /// # Safety
    /// `u` must have been inserted and not yet freed.
    pub unsafe fn resolve_next(&self, u: *mut UpdateNode) -> *mut UpdateNode {
        let l = links::<S>(u);
        let mut w = l.next.load();
        while w.state() == State::InsFlag {
            let d = &self.desc[w.pid()];
            let next = d.next.load(SeqCst);
            if d.seq.load(SeqCst) == w.seq() {
                return next;
            }
            w = l.next.load();
        }
        w.ptr()
    }

    /// # Safety
    /// As for [`resolve_next`](Self::resolve_next).
    pub unsafe fn read_next(&self, u: *mut UpdateNode) -> Option<*mut UpdateNode> {
        let n = self.resolve_next(u);
        (n != self.tail).then_some(n)
    }

    pub fn first(&self) -> Option<*mut UpdateNode> {
        unsafe { self.read_next(self.head) }
    }

    /// Nodes currently reachable from the head. Only meaningful when no
    /// operation is running.
    pub fn snapshot(&self) -> Vec<*mut UpdateNode> {
        let mut out = Vec::new();
        let mut c = self.first();
        while let Some(n) = c {
            out.push(n);
            c = unsafe { self.read_next(n) };
        }
        out
    }

    /// Checks ordering and that no marked or parked words remain. Only
    /// meaningful when no operation is running.
    pub fn audit(&self) -> Result<(), String> {
        let mut prev_key = S::HEAD_KEY;
        let mut c = self.head;
        loop {
            let w = links::<S>(c).next.load();
            if w.state() != State::Normal {
                return Err(format!(
                    "node with key {} has state {:?}",
                    key(c),
                    w.state()
                ));
            }
            let n = w.ptr::<UpdateNode>();
            if n.is_null() {
                return Err("list ends without tail".into());
            }
            if n == self.tail {
                return Ok(());
            }
            let k = key(n);
            if !S::le(prev_key, k) {
                return Err(format!("key {k} follows {prev_key}"));
            }
            prev_key = k;
            c = n;
        }
    }
}

impl<S: Side> Drop for AnnounceList<S> {
    fn drop(&mut self) {
        unsafe {
            drop(Box::from_raw(self.head));
            drop(Box::from_raw(self.tail));
        }
        self.head = ptr::null_mut();
        self.tail = ptr::null_mut();
    }
}
