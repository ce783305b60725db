//! The lock-free predecessor query.
//!
//! A query announces itself, snapshots the update announcements in both
//! directions, runs the relaxed walk, and then reconciles the walk with the
//! announcements and with the notifications other updates sent it. When the
//! walk failed and some delete it saw is still in effect, the answer is
//! recovered from the embedded queries of those deletes.

use std::collections::{HashMap, HashSet};

use super::Trie;
use crate::node::{node, Kind, UpdateNode};
use crate::pall::PredecessorNode;

/// Reusable buffers for one process's queries.
#[derive(Default)]
pub(super) struct Scratch {
    encountered: Vec<*mut PredecessorNode>,
    i_ruall: HashSet<*mut UpdateNode>,
    d_ruall: Vec<*mut UpdateNode>,
    d_ruall_set: HashSet<*mut UpdateNode>,
    l1: Vec<*mut UpdateNode>,
    l_rem: HashSet<*mut UpdateNode>,
    l2: Vec<*mut UpdateNode>,
    merged: Vec<*mut UpdateNode>,
    last_of_key: HashMap<i64, usize>,
    edges: HashMap<i64, i64>,
}

impl Scratch {
    fn clear(&mut self) {
        self.encountered.clear();
        self.i_ruall.clear();
        self.d_ruall.clear();
        self.d_ruall_set.clear();
        self.l1.clear();
        self.l_rem.clear();
        self.l2.clear();
        self.merged.clear();
        self.last_of_key.clear();
        self.edges.clear();
    }
}

impl Trie {
    /// Runs a query for `x` and returns its answer together with the query
    /// node, which is still announced. The caller removes and retires it.
    pub(super) fn predecessor_inner(&self, pid: usize, x: i64) -> (i64, *mut PredecessorNode) {
        let pn = Box::into_raw(PredecessorNode::new(x, self.ruall.head()));
        unsafe { self.pall.insert(pn) };
        let q = unsafe { &*pn };
        let s = &mut unsafe { self.local(pid) }.scratch;
        s.clear();

        let mut c = unsafe { self.pall.read_next(pn) };
        while let Some(p) = c {
            s.encountered.push(p);
            c = unsafe { self.pall.read_next(p) };
        }

        // The whole descending list is walked so the cursor reaches the end.
        let mut c = q.ruall_first(&self.ruall);
        while let Some(u) = c {
            let un = unsafe { node(u) };
            if un.key() < x && self.is_first_active(u) {
                match un.kind() {
                    Kind::Ins => {
                        s.i_ruall.insert(u);
                    }
                    Kind::Del => {
                        s.d_ruall.push(u);
                        s.d_ruall_set.insert(u);
                    }
                }
            }
            c = unsafe { q.ruall_read_next(&self.ruall, u) };
        }

        let relaxed = self.relaxed_predecessor(x);

        let (mut i_max_uall, mut d_max_uall) = (-1, -1);
        let mut c = self.uall.first();
        while let Some(u) = c {
            let un = unsafe { node(u) };
            let key = un.key();
            if key >= x {
                break;
            }
            if self.is_first_active(u) {
                match un.kind() {
                    Kind::Ins => i_max_uall = i_max_uall.max(key),
                    Kind::Del if !s.d_ruall_set.contains(&u) => d_max_uall = d_max_uall.max(key),
                    Kind::Del => {}
                }
            }
            c = unsafe { self.uall.read_next(u) };
        }

        let (mut i_max_notify, mut d_max_notify) = (-1, -1);
        for n in q.notifications() {
            let key = n.key();
            if key >= x {
                continue;
            }
            let u = n.update_node();
            let threshold = n.threshold();
            match unsafe { node(u) }.kind() {
                Kind::Ins => {
                    if threshold <= key {
                        i_max_notify = i_max_notify.max(key);
                    }
                    if threshold == i64::MIN
                        && !s.i_ruall.contains(&u)
                        && !s.d_ruall_set.contains(&u)
                    {
                        i_max_notify = i_max_notify.max(n.update_node_max());
                    }
                }
                Kind::Del => {
                    // A delete the descending walk already saw in effect
                    // says nothing new about its key.
                    if threshold < key && !s.d_ruall_set.contains(&u) {
                        d_max_notify = d_max_notify.max(key);
                    }
                    if threshold == i64::MIN
                        && !s.i_ruall.contains(&u)
                        && !s.d_ruall_set.contains(&u)
                    {
                        i_max_notify = i_max_notify.max(n.update_node_max());
                    }
                }
            }
        }

        let base = i_max_uall
            .max(d_max_uall)
            .max(i_max_notify)
            .max(d_max_notify);
        let answer = match relaxed {
            Some(r) => r.max(base),
            None if s.d_ruall.is_empty() => base,
            None => self.recover_from_deletes(s, q).max(base),
        };
        (answer, pn)
    }

    /// The answer implied by the embedded queries of the deletes the query
    /// saw, used when the relaxed walk failed.
    fn recover_from_deletes(&self, s: &mut Scratch, q: &PredecessorNode) -> i64 {
        let x = q.key();
        let owners: HashSet<*mut PredecessorNode> = s
            .d_ruall
            .iter()
            .map(|&d| unsafe { node(d) }.del_pred_node())
            .collect();
        if let Some(&older) = s.encountered.iter().rev().find(|p| owners.contains(p)) {
            for n in unsafe { &*older }.notifications() {
                if n.key() < x {
                    s.l1.push(n.update_node());
                }
            }
        }
        for n in q.notifications() {
            if n.key() < x {
                s.l_rem.insert(n.update_node());
                if n.threshold() >= n.key() {
                    s.l2.push(n.update_node());
                }
            }
        }
        let l_rem = &s.l_rem;
        s.merged
            .extend(s.l1.iter().rev().filter(|u| !l_rem.contains(u)));
        s.merged.extend(s.l2.iter().rev());

        for (i, &u) in s.merged.iter().enumerate() {
            s.last_of_key.insert(unsafe { node(u) }.key(), i);
        }
        let mut sources: Vec<i64> = s
            .d_ruall
            .iter()
            .map(|&d| unsafe { node(d) }.del_pred())
            .collect();
        for (i, &u) in s.merged.iter().enumerate() {
            let un = unsafe { node(u) };
            match un.kind() {
                Kind::Ins => sources.push(un.key()),
                Kind::Del if s.last_of_key[&un.key()] == i => {
                    s.edges.insert(un.key(), un.del_pred2());
                }
                Kind::Del => {}
            }
        }
        let deleted: HashSet<i64> = s
            .d_ruall
            .iter()
            .map(|&d| unsafe { node(d) }.key())
            .collect();
        // Edges always point to a smaller key, so every walk ends at a sink.
        sources
            .into_iter()
            .map(|mut v| {
                while let Some(&next) = s.edges.get(&v) {
                    v = next;
                }
                v
            })
            .filter(|v| !deleted.contains(v))
            .max()
            .unwrap_or(-1)
    }
}
