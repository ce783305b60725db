//! Recording concurrent histories and checking them for linearizability.
//!
//! Operations of one thread are sequential, so any linearization takes a
//! prefix of each thread's log. The checker searches over vectors of prefix
//! lengths paired with the abstract state, memoizing visited pairs, and
//! only ever linearizes an operation whose invocation precedes the earliest
//! response still outstanding.

use std::collections::HashSet;
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::inject::{self, Site};
use crate::{ConcurrentSet, SetHandle};

/// A sequential specification.
pub trait Spec {
    type State: Clone + Eq + Hash;
    type Op: std::fmt::Debug;
    type Ret: PartialEq + std::fmt::Debug;

    fn init(&self) -> Self::State;
    fn apply(&self, state: &Self::State, op: &Self::Op) -> (Self::State, Self::Ret);
}

/// One completed operation with its invocation and response times.
#[derive(Clone, Debug)]
pub struct Event<O, R> {
    pub op: O,
    pub ret: R,
    pub invoke: u64,
    pub response: u64,
}

/// Shared logical clock; every tick is unique.
#[derive(Default)]
pub struct Clock(AtomicU64);

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tick(&self) -> u64 {
        self.0.fetch_add(1, SeqCst)
    }

    /// Runs `f` between two ticks and records the result.
    pub fn record<O, R>(&self, op: O, f: impl FnOnce(&O) -> R) -> Event<O, R> {
        let invoke = self.tick();
        let ret = f(&op);
        let response = self.tick();
        Event {
            op,
            ret,
            invoke,
            response,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SetOp {
    Insert(u64),
    Remove(u64),
    Search(u64),
    Predecessor(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetRet {
    Bool(bool),
    Key(i64),
}

impl SetOp {
    pub fn run(&self, h: &mut impl SetHandle) -> SetRet {
        match *self {
            SetOp::Insert(x) => SetRet::Bool(h.insert(x)),
            SetOp::Remove(x) => SetRet::Bool(h.remove(x)),
            SetOp::Search(x) => SetRet::Bool(h.search(x)),
            SetOp::Predecessor(x) => SetRet::Key(h.predecessor(x)),
        }
    }
}

/// How a recorded burst is generated.
#[derive(Clone, Copy, Debug)]
pub struct Burst {
    pub threads: usize,
    pub ops_per_thread: usize,
    pub seed: u64,
    /// Chance of yielding at each injection site, in `0.0..=1.0`.
    pub yield_chance: f64,
}

/// Runs one burst of uniformly mixed operations on `set`, all threads
/// released together, and returns each thread's log.
pub fn record_burst<C: ConcurrentSet>(set: &C, burst: Burst) -> Vec<Vec<Event<SetOp, SetRet>>> {
    let clock = Clock::new();
    let start = std::sync::Barrier::new(burst.threads);
    let universe = 1u64 << set.key_bits();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..burst.threads)
            .map(|t| {
                let (clock, start) = (&clock, &start);
                s.spawn(move || {
                    let seed = burst.seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
                    let mut rng = SmallRng::seed_from_u64(seed);
                    let mut hook_rng = SmallRng::seed_from_u64(!seed);
                    let chance = burst.yield_chance;
                    let _hook = (chance > 0.0).then(|| {
                        inject::install(move |_: Site| {
                            if hook_rng.gen_bool(chance) {
                                std::thread::yield_now();
                            }
                        })
                    });
                    let mut h = set.register().expect("enough process slots");
                    start.wait();
                    (0..burst.ops_per_thread)
                        .map(|_| {
                            let x = rng.gen_range(0..universe);
                            let op = match rng.gen_range(0..4) {
                                0 => SetOp::Insert(x),
                                1 => SetOp::Remove(x),
                                2 => SetOp::Search(x),
                                _ => SetOp::Predecessor(x),
                            };
                            clock.record(op, |op| op.run(&mut h))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("worker panicked"))
            .collect()
    })
}

/// Ordered set over `0..64`, state kept as a bitmask.
#[derive(Clone, Copy, Debug, Default)]
pub struct SetSpec;

impl Spec for SetSpec {
    type State = u64;
    type Op = SetOp;
    type Ret = SetRet;

    fn init(&self) -> u64 {
        0
    }

    fn apply(&self, &s: &u64, op: &SetOp) -> (u64, SetRet) {
        match *op {
            SetOp::Insert(x) => (s | 1 << x, SetRet::Bool(s >> x & 1 == 0)),
            SetOp::Remove(x) => (s & !(1 << x), SetRet::Bool(s >> x & 1 == 1)),
            SetOp::Search(x) => (s, SetRet::Bool(s >> x & 1 == 1)),
            SetOp::Predecessor(x) => {
                let below = s & ((1u64 << x) - 1);
                let r = if below == 0 {
                    -1
                } else {
                    63 - i64::from(below.leading_zeros())
                };
                (s, SetRet::Key(r))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MinOp {
    Read,
    Write(u64),
}

/// Bounded min register starting at `bound - 1`.
#[derive(Clone, Copy, Debug)]
pub struct MinRegSpec {
    pub bound: u64,
}

impl Spec for MinRegSpec {
    type State = u64;
    type Op = MinOp;
    type Ret = Option<u64>;

    fn init(&self) -> u64 {
        self.bound - 1
    }

    fn apply(&self, &s: &u64, op: &MinOp) -> (u64, Option<u64>) {
        match *op {
            MinOp::Read => (s, Some(s)),
            MinOp::Write(v) => (s.min(v), None),
        }
    }
}

/// Position of an operation: thread and index within its log.
pub type Step = (usize, usize);

/// Finds a linearization of the per-thread logs, returned as an order of
/// steps, or explains why none exists.
pub fn check<S: Spec>(spec: &S, logs: &[Vec<Event<S::Op, S::Ret>>]) -> Result<Vec<Step>, String> {
    for (t, log) in logs.iter().enumerate() {
        for w in log.windows(2) {
            if w[0].response >= w[1].invoke {
                return Err(format!("thread {t} log overlaps itself"));
            }
        }
    }
    let mut search = Search {
        spec,
        logs,
        seen: HashSet::new(),
        order: Vec::new(),
        deepest: (Vec::new(), spec.init()),
    };
    let mut done = vec![0; logs.len()];
    if search.dfs(&mut done, spec.init()) {
        return Ok(search.order);
    }
    let (prefix, state) = search.deepest;
    let mut msg = format!(
        "no linearization; longest valid prefix had {} of {} operations",
        prefix.len(),
        logs.iter().map(Vec::len).sum::<usize>()
    );
    let mut next = vec![0; logs.len()];
    for &(t, i) in &prefix {
        next[t] = i + 1;
    }
    for (t, log) in logs.iter().enumerate() {
        if let Some(e) = log.get(next[t]) {
            let (_, want) = spec.apply(&state, &e.op);
            msg += &format!(
                "\n  thread {t} stuck at #{}: {:?} returned {:?} in [{}, {}], model gives {:?}",
                next[t], e.op, e.ret, e.invoke, e.response, want
            );
        }
    }
    Err(msg)
}

struct Search<'a, S: Spec> {
    spec: &'a S,
    logs: &'a [Vec<Event<S::Op, S::Ret>>],
    seen: HashSet<(Vec<usize>, S::State)>,
    order: Vec<Step>,
    deepest: (Vec<Step>, S::State),
}

impl<S: Spec> Search<'_, S> {
    fn dfs(&mut self, done: &mut Vec<usize>, state: S::State) -> bool {
        if self.order.len() > self.deepest.0.len() {
            self.deepest = (self.order.clone(), state.clone());
        }
        let earliest_response = self
            .logs
            .iter()
            .zip(done.iter())
            .filter_map(|(log, &d)| log.get(d).map(|e| e.response))
            .min();
        let Some(earliest_response) = earliest_response else {
            return true;
        };
        if !self.seen.insert((done.clone(), state.clone())) {
            return false;
        }
        for t in 0..self.logs.len() {
            let Some(e) = self.logs[t].get(done[t]) else {
                continue;
            };
            if e.invoke > earliest_response {
                continue;
            }
            let (next, ret) = self.spec.apply(&state, &e.op);
            if ret != e.ret {
                continue;
            }
            done[t] += 1;
            self.order.push((t, done[t] - 1));
            if self.dfs(done, next) {
                return true;
            }
            self.order.pop();
            done[t] -= 1;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev<O, R>(op: O, ret: R, invoke: u64, response: u64) -> Event<O, R> {
        Event {
            op,
            ret,
            invoke,
            response,
        }
    }

    #[test]
    fn overlapping_ops_may_reorder() {
        // Search sees the insert that overlaps it.
        let logs = vec![
            vec![ev(SetOp::Insert(2), SetRet::Bool(true), 0, 3)],
            vec![ev(SetOp::Search(2), SetRet::Bool(true), 1, 2)],
        ];
        assert_eq!(check(&SetSpec, &logs).unwrap(), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn real_time_order_is_enforced() {
        // The search finished before the insert started.
        let logs = vec![
            vec![ev(SetOp::Insert(2), SetRet::Bool(true), 2, 3)],
            vec![ev(SetOp::Search(2), SetRet::Bool(true), 0, 1)],
        ];
        assert!(check(&SetSpec, &logs).is_err());
    }

    #[test]
    fn predecessor_semantics() {
        let s = SetSpec;
        let (st, _) = s.apply(&0, &SetOp::Insert(1));
        let (st, _) = s.apply(&st, &SetOp::Insert(3));
        assert_eq!(s.apply(&st, &SetOp::Predecessor(2)).1, SetRet::Key(1));
        assert_eq!(s.apply(&st, &SetOp::Predecessor(0)).1, SetRet::Key(-1));
        assert_eq!(s.apply(&st, &SetOp::Predecessor(4)).1, SetRet::Key(3));
    }

    #[test]
    fn min_register_reads_must_not_rise() {
        let spec = MinRegSpec { bound: 8 };
        let logs = vec![vec![
            ev(MinOp::Write(3), None, 0, 1),
            ev(MinOp::Read, Some(5), 2, 3),
        ]];
        assert!(check(&spec, &logs).is_err());
    }
}
