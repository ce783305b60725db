//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. The
//! reclamation stress lasts 60 s per operation mix by default; set
//! `KOTRIE_STRESS_SECONDS` to shorten it for local iteration.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::SeqCst};
use std::time::{Duration, Instant};

use kotrie::alist::{AnnounceList, Ascending, Descending, Side};
use kotrie::history::{check, record_burst, Burst, Clock, Event, MinOp, MinRegSpec, SetSpec};
use kotrie::inject::{self, Site};
use kotrie::minreg::TreeMinRegister;
use kotrie::node::{Kind, UpdateNode};
use kotrie::reclaim::{poison_hits, ReclaimConfig};
use kotrie::{AugmentedTrie, ConcurrentSet, SetHandle, SkipList, Trie};
use kotrie_bench::{run, ExperimentConfig, Mix, Structure, Subject};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type MinLog = Vec<Event<MinOp, Option<u64>>>;

fn main() {
    let criteria: [Criterion; 9] = [
        ("sequential oracle equivalence", sequential_oracle),
        ("small-universe linearizability", linearizability),
        (
            "min-register step bounds and concurrent minimum",
            min_registers,
        ),
        ("no reinsertion into the announcement lists", no_reinsertion),
        (
            "reclamation safety under debug poisoning",
            reclamation_safety,
        ),
        ("steady-state size", steady_state),
        ("relaxed predecessor at quiescence", relaxed_sweep),
        ("augmented-trie sums", augtrie_sums),
        ("bench CLI smoke matrix", cli_smoke),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail}; {took:.1?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({why}; {took:.1?})", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn oracle_stream(h: &mut impl SetHandle, k: u32, ops: usize, seed: u64) -> Result<(), String> {
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut oracle = BTreeSet::new();
    for i in 0..ops {
        let x = rng.gen_range(0..1u64 << k);
        let (got, want) = match rng.gen_range(0..4) {
            0 => (i64::from(h.insert(x)), i64::from(oracle.insert(x))),
            1 => (i64::from(h.remove(x)), i64::from(oracle.remove(&x))),
            2 => (i64::from(h.search(x)), i64::from(oracle.contains(&x))),
            _ => (
                h.predecessor(x),
                oracle.range(..x).next_back().map_or(-1, |&p| p as i64),
            ),
        };
        ensure(got == want, || {
            format!("op {i} on key {x}: got {got}, oracle {want}")
        })?;
    }
    Ok(())
}

fn sequential_oracle() -> Outcome {
    const OPS: usize = 100_000;
    for k in [4, 8, 12] {
        let seed = u64::from(k);
        let tag = |name: &str, e: String| format!("{name} k={k}: {e}");
        let trie = Trie::new(k, 1);
        oracle_stream(&mut trie.register().unwrap(), k, OPS, seed).map_err(|e| tag("kotrie", e))?;
        let list = SkipList::new(k, 1);
        oracle_stream(&mut list.register().unwrap(), k, OPS, seed)
            .map_err(|e| tag("skiplist", e))?;
        let aug = AugmentedTrie::new(k, 1);
        oracle_stream(&mut aug.register().unwrap(), k, OPS, seed).map_err(|e| tag("augtrie", e))?;
    }
    Ok(format!("3 structures x k in {{4, 8, 12}} x {OPS} ops"))
}

fn bursts<C: ConcurrentSet>(make: impl Fn() -> C) -> Result<usize, String> {
    let mut checked = 0;
    for threads in 2..=4 {
        for seed in 0..200 {
            let set = make();
            let burst = Burst {
                threads,
                ops_per_thread: 400 / threads,
                seed,
                yield_chance: 0.2,
            };
            let logs = record_burst(&set, burst);
            check(&SetSpec, &logs)
                .map_err(|e| format!("{} burst {seed} with {threads} threads: {e}", set.name()))?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn linearizability() -> Outcome {
    let n = bursts(|| Trie::new(4, 4))?
        + bursts(|| SkipList::new(4, 4))?
        + bursts(|| AugmentedTrie::new(4, 4))?;
    Ok(format!("{n} bursts of up to 400 ops linearizable"))
}

fn min_registers() -> Outcome {
    for (arity, height) in [(2u32, 4u32), (8, 2), (64, 2)] {
        let reg = TreeMinRegister::with_height(arity, height).map_err(|e| e.to_string())?;
        let mut rng = SmallRng::seed_from_u64(u64::from(arity));
        let mut min = reg.bound() - 1;
        for i in 0..10_000 {
            if rng.gen_bool(0.5) {
                let (v, steps) = reg.min_read_counted();
                ensure(steps == height, || {
                    format!("({arity},{height}) read {i} took {steps} steps")
                })?;
                ensure(v == min, || {
                    format!("({arity},{height}) read {v}, expected {min}")
                })?;
            } else {
                // Bias toward large values so writes keep landing above the
                // current minimum and take long paths.
                let v = reg.bound()
                    - 1
                    - rng
                        .gen_range(0..reg.bound())
                        .min(rng.gen_range(0..reg.bound()));
                let steps = reg.min_write_counted(v).map_err(|e| e.to_string())?;
                ensure(steps < 2 * height, || {
                    format!("({arity},{height}) write of {v} took {steps} steps")
                })?;
                min = min.min(v);
            }
        }
    }
    for trial in 0..1_000u64 {
        let reg = TreeMinRegister::with_height(4, 3).unwrap();
        let mins: Vec<u64> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8)
                .map(|t| {
                    let reg = &reg;
                    s.spawn(move || {
                        let mut rng = SmallRng::seed_from_u64(trial * 8 + t);
                        let mut mine = u64::MAX;
                        for _ in 0..10 {
                            let v = rng.gen_range(0..reg.bound());
                            reg.min_write(v).unwrap();
                            mine = mine.min(v);
                        }
                        mine
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let want = *mins.iter().min().unwrap();
        ensure(reg.min_read() == want, || {
            format!("trial {trial}: read {} not {want}", reg.min_read())
        })?;
    }
    // Small concurrent histories are also checked against the sequential model.
    for trial in 0..200u64 {
        let reg = TreeMinRegister::with_height(2, 3).unwrap();
        let clock = Clock::new();
        let logs: Vec<MinLog> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..3)
                .map(|t| {
                    let (reg, clock) = (&reg, &clock);
                    s.spawn(move || {
                        let mut rng = SmallRng::seed_from_u64(trial * 3 + t);
                        (0..3)
                            .map(|_| {
                                let op = if rng.gen_bool(0.5) {
                                    MinOp::Read
                                } else {
                                    MinOp::Write(rng.gen_range(0..8))
                                };
                                clock.record(op, |op| match *op {
                                    MinOp::Read => Some(reg.min_read()),
                                    MinOp::Write(v) => reg.min_write(v).map(|_| None).unwrap(),
                                })
                            })
                            .collect()
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        check(&MinRegSpec { bound: 8 }, &logs).map_err(|e| format!("history {trial}: {e}"))?;
    }
    Ok("10^4 ops per shape, 10^3 eight-thread trials, 200 histories".into())
}

/// Eight threads race to insert and remove the same node, pausing at every
/// list CAS site, then keep trying to reinsert it while watching for it.
fn race_one_node<S: Side>(insertions: fn(&UpdateNode) -> u32) -> Result<(), String> {
    const THREADS: usize = 8;
    const TRAVERSALS: usize = 10_000;
    let list = AnnounceList::<S>::new(THREADS);
    let others: Vec<_> = [2, 5, 5, 9]
        .iter()
        .map(|&k| Box::into_raw(UpdateNode::new(Kind::Ins, k, 4)))
        .collect();
    for &o in &others {
        unsafe { list.insert(0, o) };
    }
    let u_addr = Box::into_raw(UpdateNode::new(Kind::Ins, 5, 4)) as usize;
    let removed = AtomicBool::new(false);
    let sightings = AtomicUsize::new(0);
    let traversals = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for pid in 0..THREADS {
            let (list, removed, sightings, traversals) = (&list, &removed, &sightings, &traversals);
            s.spawn(move || {
                let mut rng = SmallRng::seed_from_u64(pid as u64);
                let _hook = inject::install(move |site| {
                    if Site::LIST.contains(&site) && rng.gen_bool(0.3) {
                        std::thread::sleep(Duration::from_micros(20));
                    }
                });
                let u = u_addr as *mut UpdateNode;
                unsafe {
                    list.insert(pid, u);
                    list.remove(u);
                }
                removed.store(true, SeqCst);
                for _ in 0..TRAVERSALS / THREADS {
                    unsafe { list.insert(pid, u) };
                    if list.snapshot().contains(&u) {
                        sightings.fetch_add(1, SeqCst);
                    }
                    traversals.fetch_add(1, SeqCst);
                }
            });
        }
    });
    let u = u_addr as *mut UpdateNode;
    let result = (|| {
        ensure(removed.load(SeqCst), || "no remove completed".into())?;
        ensure(traversals.load(SeqCst) >= TRAVERSALS, || {
            "too few traversals".into()
        })?;
        let seen = sightings.load(SeqCst);
        ensure(seen == 0, || format!("removed node seen {seen} times"))?;
        let n = insertions(unsafe { &*u });
        ensure(n == 1, || format!("node was linked {n} times"))?;
        list.audit()
    })();
    for o in others {
        unsafe { list.remove(o) };
        drop(unsafe { Box::from_raw(o) });
    }
    drop(unsafe { Box::from_raw(u) });
    result
}

fn no_reinsertion() -> Outcome {
    race_one_node::<Ascending>(UpdateNode::uall_insertions)
        .map_err(|e| format!("ascending: {e}"))?;
    race_one_node::<Descending>(UpdateNode::ruall_insertions)
        .map_err(|e| format!("descending: {e}"))?;
    Ok("8 racers on each list, 10^4 later traversals, zero sightings".into())
}

fn stress_seconds() -> f64 {
    std::env::var("KOTRIE_STRESS_SECONDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(60.0)
}

fn reclamation_safety() -> Outcome {
    let per_mix = stress_seconds();
    let poison_before = poison_hits();
    let mut retired = 0;
    for (name, mix) in Mix::STANDARD {
        // The time budget of each mix is shared by the three structures.
        for structure in Structure::ALL {
            let mut config = ExperimentConfig::new(structure, 10, 8, per_mix / 3.0, mix);
            config.reclaim = ReclaimConfig::debug();
            let mut subject = Subject::new(&config);
            subject.prefill(&config, 0).map_err(|e| e.to_string())?;
            let result = subject.run(&config, 0).map_err(|e| e.to_string())?;
            let stats = subject.reclaim_stats();
            let tag = format!("{structure} {name}");
            ensure(result.throughput > 0, || {
                format!("{tag}: no operations ran")
            })?;
            ensure(stats.double_bags == 0, || {
                format!("{tag}: {} double bags", stats.double_bags)
            })?;
            ensure(stats.early_drains == 0, || {
                format!("{tag}: {} early drains", stats.early_drains)
            })?;
            if let Subject::Kotrie(t) = &mut subject {
                let v = t.verify_shadow().violations;
                ensure(v == 0, || format!("{tag}: {v} shadow epoch violations"))?;
            }
            subject.audit().map_err(|e| format!("{tag}: {e}"))?;
            retired += stats.retired;
            let hits = poison_hits() - poison_before;
            ensure(hits == 0, || format!("{tag}: {hits} poisoned reads"))?;
        }
    }
    Ok(format!(
        "7 mixes x {per_mix} s, {retired} records retired, no poisoned reads"
    ))
}

/// The criterion-6 run, shared with criterion 8.
fn steady_run(structure: Structure) -> Result<(Subject, u64), String> {
    let config = ExperimentConfig::new(structure, 16, 8, 5.0, Mix::EQUAL);
    let mut subject = Subject::new(&config);
    subject.prefill(&config, 0).map_err(|e| e.to_string())?;
    ensure(subject.size() == 1 << 15, || {
        "prefill missed the target".into()
    })?;
    let result = match &subject {
        Subject::Kotrie(t) => run(t, &config, 0),
        Subject::Skiplist(l) => run(l, &config, 0),
        Subject::Augtrie(a) => run(a, &config, 0),
    }
    .map_err(|e| e.to_string())?;
    ensure(result.throughput > 0, || {
        format!("{structure}: no operations ran")
    })?;
    let size = subject.size();
    Ok((subject, size))
}

fn steady_state() -> Outcome {
    let target = (1u64 << 15) as f64;
    let mut detail = Vec::new();
    for structure in Structure::ALL {
        let (_, size) = steady_run(structure)?;
        let drift = (size as f64 - target).abs() / target;
        ensure(drift <= 0.05, || {
            format!("{structure} ended at {size} keys, drift {drift:.4}")
        })?;
        detail.push(format!("{structure} {size}"));
    }
    Ok(format!("final sizes {}", detail.join(", ")))
}

fn relaxed_sweep() -> Outcome {
    let t = Trie::new(4, 1);
    let mut h = t.register().unwrap();
    let mut present = 0u32;
    // Gray-code order: each step toggles one key.
    for i in 0u32..1 << 16 {
        let set = i ^ (i >> 1);
        if set != present {
            let flip = (set ^ present).trailing_zeros();
            let key = u64::from(flip);
            let ok = if set & (1 << flip) != 0 {
                h.insert(key)
            } else {
                h.remove(key)
            };
            ensure(ok, || format!("update of {flip} failed at set {set:#06x}"))?;
            present = set;
        }
        for x in 0..16u32 {
            let below = present & ((1 << x) - 1);
            let want = if below == 0 {
                -1
            } else {
                31 - i64::from(below.leading_zeros())
            };
            let got = h.relaxed_predecessor(u64::from(x));
            ensure(got == Some(want), || {
                format!("set {present:#06x} query {x}: {got:?}, want {want}")
            })?;
        }
    }
    Ok("65536 sets x 16 queries".into())
}

fn augtrie_sums() -> Outcome {
    let (mut subject, size) = steady_run(Structure::Augtrie)?;
    let Subject::Augtrie(aug) = &mut subject else {
        unreachable!()
    };
    let root = aug.audit()?;
    ensure(root == size, || format!("root sum {root}, set size {size}"))?;
    let keys = aug.keys().len() as u64;
    ensure(keys == size, || {
        format!("{keys} leaves present, size {size}")
    })?;
    Ok(format!("all reachable sums consistent, root sum {root}"))
}

fn cli_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("resultData.csv");
    for structure in Structure::ALL {
        for threads in [1, 4] {
            let status = Command::new(env!("CARGO_BIN_EXE_bench"))
                .args([
                    "--structure",
                    structure.as_str(),
                    "--k",
                    "16",
                    "--seconds",
                    "1",
                    "--trials",
                    "1",
                ])
                .args([
                    "--threads",
                    &threads.to_string(),
                    "--mix",
                    "1:1:1:1",
                    "--pin",
                    "compact",
                ])
                .arg("--out")
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), || {
                format!(
                    "{structure} x{threads} exited {}: {}",
                    status.status,
                    String::from_utf8_lossy(&status.stderr)
                )
            })?;
        }
    }
    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    ensure(lines.next() == Some(kotrie_bench::CSV_HEADER), || {
        "missing header".into()
    })?;
    let rows: Vec<&str> = lines.collect();
    ensure(rows.len() == 6, || format!("{} rows, want 6", rows.len()))?;
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        ensure(fields.len() == 12, || format!("malformed row {row:?}"))?;
        let throughput: u64 = fields[11]
            .parse()
            .map_err(|_| format!("bad throughput in {row:?}"))?;
        ensure(throughput > 0, || format!("zero throughput in {row:?}"))?;
    }
    ensure(!text.contains('\r'), || "CRLF line ending".into())?;
    Ok("6 runs, 6 well-formed rows".into())
}
