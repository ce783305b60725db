//! Throughput harness for the ordered sets in `kotrie`.
//!
//! A trial builds a fresh structure, fills it to the steady-state size
//! `⌊I/(I+R)·2^k⌋`, releases `N` workers together, lets each run batches of
//! 50 random operations until its deadline, and reports the total number of
//! completed operations as the throughput.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::time::{Duration, Instant};

use kotrie::baselines::SkipListConfig;
use kotrie::reclaim::{ReclaimConfig, ReclaimStats};
use kotrie::{AugmentedTrie, ConcurrentSet, RegisterError, SetHandle, SkipList, Trie};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

pub mod pin;

pub use pin::Pinning;

/// Operations between two checks of the clock and the `done` flag.
pub const BATCH: u64 = 50;

/// Extra time the coordinator sleeps past the run length before joining.
pub const GRACE: Duration = Duration::from_millis(200);

pub const CSV_HEADER: &str = "structure,k,threads,seconds,I,R,S,P,pin,seed,trial,throughput";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("mix must look like I:R:S:P, got {0:?}")]
    MixFormat(String),
    #[error("mix needs positive insert and remove weights, got {0}")]
    MixWeights(Mix),
    #[error("key bits must be in 1..={max}, got {got}")]
    KeyBits { got: u32, max: u32 },
    #[error("need at least one worker thread")]
    NoThreads,
    #[error("run length must be positive and finite, got {0}")]
    Seconds(f64),
    #[error("could not register worker: {0}")]
    Register(#[from] RegisterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Structure {
    Kotrie,
    Skiplist,
    Augtrie,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Kotrie, Structure::Skiplist, Structure::Augtrie];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Kotrie => "kotrie",
            Structure::Skiplist => "skiplist",
            Structure::Augtrie => "augtrie",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relative weights of insert, remove, search and predecessor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mix {
    pub insert: u32,
    pub remove: u32,
    pub search: u32,
    pub predecessor: u32,
}

impl Mix {
    pub const EQUAL: Mix = Mix::new(1, 1, 1, 1);

    /// The seven standard benchmark mixes, by name.
    pub const STANDARD: [(&'static str, Mix); 7] = [
        ("equal", Mix::new(1, 1, 1, 1)),
        ("update-heavy", Mix::new(4, 4, 1, 1)),
        ("insert-heavy", Mix::new(4, 1, 2, 2)),
        ("remove-heavy", Mix::new(1, 4, 2, 2)),
        ("query-heavy", Mix::new(1, 1, 4, 4)),
        ("search-heavy", Mix::new(1, 1, 8, 0)),
        ("predecessor-heavy", Mix::new(1, 1, 0, 8)),
    ];

    pub const fn new(insert: u32, remove: u32, search: u32, predecessor: u32) -> Self {
        Self {
            insert,
            remove,
            search,
            predecessor,
        }
    }

    fn total(&self) -> u64 {
        u64::from(self.insert)
            + u64::from(self.remove)
            + u64::from(self.search)
            + u64::from(self.predecessor)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.insert == 0 || self.remove == 0 {
            return Err(ConfigError::MixWeights(*self));
        }
        Ok(())
    }

    /// Number of keys present in the steady state of a `2^k` universe.
    pub fn steady_size(&self, k: u32) -> u64 {
        let universe = 1u128 << k;
        (universe * u128::from(self.insert) / (u128::from(self.insert) + u128::from(self.remove)))
            as u64
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.insert, self.remove, self.search, self.predecessor
        )
    }
}

impl FromStr for Mix {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::MixFormat(s.to_owned());
        let parts = s
            .split(':')
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let [insert, remove, search, predecessor] = parts[..] else {
            return Err(bad());
        };
        let mix = Mix::new(insert, remove, search, predecessor);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Insert,
    Remove,
    Search,
    Predecessor,
}

/// One worker's seeded stream of operations.
pub struct Workload {
    rng: SmallRng,
    mix: Mix,
    total: u64,
    mask: u64,
}

impl Workload {
    pub fn new(mix: Mix, k: u32, seed: u64, trial: u32, pid: usize) -> Self {
        Self {
            rng: SmallRng::seed_from_u64(stream_seed(seed, trial, pid as u64 + 1)),
            mix,
            total: mix.total(),
            mask: (1u64 << k) - 1,
        }
    }

    pub fn next_op(&mut self) -> (Op, u64) {
        let key = self.rng.gen::<u64>() & self.mask;
        let mut roll = self.rng.gen_range(0..self.total);
        let m = &self.mix;
        for (w, op) in [
            (m.insert, Op::Insert),
            (m.remove, Op::Remove),
            (m.search, Op::Search),
        ] {
            if roll < u64::from(w) {
                return (op, key);
            }
            roll -= u64::from(w);
        }
        (Op::Predecessor, key)
    }
}

/// Mixes the run seed, trial and stream index into one RNG seed. Stream 0
/// is the coordinator's prefill.
fn stream_seed(seed: u64, trial: u32, stream: u64) -> u64 {
    let mut z = seed ^ (u64::from(trial) << 32) ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub structure: Structure,
    pub k: u32,
    pub threads: usize,
    pub seconds: f64,
    pub mix: Mix,
    pub pin: Pinning,
    pub seed: u64,
    pub trials: u32,
    pub reclaim: ReclaimConfig,
}

impl ExperimentConfig {
    pub const MAX_KEY_BITS: u32 = kotrie::trie::MAX_KEY_BITS;

    pub fn new(structure: Structure, k: u32, threads: usize, seconds: f64, mix: Mix) -> Self {
        Self {
            structure,
            k,
            threads,
            seconds,
            mix,
            pin: Pinning::None,
            seed: 1,
            trials: 1,
            reclaim: ReclaimConfig::from_env(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mix.validate()?;
        if !(1..=Self::MAX_KEY_BITS).contains(&self.k) {
            return Err(ConfigError::KeyBits {
                got: self.k,
                max: Self::MAX_KEY_BITS,
            });
        }
        if self.threads == 0 {
            return Err(ConfigError::NoThreads);
        }
        if !(self.seconds.is_finite() && self.seconds > 0.0) {
            return Err(ConfigError::Seconds(self.seconds));
        }
        Ok(())
    }

    pub fn prefill_target(&self) -> u64 {
        self.mix.steady_size(self.k)
    }

    pub fn duration(&self) -> Duration {
        Duration::from_secs_f64(self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub trial: u32,
    /// Completed operations per worker.
    pub counts: Vec<u64>,
    pub throughput: u64,
    /// From releasing the workers to joining the last one.
    pub wall: Duration,
}

impl RunResult {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.structure,
            c.k,
            c.threads,
            c.seconds,
            c.mix.insert,
            c.mix.remove,
            c.mix.search,
            c.mix.predecessor,
            c.pin,
            c.seed,
            self.trial,
            self.throughput
        )
    }
}

/// Appends one row per result to `path`, writing the header first if the
/// file does not exist yet.
pub fn emit_csv(results: &[RunResult], path: &Path) -> std::io::Result<()> {
    let fresh = !path.exists();
    let mut out = String::new();
    if fresh {
        out.push_str(CSV_HEADER);
        out.push('\n');
    }
    for r in results {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?
        .write_all(out.as_bytes())
}

/// Inserts a uniformly random set of exactly `target` keys through `h`.
pub fn prefill(h: &mut impl SetHandle, k: u32, target: u64, seed: u64, trial: u32) {
    let universe = 1usize << k;
    assert!(
        target as usize <= universe,
        "prefill target exceeds the universe"
    );
    let mut rng = SmallRng::seed_from_u64(stream_seed(seed, trial, 0));
    for key in rand::seq::index::sample(&mut rng, universe, target as usize) {
        let fresh = h.insert(key as u64);
        debug_assert!(fresh);
    }
}

/// The structure under test.
pub enum Subject {
    Kotrie(Trie),
    Skiplist(SkipList),
    Augtrie(AugmentedTrie),
}

macro_rules! dispatch {
    ($self:expr, $s:ident => $body:expr) => {
        match $self {
            Subject::Kotrie($s) => $body,
            Subject::Skiplist($s) => $body,
            Subject::Augtrie($s) => $body,
        }
    };
}

impl Subject {
    /// An empty structure with room for `config.threads` workers.
    pub fn new(config: &ExperimentConfig) -> Self {
        let (k, n, reclaim) = (config.k, config.threads, config.reclaim);
        match config.structure {
            Structure::Kotrie => Subject::Kotrie(Trie::with_config(k, n, reclaim)),
            Structure::Skiplist => {
                let list = SkipListConfig {
                    seed: config.seed,
                    ..SkipListConfig::default()
                };
                Subject::Skiplist(SkipList::with_config(k, n, list, reclaim))
            }
            Structure::Augtrie => Subject::Augtrie(AugmentedTrie::with_config(k, n, reclaim)),
        }
    }

    pub fn prefill(&self, config: &ExperimentConfig, trial: u32) -> Result<(), ConfigError> {
        dispatch!(self, s => {
            let mut h = s.register()?;
            prefill(&mut h, config.k, config.prefill_target(), config.seed, trial);
            Ok(())
        })
    }

    pub fn run(&self, config: &ExperimentConfig, trial: u32) -> Result<RunResult, ConfigError> {
        dispatch!(self, s => run(s, config, trial))
    }

    /// Number of keys present. Needs quiescence.
    pub fn size(&mut self) -> u64 {
        match self {
            Subject::Kotrie(t) => t.keys().len() as u64,
            Subject::Skiplist(l) => l.keys().len() as u64,
            Subject::Augtrie(a) => a.register().expect("free slot").size(),
        }
    }

    /// Structural self-check at quiescence.
    pub fn audit(&mut self) -> Result<(), String> {
        match self {
            Subject::Kotrie(t) => t.audit(),
            Subject::Skiplist(l) => l.audit().map(drop),
            Subject::Augtrie(a) => a.audit().map(drop),
        }
    }

    pub fn reclaim_stats(&self) -> ReclaimStats {
        dispatch!(self, s => s.reclaim_stats())
    }
}

/// Runs one timed trial on an already filled `set`.
pub fn run<C: ConcurrentSet>(
    set: &C,
    config: &ExperimentConfig,
    trial: u32,
) -> Result<RunResult, ConfigError> {
    config.validate()?;
    let n = config.threads;
    let handles = (0..n)
        .map(|_| set.register())
        .collect::<Result<Vec<_>, _>>()?;
    let pins = config.pin.cpus(n);

    let ready = AtomicUsize::new(0);
    let done = AtomicBool::new(false);
    let finished = AtomicUsize::new(0);
    let slots: Vec<AtomicU64> = (0..n).map(|_| AtomicU64::new(0)).collect();
    let length = config.duration();

    let wall = std::thread::scope(|s| {
        let started = Instant::now();
        let workers: Vec<_> = handles
            .into_iter()
            .enumerate()
            .map(|(pid, mut h)| {
                let (ready, done, finished, slots) = (&ready, &done, &finished, &slots);
                let cpu = pins.as_ref().map(|p| p[pid]);
                s.spawn(move || {
                    if let Some(cpu) = cpu {
                        pin::pin_current(cpu);
                    }
                    let mut work = Workload::new(config.mix, config.k, config.seed, trial, pid);
                    ready.fetch_add(1, SeqCst);
                    wait_for(ready, n);
                    let end = Instant::now() + length;
                    let mut count = 0u64;
                    loop {
                        for _ in 0..BATCH {
                            match work.next_op() {
                                (Op::Insert, x) => {
                                    h.insert(x);
                                }
                                (Op::Remove, x) => {
                                    h.remove(x);
                                }
                                (Op::Search, x) => {
                                    h.search(x);
                                }
                                (Op::Predecessor, x) => {
                                    h.predecessor(x);
                                }
                            }
                        }
                        count += BATCH;
                        if done.load(SeqCst) {
                            break;
                        }
                        if Instant::now() >= end {
                            done.store(true, SeqCst);
                            break;
                        }
                    }
                    slots[pid].store(count, SeqCst);
                    finished.fetch_add(1, SeqCst);
                    wait_for(finished, n);
                    // Every worker is past its last operation.
                    unsafe { h.drain_limbo() };
                })
            })
            .collect();
        std::thread::sleep(length + GRACE);
        for w in workers {
            w.join().expect("worker panicked");
        }
        started.elapsed()
    });

    let counts: Vec<u64> = slots.iter().map(|c| c.load(SeqCst)).collect();
    Ok(RunResult {
        config: config.clone(),
        trial,
        throughput: counts.iter().sum(),
        counts,
        wall,
    })
}

fn wait_for(counter: &AtomicUsize, n: usize) {
    while counter.load(SeqCst) < n {
        std::hint::spin_loop();
        std::thread::yield_now();
    }
}

/// Builds, fills, runs and tears down one structure per trial.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunResult>, ConfigError> {
    config.validate()?;
    (0..config.trials)
        .map(|trial| {
            let subject = Subject::new(config);
            subject.prefill(config, trial)?;
            subject.run(config, trial)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parses_and_validates() {
        assert_eq!("4:1:2:2".parse::<Mix>().unwrap(), Mix::new(4, 1, 2, 2));
        assert!(matches!(
            "0:1:1:1".parse::<Mix>(),
            Err(ConfigError::MixWeights(_))
        ));
        assert!(matches!(
            "1:1:1".parse::<Mix>(),
            Err(ConfigError::MixFormat(_))
        ));
        assert!(matches!(
            "1:x:1:1".parse::<Mix>(),
            Err(ConfigError::MixFormat(_))
        ));
        assert_eq!(Mix::new(1, 1, 8, 0).to_string(), "1:1:8:0");
    }

    #[test]
    fn steady_sizes() {
        assert_eq!(Mix::EQUAL.steady_size(20), 524_288);
        assert_eq!(Mix::new(4, 1, 0, 0).steady_size(8), 204);
        assert_eq!(Mix::new(1, 4, 2, 2).steady_size(4), 3);
    }

    #[test]
    fn workload_is_a_function_of_seed_trial_and_pid() {
        let take = |trial, pid| {
            let mut w = Workload::new(Mix::EQUAL, 10, 7, trial, pid);
            (0..1000).map(|_| w.next_op()).collect::<Vec<_>>()
        };
        assert_eq!(take(0, 0), take(0, 0));
        assert_ne!(take(0, 0), take(0, 1));
        assert_ne!(take(0, 0), take(1, 0));
    }

    #[test]
    fn workload_follows_mix_weights() {
        let mut w = Workload::new(Mix::new(1, 1, 8, 0), 6, 3, 0, 0);
        let mut seen = [0u32; 4];
        for _ in 0..100_000 {
            let (op, key) = w.next_op();
            assert!(key < 64);
            seen[op as usize] += 1;
        }
        assert_eq!(seen[Op::Predecessor as usize], 0);
        let search = f64::from(seen[Op::Search as usize]) / 100_000.0;
        assert!((search - 0.8).abs() < 0.01, "{seen:?}");
    }

    #[test]
    fn prefill_reaches_the_target_exactly() {
        let config = ExperimentConfig::new(Structure::Augtrie, 8, 1, 1.0, Mix::new(4, 1, 0, 0));
        let mut subject = Subject::new(&config);
        subject.prefill(&config, 0).unwrap();
        assert_eq!(subject.size(), 204);
    }

    #[test]
    fn registration_overflow_is_a_config_error() {
        let config = ExperimentConfig::new(Structure::Kotrie, 4, 2, 0.01, Mix::EQUAL);
        let trie = Trie::new(4, 1);
        assert!(matches!(
            run(&trie, &config, 0),
            Err(ConfigError::Register(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ExperimentConfig::new(Structure::Kotrie, 0, 1, 1.0, Mix::EQUAL);
        assert!(matches!(c.validate(), Err(ConfigError::KeyBits { .. })));
        c.k = 4;
        c.threads = 0;
        assert!(matches!(c.validate(), Err(ConfigError::NoThreads)));
        c.threads = 1;
        c.seconds = 0.0;
        assert!(matches!(c.validate(), Err(ConfigError::Seconds(_))));
    }
}
