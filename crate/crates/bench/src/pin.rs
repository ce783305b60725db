//! Placing workers on hardware threads.

use std::fmt;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Pinning {
    /// Worker `i` on hardware thread `i`.
    Compact,
    /// Worker `i` on hardware thread `2i`.
    Even,
    /// Left to the OS scheduler.
    #[default]
    None,
}

impl fmt::Display for Pinning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pinning::Compact => "compact",
            Pinning::Even => "even",
            Pinning::None => "none",
        })
    }
}

impl Pinning {
    /// Hardware thread for each of `n` workers, or `None` when workers are
    /// not pinned. Indices past the last hardware thread wrap around.
    pub fn cpus(self, n: usize) -> Option<Vec<usize>> {
        let stride = match self {
            Pinning::Compact => 1,
            Pinning::Even => 2,
            Pinning::None => return None,
        };
        if !SUPPORTED {
            eprintln!("warning: thread pinning is not supported here, running unpinned");
            return None;
        }
        let hw = std::thread::available_parallelism().map_or(1, |p| p.get());
        Some((0..n).map(|i| (i * stride) % hw).collect())
    }
}

const SUPPORTED: bool = cfg!(target_os = "linux");

/// Restricts the calling thread to hardware thread `cpu`.
#[cfg(target_os = "linux")]
pub fn pin_current(cpu: usize) {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            eprintln!(
                "warning: could not pin to cpu {cpu}: {}",
                std::io::Error::last_os_error()
            );
        }
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current(_cpu: usize) {}
