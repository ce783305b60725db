//! The packed successor word shared by the announcement lists.
//!
//! Low 3 bits hold the state. In the `InsFlag` state bits 3..19 hold a
//! process id and bits 19..64 a sequence number; otherwise the high bits are
//! an 8-byte-aligned pointer.

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum State {
    Normal = 0,
    InsFlag = 1,
    DelFlag = 2,
    Marked = 3,
}

const STATE_MASK: u64 = 0b111;
const PID_SHIFT: u32 = 3;
const PID_BITS: u32 = 16;
const SEQ_SHIFT: u32 = PID_SHIFT + PID_BITS;

pub const MAX_PIDS: usize = 1 << PID_BITS;

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Word(u64);

impl Word {
    pub const NULL: Word = Word(0);

    #[inline]
    pub fn link<T>(ptr: *const T, state: State) -> Word {
        debug_assert_eq!(ptr as u64 & STATE_MASK, 0);
        debug_assert_ne!(state, State::InsFlag);
        Word(ptr as u64 | state as u64)
    }

    #[inline]
    pub fn desc(seq: u64, pid: usize) -> Word {
        debug_assert!(pid < MAX_PIDS);
        Word((seq << SEQ_SHIFT) | ((pid as u64) << PID_SHIFT) | State::InsFlag as u64)
    }

    #[inline]
    pub fn state(self) -> State {
        match self.0 & STATE_MASK {
            0 => State::Normal,
            1 => State::InsFlag,
            2 => State::DelFlag,
            3 => State::Marked,
            _ => unreachable!("corrupt successor word {:#x}", self.0),
        }
    }

    #[inline]
    pub fn ptr<T>(self) -> *mut T {
        debug_assert_ne!(self.state(), State::InsFlag);
        (self.0 & !STATE_MASK) as *mut T
    }

    #[inline]
    pub fn seq(self) -> u64 {
        self.0 >> SEQ_SHIFT
    }

    #[inline]
    pub fn pid(self) -> usize {
        ((self.0 >> PID_SHIFT) & ((1 << PID_BITS) - 1)) as usize
    }
}

impl std::fmt::Debug for Word {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.state() {
            State::InsFlag => write!(f, "<desc seq={} pid={}>", self.seq(), self.pid()),
            s => write!(f, "<{:#x} {:?}>", self.0 & !STATE_MASK, s),
        }
    }
}

/// An atomic [`Word`].
#[derive(Default)]
pub struct AtomicWord(AtomicU64);

impl AtomicWord {
    #[inline]
    pub fn load(&self) -> Word {
        Word(self.0.load(SeqCst))
    }

    #[inline]
    pub fn store(&self, w: Word) {
        self.0.store(w.0, SeqCst)
    }

    /// Compare-and-swap returning the value observed before the attempt.
    #[inline]
    pub fn cas(&self, expected: Word, new: Word) -> Result<Word, Word> {
        self.0
            .compare_exchange(expected.0, new.0, SeqCst, SeqCst)
            .map(Word)
            .map_err(Word)
    }
}
