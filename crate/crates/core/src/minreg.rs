//! Wait-free bounded min registers.
//!
//! [`FlatMinRegister`] keeps its value in unary inside one atomic word: the
//! value `i` is stored as `i` trailing ones. `min_write(v)` is a single
//! fetch-and-AND with a mask of `v` ones, so reads and writes are each one
//! shared-memory step.
//!
//! [`TreeMinRegister`] stacks flat registers into a perfect `k`-ary tree to
//! reach bounds beyond one word. A value is decomposed into base-`k` digits,
//! most significant digit at the root.

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use thiserror::Error;

/// Widest flat register on a 64-bit word: 64 bits hold values `0..=64`.
pub const MAX_FLAT_BITS: u32 = 64;
/// Largest supported tree arity (one flat register of `arity - 1` bits per node).
pub const MAX_ARITY: u32 = MAX_FLAT_BITS + 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MinRegError {
    #[error("flat register width {0} is outside 1..=64")]
    Width(u32),
    #[error("tree arity {0} is outside 2..=65")]
    Arity(u32),
    #[error("bound {bound} is too large for arity {arity}")]
    Bound { arity: u32, bound: u64 },
    #[error("value {value} is not below the bound {bound}")]
    OutOfRange { value: u64, bound: u64 },
}

/// Counts shared-memory steps. The no-op implementation compiles away.
pub trait StepCounter {
    fn step(&mut self);
}

impl StepCounter for () {
    #[inline(always)]
    fn step(&mut self) {}
}

impl StepCounter for u32 {
    fn step(&mut self) {
        *self += 1;
    }
}

/// A min register over `0..=bits` backed by one atomic word.
#[derive(Debug)]
pub struct FlatMinRegister {
    word: AtomicU64,
    bits: u32,
}

#[inline]
fn ones(n: u32) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

impl FlatMinRegister {
    /// A register holding its maximum value `bits`.
    pub fn new(bits: u32) -> Result<Self, MinRegError> {
        if !(1..=MAX_FLAT_BITS).contains(&bits) {
            return Err(MinRegError::Width(bits));
        }
        Ok(Self {
            word: AtomicU64::new(ones(bits)),
            bits,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Exclusive upper bound on stored values (`bits + 1`).
    pub fn bound(&self) -> u64 {
        u64::from(self.bits) + 1
    }

    pub fn min_read(&self) -> u32 {
        self.read_with(&mut ())
    }

    /// Lowers the value to `v` if `v` is smaller. Values above `bits` are
    /// no-ops.
    pub fn min_write(&self, v: u32) {
        self.write_with(v, &mut ())
    }

    /// Raw word, for invariant checks.
    pub fn word(&self) -> u64 {
        self.word.load(SeqCst)
    }

    pub(crate) fn read_with(&self, steps: &mut impl StepCounter) -> u32 {
        steps.step();
        // Bits above `bits` are always zero, so the complement has a one at
        // position `bits` at the latest.
        (!self.word.load(SeqCst)).trailing_zeros()
    }

    pub(crate) fn write_with(&self, v: u32, steps: &mut impl StepCounter) {
        steps.step();
        self.word.fetch_and(ones(v), SeqCst);
    }

    /// Restores the maximum value. Only valid while no other thread can see
    /// the register.
    pub(crate) fn reset(&self) {
        self.word.store(ones(self.bits), SeqCst);
    }
}

/// A min register over `0..bound` built as a `k`-ary tree of flat registers.
#[derive(Debug)]
pub struct TreeMinRegister {
    arity: u32,
    height: u32,
    bound: u64,
    /// Level-order: level `l` starts at `(arity^l - 1) / (arity - 1)`.
    nodes: Box<[FlatMinRegister]>,
}

impl TreeMinRegister {
    /// A register over `0..bound`, initialised to `bound - 1`.
    ///
    /// The tree height is the smallest `x` with `arity^x >= bound`.
    pub fn new(arity: u32, bound: u64) -> Result<Self, MinRegError> {
        if !(2..=MAX_ARITY).contains(&arity) {
            return Err(MinRegError::Arity(arity));
        }
        if bound < 2 {
            return Err(MinRegError::Bound { arity, bound });
        }
        let mut height = 1;
        let mut cap = u64::from(arity);
        while cap < bound {
            cap = cap
                .checked_mul(u64::from(arity))
                .ok_or(MinRegError::Bound { arity, bound })?;
            height += 1;
        }
        let reg = Self::build(arity, height, bound)?;
        if bound < cap {
            reg.write_with(bound - 1, &mut ());
        }
        Ok(reg)
    }

    /// A register over `0..arity^height`.
    pub fn with_height(arity: u32, height: u32) -> Result<Self, MinRegError> {
        if !(2..=MAX_ARITY).contains(&arity) {
            return Err(MinRegError::Arity(arity));
        }
        let bound = u64::from(arity)
            .checked_pow(height)
            .filter(|_| height >= 1)
            .ok_or(MinRegError::Bound { arity, bound: 0 })?;
        Self::build(arity, height, bound)
    }

    fn build(arity: u32, height: u32, bound: u64) -> Result<Self, MinRegError> {
        let k = u64::from(arity);
        let count = (k.pow(height) - 1) / (k - 1);
        if count > (1 << 26) {
            return Err(MinRegError::Bound { arity, bound });
        }
        let nodes = (0..count)
            .map(|_| FlatMinRegister::new(arity - 1))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            arity,
            height,
            bound,
            nodes: nodes.into_boxed_slice(),
        })
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    /// Tree height `x`: reads take exactly this many steps.
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn min_read(&self) -> u64 {
        self.read_with(&mut ())
    }

    pub fn min_write(&self, v: u64) -> Result<(), MinRegError> {
        self.check(v)?;
        self.write_with(v, &mut ());
        Ok(())
    }

    /// Like [`min_read`](Self::min_read), also returning the number of
    /// shared-memory steps taken.
    pub fn min_read_counted(&self) -> (u64, u32) {
        let mut steps = 0u32;
        let v = self.read_with(&mut steps);
        (v, steps)
    }

    /// Like [`min_write`](Self::min_write), returning the step count.
    pub fn min_write_counted(&self, v: u64) -> Result<u32, MinRegError> {
        self.check(v)?;
        let mut steps = 0u32;
        self.write_with(v, &mut steps);
        Ok(steps)
    }

    /// Every flat register, in level order.
    pub fn flat_registers(&self) -> &[FlatMinRegister] {
        &self.nodes
    }

    fn check(&self, v: u64) -> Result<(), MinRegError> {
        if v >= self.bound {
            return Err(MinRegError::OutOfRange {
                value: v,
                bound: self.bound,
            });
        }
        Ok(())
    }

    fn child(&self, index: usize, digit: u32) -> usize {
        index * self.arity as usize + 1 + digit as usize
    }

    fn read_with(&self, steps: &mut impl StepCounter) -> u64 {
        let k = u64::from(self.arity);
        let mut index = 0;
        let mut value = 0;
        for level in 0..self.height {
            let digit = self.nodes[index].read_with(steps);
            value = value * k + u64::from(digit);
            if level + 1 < self.height {
                index = self.child(index, digit);
            }
        }
        value
    }

    fn write_with(&self, v: u64, steps: &mut impl StepCounter) {
        let span = u64::from(self.arity).pow(self.height - 1);
        self.write_at(0, 0, v, span, steps);
    }

    /// Writes `rest` into the subtree rooted at `index` on `level`, where
    /// `span` is the value range covered by one child of that subtree.
    fn write_at(
        &self,
        index: usize,
        level: u32,
        rest: u64,
        span: u64,
        steps: &mut impl StepCounter,
    ) {
        let digit = (rest / span) as u32;
        let node = &self.nodes[index];
        if level + 1 == self.height {
            node.write_with(digit, steps);
            return;
        }
        let current = node.read_with(steps);
        if current < digit {
            return;
        }
        // Lower digits go into the chosen subtree before the switch moves,
        // so a reader following the switch finds them in place.
        let k = u64::from(self.arity);
        self.write_at(
            self.child(index, digit),
            level + 1,
            rest % span,
            span / k,
            steps,
        );
        if current > digit {
            node.write_with(digit, steps);
        }
    }
}
