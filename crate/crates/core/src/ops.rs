//! Arithmetic operation tallies.

use std::fmt;
use std::ops::{Add, AddAssign, Mul};

/// Floating-point multiplications, additions and comparisons performed by a
/// layer. Subtractions count as additions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct OpCounter {
    pub mults: u64,
    pub adds: u64,
    pub comparisons: u64,
}

impl OpCounter {
    pub const ZERO: OpCounter = OpCounter {
        mults: 0,
        adds: 0,
        comparisons: 0,
    };

    pub fn new(mults: u64, adds: u64, comparisons: u64) -> Self {
        OpCounter {
            mults,
            adds,
            comparisons,
        }
    }

    pub fn total(&self) -> u64 {
        self.mults + self.adds + self.comparisons
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.mults += rhs.mults;
        self.adds += rhs.adds;
        self.comparisons += rhs.comparisons;
    }
}

impl Add for OpCounter {
    type Output = OpCounter;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Scales every tally, e.g. per-sample counts times a sample count.
impl Mul<u64> for OpCounter {
    type Output = OpCounter;

    fn mul(self, n: u64) -> Self {
        OpCounter {
            mults: self.mults * n,
            adds: self.adds * n,
            comparisons: self.comparisons * n,
        }
    }
}

impl fmt::Display for OpCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mults={} adds={} comparisons={}",
            self.mults, self.adds, self.comparisons
        )
    }
}
