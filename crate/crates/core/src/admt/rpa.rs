//! Random periodic alternation between the two teachers.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Teacher {
    T1,
    T2,
}

impl Teacher {
    pub fn other(self) -> Teacher {
        match self {
            Teacher::T1 => Teacher::T2,
            Teacher::T2 => Teacher::T1,
        }
    }

    /// The strong augmentation paired with this teacher.
    pub fn strong_aug(self) -> StrongAug {
        match self {
            Teacher::T1 => StrongAug::Color,
            Teacher::T2 => StrongAug::CopyPaste,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Teacher::T1 => "t1",
            Teacher::T2 => "t2",
        }
    }
}

impl fmt::Display for Teacher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrongAug {
    Color,
    CopyPaste,
}

/// Supplies period lengths in `1..=t_max`.
pub trait PeriodSource {
    fn next_period(&mut self, t_max: usize) -> usize;
}

/// Uniform draws from `1..=t_max`.
#[derive(Clone, Debug)]
pub struct UniformPeriods(pub ChaCha8Rng);

impl PeriodSource for UniformPeriods {
    fn next_period(&mut self, t_max: usize) -> usize {
        self.0.random_range(1..=t_max)
    }
}

/// Always the same period, clamped into `1..=t_max`. Useful for scripted runs.
#[derive(Clone, Copy, Debug)]
pub struct FixedPeriod(pub usize);

impl PeriodSource for FixedPeriod {
    fn next_period(&mut self, t_max: usize) -> usize {
        self.0.clamp(1, t_max)
    }
}

pub struct RpaState {
    active: Teacher,
    remaining: usize,
    t_max: usize,
    source: Box<dyn PeriodSource + Send>,
}

impl fmt::Debug for RpaState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RpaState")
            .field("active", &self.active)
            .field("remaining", &self.remaining)
            .field("t_max", &self.t_max)
            .finish_non_exhaustive()
    }
}

impl RpaState {
    /// Starts with T1 active for a freshly drawn period.
    pub fn new(t_max: usize, source: impl PeriodSource + Send + 'static) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("t_max must be at least 1 iteration"));
        }
        let mut source: Box<dyn PeriodSource + Send> = Box::new(source);
        let remaining = source.next_period(t_max);
        Ok(Self {
            active: Teacher::T1,
            remaining,
            t_max,
            source,
        })
    }

    pub fn active(&self) -> Teacher {
        self.active
    }

    pub fn iters_remaining(&self) -> usize {
        self.remaining
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Returns the teacher that owns this iteration and its augmentation,
    /// then consumes one iteration of the period. When the period runs out
    /// the other teacher takes over for a fresh period starting next call.
    pub fn tick(&mut self) -> (Teacher, StrongAug) {
        let current = self.active;
        self.remaining -= 1;
        if self.remaining == 0 {
            self.active = current.other();
            self.remaining = self.source.next_period(self.t_max);
        }
        (current, current.strong_aug())
    }
}
