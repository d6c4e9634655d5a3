use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounded spinning. A wait gives up after `max_polls` polls or `max_wall`,
/// whichever comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitBudget {
    pub max_polls: u64,
    #[serde(with = "millis")]
    pub max_wall: Duration,
}

impl Default for WaitBudget {
    fn default() -> Self {
        Self {
            max_polls: 10_000_000,
            max_wall: Duration::from_secs(10),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Why a wait ended without its condition holding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitFailure {
    Exhausted { polls: u64 },
    Aborted,
}

/// Spins on `ready` until it returns true, the budget runs out, or `abort` is raised.
pub fn spin_until(
    budget: &WaitBudget,
    abort: &AtomicBool,
    mut ready: impl FnMut() -> bool,
) -> std::result::Result<u64, WaitFailure> {
    let start = Instant::now();
    let mut polls = 0u64;
    loop {
        if ready() {
            return Ok(polls);
        }
        polls += 1;
        if polls >= budget.max_polls {
            return Err(WaitFailure::Exhausted { polls });
        }
        if polls.is_multiple_of(64) {
            if abort.load(Ordering::Relaxed) {
                return Err(WaitFailure::Aborted);
            }
            if start.elapsed() >= budget.max_wall {
                return Err(WaitFailure::Exhausted { polls });
            }
            std::thread::yield_now();
        } else {
            std::hint::spin_loop();
        }
    }
}

/// Monotonic event counter shared by every thread of one run.
#[derive(Debug, Default)]
pub struct LogicalClock {
    now: AtomicU64,
    started: Option<Instant>,
}

impl LogicalClock {
    pub fn new() -> Self {
        Self {
            now: AtomicU64::new(0),
            started: Some(Instant::now()),
        }
    }

    /// Returns a fresh timestamp, strictly greater than every earlier one.
    pub fn tick(&self) -> u64 {
        self.now.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn wall_ns(&self) -> u64 {
        self.started.map_or(0, |s| s.elapsed().as_nanos() as u64)
    }
}

/// Readiness flags of one rank, one per communication tile of its gather buffer.
///
/// Setting a flag publishes everything its setter wrote before (release);
/// observing it set makes those writes visible (acquire).
#[derive(Debug)]
pub struct SignalBoard {
    owner: usize,
    flags: Vec<AtomicU32>,
    set_ts: Vec<AtomicU64>,
    setter: Vec<AtomicU64>,
}

const UNSET: u32 = 0;
const SET: u32 = 1;
const NO_SETTER: u64 = u64::MAX;

impl SignalBoard {
    pub fn new(owner: usize, n_flags: usize) -> Self {
        Self {
            owner,
            flags: (0..n_flags).map(|_| AtomicU32::new(UNSET)).collect(),
            set_ts: (0..n_flags).map(|_| AtomicU64::new(0)).collect(),
            setter: (0..n_flags).map(|_| AtomicU64::new(NO_SETTER)).collect(),
        }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// Marks flags as set at timestamp 0, before any worker starts.
    pub fn preset(&self, flags: std::ops::Range<usize>) {
        for f in flags {
            self.set_ts[f].store(0, Ordering::Relaxed);
            self.setter[f].store(self.owner as u64, Ordering::Relaxed);
            self.flags[f].store(SET, Ordering::Release);
        }
    }

    /// Sets flag `f` on behalf of agent `by` at logical time `ts`.
    ///
    /// Fails if the flag was already set in this run.
    pub fn set(&self, f: usize, by: usize, ts: u64) -> Result<()> {
        self.check(f)?;
        if self.is_set(f) {
            return Err(Error::Mismatch(format!(
                "flag {f} of board {} set twice",
                self.owner
            )));
        }
        self.set_ts[f].store(ts, Ordering::Relaxed);
        self.setter[f].store(by as u64, Ordering::Relaxed);
        match self.flags[f].compare_exchange(UNSET, SET, Ordering::Release, Ordering::Relaxed) {
            Ok(_) => Ok(()),
            Err(_) => Err(Error::Mismatch(format!(
                "flag {f} of board {} set twice",
                self.owner
            ))),
        }
    }

    pub fn is_set(&self, f: usize) -> bool {
        self.flags[f].load(Ordering::Acquire) == SET
    }

    /// Timestamp of the set; meaningful once [`Self::is_set`] returned true.
    pub fn set_ts(&self, f: usize) -> u64 {
        self.set_ts[f].load(Ordering::Relaxed)
    }

    pub fn setter(&self, f: usize) -> Option<usize> {
        match self.setter[f].load(Ordering::Relaxed) {
            NO_SETTER => None,
            s => Some(s as usize),
        }
    }

    pub fn count_set(&self) -> usize {
        (0..self.len()).filter(|&f| self.is_set(f)).count()
    }

    /// Blocks until flag `f` is set and returns its set timestamp.
    pub fn wait(
        &self,
        f: usize,
        budget: &WaitBudget,
        abort: &AtomicBool,
        waiter: (usize, (usize, usize)),
    ) -> Result<u64> {
        self.check(f)?;
        match spin_until(budget, abort, || self.is_set(f)) {
            Ok(_) => Ok(self.set_ts(f)),
            Err(WaitFailure::Exhausted { polls }) => Err(Error::Deadlock {
                rank: waiter.0,
                tile: waiter.1,
                board: self.owner,
                flag: f,
                polls,
            }),
            Err(WaitFailure::Aborted) => Err(Error::Mismatch(format!(
                "wait on flag {f} of board {} aborted by another failure",
                self.owner
            ))),
        }
    }

    /// Clears every flag for the next run.
    pub fn reset(&self) {
        for f in 0..self.len() {
            self.flags[f].store(UNSET, Ordering::Release);
            self.set_ts[f].store(0, Ordering::Relaxed);
            self.setter[f].store(NO_SETTER, Ordering::Relaxed);
        }
    }

    fn check(&self, f: usize) -> Result<()> {
        if f >= self.len() {
            return Err(Error::Bounds(format!(
                "flag {f} outside board {} of {} flags",
                self.owner,
                self.len()
            )));
        }
        Ok(())
    }
}

/// Seeded scheduling noise injected between tiles and transfers.
#[derive(Debug)]
pub struct Jitter(Option<ChaCha8Rng>);

impl Jitter {
    pub fn new(seed: Option<u64>, stream: u64) -> Self {
        Self(seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))))
    }

    pub fn pause(&mut self) {
        let Some(rng) = self.0.as_mut() else { return };
        match rng.gen_range(0..4) {
            0 => {}
            1 => std::thread::yield_now(),
            2 => (0..rng.gen_range(1..500)).for_each(|_| std::hint::spin_loop()),
            _ => std::thread::sleep(Duration::from_micros(rng.gen_range(1..50))),
        }
    }
}
