//! Counter programming contract shared by the simulated and native PMUs.
//!
//! A backend exposes up to four programmable counter slots. Programming a
//! slot selects an event and zeroes its count; reading returns the count
//! accumulated since. Everything above this module measures through
//! [`measure_delta`] or the raw [`CounterBackend`] calls.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_space::PerfEvtSelValue;

pub mod sim;

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub mod native;

pub use sim::{SimBackend, SimEventFamily, SimModel};

/// Hardware limit on programmable counters per logical core.
pub const MAX_PROGRAMMABLE: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("counter slot {0} out of range (backend has {1} programmable counters)")]
    SlotRange(u8, u8),
    #[error("counter slot {0} has not been programmed")]
    Unprogrammed(u8),
    #[error("no free counter slot")]
    NoFreeSlot,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend i/o on {what}: {detail}")]
    Io { what: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CounterSlot(u8);

impl CounterSlot {
    pub fn new(index: u8) -> Result<Self, BackendError> {
        if index < MAX_PROGRAMMABLE {
            Ok(Self(index))
        } else {
            Err(BackendError::SlotRange(index, MAX_PROGRAMMABLE))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all(count: u8) -> impl Iterator<Item = CounterSlot> {
        (0..count.min(MAX_PROGRAMMABLE)).map(CounterSlot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub programmable_count: u8,
    pub supports_transactional_suppression: bool,
    pub is_simulated: bool,
}

/// Which hardware thread of the monitored physical core an activity runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicalContext {
    /// The logical core the counters are programmed on.
    Own,
    /// The hyperthread sibling. Only visible to selectors with `any_thread`.
    Sibling,
}

pub trait CounterBackend {
    fn capabilities(&self) -> BackendCapabilities;

    /// Selects the event for `slot` and zeroes its count.
    fn program(&mut self, slot: CounterSlot, value: PerfEvtSelValue) -> Result<(), BackendError>;

    fn read(&mut self, slot: CounterSlot) -> Result<u64, BackendError>;

    /// Disables `slot` and marks it free.
    fn release(&mut self, slot: CounterSlot) -> Result<(), BackendError>;

    fn is_programmed(&self, slot: CounterSlot) -> bool;

    fn check_slot(&self, slot: CounterSlot) -> Result<(), BackendError> {
        let count = self.capabilities().programmable_count;
        if slot.index() < count {
            Ok(())
        } else {
            Err(BackendError::SlotRange(slot.index(), count))
        }
    }
}

/// A backend that can be driven by abstract instruction-class activity
/// instead of real machine code. Each call is one execution unit.
pub trait ActivitySink {
    fn retire(&mut self, context: LogicalContext, activity: &[(&str, u64)]);
}

/// Count change around one workload invocation, plus whatever the workload
/// reported (typically an execution outcome, possibly a fault).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Measured<T> {
    pub delta: i64,
    pub outcome: T,
}

/// Programs `value` on the first free slot, runs `workload` once and returns
/// read-after minus read-before. The slot is released afterwards.
pub fn measure_delta<B, T>(
    backend: &mut B,
    value: PerfEvtSelValue,
    workload: impl FnOnce(&mut B) -> T,
) -> Result<Measured<T>, BackendError>
where
    B: CounterBackend + ?Sized,
{
    let caps = backend.capabilities();
    let slot = CounterSlot::all(caps.programmable_count)
        .find(|s| !backend.is_programmed(*s))
        .ok_or(BackendError::NoFreeSlot)?;
    backend.program(slot, value)?;
    let before = backend.read(slot)?;
    let outcome = workload(backend);
    let after = backend.read(slot)?;
    backend.release(slot)?;
    Ok(Measured {
        delta: after.wrapping_sub(before) as i64,
        outcome,
    })
}
