//! Discovery and exploitation of undocumented PMU events.
//!
//! The crate scans the 16-bit event-selector space against an instruction
//! corpus to find selectors that count but are missing from the vendor
//! catalog, then puts those selectors to work as per-event attack detectors
//! and as a transient-execution side channel. All measurement goes through
//! [`backend::CounterBackend`]; the simulated backend makes every stage
//! reproducible without counter hardware.

pub mod backend;
pub mod catalog;
pub mod collector;
pub mod corpus;
pub mod detection;
pub mod event_space;
pub mod plot;
pub mod rng;
pub mod side_channel;
pub mod umask;

pub use catalog::{is_documented, EventCatalog};
pub use event_space::{enumerate_space, pack_selector, render_msr_value, EventSelector, PerfEvtSelValue};
