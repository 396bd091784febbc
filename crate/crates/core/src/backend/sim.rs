//! Deterministic simulated PMU.
//!
//! The model is a list of event families. A family owns one event code and
//! counts for the umasks its relevance mask admits (`umask & mask != 0`, or
//! every umask when the mask is zero). Retired activity whose instruction
//! class is in the family's trigger set adds `increment` per instance.
//!
//! Two noise sources are available per family, both applied once per
//! execution unit on every slot the family is live on:
//! - Gaussian over-count, rounded and truncated at zero.
//! - False fire: with a fixed probability, one spurious `increment`.
//!
//! Noise generators are seeded per slot when the slot is programmed, keyed
//! by the run seed, the family seed, the selector and how many times that
//! selector has been programmed before. Replaying the same operations gives
//! the same counts, and partitioning the selector space across instances
//! does not change any selector's draws.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ActivitySink, BackendCapabilities, BackendError, CounterBackend, CounterSlot, LogicalContext,
    MAX_PROGRAMMABLE,
};
use crate::corpus::FaultKind;
use crate::event_space::{EventSelector, PerfEvtSelValue};
use crate::rng::{derive_indexed, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEventFamily {
    pub event_code: u8,
    #[serde(default)]
    pub relevance_mask: u8,
    pub trigger_classes: BTreeSet<String>,
    #[serde(default = "one")]
    pub increment: u64,
    #[serde(default)]
    pub noise_stddev: f64,
    #[serde(default)]
    pub false_fire_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> u64 {
    1
}

fn four() -> u8 {
    MAX_PROGRAMMABLE
}

impl SimEventFamily {
    pub fn new(event_code: u8, relevance_mask: u8, triggers: &[&str], increment: u64) -> Self {
        Self {
            event_code,
            relevance_mask,
            trigger_classes: triggers.iter().map(|s| s.to_string()).collect(),
            increment,
            noise_stddev: 0.0,
            false_fire_probability: 0.0,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, stddev: f64) -> Self {
        self.noise_stddev = stddev;
        self
    }

    pub fn with_false_fire(mut self, probability: f64) -> Self {
        self.false_fire_probability = probability;
        self
    }

    /// The relevance predicate.
    pub fn admits(&self, umask: u8) -> bool {
        self.relevance_mask == 0 || umask & self.relevance_mask != 0
    }

    pub fn matches(&self, s: EventSelector) -> bool {
        s.event_code == self.event_code && self.admits(s.umask)
    }

    /// Selectors this family counts on, in packed order.
    pub fn active_selectors(&self) -> impl Iterator<Item = EventSelector> + '_ {
        (0..=255u8)
            .filter(|u| self.admits(*u))
            .map(|u| EventSelector::new(self.event_code, u))
    }

    fn is_noisy(&self) -> bool {
        self.noise_stddev > 0.0 || self.false_fire_probability > 0.0
    }
}

/// Simulated machine description, loadable from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimModel {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "four")]
    pub programmable_count: u8,
    #[serde(default)]
    pub supports_transactional_suppression: bool,
    pub families: Vec<SimEventFamily>,
    /// Corpus entries that fault when executed, by instruction id.
    #[serde(default)]
    pub fault_table: BTreeMap<u32, FaultKind>,
    /// ISA extensions the simulated core lacks.
    #[serde(default)]
    pub unsupported_extensions: BTreeSet<String>,
}

impl SimModel {
    pub fn new(seed: u64, families: Vec<SimEventFamily>) -> Self {
        Self {
            seed,
            programmable_count: MAX_PROGRAMMABLE,
            supports_transactional_suppression: false,
            families,
            fault_table: BTreeMap::new(),
            unsupported_extensions: BTreeSet::new(),
        }
    }

    /// A small built-in machine: a handful of hidden families spread over
    /// the instruction classes, mild noise, two faulting corpus ids.
    pub fn reference(seed: u64) -> Self {
        use crate::corpus::synthetic as c;
        let families = vec![
            SimEventFamily::new(0x6C, 0x01, &[c::FLUSH], 1).with_noise(0.3),
            SimEventFamily::new(0xA2, 0x01, &[c::MEMORY_LOAD], 1),
            SimEventFamily::new(0xB1, 0x80, &[c::BRANCH, c::INDIRECT_BRANCH], 1).with_noise(0.3),
            SimEventFamily::new(0xC3, 0x04, &[c::FAULT], 2).with_noise(0.3),
            SimEventFamily::new(0xD4, 0x10, &[c::TSX], 1),
            SimEventFamily::new(0x48, 0x02, &[c::FENCE, c::STRING_IO], 1),
            SimEventFamily::new(0x5E, 0x20, &[c::MEMORY_STORE], 1).with_noise(0.3),
        ];
        let mut model = Self::new(seed, families);
        model.fault_table.insert(16, FaultKind::IllegalInstruction);
        model.fault_table.insert(40, FaultKind::IllegalInstruction);
        model.unsupported_extensions.insert("AVX512F".into());
        model
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Io {
            what: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| BackendError::Unavailable(format!(
            "sim model {}: {e}",
            path.display()
        )))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sim model serializes")
    }
}

#[derive(Clone, Debug)]
struct SlotState {
    value: PerfEvtSelValue,
    count: u64,
    /// Indices of families live on this selector.
    live: Vec<usize>,
    noise_seed: u64,
    rng: Option<StreamRng>,
}

impl SlotState {
    fn counting(&self) -> bool {
        self.value.enable && (self.value.usr || self.value.os)
    }
}

/// Simulated PMU bound to one logical core and its hyperthread sibling.
///
/// Edge detect, invert and counter-mask are accepted but not modeled.
#[derive(Clone, Debug)]
pub struct SimBackend {
    model: SimModel,
    slots: [Option<SlotState>; MAX_PROGRAMMABLE as usize],
    programmed_before: Vec<u32>,
}

impl SimBackend {
    pub fn new(model: SimModel) -> Self {
        Self {
            model,
            slots: Default::default(),
            programmed_before: vec![0; crate::event_space::EVENT_SPACE_SIZE],
        }
    }

    pub fn model(&self) -> &SimModel {
        &self.model
    }

    fn noise_draw(family: &SimEventFamily, rng: &mut StreamRng) -> u64 {
        let mut extra = 0;
        if family.noise_stddev > 0.0 {
            let normal = Normal::new(0.0, family.noise_stddev).expect("finite stddev");
            let v: f64 = normal.sample(rng);
            extra += v.round().max(0.0) as u64;
        }
        if family.false_fire_probability > 0.0 && rng.random_bool(family.false_fire_probability.min(1.0)) {
            extra += family.increment;
        }
        extra
    }
}

impl CounterBackend for SimBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            programmable_count: self.model.programmable_count.clamp(1, MAX_PROGRAMMABLE),
            supports_transactional_suppression: self.model.supports_transactional_suppression,
            is_simulated: true,
        }
    }

    fn program(&mut self, slot: CounterSlot, value: PerfEvtSelValue) -> Result<(), BackendError> {
        self.check_slot(slot)?;
        let selector = value.selector;
        let live: Vec<usize> = self
            .model
            .families
            .iter()
            .enumerate()
            .filter(|(_, f)| f.matches(selector))
            .map(|(i, _)| i)
            .collect();
        let family_seeds = live
            .iter()
            .fold(0u64, |acc, &i| acc.rotate_left(17) ^ self.model.families[i].seed);
        let nth = &mut self.programmed_before[selector.pack() as usize];
        let noise_seed = derive_indexed(
            self.model.seed ^ family_seeds,
            "sim-slot-noise",
            ((selector.pack() as u64) << 32) | *nth as u64,
        );
        *nth = nth.wrapping_add(1);
        self.slots[slot.index() as usize] = Some(SlotState {
            value,
            count: 0,
            live,
            noise_seed,
            rng: None,
        });
        Ok(())
    }

    fn read(&mut self, slot: CounterSlot) -> Result<u64, BackendError> {
        self.check_slot(slot)?;
        self.slots[slot.index() as usize]
            .as_ref()
            .map(|s| s.count)
            .ok_or(BackendError::Unprogrammed(slot.index()))
    }

    fn release(&mut self, slot: CounterSlot) -> Result<(), BackendError> {
        self.check_slot(slot)?;
        self.slots[slot.index() as usize] = None;
        Ok(())
    }

    fn is_programmed(&self, slot: CounterSlot) -> bool {
        self.slots
            .get(slot.index() as usize)
            .is_some_and(|s| s.is_some())
    }
}

impl ActivitySink for SimBackend {
    fn retire(&mut self, context: LogicalContext, activity: &[(&str, u64)]) {
        let families = &self.model.families;
        for state in self.slots.iter_mut().flatten() {
            if !state.counting() || state.live.is_empty() {
                continue;
            }
            if context == LogicalContext::Sibling && !state.value.any_thread {
                continue;
            }
            for &fi in &state.live {
                let family = &families[fi];
                let hits: u64 = activity
                    .iter()
                    .filter(|(class, _)| family.trigger_classes.contains(*class))
                    .map(|(_, n)| *n)
                    .sum();
                state.count = state.count.wrapping_add(family.increment.wrapping_mul(hits));
                if family.is_noisy() {
                    let noise_seed = state.noise_seed;
                    let rng = state.rng.get_or_insert_with(|| StreamRng::seed_from_u64(noise_seed));
                    state.count = state.count.wrapping_add(Self::noise_draw(family, rng));
                }
            }
        }
    }
}
