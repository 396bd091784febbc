//! Secret recovery through a single hidden counter.
//!
//! The gadget compares a guessed byte with a secret byte under transient
//! execution and runs one transmit instruction only on equality:
//!
//! ```text
//! zero_pmu
//! cmp  guess, secret[i]
//! jz   equal
//! nop
//! jmp  done
//! equal: ins1        ; transmit class, e.g. a load
//! done:  read_pmu
//! ```
//!
//! The attacker cannot see the branch outcome architecturally, but the
//! counter bound to `ins1`'s class moves. Summing deltas over several
//! iterations and taking the argmax over all 256 guesses recovers the byte.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{measure_delta, ActivitySink, BackendError, CounterBackend, LogicalContext};
use crate::corpus::synthetic as class;
use crate::corpus::SuppressionMode;
use crate::event_space::{EventSelector, PerfEvtSelValue};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SideChannelError {
    #[error("position {position} is outside the {length}-byte secret")]
    Position { position: usize, length: usize },
    #[error("transactional suppression is not supported by this backend")]
    SuppressionUnsupported,
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Meltdown,
    SpectreV2,
    /// Exposed for completeness. The transmit never lands, so recovery
    /// degrades to the all-zero tie-break.
    SpectreV1,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Meltdown => "meltdown",
            AttackKind::SpectreV2 => "spectre_v2",
            AttackKind::SpectreV1 => "spectre_v1",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [AttackKind::Meltdown, AttackKind::SpectreV2, AttackKind::SpectreV1]
            .into_iter()
            .find(|k| k.as_str() == name)
    }

    pub fn expected_to_leak(self) -> bool {
        self != AttackKind::SpectreV1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GadgetSpec {
    pub bound_selector: EventSelector,
    pub transmit_class: String,
    pub iterations: u32,
    pub suppression: SuppressionMode,
    pub secret_length: usize,
    pub attack_kind: AttackKind,
}

impl GadgetSpec {
    pub fn new(bound_selector: EventSelector, attack_kind: AttackKind, secret_length: usize) -> Self {
        Self {
            bound_selector,
            transmit_class: class::MEMORY_LOAD.to_string(),
            iterations: 10,
            suppression: SuppressionMode::SignalHandler,
            secret_length,
            attack_kind,
        }
    }

    pub fn with_iterations(mut self, iterations: u32) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_suppression(mut self, suppression: SuppressionMode) -> Self {
        self.suppression = suppression;
        self
    }
}

/// The simulated victim holding the secret.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Victim {
    pub secret: Vec<u8>,
}

/// Modeled seconds per gadget execution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub gadget: f64,
    /// Extra cost of an aborted transaction.
    pub transactional: f64,
    /// Extra cost of delivering and returning from a fault signal.
    pub signal: f64,
    /// Extra cost of mistraining the indirect branch predictor.
    pub branch_training: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            gadget: 3.0e-7,
            transactional: 1.946e-7,
            signal: 4.852e-7,
            branch_training: 2.327e-6,
        }
    }
}

impl CostModel {
    pub fn trial_cost(&self, kind: AttackKind, suppression: SuppressionMode) -> f64 {
        match kind {
            AttackKind::Meltdown => {
                self.gadget
                    + match suppression {
                        SuppressionMode::Transactional => self.transactional,
                        SuppressionMode::SignalHandler => self.signal,
                    }
            }
            AttackKind::SpectreV2 | AttackKind::SpectreV1 => self.gadget + self.branch_training,
        }
    }

    /// Bytes per second when every byte costs `256 * iterations` trials.
    pub fn throughput(&self, kind: AttackKind, suppression: SuppressionMode, iterations: u32) -> f64 {
        1.0 / (256.0 * iterations as f64 * self.trial_cost(kind, suppression))
    }
}

/// One gadget execution; returns the counter delta.
pub fn run_trial<B>(
    spec: &GadgetSpec,
    victim: &Victim,
    guess: u8,
    position: usize,
    backend: &mut B,
) -> Result<i64, SideChannelError>
where
    B: CounterBackend + ActivitySink,
{
    let length = spec.secret_length.min(victim.secret.len());
    if position >= length {
        return Err(SideChannelError::Position { position, length });
    }
    if spec.suppression == SuppressionMode::Transactional && !backend.capabilities().supports_transactional_suppression {
        return Err(SideChannelError::SuppressionUnsupported);
    }
    let transmit = spec.attack_kind.expected_to_leak() && guess == victim.secret[position];
    let m = measure_delta(backend, PerfEvtSelValue::scanning(spec.bound_selector), |b| {
        if transmit {
            b.retire(LogicalContext::Own, &[(class::ALU, 1), (class::BRANCH, 1), (spec.transmit_class.as_str(), 1)]);
        } else {
            b.retire(LogicalContext::Own, &[(class::ALU, 1), (class::BRANCH, 1), (class::NOP, 1)]);
        }
    })?;
    Ok(m.delta)
}

/// Decoded byte with its score vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteRecovery {
    pub byte: u8,
    pub scores: Vec<i64>,
    /// The winning score was shared by another guess.
    pub low_confidence: bool,
}

impl ByteRecovery {
    /// Argmax over 256 scores, lowest byte on ties.
    pub fn decode(scores: Vec<i64>) -> Self {
        assert_eq!(scores.len(), 256);
        let mut best = 0usize;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        let low_confidence = scores.iter().filter(|s| **s == scores[best]).count() > 1;
        Self {
            byte: best as u8,
            scores,
            low_confidence,
        }
    }

    /// `(best - runner_up) / best`, 0 when the best score is not positive.
    pub fn confidence(&self) -> f64 {
        let best = self.scores[self.byte as usize];
        if best <= 0 {
            return 0.0;
        }
        let second = self
            .scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.byte as usize)
            .map(|(_, s)| *s)
            .max()
            .unwrap_or(0);
        (best - second).max(0) as f64 / best as f64
    }
}

pub fn recover_byte<B>(spec: &GadgetSpec, victim: &Victim, position: usize, backend: &mut B) -> Result<ByteRecovery, SideChannelError>
where
    B: CounterBackend + ActivitySink,
{
    if spec.iterations == 0 {
        return Err(SideChannelError::ZeroIterations);
    }
    let mut scores = vec![0i64; 256];
    for _ in 0..spec.iterations {
        for guess in 0..=255u8 {
            scores[guess as usize] += run_trial(spec, victim, guess, position, backend)?;
        }
    }
    Ok(ByteRecovery::decode(scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub throughput_bps: f64,
    pub error_rate: f64,
}

impl ChannelMetrics {
    pub fn compute(recovered: &[u8], secret: &[u8], elapsed: f64) -> Self {
        let len = recovered.len();
        let wrong = recovered
            .iter()
            .enumerate()
            .filter(|(i, b)| secret.get(*i) != Some(*b))
            .count();
        Self {
            throughput_bps: if elapsed > 0.0 { len as f64 / elapsed } else { 0.0 },
            error_rate: if len > 0 { wrong as f64 / len as f64 } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryResult {
    pub recovered: Vec<u8>,
    pub per_byte_scores: Vec<Vec<i64>>,
    pub low_confidence: Vec<bool>,
    pub confidence: Vec<f64>,
    /// Modeled seconds.
    pub elapsed: f64,
    pub attack_kind: AttackKind,
}

impl RecoveryResult {
    pub fn metrics(&self, secret: &[u8]) -> ChannelMetrics {
        ChannelMetrics::compute(&self.recovered, secret, self.elapsed)
    }
}

pub fn recover_secret<B>(spec: &GadgetSpec, victim: &Victim, cost: &CostModel, backend: &mut B) -> Result<RecoveryResult, SideChannelError>
where
    B: CounterBackend + ActivitySink,
{
    let mut result = RecoveryResult {
        recovered: Vec::with_capacity(spec.secret_length),
        per_byte_scores: Vec::with_capacity(spec.secret_length),
        low_confidence: Vec::with_capacity(spec.secret_length),
        confidence: Vec::with_capacity(spec.secret_length),
        elapsed: 0.0,
        attack_kind: spec.attack_kind,
    };
    let trial = cost.trial_cost(spec.attack_kind, spec.suppression);
    for position in 0..spec.secret_length {
        let b = recover_byte(spec, victim, position, backend)?;
        result.elapsed += trial * 256.0 * spec.iterations as f64;
        result.recovered.push(b.byte);
        result.confidence.push(b.confidence());
        result.low_confidence.push(b.low_confidence);
        result.per_byte_scores.push(b.scores);
    }
    Ok(result)
}

/// Accuracy (1 - error rate) of recovering `victim`'s secret through each
/// selector, in the given order.
pub fn channel_accuracies<B>(
    selectors: &[EventSelector],
    template: &GadgetSpec,
    victim: &Victim,
    backend: &mut B,
) -> Result<Vec<(EventSelector, f64)>, SideChannelError>
where
    B: CounterBackend + ActivitySink,
{
    let cost = CostModel::default();
    selectors
        .iter()
        .map(|s| {
            let spec = GadgetSpec {
                bound_selector: *s,
                ..template.clone()
            };
            let r = recover_secret(&spec, victim, &cost, backend)?;
            Ok((*s, 1.0 - r.metrics(&victim.secret).error_rate))
        })
        .collect()
}

pub const CHANNEL_ACCURACY_THRESHOLD: f64 = 0.80;

/// Hidden selectors that recover the test secret with accuracy ≥ 0.80.
pub fn screen_channel_events<B>(
    hidden: &BTreeSet<EventSelector>,
    template: &GadgetSpec,
    victim: &Victim,
    backend: &mut B,
) -> Result<Vec<(EventSelector, f64)>, SideChannelError>
where
    B: CounterBackend + ActivitySink,
{
    let selectors: Vec<EventSelector> = hidden.iter().copied().collect();
    Ok(channel_accuracies(&selectors, template, victim, backend)?
        .into_iter()
        .filter(|(_, acc)| *acc >= CHANNEL_ACCURACY_THRESHOLD)
        .collect())
}

/// One row of a channel screening file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScreenRow {
    pub selector: EventSelector,
    pub accuracy: f64,
    pub passed: bool,
}

impl ChannelScreenRow {
    pub fn new(selector: EventSelector, accuracy: f64) -> Self {
        Self {
            selector,
            accuracy,
            passed: accuracy >= CHANNEL_ACCURACY_THRESHOLD,
        }
    }
}

pub fn write_channel_screen_csv(rows: &[ChannelScreenRow], out: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_channel_screen_csv(input: impl std::io::Read) -> csv::Result<Vec<ChannelScreenRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Serialized `sidechannel run` result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRunReport {
    pub attack: AttackKind,
    pub selector: EventSelector,
    pub iterations: u32,
    pub recovered: String,
    pub confidence: Vec<f64>,
    pub low_confidence_positions: Vec<usize>,
    pub elapsed_s: f64,
    pub throughput_bps: f64,
    pub error_rate: f64,
}

impl ChannelRunReport {
    pub fn new(spec: &GadgetSpec, result: &RecoveryResult, secret: &[u8]) -> Self {
        let m = result.metrics(secret);
        Self {
            attack: spec.attack_kind,
            selector: spec.bound_selector,
            iterations: spec.iterations,
            recovered: result.recovered.iter().map(|b| format!("{b:02x}")).collect(),
            confidence: result.confidence.clone(),
            low_confidence_positions: result
                .low_confidence
                .iter()
                .enumerate()
                .filter(|(_, l)| **l)
                .map(|(i, _)| i)
                .collect(),
            elapsed_s: result.elapsed,
            throughput_bps: m.throughput_bps,
            error_rate: m.error_rate,
        }
    }

    pub fn recovered_bytes(&self) -> Option<Vec<u8>> {
        if self.recovered.len() % 2 != 0 {
            return None;
        }
        (0..self.recovered.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&self.recovered[i..i + 2], 16).ok())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SimBackend, SimEventFamily, SimModel};

    const SEL: EventSelector = EventSelector::new(0xA2, 0x01);

    fn backend(inc: u64) -> SimBackend {
        SimBackend::new(SimModel::new(5, vec![SimEventFamily::new(0xA2, 0x01, &[class::MEMORY_LOAD], inc)]))
    }

    fn victim(secret: &[u8]) -> Victim {
        Victim { secret: secret.to_vec() }
    }

    #[test]
    fn trial_deltas() {
        let mut b = backend(3);
        let v = victim(&[0x41]);
        let spec = GadgetSpec::new(SEL, AttackKind::Meltdown, 1);
        assert_eq!(run_trial(&spec, &v, 0x41, 0, &mut b), Ok(3));
        assert_eq!(run_trial(&spec, &v, 0x42, 0, &mut b), Ok(0));
        assert_eq!(
            run_trial(&spec, &v, 0x41, 1, &mut b),
            Err(SideChannelError::Position { position: 1, length: 1 })
        );
        let tsx = spec.clone().with_suppression(SuppressionMode::Transactional);
        assert_eq!(run_trial(&tsx, &v, 0, 0, &mut b), Err(SideChannelError::SuppressionUnsupported));
    }

    #[test]
    fn recover_byte_scores() {
        let mut b = backend(2);
        let spec = GadgetSpec::new(SEL, AttackKind::Meltdown, 1);
        let r = recover_byte(&spec, &victim(&[0x41]), 0, &mut b).unwrap();
        assert_eq!(r.byte, 0x41);
        assert_eq!(r.scores[0x41], 20);
        assert_eq!(r.scores.iter().sum::<i64>(), 20);
        assert!(!r.low_confidence);
        assert_eq!(r.confidence(), 1.0);
    }

    #[test]
    fn no_leak_ties_to_zero() {
        let r = ByteRecovery::decode(vec![0; 256]);
        assert_eq!(r.byte, 0);
        assert!(r.low_confidence);
        assert_eq!(r.confidence(), 0.0);
        // spectre_v1 never transmits
        let mut b = backend(1);
        let spec = GadgetSpec::new(SEL, AttackKind::SpectreV1, 1);
        let r = recover_byte(&spec, &victim(&[0x41]), 0, &mut b).unwrap();
        assert_eq!((r.byte, r.low_confidence), (0, true));
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let scores: Vec<i64> = (0..256).map(|i| (i * 7919 % 257) as i64).collect();
        let shifted: Vec<i64> = scores.iter().map(|s| s + 1000).collect();
        assert_eq!(ByteRecovery::decode(scores).byte, ByteRecovery::decode(shifted).byte);
    }

    #[test]
    fn every_byte_value_recovers_noise_free() {
        let secret: Vec<u8> = (0..=255).collect();
        let mut b = backend(1);
        let spec = GadgetSpec::new(SEL, AttackKind::Meltdown, 256).with_iterations(1);
        let r = recover_secret(&spec, &victim(&secret), &CostModel::default(), &mut b).unwrap();
        assert_eq!(r.recovered, secret);
        assert_eq!(r.metrics(&secret).error_rate, 0.0);
    }

    #[test]
    fn spectre_v2_is_slower() {
        let secret = b"sixteen byte key";
        let cost = CostModel::default();
        let run = |kind| {
            let spec = GadgetSpec::new(SEL, kind, 16);
            recover_secret(&spec, &victim(secret), &cost, &mut backend(1)).unwrap()
        };
        let (m, s) = (run(AttackKind::Meltdown), run(AttackKind::SpectreV2));
        assert_eq!(m.recovered, s.recovered);
        assert!(s.elapsed > m.elapsed);
    }

    #[test]
    fn accounting_fixture() {
        let secret = vec![7u8; 100];
        let mut rec = secret.clone();
        rec[3] = 8;
        let m = ChannelMetrics::compute(&rec, &secret, 0.2);
        assert_eq!(m.throughput_bps, 500.0);
        assert_eq!(m.error_rate, 0.01);
    }

    #[test]
    fn screening_keeps_leaky_selectors() {
        let mut model = SimModel::new(5, vec![SimEventFamily::new(0xA2, 0x01, &[class::MEMORY_LOAD], 1)]);
        model.families.push(SimEventFamily::new(0xB0, 0, &[class::BRANCH], 1));
        let mut b = SimBackend::new(model);
        let secret: Vec<u8> = (0..32u8).map(|i| i.wrapping_mul(37).wrapping_add(1)).collect();
        let hidden = BTreeSet::from([SEL, EventSelector::new(0xA2, 0x03), EventSelector::new(0xB0, 0x04)]);
        let spec = GadgetSpec::new(SEL, AttackKind::Meltdown, secret.len()).with_iterations(2);
        let kept = screen_channel_events(&hidden, &spec, &victim(&secret), &mut b).unwrap();
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![SEL, EventSelector::new(0xA2, 0x03)]);
        assert!(screen_channel_events(&BTreeSet::new(), &spec, &victim(&secret), &mut b).unwrap().is_empty());
    }

    #[test]
    fn screen_rows_roundtrip() {
        let rows = vec![ChannelScreenRow::new(SEL, 0.875), ChannelScreenRow::new(EventSelector::new(1, 0), 0.5)];
        assert!(rows[0].passed && !rows[1].passed);
        let mut buf = Vec::new();
        write_channel_screen_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"selector,accuracy,passed\n0x01A2,0.875,true\n"));
        assert_eq!(read_channel_screen_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn report_hex_roundtrip() {
        let spec = GadgetSpec::new(SEL, AttackKind::Meltdown, 3);
        let secret = [0x00, 0xAB, 0xFF];
        let r = recover_secret(&spec, &victim(&secret), &CostModel::default(), &mut backend(1)).unwrap();
        let rep = ChannelRunReport::new(&spec, &r, &secret);
        assert_eq!(rep.recovered, "00abff");
        assert_eq!(rep.recovered_bytes().unwrap(), secret);
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<ChannelRunReport>(&json).unwrap(), rep);
    }
}
