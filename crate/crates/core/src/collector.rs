//! Hidden-event collection: every corpus instruction against the selector
//! space, keeping the selectors that count but are not documented.
//!
//! Selectors are measured in batches, one per programmable slot, so a
//! four-counter PMU needs a quarter of the executions. Each batch runs the
//! instruction `repetitions` times and a selector's delta is the median of
//! its repetitions. A selector is readable when that median reaches the
//! quiet threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CounterBackend, CounterSlot};
use crate::catalog::EventCatalog;
use crate::corpus::{
    instantiate, normalize_syntax, Dialect, ExecError, ExecStatus, ExecTally, Executor, InstructionEntry,
    RegisterPool, SuppressionMode,
};
use crate::event_space::{enumerate_space, EventSelector, PerfEvtSelValue};

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub repetitions: u32,
    /// Minimum median delta for a selector to count as readable.
    pub quiet_threshold: i64,
    pub mode: SuppressionMode,
    pub dialect: Dialect,
    pub pool: RegisterPool,
    pub microarchitecture_label: String,
    pub any_thread: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            quiet_threshold: 1,
            mode: SuppressionMode::SignalHandler,
            dialect: Dialect::AttOrder,
            pool: RegisterPool::default(),
            microarchitecture_label: "simulated".to_string(),
            any_thread: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanRecord {
    pub selector: EventSelector,
    pub instruction_id: u32,
    pub delta: i64,
    pub outcome: ExecStatus,
    pub repetitions: u32,
    pub quiet: bool,
}

#[derive(Serialize, Deserialize)]
struct RecordLine<'a> {
    selector: EventSelector,
    instruction: u32,
    delta: i64,
    outcome: &'a str,
}

impl ScanRecord {
    /// One NDJSON line (without the newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RecordLine {
            selector: self.selector,
            instruction: self.instruction_id,
            delta: self.delta,
            outcome: self.outcome.label(),
        })
        .expect("record serializes")
    }
}

/// Result of scanning one instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionScan {
    pub instruction_id: u32,
    /// Most severe outcome seen across all executions.
    pub status: ExecStatus,
    pub records: Vec<ScanRecord>,
    /// Selectors dropped because the backend refused to program or read them.
    pub aborted: Vec<EventSelector>,
    pub tally: ExecTally,
}

fn lower_median(values: &mut [i64]) -> i64 {
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

fn fold_status(a: ExecStatus, b: ExecStatus) -> ExecStatus {
    if b.severity() > a.severity() {
        b
    } else {
        a
    }
}

/// Measures `entry` against `selectors`, one record per selector that the
/// backend could measure.
pub fn scan_instruction<B, E>(
    entry: &InstructionEntry,
    selectors: &[EventSelector],
    backend: &mut B,
    executor: &mut E,
    config: &ScanConfig,
) -> Result<InstructionScan, ScanError>
where
    B: CounterBackend,
    E: Executor<B>,
{
    if config.repetitions == 0 {
        return Err(ScanError::ZeroRepetitions);
    }
    let reps = config.repetitions;
    let mut scan = InstructionScan {
        instruction_id: entry.id,
        status: ExecStatus::Success,
        records: Vec::with_capacity(selectors.len()),
        aborted: Vec::new(),
        tally: ExecTally::default(),
    };

    let snippet = match normalize_syntax(entry, config.dialect).and_then(|e| instantiate(&e, &config.pool)) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("instruction {} not instantiable: {e}", entry.id);
            scan.status = ExecStatus::UnsupportedExtension;
            scan.tally.record(ExecStatus::UnsupportedExtension);
            scan.records.extend(selectors.iter().map(|s| ScanRecord {
                selector: *s,
                instruction_id: entry.id,
                delta: 0,
                outcome: ExecStatus::UnsupportedExtension,
                repetitions: reps,
                quiet: true,
            }));
            return Ok(scan);
        }
    };

    let width = backend.capabilities().programmable_count as usize;
    let mut deltas: Vec<Vec<i64>> = vec![Vec::with_capacity(reps as usize); width];
    for batch in selectors.chunks(width) {
        let mut live = [true; crate::backend::MAX_PROGRAMMABLE as usize];
        for d in deltas.iter_mut() {
            d.clear();
        }
        let mut batch_status = ExecStatus::Success;
        for _ in 0..reps {
            for (i, sel) in batch.iter().enumerate() {
                if !live[i] {
                    continue;
                }
                let slot = CounterSlot::new(i as u8).expect("batch width bounded by slot count");
                let value = PerfEvtSelValue::scanning(*sel).with_any_thread(config.any_thread);
                if let Err(e) = backend.program(slot, value) {
                    log::warn!("selector {sel}: program failed, skipping: {e}");
                    live[i] = false;
                }
            }
            if !live[..batch.len()].iter().any(|l| *l) {
                break;
            }
            let outcome = executor.execute(backend, &snippet, config.mode)?;
            scan.tally.record(outcome.status);
            batch_status = fold_status(batch_status, outcome.status);
            for (i, sel) in batch.iter().enumerate() {
                if !live[i] {
                    continue;
                }
                let slot = CounterSlot::new(i as u8).expect("batch width bounded by slot count");
                match backend.read(slot) {
                    Ok(count) => deltas[i].push(count as i64),
                    Err(e) => {
                        log::warn!("selector {sel}: read failed, skipping: {e}");
                        live[i] = false;
                    }
                }
            }
        }
        for (i, sel) in batch.iter().enumerate() {
            let slot = CounterSlot::new(i as u8).expect("batch width bounded by slot count");
            if backend.is_programmed(slot) {
                let _ = backend.release(slot);
            }
            if !live[i] {
                scan.aborted.push(*sel);
                continue;
            }
            let delta = lower_median(&mut deltas[i]);
            scan.records.push(ScanRecord {
                selector: *sel,
                instruction_id: entry.id,
                delta,
                outcome: batch_status,
                repetitions: reps,
                quiet: delta < config.quiet_threshold,
            });
        }
        scan.status = fold_status(scan.status, batch_status);
    }
    Ok(scan)
}

/// Collector summary: one row of the results table plus the hidden-event map.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub microarchitecture_label: String,
    pub total_instructions: u64,
    pub executed_success: u64,
    /// Hidden selector to the ids of the instructions that triggered it.
    pub hidden_events: BTreeMap<EventSelector, BTreeSet<u32>>,
    pub catalog_source: String,
}

/// The table-shaped view of a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRow {
    pub microarchitecture: String,
    pub total_instructions: u64,
    pub executed_success: u64,
    pub hidden_events: u64,
}

impl ScanReport {
    pub fn summary(&self) -> SummaryRow {
        SummaryRow {
            microarchitecture: self.microarchitecture_label.clone(),
            total_instructions: self.total_instructions,
            executed_success: self.executed_success,
            hidden_events: self.hidden_events.len() as u64,
        }
    }

    pub fn hidden_selectors(&self) -> impl Iterator<Item = EventSelector> + '_ {
        self.hidden_events.keys().copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn persist_report(report: &ScanReport, path: &Path) -> Result<(), ReportError> {
    std::fs::write(path, report.to_json()).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_report(path: &Path) -> Result<ScanReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScanReport::from_json(&text)
}

/// Scans every entry of `corpus` against `selectors` and aggregates hidden
/// events. Readable records are handed to `on_record` as they are produced.
pub fn full_scan_with<B, E>(
    corpus: &[InstructionEntry],
    selectors: &[EventSelector],
    catalog: &EventCatalog,
    backend: &mut B,
    executor: &mut E,
    config: &ScanConfig,
    mut on_record: impl FnMut(&ScanRecord),
) -> Result<ScanReport, ScanError>
where
    B: CounterBackend,
    E: Executor<B>,
{
    let mut report = ScanReport {
        microarchitecture_label: config.microarchitecture_label.clone(),
        total_instructions: corpus.len() as u64,
        executed_success: 0,
        hidden_events: BTreeMap::new(),
        catalog_source: catalog.source.clone(),
    };
    for entry in corpus {
        let scan = scan_instruction(entry, selectors, backend, executor, config)?;
        if scan.status == ExecStatus::Success {
            report.executed_success += 1;
        }
        for rec in scan.records.iter().filter(|r| !r.quiet) {
            on_record(rec);
            if !catalog.contains(rec.selector) {
                report.hidden_events.entry(rec.selector).or_default().insert(entry.id);
            }
        }
    }
    Ok(report)
}

/// [`full_scan_with`] over the whole 65536-selector space.
pub fn full_scan<B, E>(
    corpus: &[InstructionEntry],
    catalog: &EventCatalog,
    backend: &mut B,
    executor: &mut E,
    config: &ScanConfig,
) -> Result<ScanReport, ScanError>
where
    B: CounterBackend,
    E: Executor<B>,
{
    let space: Vec<EventSelector> = enumerate_space().collect();
    full_scan_with(corpus, &space, catalog, backend, executor, config, |_| {})
}

/// Output of a partitioned scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionedScan {
    pub report: ScanReport,
    /// Readable records ordered by instruction position, then packed selector.
    pub records: Vec<ScanRecord>,
}

/// Splits the selector space into `jobs` contiguous ranges, scans each on its
/// own backend/executor pair from `make`, and merges deterministically.
pub fn partitioned_scan<B, E, F>(
    corpus: &[InstructionEntry],
    catalog: &EventCatalog,
    config: &ScanConfig,
    jobs: usize,
    make: F,
) -> Result<PartitionedScan, ScanError>
where
    B: CounterBackend,
    E: Executor<B>,
    F: Fn(usize) -> (B, E) + Sync,
{
    let space: Vec<EventSelector> = enumerate_space().collect();
    let jobs = jobs.clamp(1, space.len());
    let chunk = space.len().div_ceil(jobs);
    let parts: Vec<Result<(Vec<ExecStatus>, Vec<ScanRecord>), ScanError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = space
            .chunks(chunk)
            .enumerate()
            .map(|(idx, selectors)| {
                let make = &make;
                scope.spawn(move || {
                    let (mut backend, mut executor) = make(idx);
                    let mut statuses = Vec::with_capacity(corpus.len());
                    let mut records = Vec::new();
                    for entry in corpus {
                        let scan = scan_instruction(entry, selectors, &mut backend, &mut executor, config)?;
                        statuses.push(scan.status);
                        records.extend(scan.records.into_iter().filter(|r| !r.quiet));
                    }
                    Ok((statuses, records))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scan worker panicked")).collect()
    });

    let position: BTreeMap<u32, usize> = corpus.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let mut status = vec![ExecStatus::Success; corpus.len()];
    let mut records = Vec::new();
    for part in parts {
        let (statuses, recs) = part?;
        for (s, p) in status.iter_mut().zip(statuses) {
            *s = fold_status(*s, p);
        }
        records.extend(recs);
    }
    records.sort_by_key(|r| (position[&r.instruction_id], r.selector));

    let mut report = ScanReport {
        microarchitecture_label: config.microarchitecture_label.clone(),
        total_instructions: corpus.len() as u64,
        executed_success: status.iter().filter(|s| **s == ExecStatus::Success).count() as u64,
        hidden_events: BTreeMap::new(),
        catalog_source: catalog.source.clone(),
    };
    for rec in &records {
        if !catalog.contains(rec.selector) {
            report.hidden_events.entry(rec.selector).or_default().insert(rec.instruction_id);
        }
    }
    Ok(PartitionedScan { report, records })
}

pub fn write_records(records: &[ScanRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendCapabilities, BackendError, SimBackend, SimEventFamily, SimModel};
    use crate::corpus::{FaultKind, SimExecutor};

    fn sim(families: Vec<SimEventFamily>) -> (SimBackend, SimExecutor) {
        let model = SimModel::new(3, families);
        (SimBackend::new(model.clone()), SimExecutor::from_model(&model))
    }

    fn code_selectors(code: u8) -> Vec<EventSelector> {
        (0..=255).map(|u| EventSelector::new(code, u)).collect()
    }

    #[test]
    fn planted_family_lights_exactly_its_umasks() {
        let (mut b, mut x) = sim(vec![SimEventFamily::new(0x6C, 0x05, &["memory-load"], 1)]);
        let entry = InstructionEntry::new(1, "MOV", "r64,m64", "base", "memory-load");
        let scan = scan_instruction(&entry, &code_selectors(0x6C), &mut b, &mut x, &ScanConfig::default()).unwrap();
        assert_eq!(scan.records.len(), 256);
        for r in &scan.records {
            // relevance predicate oracle
            let expected = r.selector.umask & 0x05 != 0;
            assert_eq!(r.delta > 0, expected, "{}", r.selector);
            assert_eq!(r.quiet, !expected);
        }
        assert_eq!(scan.status, ExecStatus::Success);
        assert!(scan.tally.is_balanced());
        // 256 selectors in batches of 4, 5 repetitions each
        assert_eq!(scan.tally.attempted, 64 * 5);
    }

    #[test]
    fn untriggered_class_is_all_zero() {
        let (mut b, mut x) = sim(vec![SimEventFamily::new(0x6C, 0, &["memory-load"], 1)]);
        let entry = InstructionEntry::new(1, "ADD", "r64,r64", "base", "alu");
        let scan = scan_instruction(&entry, &code_selectors(0x6C), &mut b, &mut x, &ScanConfig::default()).unwrap();
        assert!(scan.records.iter().all(|r| r.delta == 0 && r.quiet));
    }

    #[test]
    fn faulting_entry_keeps_scanning() {
        let mut model = SimModel::new(3, vec![SimEventFamily::new(0x10, 0, &["fault"], 1)]);
        model.fault_table.insert(2, FaultKind::IllegalInstruction);
        let mut b = SimBackend::new(model.clone());
        let mut x = SimExecutor::from_model(&model);
        let corpus = vec![
            InstructionEntry::new(2, "UD2", "", "base", "fault"),
            InstructionEntry::new(3, "ADD", "r64,r64", "base", "alu"),
        ];
        let sels = code_selectors(0x10);
        let scan = scan_instruction(&corpus[0], &sels, &mut b, &mut x, &ScanConfig::default()).unwrap();
        assert!(scan.records.iter().all(|r| r.outcome == ExecStatus::Fault(FaultKind::IllegalInstruction)));
        let report = full_scan_with(&corpus, &sels, &EventCatalog::new("none"), &mut b, &mut x, &ScanConfig::default(), |_| {}).unwrap();
        assert_eq!(report.total_instructions, 2);
        assert_eq!(report.executed_success, 1);
        // the faulting instruction still triggered every umask of the family
        assert_eq!(report.hidden_events.len(), 256);
        assert!(report.hidden_events.values().all(|ids| ids == &BTreeSet::from([2])));
    }

    #[test]
    fn uninstantiable_entry_is_unsupported() {
        let (mut b, mut x) = sim(vec![]);
        let entry = InstructionEntry::new(9, "VADDPS", "zmm,zmm,zmm", "AVX512F", "vector");
        let scan = scan_instruction(&entry, &code_selectors(1), &mut b, &mut x, &ScanConfig::default()).unwrap();
        assert_eq!(scan.status, ExecStatus::UnsupportedExtension);
        assert_eq!(scan.records.len(), 256);
    }

    #[test]
    fn zero_repetitions_rejected() {
        let (mut b, mut x) = sim(vec![]);
        let cfg = ScanConfig {
            repetitions: 0,
            ..Default::default()
        };
        let entry = InstructionEntry::new(1, "NOP", "", "base", "nop");
        assert!(matches!(
            scan_instruction(&entry, &[EventSelector::new(0, 0)], &mut b, &mut x, &cfg),
            Err(ScanError::ZeroRepetitions)
        ));
    }

    /// Backend that refuses one selector, to check per-selector degradation.
    struct Flaky {
        inner: SimBackend,
        refuse: EventSelector,
    }

    impl CounterBackend for Flaky {
        fn capabilities(&self) -> BackendCapabilities {
            self.inner.capabilities()
        }
        fn program(&mut self, slot: CounterSlot, value: PerfEvtSelValue) -> Result<(), BackendError> {
            if value.selector == self.refuse {
                return Err(BackendError::Io {
                    what: "wrmsr".into(),
                    detail: "EIO".into(),
                });
            }
            self.inner.program(slot, value)
        }
        fn read(&mut self, slot: CounterSlot) -> Result<u64, BackendError> {
            self.inner.read(slot)
        }
        fn release(&mut self, slot: CounterSlot) -> Result<(), BackendError> {
            self.inner.release(slot)
        }
        fn is_programmed(&self, slot: CounterSlot) -> bool {
            self.inner.is_programmed(slot)
        }
    }

    impl crate::backend::ActivitySink for Flaky {
        fn retire(&mut self, context: crate::backend::LogicalContext, activity: &[(&str, u64)]) {
            self.inner.retire(context, activity)
        }
    }

    #[test]
    fn backend_errors_abort_only_the_selector() {
        let model = SimModel::new(3, vec![SimEventFamily::new(0x6C, 0, &["alu"], 1)]);
        let mut b = Flaky {
            inner: SimBackend::new(model.clone()),
            refuse: EventSelector::new(0x6C, 0x02),
        };
        let mut x = SimExecutor::from_model(&model);
        let entry = InstructionEntry::new(1, "ADD", "r64,r64", "base", "alu");
        let scan = scan_instruction(&entry, &code_selectors(0x6C), &mut b, &mut x, &ScanConfig::default()).unwrap();
        assert_eq!(scan.aborted, vec![EventSelector::new(0x6C, 0x02)]);
        assert_eq!(scan.records.len(), 255);
        assert!(scan.records.iter().all(|r| r.delta == 1));
    }

    #[test]
    fn median_suppresses_spikes() {
        assert_eq!(lower_median(&mut [0, 0, 50, 0, 0]), 0);
        assert_eq!(lower_median(&mut [3, 1, 2, 100]), 2);
        assert_eq!(lower_median(&mut [7]), 7);
    }

    #[test]
    fn record_line_format() {
        let r = ScanRecord {
            selector: EventSelector::new(0x6C, 0x01),
            instruction_id: 42,
            delta: 3,
            outcome: ExecStatus::Success,
            repetitions: 5,
            quiet: false,
        };
        assert_eq!(r.to_json_line(), r#"{"selector":"0x016C","instruction":42,"delta":3,"outcome":"success"}"#);
    }

    #[test]
    fn summary_row_shape() {
        // reference row: Skylake, 5492 instructions, 3412 executed, 20599 hidden
        let mut report = ScanReport {
            microarchitecture_label: "Skylake".into(),
            total_instructions: 5492,
            executed_success: 3412,
            ..Default::default()
        };
        for p in 0..20599u32 {
            report.hidden_events.insert(EventSelector::unpack(p as u16), BTreeSet::new());
        }
        assert_eq!(
            report.summary(),
            SummaryRow {
                microarchitecture: "Skylake".into(),
                total_instructions: 5492,
                executed_success: 3412,
                hidden_events: 20599
            }
        );
    }

    #[test]
    fn byte_offsets() {
        let text = "{\n  \"a\": 1,\n  \"b\": x\n}";
        let err = serde_json::from_str::<serde_json::Value>(text).unwrap_err();
        let off = byte_offset(text, err.line(), err.column());
        assert_eq!(&text[off..off + 1], "x");
    }
}
