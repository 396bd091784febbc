use std::collections::{BTreeMap, BTreeSet};

use super::{ExecError, ExecOutcome, ExecStatus, FaultKind, Snippet, SuppressionMode};
use crate::backend::{ActivitySink, CounterBackend, LogicalContext, SimModel};

/// Runs snippets on behalf of a counter backend. Implementations must never
/// let a snippet fault take down the caller.
pub trait Executor<B: CounterBackend> {
    fn execute(&mut self, backend: &mut B, snippet: &Snippet, mode: SuppressionMode) -> Result<ExecOutcome, ExecError>;
}

pub(crate) fn check_mode<B: CounterBackend>(backend: &B, mode: SuppressionMode) -> Result<(), ExecError> {
    if mode == SuppressionMode::Transactional && !backend.capabilities().supports_transactional_suppression {
        return Err(ExecError::TransactionalUnsupported);
    }
    Ok(())
}

/// Executes snippets by dispatching their class tag into a simulated
/// backend. Faults come from an explicit per-entry table; a faulting entry
/// still retires its class before the fault is reported.
#[derive(Clone, Debug, Default)]
pub struct SimExecutor {
    pub fault_table: BTreeMap<u32, FaultKind>,
    pub unsupported_extensions: BTreeSet<String>,
}

impl SimExecutor {
    pub fn from_model(model: &SimModel) -> Self {
        Self {
            fault_table: model.fault_table.clone(),
            unsupported_extensions: model.unsupported_extensions.clone(),
        }
    }
}

impl<B: CounterBackend + ActivitySink> Executor<B> for SimExecutor {
    fn execute(&mut self, backend: &mut B, snippet: &Snippet, mode: SuppressionMode) -> Result<ExecOutcome, ExecError> {
        check_mode(backend, mode)?;
        if self.unsupported_extensions.contains(&snippet.extension) {
            return Ok(ExecOutcome::unsupported(&snippet.extension));
        }
        backend.retire(LogicalContext::Own, &[(snippet.class_tag.as_str(), 1)]);
        Ok(match self.fault_table.get(&snippet.entry_id) {
            Some(kind) => ExecOutcome::fault(*kind, "simulated fault table"),
            None => ExecOutcome::success(),
        })
    }
}

/// Success / fault / unsupported bookkeeping over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecTally {
    pub attempted: u64,
    pub success: u64,
    pub faults: u64,
    pub unsupported: u64,
}

impl ExecTally {
    pub fn record(&mut self, status: ExecStatus) {
        self.attempted += 1;
        match status {
            ExecStatus::Success => self.success += 1,
            ExecStatus::Fault(_) => self.faults += 1,
            ExecStatus::UnsupportedExtension => self.unsupported += 1,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.success + self.faults + self.unsupported == self.attempted
    }
}
