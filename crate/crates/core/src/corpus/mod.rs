//! Instruction corpus: ingestion, dialect normalization, operand filling and
//! fault-isolated execution.
//!
//! Corpus rows are tab separated:
//!
//! ```text
//! # id  mnemonic  operands        extension  class
//! 7     ADD       r64,r64         base       alu
//! 12    JZ        rel8            base       branch
//! ```
//!
//! Operands are listed in Intel order (destination first).

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod exec;
mod instantiate;
pub mod synthetic;

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub mod native;

pub use exec::{ExecTally, Executor, SimExecutor};
pub use instantiate::{instantiate, RegisterPool, Snippet, SCRATCH_BYTES};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus input: {0}")]
    Input(#[from] std::io::Error),
    #[error("entry {id}: cannot normalize operand kind `{kind}`")]
    UnknownOperand { id: u32, kind: String },
    #[error("entry {id}: register pool has no {kind} registers")]
    PoolMissing { id: u32, kind: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("transactional suppression requested but the backend does not support it")]
    TransactionalUnsupported,
    #[error("executor setup failed: {0}")]
    Setup(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegClass {
    Gpr8,
    Gpr16,
    Gpr32,
    Gpr64,
    Mmx,
    Xmm,
    Ymm,
    Zmm,
    Mask,
    X87,
}

impl RegClass {
    fn token(self) -> &'static str {
        match self {
            RegClass::Gpr8 => "r8",
            RegClass::Gpr16 => "r16",
            RegClass::Gpr32 => "r32",
            RegClass::Gpr64 => "r64",
            RegClass::Mmx => "mm",
            RegClass::Xmm => "xmm",
            RegClass::Ymm => "ymm",
            RegClass::Zmm => "zmm",
            RegClass::Mask => "k",
            RegClass::X87 => "st",
        }
    }
}

/// Operand template kind, as written in the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum OperandKind {
    Register(RegClass),
    /// Memory operand of the given width in bits; 0 when unspecified.
    Memory(u16),
    Immediate(u8),
    RelativeBranch(u8),
    Unknown(String),
}

impl FromStr for OperandKind {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let reg = |c| Ok(OperandKind::Register(c));
        match t.as_str() {
            "r8" => return reg(RegClass::Gpr8),
            "r16" => return reg(RegClass::Gpr16),
            "r32" => return reg(RegClass::Gpr32),
            "r64" => return reg(RegClass::Gpr64),
            "mm" => return reg(RegClass::Mmx),
            "xmm" => return reg(RegClass::Xmm),
            "ymm" => return reg(RegClass::Ymm),
            "zmm" => return reg(RegClass::Zmm),
            "k" => return reg(RegClass::Mask),
            "st" => return reg(RegClass::X87),
            "mem" | "m" => return Ok(OperandKind::Memory(0)),
            _ => {}
        }
        let width = |prefix: &str| t.strip_prefix(prefix).and_then(|w| w.parse::<u16>().ok());
        let kind = if let Some(w) = width("rel").filter(|w| *w == 8 || *w == 32) {
            OperandKind::RelativeBranch(w as u8)
        } else if let Some(w) = width("imm").filter(|w| [8, 16, 32, 64].contains(w)) {
            OperandKind::Immediate(w as u8)
        } else if let Some(w) = width("m").filter(|w| [8, 16, 32, 64, 80, 128, 256, 512].contains(w)) {
            OperandKind::Memory(w)
        } else {
            OperandKind::Unknown(s.trim().to_string())
        };
        Ok(kind)
    }
}

impl fmt::Display for OperandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperandKind::Register(c) => f.write_str(c.token()),
            OperandKind::Memory(0) => f.write_str("mem"),
            OperandKind::Memory(w) => write!(f, "m{w}"),
            OperandKind::Immediate(w) => write!(f, "imm{w}"),
            OperandKind::RelativeBranch(w) => write!(f, "rel{w}"),
            OperandKind::Unknown(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    /// Destination first, bare registers and immediates.
    IntelOrder,
    /// Destination last, `%` registers and `$` immediates.
    AttOrder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionEntry {
    pub id: u32,
    pub mnemonic: String,
    pub operands: Vec<OperandKind>,
    pub extension: String,
    pub is_control_flow: bool,
    pub class_tag: String,
    pub dialect: Dialect,
}

impl InstructionEntry {
    pub fn new(id: u32, mnemonic: &str, operands: &str, extension: &str, class_tag: &str) -> Self {
        let operands: Vec<OperandKind> = split_operands(operands)
            .map(|t| t.parse().expect("infallible"))
            .collect();
        let is_control_flow = class_tag == "branch"
            || class_tag == "indirect-branch"
            || operands.iter().any(|o| matches!(o, OperandKind::RelativeBranch(_)));
        Self {
            id,
            mnemonic: mnemonic.to_string(),
            operands,
            extension: extension.to_string(),
            is_control_flow,
            class_tag: class_tag.to_string(),
            dialect: Dialect::IntelOrder,
        }
    }

    /// Row text in the corpus file format (Intel operand order).
    pub fn to_corpus_line(&self) -> String {
        let mut ops: Vec<String> = self.operands.iter().map(|o| o.to_string()).collect();
        if self.dialect == Dialect::AttOrder {
            ops.reverse();
        }
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.mnemonic.to_ascii_uppercase(),
            ops.join(","),
            self.extension,
            self.class_tag
        )
    }
}

fn split_operands(field: &str) -> impl Iterator<Item = &str> {
    let field = field.trim();
    let field = if field == "-" { "" } else { field };
    field.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedCorpus {
    pub entries: Vec<InstructionEntry>,
    pub malformed: Vec<MalformedLine>,
}

/// Parses the tab-separated corpus format. Malformed rows are collected with
/// their 1-based line numbers rather than dropped.
pub fn parse_corpus(reader: impl BufRead) -> Result<ParsedCorpus, CorpusError> {
    let mut out = ParsedCorpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 5 {
            out.malformed.push(MalformedLine {
                line: lineno,
                reason: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
            continue;
        }
        let Ok(id) = cols[0].trim().parse::<u32>() else {
            out.malformed.push(MalformedLine {
                line: lineno,
                reason: format!("bad id `{}`", cols[0]),
            });
            continue;
        };
        let mnemonic = cols[1].trim();
        if mnemonic.is_empty() || mnemonic.contains(char::is_whitespace) {
            out.malformed.push(MalformedLine {
                line: lineno,
                reason: format!("bad mnemonic `{}`", cols[1]),
            });
            continue;
        }
        out.entries.push(InstructionEntry::new(id, mnemonic, cols[2], cols[3].trim(), cols[4].trim()));
    }
    Ok(out)
}

/// Rewrites an entry for `dialect`: operand order and mnemonic case.
/// Register and immediate decoration is applied when the snippet is rendered.
pub fn normalize_syntax(entry: &InstructionEntry, dialect: Dialect) -> Result<InstructionEntry, CorpusError> {
    if let Some(OperandKind::Unknown(kind)) = entry.operands.iter().find(|o| matches!(o, OperandKind::Unknown(_))) {
        return Err(CorpusError::UnknownOperand {
            id: entry.id,
            kind: kind.clone(),
        });
    }
    let mut out = entry.clone();
    if entry.dialect != dialect {
        out.operands.reverse();
        out.dialect = dialect;
    }
    out.mnemonic = match dialect {
        Dialect::AttOrder => entry.mnemonic.to_ascii_lowercase(),
        Dialect::IntelOrder => entry.mnemonic.to_ascii_uppercase(),
    };
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    IllegalInstruction,
    Segmentation,
    Bus,
    FloatingPoint,
    Trap,
    TransactionAbort,
    Timeout,
    Other,
}

impl FaultKind {
    #[cfg(all(target_os = "linux", target_arch = "x86_64"))]
    pub(crate) fn from_signal(sig: i32) -> Self {
        match sig {
            libc::SIGILL => FaultKind::IllegalInstruction,
            libc::SIGSEGV => FaultKind::Segmentation,
            libc::SIGBUS => FaultKind::Bus,
            libc::SIGFPE => FaultKind::FloatingPoint,
            libc::SIGTRAP => FaultKind::Trap,
            _ => FaultKind::Other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Success,
    Fault(FaultKind),
    UnsupportedExtension,
}

impl ExecStatus {
    /// Short label used in scan record files.
    pub fn label(self) -> &'static str {
        match self {
            ExecStatus::Success => "success",
            ExecStatus::Fault(_) => "fault",
            ExecStatus::UnsupportedExtension => "unsupported",
        }
    }

    /// Severity rank used to fold several repetitions into one status.
    pub(crate) fn severity(self) -> u8 {
        match self {
            ExecStatus::Success => 0,
            ExecStatus::Fault(_) => 1,
            ExecStatus::UnsupportedExtension => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub fault_detail: Option<String>,
}

impl ExecOutcome {
    pub fn success() -> Self {
        Self {
            status: ExecStatus::Success,
            fault_detail: None,
        }
    }

    pub fn fault(kind: FaultKind, detail: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::Fault(kind),
            fault_detail: Some(detail.into()),
        }
    }

    pub fn unsupported(extension: &str) -> Self {
        Self {
            status: ExecStatus::UnsupportedExtension,
            fault_detail: Some(format!("extension {extension} not available")),
        }
    }
}

/// How faults raised by executed snippets are contained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuppressionMode {
    #[default]
    SignalHandler,
    Transactional,
}
