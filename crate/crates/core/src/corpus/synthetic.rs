//! Synthetic corpora in the uops.info row shape, for tests, demos and
//! simulated scans.

use std::io::{self, Write};

use super::InstructionEntry;

pub const MEMORY_LOAD: &str = "memory-load";
pub const MEMORY_STORE: &str = "memory-store";
pub const BRANCH: &str = "branch";
pub const INDIRECT_BRANCH: &str = "indirect-branch";
pub const ALU: &str = "alu";
pub const FLUSH: &str = "flush";
pub const FAULT: &str = "fault";
pub const TSX: &str = "tsx";
pub const VECTOR: &str = "vector";
pub const STRING_IO: &str = "string-io";
pub const FENCE: &str = "fence";
pub const NOP: &str = "nop";

/// Instruction classes the synthetic corpus and the simulated workloads use.
pub const CLASSES: &[&str] = &[
    MEMORY_LOAD,
    MEMORY_STORE,
    BRANCH,
    INDIRECT_BRANCH,
    ALU,
    FLUSH,
    FAULT,
    TSX,
    VECTOR,
    STRING_IO,
    FENCE,
    NOP,
];

const TEMPLATES: &[(&str, &str, &str, &str)] = &[
    ("ADD", "r64,r64", "base", ALU),
    ("SUB", "r32,imm32", "base", ALU),
    ("XOR", "r16,r16", "base", ALU),
    ("SHL", "r64,imm8", "base", ALU),
    ("IMUL", "r64,r64", "base", ALU),
    ("POPCNT", "r64,r64", "POPCNT", ALU),
    ("MOV", "r64,m64", "base", MEMORY_LOAD),
    ("MOVZX", "r32,m8", "base", MEMORY_LOAD),
    ("MOVAPS", "xmm,m128", "SSE", MEMORY_LOAD),
    ("MOV", "m64,r64", "base", MEMORY_STORE),
    ("MOVNTI", "m64,r64", "SSE2", MEMORY_STORE),
    ("JZ", "rel8", "base", BRANCH),
    ("JMP", "rel32", "base", BRANCH),
    ("JMP", "r64", "base", INDIRECT_BRANCH),
    ("CLFLUSH", "m8", "CLFSH", FLUSH),
    ("UD2", "", "base", FAULT),
    ("XBEGIN", "rel32", "RTM", TSX),
    ("VADDPS", "ymm,ymm,ymm", "AVX", VECTOR),
    ("VADDPS", "zmm,zmm,zmm", "AVX512F", VECTOR),
    ("PADDB", "mm,mm", "MMX", VECTOR),
    ("LODSB", "", "base", STRING_IO),
    ("LFENCE", "", "SSE2", FENCE),
    ("MFENCE", "", "SSE2", FENCE),
    ("NOP", "", "base", NOP),
];

/// `n` entries with ids `1..=n`, cycling through a fixed template table.
pub fn synthetic_entries(n: usize) -> Vec<InstructionEntry> {
    (0..n)
        .map(|i| {
            let (m, ops, ext, class) = TEMPLATES[i % TEMPLATES.len()];
            InstructionEntry::new(i as u32 + 1, m, ops, ext, class)
        })
        .collect()
}

/// One entry per class, ids `1..`, all with register or memory operands the
/// default pool covers.
pub fn one_per_class() -> Vec<InstructionEntry> {
    CLASSES
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let (m, ops, ext, _) = TEMPLATES
                .iter()
                .find(|t| t.3 == *class && t.2 != "AVX512F")
                .copied()
                .expect("template per class");
            InstructionEntry::new(i as u32 + 1, m, ops, ext, class)
        })
        .collect()
}

pub fn write_corpus(entries: &[InstructionEntry], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "# id\tmnemonic\toperands\textension\tclass")?;
    for e in entries {
        writeln!(out, "{}", e.to_corpus_line())?;
    }
    Ok(())
}
