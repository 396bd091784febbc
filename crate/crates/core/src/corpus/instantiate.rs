use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dialect, InstructionEntry, OperandKind, RegClass};

/// Size of the scratch buffer memory operands point into.
pub const SCRATCH_BYTES: usize = 4096;

/// Registers available for operand filling, plus the base register that
/// holds the scratch buffer address.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterPool {
    pub registers: BTreeMap<RegClass, Vec<String>>,
    pub memory_base: String,
}

impl Default for RegisterPool {
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut registers = BTreeMap::new();
        registers.insert(RegClass::Gpr64, names(&["rax", "rcx", "rdx", "rsi"]));
        registers.insert(RegClass::Gpr32, names(&["eax", "ecx", "edx", "esi"]));
        registers.insert(RegClass::Gpr16, names(&["ax", "cx", "dx", "si"]));
        registers.insert(RegClass::Gpr8, names(&["al", "cl", "dl", "sil"]));
        registers.insert(RegClass::Mmx, names(&["mm0", "mm1"]));
        registers.insert(RegClass::Xmm, names(&["xmm0", "xmm1", "xmm2", "xmm3"]));
        registers.insert(RegClass::Ymm, names(&["ymm0", "ymm1", "ymm2", "ymm3"]));
        Self {
            registers,
            memory_base: "rbx".to_string(),
        }
    }
}

impl RegisterPool {
    pub fn covers(&self, class: RegClass) -> bool {
        self.registers.get(&class).is_some_and(|v| !v.is_empty())
    }

    /// All register names in the pool, base register first.
    pub fn names(&self) -> Vec<String> {
        std::iter::once(self.memory_base.clone())
            .chain(self.registers.values().flatten().cloned())
            .collect()
    }
}

/// A corpus entry rendered to assemblable text with every operand bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snippet {
    pub entry_id: u32,
    pub rendered_text: String,
    pub register_pool: Vec<String>,
    pub class_tag: String,
    pub extension: String,
    pub dialect: Dialect,
}

impl Snippet {
    pub fn target_label(entry_id: u32) -> String {
        format!(".Lpmu_target_{entry_id}")
    }
}

fn mem_size_keyword(bits: u16) -> Option<&'static str> {
    Some(match bits {
        8 => "byte",
        16 => "word",
        32 => "dword",
        64 => "qword",
        80 => "tbyte",
        128 => "xmmword",
        256 => "ymmword",
        512 => "zmmword",
        _ => return None,
    })
}

struct Renderer<'a> {
    dialect: Dialect,
    pool: &'a RegisterPool,
}

impl Renderer<'_> {
    fn reg(&self, name: &str) -> String {
        match self.dialect {
            Dialect::AttOrder => format!("%{name}"),
            Dialect::IntelOrder => name.to_string(),
        }
    }

    fn mem(&self, bits: u16) -> String {
        let base = &self.pool.memory_base;
        match (self.dialect, mem_size_keyword(bits)) {
            (Dialect::AttOrder, _) => format!("(%{base})"),
            (Dialect::IntelOrder, Some(kw)) => format!("{kw} ptr [{base}]"),
            (Dialect::IntelOrder, None) => format!("[{base}]"),
        }
    }

    fn imm(&self) -> String {
        match self.dialect {
            Dialect::AttOrder => "$0x1".to_string(),
            Dialect::IntelOrder => "0x1".to_string(),
        }
    }

    fn lea_label(&self, reg: &str, label: &str) -> String {
        match self.dialect {
            Dialect::AttOrder => format!("lea {label}(%rip), %{reg}"),
            Dialect::IntelOrder => format!("lea {reg}, [rip + {label}]"),
        }
    }

    fn store(&self, reg: &str) -> String {
        match self.dialect {
            Dialect::AttOrder => format!("mov %{reg}, {}", self.mem(0)),
            Dialect::IntelOrder => format!("mov qword ptr [{}], {reg}", self.pool.memory_base),
        }
    }
}

/// Binds every operand of `entry` from `pool`. Register operands of each
/// class take pool registers in order; memory operands address the scratch
/// buffer base; immediates are 1; branch targets point just past the
/// instruction. Control-flow entries that jump through a register, memory
/// or the stack get a prelude that loads the target address first.
pub fn instantiate(entry: &InstructionEntry, pool: &RegisterPool) -> Result<Snippet, CorpusError> {
    let r = Renderer {
        dialect: entry.dialect,
        pool,
    };
    let label = Snippet::target_label(entry.id);
    let mut used: BTreeMap<RegClass, usize> = BTreeMap::new();
    let mut prelude = Vec::new();
    let mut rendered_ops = Vec::with_capacity(entry.operands.len());

    for op in &entry.operands {
        let text = match op {
            OperandKind::Register(class) => {
                let regs = pool
                    .registers
                    .get(class)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| CorpusError::PoolMissing {
                        id: entry.id,
                        kind: op.to_string(),
                    })?;
                let k = used.entry(*class).or_insert(0);
                let name = &regs[*k % regs.len()];
                *k += 1;
                if entry.is_control_flow && *class == RegClass::Gpr64 && prelude.is_empty() {
                    prelude.push(r.lea_label(name, &label));
                }
                r.reg(name)
            }
            OperandKind::Memory(bits) => {
                if entry.is_control_flow && prelude.is_empty() {
                    let tmp = first_gpr64(pool, entry.id)?;
                    prelude.push(r.lea_label(tmp, &label));
                    prelude.push(r.store(tmp));
                }
                r.mem(*bits)
            }
            OperandKind::Immediate(_) => r.imm(),
            OperandKind::RelativeBranch(_) => label.clone(),
            OperandKind::Unknown(kind) => {
                return Err(CorpusError::UnknownOperand {
                    id: entry.id,
                    kind: kind.clone(),
                })
            }
        };
        rendered_ops.push(text);
    }

    let mnemonic = entry.mnemonic.to_ascii_lowercase();
    if entry.is_control_flow && entry.operands.is_empty() && mnemonic.starts_with("ret") {
        let tmp = first_gpr64(pool, entry.id)?;
        prelude.push(r.lea_label(tmp, &label));
        prelude.push(format!("push {}", r.reg(tmp)));
    }

    let mut lines = prelude;
    if rendered_ops.is_empty() {
        lines.push(mnemonic);
    } else {
        lines.push(format!("{mnemonic} {}", rendered_ops.join(", ")));
    }
    if entry.is_control_flow {
        lines.push(format!("{label}:"));
    }
    let mut rendered_text = lines.join("\n");
    rendered_text.push('\n');

    Ok(Snippet {
        entry_id: entry.id,
        rendered_text,
        register_pool: pool.names(),
        class_tag: entry.class_tag.clone(),
        extension: entry.extension.clone(),
        dialect: entry.dialect,
    })
}

fn first_gpr64(pool: &RegisterPool, id: u32) -> Result<&str, CorpusError> {
    pool.registers
        .get(&RegClass::Gpr64)
        .and_then(|v| v.first())
        .map(String::as_str)
        .ok_or_else(|| CorpusError::PoolMissing {
            id,
            kind: "r64".to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::normalize_syntax;

    fn att(id: u32, m: &str, ops: &str, ext: &str, class: &str) -> InstructionEntry {
        normalize_syntax(&InstructionEntry::new(id, m, ops, ext, class), Dialect::AttOrder).unwrap()
    }

    #[test]
    fn register_operands_fill_from_pool() {
        let s = instantiate(&att(7, "ADD", "r64,r64", "base", "alu"), &RegisterPool::default()).unwrap();
        assert_eq!(s.rendered_text, "add %rax, %rcx\n");
        let intel = InstructionEntry::new(7, "ADD", "r64,r64", "base", "alu");
        assert_eq!(instantiate(&intel, &RegisterPool::default()).unwrap().rendered_text, "add rax, rcx\n");
    }

    #[test]
    fn memory_operand_addresses_scratch_base() {
        let s = instantiate(&att(3, "MOV", "r64,m64", "base", "memory-load"), &RegisterPool::default()).unwrap();
        assert_eq!(s.rendered_text, "mov (%rbx), %rax\n");
        let intel = InstructionEntry::new(3, "MOV", "r64,m64", "base", "memory-load");
        assert_eq!(
            instantiate(&intel, &RegisterPool::default()).unwrap().rendered_text,
            "mov rax, qword ptr [rbx]\n"
        );
    }

    #[test]
    fn branch_target_follows_instruction() {
        let s = instantiate(&att(12, "JZ", "rel8", "base", "branch"), &RegisterPool::default()).unwrap();
        let lines: Vec<&str> = s.rendered_text.lines().collect();
        assert_eq!(lines, vec!["jz .Lpmu_target_12", ".Lpmu_target_12:"]);
    }

    #[test]
    fn indirect_branches_load_target_first() {
        let pool = RegisterPool::default();
        let s = instantiate(&att(20, "JMP", "r64", "base", "indirect-branch"), &pool).unwrap();
        assert_eq!(
            s.rendered_text,
            "lea .Lpmu_target_20(%rip), %rax\njmp %rax\n.Lpmu_target_20:\n"
        );
        let s = instantiate(&att(21, "JMP", "m64", "base", "indirect-branch"), &pool).unwrap();
        assert!(s.rendered_text.starts_with("lea .Lpmu_target_21(%rip), %rax\nmov %rax, (%rbx)\njmp (%rbx)\n"));
        let s = instantiate(&att(22, "RET", "", "base", "branch"), &pool).unwrap();
        assert!(s.rendered_text.contains("push %rax\nret\n.Lpmu_target_22:"));
    }

    #[test]
    fn immediate_prefix_per_dialect() {
        let e = InstructionEntry::new(5, "SHL", "r32,imm8", "base", "alu");
        assert_eq!(instantiate(&e, &RegisterPool::default()).unwrap().rendered_text, "shl eax, 0x1\n");
        let a = normalize_syntax(&e, Dialect::AttOrder).unwrap();
        assert_eq!(instantiate(&a, &RegisterPool::default()).unwrap().rendered_text, "shl $0x1, %eax\n");
    }

    #[test]
    fn missing_vector_registers_is_an_error() {
        let e = att(40, "VADDPS", "zmm,zmm,zmm", "AVX512F", "vector");
        match instantiate(&e, &RegisterPool::default()) {
            Err(CorpusError::PoolMissing { id: 40, kind }) => assert_eq!(kind, "zmm"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn instantiation_is_pure() {
        let pool = RegisterPool::default();
        let e = att(9, "VADDPS", "ymm,ymm,ymm", "AVX", "vector");
        let a = instantiate(&e, &pool).unwrap();
        let b = instantiate(&e, &pool).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rendered_text, "vaddps %ymm0, %ymm1, %ymm2\n");
        assert!(!a.rendered_text.contains("r64") && !a.rendered_text.contains("imm"));
    }
}
