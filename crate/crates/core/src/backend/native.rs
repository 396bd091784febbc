//! Polling backend over the Linux per-CPU MSR device.
//!
//! `IA32_PERFEVTSELx` lives at `0x186 + x`, `IA32_PMCx` at `0xC1 + x`.
//! Counters are programmed and read through `/dev/cpu/<n>/msr`, which needs
//! the `msr` module and root (or `CAP_SYS_RAWIO`). The measuring thread must
//! stay on the CPU whose counters it reads; see [`pin_current_thread`].

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;

use super::{BackendCapabilities, BackendError, CounterBackend, CounterSlot, MAX_PROGRAMMABLE};
use crate::event_space::PerfEvtSelValue;

pub const IA32_PERFEVTSEL0: u64 = 0x186;
pub const IA32_PMC0: u64 = 0xC1;
pub const IA32_PERF_GLOBAL_CTRL: u64 = 0x38F;

/// General-purpose counters are 48 bits wide on every core that has them.
const COUNTER_MASK: u64 = (1 << 48) - 1;

pub fn perfevtsel_address(slot: CounterSlot) -> u64 {
    IA32_PERFEVTSEL0 + slot.index() as u64
}

pub fn pmc_address(slot: CounterSlot) -> u64 {
    IA32_PMC0 + slot.index() as u64
}

/// What CPUID says about the local PMU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpuPmuInfo {
    pub arch_perfmon_version: u8,
    pub programmable_counters: u8,
    pub rtm: bool,
}

pub fn probe_cpu() -> CpuPmuInfo {
    use std::arch::x86_64::{__cpuid, __cpuid_count};
    let max_leaf = __cpuid(0).eax;
    let (version, counters) = if max_leaf >= 0xA {
        let eax = __cpuid(0xA).eax;
        ((eax & 0xff) as u8, ((eax >> 8) & 0xff) as u8)
    } else {
        (0, 0)
    };
    let rtm = max_leaf >= 7 && __cpuid_count(7, 0).ebx & (1 << 11) != 0;
    CpuPmuInfo {
        arch_perfmon_version: version,
        programmable_counters: counters,
        rtm,
    }
}

/// Restricts the calling thread to `cpu`.
pub fn pin_current_thread(cpu: usize) -> Result<(), BackendError> {
    // SAFETY: cpu_set_t is plain data; sched_setaffinity only reads it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(BackendError::Unavailable(format!(
                "cannot pin to cpu {cpu}: {}",
                std::io::Error::last_os_error()
            )));
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct NativeBackend {
    cpu: usize,
    msr: File,
    info: CpuPmuInfo,
    programmed: [Option<PerfEvtSelValue>; MAX_PROGRAMMABLE as usize],
}

impl NativeBackend {
    /// Opens the MSR device of `cpu` and enables its general-purpose
    /// counters globally. Fails fast with a capability report when the
    /// host lacks counter access.
    pub fn open(cpu: usize) -> Result<Self, BackendError> {
        let info = probe_cpu();
        if info.programmable_counters == 0 {
            return Err(BackendError::Unavailable(
                "CPUID leaf 0xA reports no architectural performance counters".into(),
            ));
        }
        let path = format!("/dev/cpu/{cpu}/msr");
        let msr = OpenOptions::new().read(true).write(true).open(&path).map_err(|e| {
            BackendError::Unavailable(format!(
                "{path}: {e} (needs the msr kernel module and root); cpu reports perfmon v{} with {} programmable counters, rtm={}",
                info.arch_perfmon_version, info.programmable_counters, info.rtm
            ))
        })?;
        let backend = Self {
            cpu,
            msr,
            info,
            programmed: Default::default(),
        };
        if info.arch_perfmon_version >= 2 {
            let count = backend.capabilities().programmable_count;
            let enable_bits = (1u64 << count) - 1;
            let global = backend.rdmsr(IA32_PERF_GLOBAL_CTRL)?;
            backend.wrmsr(IA32_PERF_GLOBAL_CTRL, global | enable_bits)?;
        }
        Ok(backend)
    }

    pub fn cpu(&self) -> usize {
        self.cpu
    }

    pub fn rdmsr(&self, address: u64) -> Result<u64, BackendError> {
        let mut buf = [0u8; 8];
        self.msr.read_exact_at(&mut buf, address).map_err(|e| BackendError::Io {
            what: format!("rdmsr {address:#x} on cpu {}", self.cpu),
            detail: e.to_string(),
        })?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn wrmsr(&self, address: u64, value: u64) -> Result<(), BackendError> {
        self.msr.write_all_at(&value.to_le_bytes(), address).map_err(|e| BackendError::Io {
            what: format!("wrmsr {address:#x} on cpu {}", self.cpu),
            detail: e.to_string(),
        })
    }
}

impl CounterBackend for NativeBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            programmable_count: self.info.programmable_counters.clamp(1, MAX_PROGRAMMABLE),
            supports_transactional_suppression: self.info.rtm,
            is_simulated: false,
        }
    }

    fn program(&mut self, slot: CounterSlot, value: PerfEvtSelValue) -> Result<(), BackendError> {
        self.check_slot(slot)?;
        self.wrmsr(perfevtsel_address(slot), 0)?;
        self.wrmsr(pmc_address(slot), 0)?;
        self.wrmsr(perfevtsel_address(slot), value.render())?;
        self.programmed[slot.index() as usize] = Some(value);
        Ok(())
    }

    fn read(&mut self, slot: CounterSlot) -> Result<u64, BackendError> {
        self.check_slot(slot)?;
        if self.programmed[slot.index() as usize].is_none() {
            return Err(BackendError::Unprogrammed(slot.index()));
        }
        Ok(self.rdmsr(pmc_address(slot))? & COUNTER_MASK)
    }

    fn release(&mut self, slot: CounterSlot) -> Result<(), BackendError> {
        self.check_slot(slot)?;
        self.wrmsr(perfevtsel_address(slot), 0)?;
        self.programmed[slot.index() as usize] = None;
        Ok(())
    }

    fn is_programmed(&self, slot: CounterSlot) -> bool {
        self.programmed
            .get(slot.index() as usize)
            .is_some_and(|s| s.is_some())
    }
}
