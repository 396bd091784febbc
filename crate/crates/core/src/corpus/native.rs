//! Native snippet execution in a forked child.
//!
//! Snippets are assembled with the system assembler into a flat code blob
//! wrapped by a small prologue/epilogue. Each execution forks; the child
//! installs handlers for every fault signal (on an alternate stack), runs
//! the blob once and exits with a status that encodes the signal. The
//! parent enforces a watchdog so instructions that never return cannot hang
//! the scan.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use super::exec::check_mode;
use super::{Dialect, ExecError, ExecOutcome, Executor, FaultKind, Snippet, SuppressionMode, SCRATCH_BYTES};
use crate::backend::CounterBackend;

const FAULT_EXIT_BASE: i32 = 64;
const ABORT_MARKER_OFFSET: usize = SCRATCH_BYTES - 8;
const FAULT_SIGNALS: [i32; 5] = [libc::SIGILL, libc::SIGSEGV, libc::SIGBUS, libc::SIGFPE, libc::SIGTRAP];
const ALT_STACK_BYTES: usize = 64 * 1024;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Wraps a snippet so it can be called as `extern "C" fn(scratch: *mut u8)`.
/// `%r14` keeps the scratch base and `%r15` the entry stack pointer; neither
/// is in the operand pool.
pub fn wrap_snippet(snippet: &Snippet, mode: SuppressionMode) -> String {
    let mut s = String::from(".text\n.globl pmu_snippet\npmu_snippet:\n");
    for r in ["rbp", "rbx", "r12", "r13", "r14", "r15"] {
        s.push_str(&format!("push %{r}\n"));
    }
    s.push_str("mov %rsp, %r15\nmov %rdi, %r14\nmov %rdi, %rbx\n");
    s.push_str(&format!("movq $0, {ABORT_MARKER_OFFSET}(%r14)\n"));
    s.push_str("lea 256(%rdi), %rax\nmov %rax, %rcx\nmov %rax, %rdx\nmov %rax, %rsi\n");
    if mode == SuppressionMode::Transactional {
        s.push_str("xbegin .Lpmu_abort\n");
    }
    if snippet.dialect == Dialect::IntelOrder {
        s.push_str(".intel_syntax noprefix\n");
    }
    s.push_str(&snippet.rendered_text);
    if snippet.dialect == Dialect::IntelOrder {
        s.push_str(".att_syntax prefix\n");
    }
    if mode == SuppressionMode::Transactional {
        s.push_str("xend\njmp .Lpmu_done\n.Lpmu_abort:\n");
        s.push_str(&format!("movq $1, {ABORT_MARKER_OFFSET}(%r14)\n"));
    }
    s.push_str(".Lpmu_done:\nmov %r15, %rsp\n");
    for r in ["r15", "r14", "r13", "r12", "rbx", "rbp"] {
        s.push_str(&format!("pop %{r}\n"));
    }
    s.push_str("ret\n");
    s
}

/// Assembles `source` to a flat binary with `as` and `objcopy`.
pub fn assemble(source: &str) -> Result<Vec<u8>, String> {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let base: PathBuf = std::env::temp_dir().join(format!("pmu-prospector-{}-{n}", std::process::id()));
    let src = base.with_extension("s");
    let obj = base.with_extension("o");
    let bin = base.with_extension("bin");
    let cleanup = || {
        for p in [&src, &obj, &bin] {
            let _ = std::fs::remove_file(p);
        }
    };
    let result = (|| {
        std::fs::write(&src, source).map_err(|e| e.to_string())?;
        let out = Command::new("as")
            .arg("--64")
            .arg("-o")
            .arg(&obj)
            .arg(&src)
            .output()
            .map_err(|e| format!("cannot run as: {e}"))?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).trim().to_string());
        }
        let out = Command::new("objcopy")
            .args(["-O", "binary", "--only-section=.text"])
            .arg(&obj)
            .arg(&bin)
            .output()
            .map_err(|e| format!("cannot run objcopy: {e}"))?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).trim().to_string());
        }
        std::fs::read(&bin).map_err(|e| e.to_string())
    })();
    cleanup();
    result
}

pub fn extension_supported(extension: &str) -> bool {
    match extension.to_ascii_uppercase().as_str() {
        "SSE" => is_x86_feature_detected!("sse"),
        "SSE2" => is_x86_feature_detected!("sse2"),
        "SSE3" => is_x86_feature_detected!("sse3"),
        "SSSE3" => is_x86_feature_detected!("ssse3"),
        "SSE4_1" | "SSE4.1" => is_x86_feature_detected!("sse4.1"),
        "SSE4_2" | "SSE4.2" => is_x86_feature_detected!("sse4.2"),
        "AVX" => is_x86_feature_detected!("avx"),
        "AVX2" => is_x86_feature_detected!("avx2"),
        "FMA" => is_x86_feature_detected!("fma"),
        "AVX512F" => is_x86_feature_detected!("avx512f"),
        "AVX512BW" => is_x86_feature_detected!("avx512bw"),
        "AVX512VL" => is_x86_feature_detected!("avx512vl"),
        "POPCNT" => is_x86_feature_detected!("popcnt"),
        "BMI1" => is_x86_feature_detected!("bmi1"),
        "BMI2" => is_x86_feature_detected!("bmi2"),
        "RTM" => is_x86_feature_detected!("rtm"),
        "AES" => is_x86_feature_detected!("aes"),
        "SHA" => is_x86_feature_detected!("sha"),
        _ => true,
    }
}

struct Mapping {
    ptr: *mut libc::c_void,
    len: usize,
}

impl Mapping {
    fn new(len: usize, prot: i32, flags: i32) -> Result<Self, ExecError> {
        // SAFETY: anonymous mapping with no address hint.
        let ptr = unsafe { libc::mmap(std::ptr::null_mut(), len, prot, flags | libc::MAP_ANONYMOUS, -1, 0) };
        if ptr == libc::MAP_FAILED {
            return Err(ExecError::Setup(format!("mmap: {}", std::io::Error::last_os_error())));
        }
        Ok(Self { ptr, len })
    }
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: ptr/len came from a successful mmap.
        unsafe {
            libc::munmap(self.ptr, self.len);
        }
    }
}

extern "C" fn on_fault(sig: libc::c_int) {
    // SAFETY: _exit is async-signal-safe.
    unsafe { libc::_exit(FAULT_EXIT_BASE + sig) }
}

/// Runs `code` once in a forked child and classifies how it ended.
pub fn run_isolated(code: &[u8], timeout: Duration, cpu: Option<usize>) -> Result<ExecOutcome, ExecError> {
    let page = 4096;
    let code_len = (code.len() + 1).div_ceil(page) * page;
    let text = Mapping::new(code_len, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_PRIVATE)?;
    // SAFETY: the mapping is at least code.len() bytes and writable.
    unsafe {
        std::ptr::copy_nonoverlapping(code.as_ptr(), text.ptr as *mut u8, code.len());
        if libc::mprotect(text.ptr, code_len, libc::PROT_READ | libc::PROT_EXEC) != 0 {
            return Err(ExecError::Setup(format!("mprotect: {}", std::io::Error::last_os_error())));
        }
    }
    let scratch = Mapping::new(SCRATCH_BYTES, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_SHARED)?;
    let alt_stack = Mapping::new(ALT_STACK_BYTES, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_PRIVATE)?;

    // SAFETY: the child only calls async-signal-safe functions before _exit.
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(ExecError::Setup(format!("fork: {}", std::io::Error::last_os_error())));
    }
    if pid == 0 {
        unsafe {
            let ss = libc::stack_t {
                ss_sp: alt_stack.ptr,
                ss_flags: 0,
                ss_size: alt_stack.len,
            };
            libc::sigaltstack(&ss, std::ptr::null_mut());
            let mut action: libc::sigaction = std::mem::zeroed();
            action.sa_sigaction = on_fault as *const () as usize;
            action.sa_flags = libc::SA_ONSTACK;
            libc::sigemptyset(&mut action.sa_mask);
            for sig in FAULT_SIGNALS {
                libc::sigaction(sig, &action, std::ptr::null_mut());
            }
            if let Some(cpu) = cpu {
                let mut set: libc::cpu_set_t = std::mem::zeroed();
                libc::CPU_SET(cpu, &mut set);
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
            }
            let entry: extern "C" fn(*mut u8) = std::mem::transmute(text.ptr);
            entry(scratch.ptr as *mut u8);
            libc::_exit(0);
        }
    }

    let deadline = Instant::now() + timeout;
    let mut status = 0;
    loop {
        // SAFETY: pid is our child.
        let r = unsafe { libc::waitpid(pid, &mut status, libc::WNOHANG) };
        if r == pid {
            break;
        }
        if r < 0 {
            return Err(ExecError::Setup(format!("waitpid: {}", std::io::Error::last_os_error())));
        }
        if Instant::now() >= deadline {
            unsafe {
                libc::kill(pid, libc::SIGKILL);
                libc::waitpid(pid, &mut status, 0);
            }
            return Ok(ExecOutcome::fault(FaultKind::Timeout, format!("watchdog after {timeout:?}")));
        }
        std::thread::sleep(Duration::from_micros(200));
    }

    if libc::WIFEXITED(status) {
        let code = libc::WEXITSTATUS(status);
        if code == 0 {
            // SAFETY: shared scratch page, child has exited.
            let aborted = unsafe { std::ptr::read_volatile((scratch.ptr as *const u8).add(ABORT_MARKER_OFFSET) as *const u64) };
            return Ok(if aborted != 0 {
                ExecOutcome::fault(FaultKind::TransactionAbort, "transaction aborted")
            } else {
                ExecOutcome::success()
            });
        }
        if code > FAULT_EXIT_BASE {
            let sig = code - FAULT_EXIT_BASE;
            return Ok(ExecOutcome::fault(FaultKind::from_signal(sig), format!("signal {sig}")));
        }
        return Ok(ExecOutcome::fault(FaultKind::Other, format!("child exit status {code}")));
    }
    if libc::WIFSIGNALED(status) {
        let sig = libc::WTERMSIG(status);
        return Ok(ExecOutcome::fault(FaultKind::from_signal(sig), format!("killed by signal {sig}")));
    }
    Ok(ExecOutcome::fault(FaultKind::Other, format!("wait status {status:#x}")))
}

/// Executor for real hardware. Works with any counter backend; the caller
/// programs and reads counters around [`Executor::execute`].
#[derive(Debug)]
pub struct NativeExecutor {
    pub timeout: Duration,
    pub cpu: Option<usize>,
    cache: HashMap<(u32, SuppressionMode), Result<Vec<u8>, String>>,
}

impl Default for NativeExecutor {
    fn default() -> Self {
        Self {
            timeout: Duration::from_millis(100),
            cpu: None,
            cache: HashMap::new(),
        }
    }
}

impl NativeExecutor {
    pub fn pinned(cpu: usize) -> Self {
        Self {
            cpu: Some(cpu),
            ..Self::default()
        }
    }
}

impl<B: CounterBackend> Executor<B> for NativeExecutor {
    fn execute(&mut self, backend: &mut B, snippet: &Snippet, mode: SuppressionMode) -> Result<ExecOutcome, ExecError> {
        check_mode(backend, mode)?;
        if !extension_supported(&snippet.extension) {
            return Ok(ExecOutcome::unsupported(&snippet.extension));
        }
        let code = self
            .cache
            .entry((snippet.entry_id, mode))
            .or_insert_with(|| assemble(&wrap_snippet(snippet, mode)));
        match code {
            Ok(bytes) => run_isolated(bytes, self.timeout, self.cpu),
            Err(msg) => Ok(ExecOutcome {
                status: super::ExecStatus::UnsupportedExtension,
                fault_detail: Some(format!("assembler rejected snippet: {msg}")),
            }),
        }
    }
}
