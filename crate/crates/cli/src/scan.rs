use std::io::BufReader;

use pmu_prospector::backend::SimBackend;
use pmu_prospector::collector::{partitioned_scan, write_records, PartitionedScan, ScanConfig};
use pmu_prospector::corpus::{parse_corpus, SimExecutor};
use pmu_prospector::umask::{emit_distribution, infer_all, write_distribution_csv, write_masks_csv};
use pmu_prospector::{collector, EventCatalog};

use crate::{read_file, write_file, BackendKind, Ctx, Failure, Outcome, ScanArgs, UmaskArgs};

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub(crate) fn open_native(cpu: usize) -> Result<pmu_prospector::backend::native::NativeBackend, Failure> {
    use pmu_prospector::backend::native::{pin_current_thread, NativeBackend};
    let backend = NativeBackend::open(cpu).map_err(|e| Failure::Runtime(format!("native backend: {e}")))?;
    pin_current_thread(cpu).map_err(|e| Failure::Runtime(format!("native backend: {e}")))?;
    Ok(backend)
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
pub(crate) fn open_native(_cpu: usize) -> Result<std::convert::Infallible, Failure> {
    Err(Failure::Runtime("native backend: only available on x86_64 Linux".into()))
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn native_scan(
    ctx: &Ctx,
    corpus: &[pmu_prospector::corpus::InstructionEntry],
    catalog: &EventCatalog,
    config: &ScanConfig,
) -> Result<PartitionedScan, Failure> {
    use pmu_prospector::corpus::native::NativeExecutor;
    let mut backend = open_native(ctx.cpu)?;
    if ctx.jobs > 1 {
        log::warn!("native scans run on one pinned core; ignoring --jobs {}", ctx.jobs);
    }
    let mut executor = NativeExecutor::pinned(ctx.cpu);
    let space: Vec<_> = pmu_prospector::enumerate_space().collect();
    let mut records = Vec::new();
    let report = collector::full_scan_with(corpus, &space, catalog, &mut backend, &mut executor, config, |r| {
        records.push(r.clone())
    })
    .map_err(Failure::runtime)?;
    Ok(PartitionedScan { report, records })
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn native_scan(
    ctx: &Ctx,
    _: &[pmu_prospector::corpus::InstructionEntry],
    _: &EventCatalog,
    _: &ScanConfig,
) -> Result<PartitionedScan, Failure> {
    match open_native(ctx.cpu)? {}
}

pub(crate) fn scan(ctx: &Ctx, a: ScanArgs) -> Outcome {
    let corpus_path = a
        .corpus
        .or_else(|| ctx.file.corpus.clone())
        .ok_or_else(|| Failure::Usage("scan needs --corpus".into()))?;
    let catalog_path = a
        .catalog
        .or_else(|| ctx.file.catalog.clone())
        .ok_or_else(|| Failure::Usage("scan needs --catalog".into()))?;
    let repetitions = a.repetitions.or(ctx.file.repetitions).unwrap_or(5);
    if repetitions == 0 {
        return Err(Failure::Usage("--repetitions must be at least 1".into()));
    }

    let file = std::fs::File::open(&corpus_path).map_err(|e| Failure::Runtime(format!("{}: {e}", corpus_path.display())))?;
    let parsed = parse_corpus(BufReader::new(file)).map_err(Failure::runtime)?;
    for bad in &parsed.malformed {
        log::warn!("{}:{}: {}", corpus_path.display(), bad.line, bad.reason);
    }
    let catalog = EventCatalog::load(&catalog_path).map_err(Failure::runtime)?;

    let config = ScanConfig {
        repetitions,
        quiet_threshold: a.threshold.or(ctx.file.threshold).unwrap_or(1),
        any_thread: a.any_thread,
        microarchitecture_label: a.label.unwrap_or_else(|| match ctx.backend {
            BackendKind::Sim => "simulated".into(),
            BackendKind::Native => "native".into(),
        }),
        ..ScanConfig::default()
    };
    let result = match ctx.backend {
        BackendKind::Sim => {
            let model = ctx.sim_model()?;
            partitioned_scan(&parsed.entries, &catalog, &config, ctx.jobs, |_| {
                (SimBackend::new(model.clone()), SimExecutor::from_model(&model))
            })
            .map_err(Failure::runtime)?
        }
        BackendKind::Native => native_scan(ctx, &parsed.entries, &catalog, &config)?,
    };

    let out = ctx.out_path(a.out, "scan_report.json");
    let records_path = a.records.unwrap_or_else(|| out.with_extension("ndjson"));
    let mut json = result.report.to_json();
    json.push('\n');
    write_file(&out, json.as_bytes())?;
    let mut buf = Vec::new();
    write_records(&result.records, &mut buf).map_err(Failure::runtime)?;
    write_file(&records_path, &buf)?;

    let s = result.report.summary();
    println!(
        "{}: {} instructions, {} executed successfully, {} hidden events ({} malformed lines skipped)",
        s.microarchitecture,
        s.total_instructions,
        s.executed_success,
        s.hidden_events,
        parsed.malformed.len()
    );
    println!("report: {}\nrecords: {}", out.display(), records_path.display());
    Ok(())
}

pub(crate) fn analyze_umask(ctx: &Ctx, a: UmaskArgs) -> Outcome {
    let text = String::from_utf8(read_file(&a.report)?).map_err(|e| Failure::Runtime(format!("{}: {e}", a.report.display())))?;
    let report = collector::ScanReport::from_json(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", a.report.display())))?;
    let dir = a.out.unwrap_or_else(|| ctx.output_dir.clone());

    let rows = emit_distribution(&report);
    let mut buf = Vec::new();
    write_distribution_csv(&rows, &mut buf).map_err(Failure::runtime)?;
    write_file(&dir.join("umask_distribution.csv"), &buf)?;

    let catalog_path = a.catalog.clone().or_else(|| {
        let p = std::path::PathBuf::from(&report.catalog_source);
        p.is_file().then_some(p)
    });
    let catalog = match &catalog_path {
        Some(p) => Some(EventCatalog::load(p).map_err(Failure::runtime)?),
        None => None,
    };
    let masks = infer_all(&report, catalog.as_ref());
    let mut buf = Vec::new();
    write_masks_csv(&masks, &mut buf).map_err(Failure::runtime)?;
    write_file(&dir.join("relevance_masks.csv"), &buf)?;

    println!("{:<10} {:<6} {:>7}  consistent", "event", "mask", "umasks");
    let groups = pmu_prospector::umask::group_hidden_by_event_code(&report);
    for m in &masks {
        println!(
            "0x{:02X}       0x{:02X}   {:>7}  {}",
            m.event_code,
            m.mask,
            groups.get(&m.event_code).map_or(0, Vec::len),
            if m.consistent { "yes" } else { "no" }
        );
    }
    Ok(())
}
