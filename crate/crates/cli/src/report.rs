use std::fmt::Write as _;

use pmu_prospector::collector::{ScanReport, SummaryRow};
use pmu_prospector::detection::read_screening_csv;
use pmu_prospector::plot::{sample_rows, write_channel_accuracy, write_metric_scatter, CHANNEL_SAMPLE, DETECTION_SAMPLE};
use pmu_prospector::side_channel::{read_channel_screen_csv, ChannelRunReport};
use pmu_prospector::umask::{emit_distribution, write_distribution_csv};

use crate::{read_file, write_file, Ctx, Failure, Outcome, ReportArgs};

/// The collector results table, one row per report.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let head = ["Microarchitecture", "Total Instructions", "Executed Successfully", "Hidden Events"];
    let first = rows
        .iter()
        .map(|r| r.microarchitecture.len())
        .chain([head[0].len()])
        .max()
        .unwrap_or(0);
    let mut s = format!("{:<first$}  {}  {}  {}\n", head[0], head[1], head[2], head[3]);
    for r in rows {
        let _ = writeln!(
            s,
            "{:<first$}  {:>w1$}  {:>w2$}  {:>w3$}",
            r.microarchitecture,
            r.total_instructions,
            r.executed_success,
            r.hidden_events,
            w1 = head[1].len(),
            w2 = head[2].len(),
            w3 = head[3].len(),
        );
    }
    s
}

pub(crate) fn report(ctx: &Ctx, a: ReportArgs) -> Outcome {
    let bytes = read_file(&a.input)?;
    let text = String::from_utf8(bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", a.input.display())))?;
    let dir = a.plot_dir.unwrap_or_else(|| ctx.output_dir.clone());
    let seed = ctx.seed();
    let bad = |e: &dyn std::fmt::Display| Failure::Runtime(format!("{}: {e}", a.input.display()));
    let header = text.lines().next().unwrap_or("").trim();

    let summary = if header.starts_with('{') {
        if let Ok(report) = ScanReport::from_json(&text) {
            let mut buf = Vec::new();
            write_distribution_csv(&emit_distribution(&report), &mut buf).map_err(Failure::runtime)?;
            write_file(&dir.join("umask_distribution.csv"), &buf)?;
            summary_table(&[report.summary()])
        } else {
            let r: ChannelRunReport = serde_json::from_str(&text).map_err(|e| bad(&e))?;
            format!(
                "attack {}  selector {}  iterations {}\nbytes {}  error rate {:.4}  throughput {:.2} Bps  low-confidence bytes {}\n",
                r.attack.as_str(),
                r.selector,
                r.iterations,
                r.recovered.len() / 2,
                r.error_rate,
                r.throughput_bps,
                r.low_confidence_positions.len()
            )
        }
    } else if header == "selector,accuracy,precision,recall,f1,auc,passed" {
        let rows = read_screening_csv(text.as_bytes()).map_err(|e| bad(&e))?;
        let sampled = sample_rows(&rows, DETECTION_SAMPLE, seed, "plot-detection");
        let mut buf = Vec::new();
        write_metric_scatter(&sampled, &mut buf).map_err(Failure::runtime)?;
        write_file(&dir.join("detection_metrics_sample.csv"), &buf)?;
        let passed: Vec<_> = rows.iter().filter(|r| r.passed).collect();
        let mut s = format!("{} selectors screened, {} passed\n", rows.len(), passed.len());
        if !passed.is_empty() {
            s.push_str("selector  accuracy  f1      auc\n");
            for r in passed {
                let _ = writeln!(s, "{}    {:.4}    {:.4}  {:.4}", r.selector, r.accuracy, r.f1, r.auc);
            }
        }
        s
    } else if header == "selector,accuracy,passed" {
        let rows = read_channel_screen_csv(text.as_bytes()).map_err(|e| bad(&e))?;
        let pairs: Vec<_> = rows.iter().map(|r| (r.selector, r.accuracy)).collect();
        let sampled = sample_rows(&pairs, CHANNEL_SAMPLE, seed, "plot-channel");
        let mut buf = Vec::new();
        write_channel_accuracy(&sampled, &mut buf).map_err(Failure::runtime)?;
        write_file(&dir.join("channel_accuracy_sample.csv"), &buf)?;
        format!(
            "{} selectors tried, {} with accuracy >= 0.80\n",
            rows.len(),
            rows.iter().filter(|r| r.passed).count()
        )
    } else {
        return Err(Failure::Runtime(format!(
            "{}: not a scan report, screening file or channel result",
            a.input.display()
        )));
    };

    print!("{summary}");
    if let Some(out) = a.out {
        write_file(&out, summary.as_bytes())?;
    }
    Ok(())
}
