use std::collections::BTreeMap;

use serde::Serialize;

use pmu_prospector::backend::SimBackend;
use pmu_prospector::detection::{
    build_dataset, compute_metrics, evaluate_selector, read_dataset_csv, screen, train, write_dataset_csv,
    write_screening_csv, AttackName, LabeledDataset, LogisticModel, MetricsReport, ScreenCriteria, ScreeningRow,
    TrainConfig,
};
use pmu_prospector::EventSelector;

use crate::{par_map, read_file, write_file, Ctx, DetectCommand, Failure, Outcome};

const DEFAULT_SAMPLES: usize = 2000;

fn attack(ctx: &Ctx, flag: Option<AttackName>) -> Result<AttackName, Failure> {
    if let Some(a) = flag {
        return Ok(a);
    }
    match &ctx.file.attack {
        Some(name) => AttackName::parse(name).ok_or_else(|| Failure::Usage(format!("config: unknown attack `{name}`"))),
        None => Err(Failure::Usage("--attack is required".into())),
    }
}

fn samples(ctx: &Ctx, flag: Option<usize>) -> Result<usize, Failure> {
    match flag.or(ctx.file.samples).unwrap_or(DEFAULT_SAMPLES) {
        0 => Err(Failure::Usage("--samples must be at least 1".into())),
        n => Ok(n),
    }
}

#[derive(Serialize)]
struct TrainOutput {
    selector: Option<EventSelector>,
    model: LogisticModel,
    epochs: usize,
    converged: bool,
    train_samples: usize,
    test_samples: usize,
    metrics: MetricsReport,
    passed: bool,
}

pub(crate) fn dispatch(ctx: &Ctx, cmd: DetectCommand) -> Outcome {
    ctx.require_sim("detect")?;
    match cmd {
        DetectCommand::Collect {
            attack: a,
            selector,
            samples: n,
            out,
        } => {
            let attack = attack(ctx, a)?;
            let n = samples(ctx, n)?;
            let mut backend = SimBackend::new(ctx.sim_model()?);
            let ds = build_dataset(selector, attack, n, &mut backend, ctx.seed()).map_err(Failure::runtime)?;
            let mut buf = Vec::new();
            write_dataset_csv(&ds.samples, &mut buf).map_err(Failure::runtime)?;
            let out = ctx.out_path(out, "dataset.csv");
            write_file(&out, &buf)?;
            let (neg, pos) = ds.class_counts();
            println!("{selector} {}: {neg} benign + {pos} attack samples -> {}", attack.as_str(), out.display());
            Ok(())
        }
        DetectCommand::Train { data, selector, out } => {
            let samples = read_dataset_csv(read_file(&data)?.as_slice()).map_err(|e| Failure::Runtime(format!("{}: {e}", data.display())))?;
            let ds = LabeledDataset {
                selector: selector.unwrap_or_default(),
                samples,
                split_seed: ctx.seed(),
            };
            let t = train(&ds, &TrainConfig::default()).map_err(Failure::runtime)?;
            let metrics = compute_metrics(&t.model, &t.split.test, 0.5).map_err(Failure::runtime)?;
            let passed = ScreenCriteria::default().passes(&metrics);
            let output = TrainOutput {
                selector,
                model: t.model,
                epochs: t.epochs,
                converged: t.converged,
                train_samples: t.split.train.len(),
                test_samples: t.split.test.len(),
                metrics,
                passed,
            };
            let mut json = serde_json::to_string_pretty(&output).map_err(Failure::runtime)?;
            json.push('\n');
            let out = ctx.out_path(out, "model.json");
            write_file(&out, json.as_bytes())?;
            println!(
                "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  auc {:.4}  screen {}",
                metrics.accuracy,
                metrics.precision,
                metrics.recall,
                metrics.f1,
                metrics.auc,
                if passed { "pass" } else { "fail" }
            );
            Ok(())
        }
        DetectCommand::Screen {
            attack: a,
            samples: n,
            report,
            selectors,
            out,
            f1_band,
            exclude_perfect,
        } => {
            let attack = attack(ctx, a)?;
            let n = samples(ctx, n)?;
            let mut targets: Vec<EventSelector> = selectors;
            if let Some(path) = &report {
                let r = pmu_prospector::collector::load_report(path).map_err(Failure::runtime)?;
                targets.extend(r.hidden_selectors());
            }
            targets.sort();
            targets.dedup();
            if targets.is_empty() {
                return Err(Failure::Usage("detect screen needs --report or --selectors".into()));
            }
            let model = ctx.sim_model()?;
            let seed = ctx.seed();
            let config = TrainConfig::default();
            let results = par_map(&targets, ctx.jobs, |sel| {
                let mut backend = SimBackend::new(model.clone());
                evaluate_selector(*sel, attack, n, &mut backend, seed, &config).map(|o| o.metrics)
            });
            let mut reports = BTreeMap::new();
            for (sel, r) in targets.iter().zip(results) {
                reports.insert(*sel, r.map_err(|e| Failure::Runtime(format!("{sel}: {e}")))?);
            }
            let criteria = ScreenCriteria {
                exclude_perfect,
                f1_band: f1_band.into(),
                ..ScreenCriteria::default()
            };
            let passed = screen(&reports, &criteria);
            let rows: Vec<ScreeningRow> = reports
                .iter()
                .map(|(s, m)| ScreeningRow::new(*s, m, passed.binary_search(s).is_ok()))
                .collect();
            let mut buf = Vec::new();
            write_screening_csv(&rows, &mut buf).map_err(Failure::runtime)?;
            let out = ctx.out_path(out, "screening.csv");
            write_file(&out, &buf)?;
            println!(
                "{}: {} of {} selectors pass the screen -> {}",
                attack.as_str(),
                passed.len(),
                rows.len(),
                out.display()
            );
            Ok(())
        }
    }
}
