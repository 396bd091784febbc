use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmu_prospector::backend::{SimBackend, SimEventFamily, SimModel};
use pmu_prospector::collector::{full_scan, ScanConfig};
use pmu_prospector::corpus::synthetic::{self, one_per_class};
use pmu_prospector::corpus::{SimExecutor, SuppressionMode};
use pmu_prospector::detection::{
    auc_rank, build_dataset_with, collect_samples, evaluate_dataset, AttackName, LabeledDataset, MetricsReport,
    ScenarioSpec, ScreenCriteria, TrainConfig, WorkloadProfile,
};
use pmu_prospector::side_channel::{recover_secret, AttackKind, ChannelMetrics, CostModel, GadgetSpec, Victim};
use pmu_prospector::umask::{infer_relevance_mask, mask_predicts, RelevanceObservation};
use pmu_prospector::{enumerate_space, pack_selector, EventCatalog, EventSelector, PerfEvtSelValue};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn event_space() -> Check {
    let t = Instant::now();
    let all: Vec<EventSelector> = enumerate_space().collect();
    let unique: HashSet<u16> = all.iter().map(|s| s.pack()).collect();
    let roundtrip_failures = all
        .iter()
        .filter(|s| EventSelector::unpack(pack_selector(**s)) != **s)
        .count();
    let elapsed = t.elapsed();
    ensure(all.len() == 65536, || format!("{} selectors", all.len()))?;
    ensure(unique.len() == 65536, || format!("{} unique", unique.len()))?;
    ensure(roundtrip_failures == 0, || format!("{roundtrip_failures} roundtrip failures"))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("65536 unique selectors, roundtrip ok, {elapsed:?}"))
}

fn register_image() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E1);
    let mut failures = 0;
    for _ in 0..10_000 {
        let v = PerfEvtSelValue {
            selector: EventSelector::new(rng.random(), rng.random()),
            usr: rng.random(),
            os: rng.random(),
            edge: rng.random(),
            pin_control: rng.random(),
            interrupt_enable: rng.random(),
            any_thread: rng.random(),
            enable: rng.random(),
            invert: rng.random(),
            counter_mask: rng.random(),
        };
        if PerfEvtSelValue::decode(v.render()) != v {
            failures += 1;
        }
    }
    ensure(failures == 0, || format!("{failures} of 10000 failed"))?;
    Ok("10000 random register images roundtrip".into())
}

const TRIGGERS: &[&str] = &[
    synthetic::MEMORY_LOAD,
    synthetic::MEMORY_STORE,
    synthetic::BRANCH,
    synthetic::INDIRECT_BRANCH,
    synthetic::ALU,
    synthetic::FLUSH,
    synthetic::TSX,
    synthetic::VECTOR,
    synthetic::STRING_IO,
    synthetic::FENCE,
];

fn planted_scan() -> Check {
    let t = Instant::now();
    let corpus = one_per_class();
    let catalog = EventCatalog::new("empty");
    let config = ScanConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9A7);
    for round in 0..50u64 {
        let n = rng.random_range(1..=10);
        let mut codes: Vec<u8> = (0..=255).collect();
        codes.shuffle(&mut rng);
        let families: Vec<SimEventFamily> = codes[..n]
            .iter()
            .map(|&code| {
                let mask = if rng.random_bool(0.1) { 0 } else { rng.random() };
                let k = rng.random_range(1..=3);
                let triggers: Vec<&str> = TRIGGERS.choose_multiple(&mut rng, k).copied().collect();
                SimEventFamily::new(code, mask, &triggers, rng.random_range(1..=4))
            })
            .collect();
        let planted: BTreeSet<EventSelector> = families.iter().flat_map(|f| f.active_selectors()).collect();
        let model = SimModel::new(round, families);
        let mut backend = SimBackend::new(model.clone());
        let mut executor = SimExecutor::from_model(&model);
        let report = full_scan(&corpus, &catalog, &mut backend, &mut executor, &config).map_err(|e| e.to_string())?;
        let found: BTreeSet<EventSelector> = report.hidden_selectors().collect();
        let tp = found.intersection(&planted).count();
        ensure(tp == found.len() && tp == planted.len(), || {
            format!(
                "round {round}: planted {}, found {}, true positives {tp}",
                planted.len(),
                found.len()
            )
        })?;
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("50 configurations, precision 1.0 recall 1.0, {elapsed:?}"))
}

fn umask_oracle() -> Check {
    for mask in 0..=255u8 {
        let obs: Vec<_> = (0..=255u8)
            .map(|u| RelevanceObservation {
                event_code: 0x42,
                umask: u,
                counted: mask_predicts(mask, u),
            })
            .collect();
        let got = infer_relevance_mask(&obs);
        ensure(got.mask == mask && got.consistent, || {
            format!("mask 0x{mask:02X} inferred as 0x{:02X}", got.mask)
        })?;
    }
    let odd: Vec<_> = (0..=255u8)
        .map(|u| RelevanceObservation {
            event_code: 0x42,
            umask: u,
            counted: u % 2 == 1,
        })
        .collect();
    let got = infer_relevance_mask(&odd);
    ensure(got.mask == 0x01 && got.consistent, || format!("odd pattern gave 0x{:02X}", got.mask))?;
    Ok("256 masks recovered, odd-umask pattern gives 0x01".into())
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn brute_auc(scores: &[(f64, u8)]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1 == 1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| s.1 == 0).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn metric_exactness() -> Check {
    let mut matrices = 0;
    for total in 1..=20u64 {
        for tp in 0..=total {
            for fp in 0..=total - tp {
                for fn_ in 0..=total - tp - fp {
                    let tn = total - tp - fp - fn_;
                    let m = MetricsReport::from_counts(tp, fp, fn_, tn, None);
                    let acc = (tp + tn) as f64 / total as f64;
                    let prec = ratio(tp, tp + fp);
                    let rec = ratio(tp, tp + fn_);
                    let f1 = match (prec, rec) {
                        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                        _ => None,
                    };
                    let ok = m.accuracy == acc
                        && prec.is_none_or(|p| p == m.precision)
                        && rec.is_none_or(|r| r == m.recall)
                        && f1.is_none_or(|f| (f - m.f1).abs() < 1e-12)
                        && m.undefined.precision == prec.is_none()
                        && m.undefined.recall == rec.is_none()
                        && m.undefined.f1 == f1.is_none()
                        && (f1.is_some() || m.f1 == 0.0)
                        && (prec.is_some() || m.precision == 0.0)
                        && (rec.is_some() || m.recall == 0.0);
                    ensure(ok, || format!("tp={tp} fp={fp} fn={fn_} tn={tn}: {m:?}"))?;
                    matrices += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = rng.random_range(2..=200);
        let coarse = i % 2 == 0;
        let mut scores: Vec<(f64, u8)> = (0..n)
            .map(|_| {
                let s = if coarse {
                    rng.random_range(0..8) as f64 / 8.0
                } else {
                    rng.random::<f64>()
                };
                (s, rng.random_range(0..2))
            })
            .collect();
        scores[0].1 = 0;
        scores[1].1 = 1;
        let (a, b) = (auc_rank(&scores), brute_auc(&scores));
        match (a, b) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => return Err(format!("score set {i}: auc undefined")),
        }
    }
    ensure(worst <= 1e-12, || format!("worst AUC deviation {worst:e}"))?;
    Ok(format!("{matrices} confusion matrices exact, AUC max deviation {worst:e}"))
}

/// Fires on string-io (in every window) and flush (only in the attack
/// primitive), so attack windows sit 8 counts above benign ones. Noise draws
/// are clipped at zero, hence the wide stddev.
fn detection_model(seed: u64) -> SimModel {
    let family = SimEventFamily::new(0x77, 0x08, &[synthetic::STRING_IO, synthetic::FLUSH], 4).with_noise(5.0);
    SimModel::new(seed, vec![family])
}

/// Bayes accuracy of the balanced benign/attack mixture, from empirical
/// histograms of fresh draws.
fn bayes_accuracy(selector: EventSelector, attack: AttackName, n: usize) -> Result<f64, String> {
    let mut backend = SimBackend::new(detection_model(0xBA1E5));
    let mut hist: BTreeMap<i64, [f64; 2]> = BTreeMap::new();
    let half = n / 2;
    let scenarios = [
        (ScenarioSpec::clean(attack), half, 0),
        (ScenarioSpec::no_attack(attack), n - half, 0),
        (ScenarioSpec::attack(attack), n, 1),
    ];
    for (spec, count, class) in scenarios {
        for s in collect_samples(selector, &spec, count, &mut backend, false).map_err(|e| e.to_string())? {
            hist.entry(s.delta).or_default()[class] += 1.0;
        }
    }
    let best: f64 = hist.values().map(|[a, b]| a.max(*b)).sum();
    Ok(best / (2 * n) as f64)
}

fn detection_end_to_end() -> Check {
    let selector = EventSelector::new(0x77, 0x08);
    let attack = AttackName::Meltdown;
    let bayes = bayes_accuracy(selector, attack, 200_000)?;
    ensure(bayes >= 0.95, || format!("profile Bayes accuracy {bayes:.4} below 0.95"))?;

    let profile = WorkloadProfile::for_attack(attack);
    let config = TrainConfig::default();
    let criteria = ScreenCriteria::default();
    let mut backend = SimBackend::new(detection_model(7));
    let dataset = build_dataset_with(selector, attack, Some(&profile), 2000, &mut backend, 7).map_err(|e| e.to_string())?;
    let outcome = evaluate_dataset(&dataset, &config).map_err(|e| e.to_string())?;
    let m = outcome.metrics;
    ensure(outcome.training.split.train.len() == 2800 && outcome.training.split.test.len() == 1200, || {
        "split is not 2800/1200".into()
    })?;
    ensure(m.accuracy >= 0.9, || format!("test accuracy {:.4}", m.accuracy))?;
    ensure(criteria.passes(&m), || format!("screen rejected {m:?}"))?;

    let mut failed = 0;
    for run in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let mut labels: Vec<u8> = dataset.samples.iter().map(|s| s.label).collect();
        labels.shuffle(&mut rng);
        let mut permuted = LabeledDataset {
            split_seed: 1000 + run,
            ..dataset.clone()
        };
        for (s, l) in permuted.samples.iter_mut().zip(labels) {
            s.label = l;
        }
        let o = evaluate_dataset(&permuted, &config).map_err(|e| e.to_string())?;
        if !criteria.passes(&o.metrics) {
            failed += 1;
        }
    }
    ensure(failed >= 95, || format!("permuted labels failed the screen in only {failed}/100 runs"))?;
    Ok(format!(
        "Bayes {bayes:.4}, accuracy {:.4} f1 {:.4} auc {:.4}, permuted runs failing {failed}/100",
        m.accuracy, m.f1, m.auc
    ))
}

fn channel_model(seed: u64, false_fire: f64) -> SimModel {
    let family = SimEventFamily::new(0xA2, 0x01, &[synthetic::MEMORY_LOAD], 1).with_false_fire(false_fire);
    SimModel::new(seed, vec![family])
}

fn mean_error(iterations: u32, runs: u64, secret_len: usize) -> Result<f64, String> {
    let selector = EventSelector::new(0xA2, 0x01);
    let mut total = 0.0;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let victim = Victim {
            secret: (0..secret_len).map(|_| rng.random()).collect(),
        };
        let spec = GadgetSpec::new(selector, AttackKind::Meltdown, secret_len).with_iterations(iterations);
        let mut backend = SimBackend::new(channel_model(run, 0.05));
        let r = recover_secret(&spec, &victim, &CostModel::default(), &mut backend).map_err(|e| e.to_string())?;
        total += r.metrics(&victim.secret).error_rate;
    }
    Ok(total / runs as f64)
}

fn side_channel_exactness() -> Check {
    let model = channel_model(1, 0.0);
    let transmit: Vec<EventSelector> = model.families[0].active_selectors().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EC);
    let victim = Victim {
        secret: (0..64).map(|_| rng.random()).collect(),
    };
    for &sel in &transmit {
        let spec = GadgetSpec::new(sel, AttackKind::Meltdown, 64);
        let mut backend = SimBackend::new(model.clone());
        let r = recover_secret(&spec, &victim, &CostModel::default(), &mut backend).map_err(|e| e.to_string())?;
        let err = r.metrics(&victim.secret).error_rate;
        ensure(err == 0.0, || format!("{sel}: noise-free error rate {err}"))?;
    }
    let e10 = mean_error(10, 1000, 4)?;
    let e20 = mean_error(20, 1000, 4)?;
    ensure(e10 <= 0.05, || format!("mean byte error {e10:.4} at 10 iterations"))?;
    ensure(e20 <= e10, || format!("error at 20 iterations {e20:.4} exceeds {e10:.4}"))?;
    Ok(format!(
        "{} transmit selectors exact, mean error {e10:.4} at 10 iterations, {e20:.4} at 20",
        transmit.len()
    ))
}

fn throughput_accounting() -> Check {
    let cost = CostModel::default();
    let tsx = cost.throughput(AttackKind::Meltdown, SuppressionMode::Transactional, 10);
    let signal = cost.throughput(AttackKind::Meltdown, SuppressionMode::SignalHandler, 10);
    let v2 = cost.throughput(AttackKind::SpectreV2, SuppressionMode::SignalHandler, 10);
    ensure(tsx > signal && signal > v2, || format!("ordering broken: {tsx} {signal} {v2}"))?;
    let within = |got: f64, want: f64| (got / want - 1.0).abs() <= 0.10;
    ensure(within(tsx / signal, 789.86 / 497.49), || format!("tsx/signal {:.4}", tsx / signal))?;
    ensure(within(signal / v2, 497.49 / 148.68), || format!("signal/v2 {:.4}", signal / v2))?;
    ensure(within(tsx / v2, 789.86 / 148.68), || format!("tsx/v2 {:.4}", tsx / v2))?;

    let fixtures: [(&[u8], &[u8], f64, f64, f64); 4] = [
        (b"abcd", b"abcd", 2.0, 2.0, 0.0),
        (b"abcd", b"abXd", 0.5, 8.0, 0.25),
        (&[0, 1, 2, 3, 4, 5, 6, 7], &[7, 6, 5, 4, 3, 2, 1, 0], 4.0, 2.0, 1.0),
        (b"", b"", 1.0, 0.0, 0.0),
    ];
    for (recovered, secret, elapsed, bps, err) in fixtures {
        let m = ChannelMetrics::compute(recovered, secret, elapsed);
        ensure(m.throughput_bps == bps && m.error_rate == err, || {
            format!("fixture {recovered:?}: {m:?}")
        })?;
    }
    Ok(format!("{tsx:.2} : {signal:.2} : {v2:.2} Bps, fixtures exact"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn invoke(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pmu-prospector"))
        .current_dir(dir)
        .env_remove("PMU_PROSPECTOR_CONFIG")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} exited {}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })
}

fn run_session(dir: &Path) -> Result<(), String> {
    let corpus = data("corpus.tsv");
    let catalog = data("catalog.csv");
    let secret = data("secret.bin");
    let (corpus, catalog, secret) = (
        corpus.to_str().unwrap(),
        catalog.to_str().unwrap(),
        secret.to_str().unwrap(),
    );
    let seed = ["--seed", "11"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["scan", "--corpus", corpus, "--catalog", catalog, "--out", "scan.json", "--jobs", "2"],
        vec!["analyze-umask", "--report", "scan.json", "--catalog", catalog, "--out", "umask"],
        vec!["detect", "collect", "--attack", "meltdown", "--selector", "0x016C", "--samples", "300", "--out", "ds.csv"],
        vec!["detect", "train", "--data", "ds.csv", "--selector", "0x016C", "--out", "model.json"],
        vec![
            "detect", "screen", "--attack", "meltdown", "--selectors", "0x016C,0x01A2,0x80B1,0x04C3", "--samples", "300",
            "--out", "screen.csv",
        ],
        vec!["sidechannel", "run", "--attack", "meltdown", "--selector", "0x01A2", "--secret-file", secret, "--out", "run.json"],
        vec!["sidechannel", "screen", "--attack", "meltdown", "--report", "scan.json", "--secret-file", secret, "--out", "cscreen.csv"],
        vec!["report", "--in", "scan.json", "--plot-dir", "plots", "--out", "summary.txt"],
        vec!["report", "--in", "screen.csv", "--plot-dir", "plots"],
        vec!["report", "--in", "cscreen.csv", "--plot-dir", "plots"],
        vec!["report", "--in", "run.json", "--out", "run.txt"],
    ];
    for step in steps {
        let args: Vec<&str> = seed.iter().copied().chain(step).collect();
        invoke(dir, &args)?;
    }
    Ok(())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn reproducibility() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_session(a.path())?;
    run_session(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "runs produced different file sets".into())?;
    for (name, bytes) in &ta {
        ensure(tb[name] == *bytes, || format!("{} differs between runs", name.display()))?;
    }
    Ok(format!("{} output files byte-identical across two runs", ta.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("event space exhaustiveness", event_space),
        ("register image fidelity", register_image),
        ("planted event scan recovery", planted_scan),
        ("umask inference oracle", umask_oracle),
        ("metric exactness", metric_exactness),
        ("detection end to end", detection_end_to_end),
        ("side-channel exactness", side_channel_exactness),
        ("throughput accounting", throughput_accounting),
        ("reproducibility", reproducibility),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
