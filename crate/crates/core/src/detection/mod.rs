//! Per-event transient-execution attack detection.
//!
//! For one selector and one attack, count deltas are collected in three
//! environments: Clean (victim plus unrelated background work), No-Attack
//! (the attacker process runs with its attack primitive removed) and Attack.
//! Attack windows are labeled 1, the rest 0. A single-feature logistic
//! regression is trained on a stratified 70/30 split and scored; events
//! whose metrics clear the screening thresholds are usable detectors.
//!
//! The simulated victim runs on the sibling hyperthread; the attacker and
//! the monitor share the monitored logical core.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{measure_delta, ActivitySink, BackendError, CounterBackend, LogicalContext};
use crate::corpus::synthetic as class;
use crate::event_space::{EventSelector, PerfEvtSelValue};

mod io;
mod metrics;
mod model;

pub use io::{read_dataset_csv, read_screening_csv, write_dataset_csv, write_screening_csv, ScreeningRow};
pub use metrics::{auc_rank, compute_metrics, screen, F1Band, MetricsReport, ScreenCriteria, UndefinedMetrics};
pub use model::{stratified_split, train, LogisticModel, Split, TrainConfig, Training};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("collection failed: {0}")]
    Backend(#[from] BackendError),
    #[error("training split contains a single class")]
    DegenerateData,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("dataset csv: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    SpectreV1,
    SpectreV2,
    Meltdown,
    SpectreV4,
    ZombieloadV1,
    ZombieloadV2,
}

impl AttackName {
    pub const ALL: [AttackName; 6] = [
        AttackName::SpectreV1,
        AttackName::SpectreV2,
        AttackName::Meltdown,
        AttackName::SpectreV4,
        AttackName::ZombieloadV1,
        AttackName::ZombieloadV2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackName::SpectreV1 => "spectre_v1",
            AttackName::SpectreV2 => "spectre_v2",
            AttackName::Meltdown => "meltdown",
            AttackName::SpectreV4 => "spectre_v4",
            AttackName::ZombieloadV1 => "zombieload_v1",
            AttackName::ZombieloadV2 => "zombieload_v2",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub class: String,
    pub context: LogicalContext,
    pub count: u64,
}

fn act(class: &str, context: LogicalContext, count: u64) -> Activity {
    Activity {
        class: class.to_string(),
        context,
        count,
    }
}

/// Instruction-class activity of one sample window, split by role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub victim: Vec<Activity>,
    pub background: Vec<Activity>,
    /// Attacker code that stays when the primitive is commented out.
    pub scaffold: Vec<Activity>,
    pub primitive: Vec<Activity>,
}

impl WorkloadProfile {
    pub fn for_attack(attack: AttackName) -> Self {
        use LogicalContext::{Own, Sibling};
        let primitive = match attack {
            AttackName::SpectreV1 => vec![act(class::BRANCH, Own, 6), act(class::MEMORY_LOAD, Own, 2), act(class::FLUSH, Own, 2)],
            AttackName::SpectreV2 => vec![
                act(class::INDIRECT_BRANCH, Own, 6),
                act(class::MEMORY_LOAD, Own, 2),
                act(class::FLUSH, Own, 2),
            ],
            AttackName::Meltdown => vec![act(class::FAULT, Own, 1), act(class::MEMORY_LOAD, Own, 2), act(class::FLUSH, Own, 2)],
            AttackName::SpectreV4 => vec![
                act(class::MEMORY_STORE, Own, 2),
                act(class::MEMORY_LOAD, Own, 3),
                act(class::FLUSH, Own, 1),
            ],
            AttackName::ZombieloadV1 => vec![act(class::FAULT, Own, 1), act(class::MEMORY_LOAD, Own, 3), act(class::FENCE, Own, 1)],
            AttackName::ZombieloadV2 => vec![act(class::TSX, Own, 2), act(class::MEMORY_LOAD, Own, 3), act(class::FENCE, Own, 1)],
        };
        Self {
            victim: vec![act(class::ALU, Sibling, 20), act(class::MEMORY_LOAD, Sibling, 8), act(class::BRANCH, Sibling, 4)],
            background: vec![act(class::STRING_IO, Own, 4), act(class::MEMORY_STORE, Own, 2)],
            scaffold: vec![act(class::ALU, Own, 10), act(class::BRANCH, Own, 3), act(class::NOP, Own, 2)],
            primitive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Clean,
    NoAttack,
    Attack,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub attack_name: Option<AttackName>,
    pub workload_profile: WorkloadProfile,
}

impl ScenarioSpec {
    pub fn clean(attack: AttackName) -> Self {
        Self {
            kind: ScenarioKind::Clean,
            attack_name: None,
            workload_profile: WorkloadProfile::for_attack(attack),
        }
    }

    pub fn no_attack(attack: AttackName) -> Self {
        Self {
            kind: ScenarioKind::NoAttack,
            attack_name: Some(attack),
            workload_profile: WorkloadProfile::for_attack(attack),
        }
    }

    pub fn attack(attack: AttackName) -> Self {
        Self {
            kind: ScenarioKind::Attack,
            attack_name: Some(attack),
            workload_profile: WorkloadProfile::for_attack(attack),
        }
    }

    pub fn with_profile(mut self, profile: WorkloadProfile) -> Self {
        self.workload_profile = profile;
        self
    }

    pub fn label(&self) -> u8 {
        (self.kind == ScenarioKind::Attack) as u8
    }

    /// Activity of one window, grouped per logical context in a fixed order.
    pub fn window(&self) -> Vec<(LogicalContext, Vec<(&str, u64)>)> {
        let p = &self.workload_profile;
        let mut parts: Vec<&Activity> = p.victim.iter().chain(&p.background).collect();
        if self.kind != ScenarioKind::Clean {
            parts.extend(&p.scaffold);
        }
        if self.kind == ScenarioKind::Attack {
            parts.extend(&p.primitive);
        }
        [LogicalContext::Sibling, LogicalContext::Own]
            .into_iter()
            .map(|ctx| {
                let acts: Vec<(&str, u64)> = parts
                    .iter()
                    .filter(|a| a.context == ctx)
                    .map(|a| (a.class.as_str(), a.count))
                    .collect();
                (ctx, acts)
            })
            .filter(|(_, acts)| !acts.is_empty())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub delta: i64,
    pub label: u8,
}

/// `n` count deltas of `selector`, one per scenario window.
pub fn collect_samples<B>(
    selector: EventSelector,
    scenario: &ScenarioSpec,
    n: usize,
    backend: &mut B,
    any_thread: bool,
) -> Result<Vec<Sample>, DetectionError>
where
    B: CounterBackend + ActivitySink,
{
    if n == 0 {
        return Err(DetectionError::NoSamples);
    }
    let window = scenario.window();
    let value = PerfEvtSelValue::scanning(selector).with_any_thread(any_thread);
    let label = scenario.label();
    (0..n)
        .map(|_| {
            let m = measure_delta(backend, value, |b| {
                for (ctx, acts) in &window {
                    b.retire(*ctx, acts);
                }
            })?;
            Ok(Sample { delta: m.delta, label })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub selector: EventSelector,
    pub samples: Vec<Sample>,
    pub split_seed: u64,
}

impl LabeledDataset {
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - pos, pos)
    }
}

/// Balanced dataset: `per_class` attack samples, and `per_class` benign
/// samples drawn half from Clean and half from No-Attack windows.
pub fn build_dataset<B>(
    selector: EventSelector,
    attack: AttackName,
    per_class: usize,
    backend: &mut B,
    split_seed: u64,
) -> Result<LabeledDataset, DetectionError>
where
    B: CounterBackend + ActivitySink,
{
    build_dataset_with(selector, attack, None, per_class, backend, split_seed)
}

pub fn build_dataset_with<B>(
    selector: EventSelector,
    attack: AttackName,
    profile: Option<&WorkloadProfile>,
    per_class: usize,
    backend: &mut B,
    split_seed: u64,
) -> Result<LabeledDataset, DetectionError>
where
    B: CounterBackend + ActivitySink,
{
    if per_class == 0 {
        return Err(DetectionError::NoSamples);
    }
    let spec = |s: ScenarioSpec| match profile {
        Some(p) => s.with_profile(p.clone()),
        None => s,
    };
    let clean_n = per_class.div_ceil(2);
    let mut samples = collect_samples(selector, &spec(ScenarioSpec::clean(attack)), clean_n, backend, false)?;
    if per_class > clean_n {
        samples.extend(collect_samples(
            selector,
            &spec(ScenarioSpec::no_attack(attack)),
            per_class - clean_n,
            backend,
            false,
        )?);
    }
    samples.extend(collect_samples(selector, &spec(ScenarioSpec::attack(attack)), per_class, backend, false)?);
    Ok(LabeledDataset {
        selector,
        samples,
        split_seed,
    })
}

/// Everything the per-event pipeline produces for one selector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutcome {
    pub selector: EventSelector,
    pub training: Training,
    pub metrics: MetricsReport,
}

/// Collect, split, train and score one selector.
pub fn evaluate_selector<B>(
    selector: EventSelector,
    attack: AttackName,
    per_class: usize,
    backend: &mut B,
    seed: u64,
    config: &TrainConfig,
) -> Result<DetectionOutcome, DetectionError>
where
    B: CounterBackend + ActivitySink,
{
    let dataset = build_dataset(selector, attack, per_class, backend, seed)?;
    evaluate_dataset(&dataset, config)
}

pub fn evaluate_dataset(dataset: &LabeledDataset, config: &TrainConfig) -> Result<DetectionOutcome, DetectionError> {
    let training = train(dataset, config)?;
    let metrics = compute_metrics(&training.model, &training.split.test, 0.5)?;
    Ok(DetectionOutcome {
        selector: dataset.selector,
        training,
        metrics,
    })
}
