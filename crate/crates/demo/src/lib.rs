//! In-browser playground over the simulated PMU: relevance-mask inference,
//! counter side-channel recovery and single-event attack detection.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pmu_prospector::backend::{SimBackend, SimEventFamily, SimModel};
use pmu_prospector::corpus::synthetic;
use pmu_prospector::corpus::SuppressionMode;
use pmu_prospector::detection::{build_dataset, evaluate_dataset, AttackName, ScreenCriteria, TrainConfig};
use pmu_prospector::side_channel::{recover_secret, AttackKind, CostModel, GadgetSpec, Victim};
use pmu_prospector::umask::{infer_relevance_mask, mask_predicts, RelevanceObservation};
use pmu_prospector::EventSelector;

fn parse_byte(tok: &str) -> Result<u8, String> {
    let t = tok.trim();
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u8::from_str_radix(hex, 16),
        None => t.parse(),
    };
    parsed.map_err(|_| format!("`{t}` is not a byte"))
}

fn byte_list(text: &str) -> Result<Vec<u8>, String> {
    text.split([',', ' ', '\n'])
        .filter(|t| !t.trim().is_empty())
        .map(parse_byte)
        .collect()
}

#[derive(Serialize)]
struct MaskAnswer {
    mask: String,
    consistent: bool,
    /// For every umask 0..=255, whether the inferred mask lets it count.
    predicted: Vec<bool>,
}

pub fn mask_from_lists(counted: &str, silent: &str) -> Result<String, String> {
    let mut obs: Vec<RelevanceObservation> = Vec::new();
    for (list, flag) in [(counted, true), (silent, false)] {
        for u in byte_list(list)? {
            obs.push(RelevanceObservation {
                event_code: 0,
                umask: u,
                counted: flag,
            });
        }
    }
    if obs.is_empty() {
        return Err("enter at least one umask".into());
    }
    let m = infer_relevance_mask(&obs);
    let answer = MaskAnswer {
        mask: format!("0x{:02X}", m.mask),
        consistent: m.consistent,
        predicted: (0..=255u8).map(|u| mask_predicts(m.mask, u)).collect(),
    };
    Ok(serde_json::to_string(&answer).expect("serializable"))
}

#[derive(Serialize)]
struct ChannelAnswer {
    recovered: String,
    error_rate: f64,
    throughput_bps: f64,
    low_confidence: Vec<usize>,
    confidence: Vec<f64>,
}

pub fn channel_run(secret: &str, attack: &str, iterations: u32, false_fire: f64, seed: u64) -> Result<String, String> {
    let kind = AttackKind::parse(attack).ok_or_else(|| format!("unknown attack `{attack}`"))?;
    if secret.is_empty() {
        return Err("secret is empty".into());
    }
    if !(0.0..=1.0).contains(&false_fire) {
        return Err("false-fire probability must be in [0, 1]".into());
    }
    let family = SimEventFamily::new(0xA2, 0x01, &[synthetic::MEMORY_LOAD], 1).with_false_fire(false_fire);
    let mut model = SimModel::new(seed, vec![family]);
    model.supports_transactional_suppression = true;
    let suppression = match kind {
        AttackKind::Meltdown => SuppressionMode::Transactional,
        _ => SuppressionMode::SignalHandler,
    };
    let victim = Victim {
        secret: secret.as_bytes().to_vec(),
    };
    let spec = GadgetSpec::new(EventSelector::new(0xA2, 0x01), kind, victim.secret.len())
        .with_iterations(iterations)
        .with_suppression(suppression);
    let mut backend = SimBackend::new(model);
    let r = recover_secret(&spec, &victim, &CostModel::default(), &mut backend).map_err(|e| e.to_string())?;
    let m = r.metrics(&victim.secret);
    let answer = ChannelAnswer {
        recovered: r
            .recovered
            .iter()
            .map(|&b| if b.is_ascii_graphic() || b == b' ' { b as char } else { '.' })
            .collect(),
        error_rate: m.error_rate,
        throughput_bps: m.throughput_bps,
        low_confidence: (0..r.low_confidence.len()).filter(|&i| r.low_confidence[i]).collect(),
        confidence: r.confidence,
    };
    Ok(serde_json::to_string(&answer).expect("serializable"))
}

#[derive(Serialize)]
struct DetectionAnswer {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    auc: f64,
    passed: bool,
    epochs: usize,
    benign: Vec<i64>,
    attack: Vec<i64>,
}

pub fn detection_run(attack: &str, noise: f64, samples: usize, seed: u64) -> Result<String, String> {
    let name = AttackName::parse(attack).ok_or_else(|| format!("unknown attack `{attack}`"))?;
    if !(0.0..=1000.0).contains(&noise) {
        return Err("noise must be between 0 and 1000".into());
    }
    let family = SimEventFamily::new(0x77, 0x08, &[synthetic::STRING_IO, synthetic::FLUSH, synthetic::FAULT], 4)
        .with_noise(noise);
    let mut backend = SimBackend::new(SimModel::new(seed, vec![family]));
    let ds = build_dataset(EventSelector::new(0x77, 0x08), name, samples.max(1), &mut backend, seed)
        .map_err(|e| e.to_string())?;
    let outcome = evaluate_dataset(&ds, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let m = outcome.metrics;
    let deltas = |label: u8| ds.samples.iter().filter(|s| s.label == label).map(|s| s.delta).collect();
    let answer = DetectionAnswer {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc: m.auc,
        passed: ScreenCriteria::default().passes(&m),
        epochs: outcome.training.epochs,
        benign: deltas(0),
        attack: deltas(1),
    };
    Ok(serde_json::to_string(&answer).expect("serializable"))
}

/// Infers a relevance mask from comma-separated counted and silent umasks.
#[wasm_bindgen]
pub fn infer_mask(counted: &str, silent: &str) -> Result<String, JsValue> {
    mask_from_lists(counted, silent).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn recover(secret: &str, attack: &str, iterations: u32, false_fire: f64, seed: u32) -> Result<String, JsValue> {
    channel_run(secret, attack, iterations, false_fire, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn detect(attack: &str, noise: f64, samples: u32, seed: u32) -> Result<String, JsValue> {
    detection_run(attack, noise, samples as usize, seed.into()).map_err(|e| JsValue::from_str(&e))
}
