//! Umask relevance inference.
//!
//! Hidden selectors tend to come in regular umask patterns per event code,
//! e.g. every odd umask. The working hypothesis is a single relevance mask
//! `m` per event code: a umask counts iff `umask & m != 0`, with `m == 0`
//! meaning "counts for every umask". This module recovers `m` from
//! observations, or reports that no single mask explains them.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::catalog::EventCatalog;
use crate::collector::ScanReport;
use crate::event_space::EventSelector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelevanceObservation {
    pub event_code: u8,
    pub umask: u8,
    pub counted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceMask {
    pub event_code: u8,
    pub mask: u8,
    pub consistent: bool,
}

pub fn mask_predicts(mask: u8, umask: u8) -> bool {
    mask == 0 || umask & mask != 0
}

/// Infers the relevance mask for one event code.
///
/// Any non-zero consistent mask must avoid every bit of every non-counting
/// umask, so it is a subset of `allowed = !(OR of non-counting umasks)`.
/// `allowed` itself is then the consistent mask with the most bits whenever
/// any non-zero mask is consistent. Mask zero wins only when every
/// observation counted and no non-zero mask fits (umask 0x00 counted).
/// When nothing fits, the single bit agreeing with the most observations is
/// returned with `consistent = false`, lowest bit on ties.
///
/// # Panics
///
/// Panics if `observations` is empty.
pub fn infer_relevance_mask(observations: &[RelevanceObservation]) -> RelevanceMask {
    assert!(!observations.is_empty(), "relevance inference needs at least one observation");
    let event_code = observations[0].event_code;
    let silent = observations.iter().filter(|o| !o.counted).fold(0u8, |acc, o| acc | o.umask);
    let allowed = !silent;
    let counted = || observations.iter().filter(|o| o.counted);

    if allowed != 0 && counted().all(|o| o.umask & allowed != 0) {
        return RelevanceMask {
            event_code,
            mask: allowed,
            consistent: true,
        };
    }
    if counted().count() == observations.len() {
        return RelevanceMask {
            event_code,
            mask: 0,
            consistent: true,
        };
    }

    let best = (0..8)
        .map(|b| 1u8 << b)
        .max_by_key(|m| {
            let agree = observations
                .iter()
                .filter(|o| mask_predicts(*m, o.umask) == o.counted)
                .count();
            // lowest bit wins ties: larger key for smaller mask
            (agree, std::cmp::Reverse(*m))
        })
        .expect("eight candidates");
    RelevanceMask {
        event_code,
        mask: best,
        consistent: false,
    }
}

/// Observations for every event code present in `report`: each hidden umask
/// counts, every other umask of that code is treated as silent. Umasks the
/// catalog documents never enter the hidden set, so they are left out
/// rather than counted as silent.
pub fn observations_from_report(
    report: &ScanReport,
    catalog: Option<&EventCatalog>,
) -> BTreeMap<u8, Vec<RelevanceObservation>> {
    group_hidden_by_event_code(report)
        .into_iter()
        .map(|(code, umasks)| {
            let obs = (0..=255u8)
                .filter(|u| !catalog.is_some_and(|c| c.contains(EventSelector::new(code, *u))))
                .map(|u| RelevanceObservation {
                    event_code: code,
                    umask: u,
                    counted: umasks.binary_search(&u).is_ok(),
                })
                .collect();
            (code, obs)
        })
        .collect()
}

pub fn infer_all(report: &ScanReport, catalog: Option<&EventCatalog>) -> Vec<RelevanceMask> {
    observations_from_report(report, catalog)
        .values()
        .map(|obs| infer_relevance_mask(obs))
        .collect()
}

/// Hidden umasks per event code, ascending.
pub fn group_hidden_by_event_code(report: &ScanReport) -> BTreeMap<u8, Vec<u8>> {
    let mut groups: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
    for s in report.hidden_selectors() {
        groups.entry(s.event_code).or_default().push(s.umask);
    }
    for v in groups.values_mut() {
        v.sort_unstable();
    }
    groups
}

/// `(event_code, umask)` scatter rows sorted by event code, then umask.
pub fn emit_distribution(report: &ScanReport) -> Vec<(u8, u8)> {
    group_hidden_by_event_code(report)
        .into_iter()
        .flat_map(|(code, umasks)| umasks.into_iter().map(move |u| (code, u)))
        .collect()
}

pub fn write_distribution_csv(rows: &[(u8, u8)], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["event_code", "umask"])?;
    for (code, umask) in rows {
        w.write_record([format!("0x{code:02X}"), format!("0x{umask:02X}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_masks_csv(masks: &[RelevanceMask], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["event_code", "mask", "consistent"])?;
    for m in masks {
        w.write_record([
            format!("0x{:02X}", m.event_code),
            format!("0x{:02X}", m.mask),
            m.consistent.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
