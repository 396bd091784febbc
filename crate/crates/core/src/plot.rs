//! Plot-ready CSV emission with seeded down-sampling.

use std::io::Write;

use rand::seq::index;

use crate::detection::ScreeningRow;
use crate::event_space::EventSelector;
use crate::rng;

pub const DETECTION_SAMPLE: usize = 400;
pub const CHANNEL_SAMPLE: usize = 100;

/// Up to `n` rows chosen uniformly without replacement from the substream
/// `name` of `seed`, in their original order. Shorter inputs come back whole.
pub fn sample_rows<T: Clone>(rows: &[T], n: usize, seed: u64, name: &str) -> Vec<T> {
    if rows.len() <= n {
        return rows.to_vec();
    }
    let mut picked = index::sample(&mut rng::stream(seed, name), rows.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| rows[i].clone()).collect()
}

pub fn write_metric_scatter(rows: &[ScreeningRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["selector", "accuracy", "precision", "recall", "f1", "auc"])?;
    for r in rows {
        w.write_record([
            r.selector.to_string(),
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.auc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_channel_accuracy(rows: &[(EventSelector, f64)], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["selector", "accuracy"])?;
    for (s, acc) in rows {
        w.write_record([s.to_string(), acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
