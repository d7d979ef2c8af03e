use serde::Serialize;

use super::MetricsRow;

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 1.0;

/// A window over which the estimator's held-out log-likelihood fell while
/// the generator-side term stayed put.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseEvent {
    /// Iteration of the first row at which the drop is visible.
    pub iteration: u64,
    pub window_start: u64,
    pub holdout_drop: f64,
    pub term2_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub window: usize,
    pub threshold: f64,
    pub events: Vec<CollapseEvent>,
    /// `(iteration, modes covered)` for every row.
    pub coverage: Vec<(u64, Option<usize>)>,
}

impl CollapseReport {
    pub fn flagged(&self) -> bool {
        !self.events.is_empty()
    }
}

/// Scans rows with a held-out log-likelihood. A window of `window` rows is
/// flagged when `logp_eta_holdout` falls by more than `threshold` from its
/// first to its last row while `|Δ term2|` stays within `threshold`.
/// Consecutive flagged windows are reported once.
pub fn diagnose_collapse(rows: &[MetricsRow], window: usize, threshold: f64) -> CollapseReport {
    let window = window.max(2);
    let usable: Vec<(&MetricsRow, f64)> = rows
        .iter()
        .filter_map(|r| r.logp_eta_holdout.map(|lp| (r, lp)))
        .collect();
    let mut events = Vec::new();
    let mut in_event = false;
    for end in window - 1..usable.len() {
        let (first, lp0) = usable[end + 1 - window];
        let (last, lp1) = usable[end];
        let drop = lp0 - lp1;
        let term2_change = last.term2 - first.term2;
        let hit = drop > threshold && term2_change.abs() <= threshold;
        if hit && !in_event {
            events.push(CollapseEvent {
                iteration: last.iteration,
                window_start: first.iteration,
                holdout_drop: drop,
                term2_change,
            });
        }
        in_event = hit;
    }
    CollapseReport {
        window,
        threshold,
        events,
        coverage: rows
            .iter()
            .map(|r| (r.iteration, r.mode_coverage))
            .collect(),
    }
}
