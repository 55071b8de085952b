use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyAlert {
    pub pod: String,
    /// End of the window whose detection brought the counter to tau.
    pub fired_at: Timestamp,
    /// Starts of the tau contributing windows, oldest first.
    pub window_trace: Vec<Timestamp>,
}

/// Per-pod consecutive-anomaly counters. After an alert the pod's counter
/// re-arms at zero, so a persisting anomaly alerts again every tau windows.
#[derive(Debug, Clone)]
pub struct TriggerState {
    tau: usize,
    window_duration: Timestamp,
    counters: BTreeMap<String, usize>,
    recent: BTreeMap<String, Vec<Timestamp>>,
}

impl TriggerState {
    pub fn new<I, S>(pods: I, tau: usize, window_duration: Timestamp) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        assert!(tau >= 1, "tau must be at least 1");
        let counters: BTreeMap<String, usize> = pods.into_iter().map(|p| (p.into(), 0)).collect();
        let recent = counters.keys().map(|p| (p.clone(), Vec::new())).collect();
        Self {
            tau,
            window_duration,
            counters,
            recent,
        }
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn counter(&self, pod: &str) -> usize {
        self.counters.get(pod).copied().unwrap_or(0)
    }

    pub fn update(&mut self, pod: &str, anomalous: bool, window_start: Timestamp) -> Option<AnomalyAlert> {
        let count = self.counters.entry(pod.to_string()).or_insert(0);
        let recent = self.recent.entry(pod.to_string()).or_default();
        if !anomalous {
            *count = 0;
            recent.clear();
            return None;
        }
        *count += 1;
        recent.push(window_start);
        if *count < self.tau {
            return None;
        }
        *count = 0;
        Some(AnomalyAlert {
            pod: pod.to_string(),
            fired_at: window_start + self.window_duration,
            window_trace: std::mem::take(recent),
        })
    }
}

/// Indices at which a single pod's flag sequence raises an alert.
pub fn alert_positions(flags: &[bool], tau: usize) -> Vec<usize> {
    let mut state = TriggerState::new(["p"], tau, 0);
    flags
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| state.update("p", f, i as Timestamp).map(|_| i))
        .collect()
}

/// Window-level flags after thresholding: a window counts as anomalous iff it
/// lies in a run of at least `tau` consecutive detections.
pub fn thresholded_flags(flags: &[bool], tau: usize) -> Vec<bool> {
    let mut out = vec![false; flags.len()];
    let mut i = 0;
    while i < flags.len() {
        if !flags[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < flags.len() && flags[i] {
            i += 1;
        }
        if i - start >= tau {
            out[start..i].iter_mut().for_each(|f| *f = true);
        }
    }
    out
}
