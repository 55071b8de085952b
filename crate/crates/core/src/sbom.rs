//! Timestamped software-installation deltas per service.
//!
//! A periodic [`Scanner`] compares each rollout's package set with the last
//! inspected state and emits one [`InstallEvent`] per changed deployment.
//! The first event recorded for a service also carries its full package set;
//! later ones carry only what changed. [`SbomStore`] is the append-only log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Timestamp;

/// Version token marking a removed package inside a delta.
pub const REMOVED: &str = "∅";

/// Package name -> version; at most one version per name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PackageSet(BTreeMap<String, String>);

impl PackageSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, version: impl Into<String>) -> Option<String> {
        self.0.insert(name.into(), version.into())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    /// Packages whose version changed or that appeared in `next`, plus
    /// removals marked with [`REMOVED`].
    pub fn delta_to(&self, next: &PackageSet) -> PackageSet {
        let mut delta = PackageSet::new();
        for (name, version) in next.iter() {
            if self.get(name) != Some(version) {
                delta.insert(name, version);
            }
        }
        for (name, _) in self.iter() {
            if next.get(name).is_none() {
                delta.insert(name, REMOVED);
            }
        }
        delta
    }

    pub fn apply(&mut self, delta: &PackageSet) {
        for (name, version) in delta.iter() {
            if version == REMOVED {
                self.0.remove(name);
            } else {
                self.insert(name, version);
            }
        }
    }

    /// `name@version` strings in name order.
    pub fn to_specs(&self) -> Vec<String> {
        self.iter().map(|(n, v)| format!("{n}@{v}")).collect()
    }

    pub fn from_specs<S: AsRef<str>>(specs: &[S]) -> Result<Self> {
        let mut set = PackageSet::new();
        for spec in specs {
            let spec = spec.as_ref();
            // Split on the last '@' so scoped names like `@scope/pkg@1.0` work.
            let (name, version) = spec
                .rsplit_once('@')
                .filter(|(n, v)| !n.is_empty() && !v.is_empty())
                .ok_or_else(|| Error::InvalidInstall(format!("malformed package spec `{spec}`")))?;
            if set.insert(name, version).is_some() {
                return Err(Error::InvalidInstall(format!("package `{name}` listed twice")));
            }
        }
        Ok(set)
    }
}

impl<N: Into<String>, V: Into<String>> FromIterator<(N, V)> for PackageSet {
    fn from_iter<I: IntoIterator<Item = (N, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(n, v)| (n.into(), v.into())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct InstallRecord {
    service: String,
    ts: Timestamp,
    delta: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    full: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallEvent {
    pub service: String,
    pub ts: Timestamp,
    pub delta: PackageSet,
    /// Complete package set after this deployment; only on a service's first
    /// recorded event.
    pub full_snapshot: Option<PackageSet>,
}

impl InstallEvent {
    pub fn to_line(&self) -> String {
        let rec = InstallRecord {
            service: self.service.clone(),
            ts: self.ts,
            delta: self.delta.to_specs(),
            full: self.full_snapshot.as_ref().map(PackageSet::to_specs),
        };
        serde_json::to_string(&rec).expect("install record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let rec: InstallRecord = serde_json::from_str(line)?;
        Ok(Self {
            service: rec.service,
            ts: rec.ts,
            delta: PackageSet::from_specs(&rec.delta)?,
            full_snapshot: rec.full.as_deref().map(PackageSet::from_specs).transpose()?,
        })
    }
}

/// One observed deployment of a service and the packages it runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rollout {
    pub service: String,
    pub ts: Timestamp,
    pub packages: PackageSet,
}

/// Periodic SBOM inspection state: the last inspected package set of every
/// service and which services already have a recorded entry.
#[derive(Debug, Clone, Default)]
pub struct Scanner {
    snapshot: BTreeMap<String, PackageSet>,
    recorded: BTreeSet<String>,
}

impl Scanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start from an already-inspected state (nothing recorded yet).
    pub fn with_baseline(snapshot: BTreeMap<String, PackageSet>) -> Self {
        Self {
            snapshot,
            recorded: BTreeSet::new(),
        }
    }

    pub fn snapshot(&self) -> &BTreeMap<String, PackageSet> {
        &self.snapshot
    }

    /// Inspect the rollouts seen in the interval ending at `now`. Returns one
    /// event per deployment whose package set differs from the previous
    /// state of its service, in deployment order.
    pub fn scan(&mut self, rollouts: &[Rollout], now: Timestamp) -> Result<Vec<InstallEvent>> {
        if let Some(r) = rollouts.iter().find(|r| r.ts > now) {
            return Err(Error::InvalidInstall(format!(
                "deployment of `{}` at t={} is after scan time {now}",
                r.service, r.ts
            )));
        }
        let mut ordered: Vec<&Rollout> = rollouts.iter().collect();
        ordered.sort_by(|a, b| (a.ts, &a.service).cmp(&(b.ts, &b.service)));

        let mut events = Vec::new();
        for r in ordered {
            let prev = self.snapshot.get(&r.service).cloned().unwrap_or_default();
            let delta = prev.delta_to(&r.packages);
            if delta.is_empty() {
                continue;
            }
            let first = self.recorded.insert(r.service.clone());
            events.push(InstallEvent {
                service: r.service.clone(),
                ts: r.ts,
                delta,
                full_snapshot: first.then(|| r.packages.clone()),
            });
            self.snapshot.insert(r.service.clone(), r.packages.clone());
        }
        Ok(events)
    }
}

/// Append-only install log, optionally backed by a line-delimited file.
#[derive(Debug, Default)]
pub struct SbomStore {
    path: Option<PathBuf>,
    events: Vec<InstallEvent>,
}

impl SbomStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a log file. A partial trailing line left by an
    /// interrupted append is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self {
            path: Some(path.clone()),
            events: Vec::new(),
        };
        if !path.exists() {
            File::create(&path)?;
            return Ok(store);
        }
        let text = std::fs::read_to_string(&path)?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            OpenOptions::new().write(true).open(&path)?.set_len(complete as u64)?;
        }
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ev = InstallEvent::from_line(line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            store.events.push(ev);
        }
        Ok(store)
    }

    /// Parse a whole install log held in memory.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut store = Self::in_memory();
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                InstallEvent::from_line(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        store.record(&events)?;
        Ok(store)
    }

    pub fn events(&self) -> &[InstallEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn has_entry(&self, service: &str) -> bool {
        self.events.iter().any(|e| e.service == service)
    }

    /// Validate and append. Exact duplicates of stored events are skipped.
    /// Returns how many events were appended.
    pub fn record(&mut self, events: &[InstallEvent]) -> Result<usize> {
        let mut fresh: Vec<InstallEvent> = Vec::new();
        for ev in events {
            if ev.delta.is_empty() {
                return Err(Error::InvalidInstall(format!("empty delta for `{}` at t={}", ev.service, ev.ts)));
            }
            let existing = self
                .events
                .iter()
                .chain(&fresh)
                .find(|e| e.service == ev.service && e.ts == ev.ts);
            if let Some(e) = existing {
                if e.delta == ev.delta {
                    continue;
                }
                return Err(Error::InvalidInstall(format!(
                    "conflicting events for `{}` at t={}",
                    ev.service, ev.ts
                )));
            }
            let seen = self.has_entry(&ev.service) || fresh.iter().any(|e| e.service == ev.service);
            match (seen, ev.full_snapshot.is_some()) {
                (true, true) => {
                    return Err(Error::InvalidInstall(format!(
                        "`{}` already has an entry; full snapshot not allowed at t={}",
                        ev.service, ev.ts
                    )))
                }
                (false, false) => {
                    return Err(Error::InvalidInstall(format!(
                        "first entry for `{}` must carry a full snapshot",
                        ev.service
                    )))
                }
                _ => {}
            }
            fresh.push(ev.clone());
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().append(true).open(path)?;
            let mut buf = String::new();
            for ev in &fresh {
                buf.push_str(&ev.to_line());
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
            f.sync_data()?;
        }
        let n = fresh.len();
        self.events.extend(fresh);
        Ok(n)
    }

    /// Events of `services` with `t_start <= ts <= t_end`, ascending by time.
    pub fn query_window(&self, services: &BTreeSet<String>, t_start: Timestamp, t_end: Timestamp) -> Vec<InstallEvent> {
        let mut out: Vec<InstallEvent> = self
            .events
            .iter()
            .filter(|e| services.contains(&e.service) && (t_start..=t_end).contains(&e.ts))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.ts, &a.service).cmp(&(b.ts, &b.service)));
        out
    }

    /// Every stored event in timestamp order.
    pub fn ordered(&self) -> Vec<InstallEvent> {
        let mut out = self.events.clone();
        out.sort_by(|a, b| (a.ts, &a.service).cmp(&(b.ts, &b.service)));
        out
    }

    /// Rebuild a service's current package set from its snapshot and deltas.
    pub fn replay(&self, service: &str) -> Option<PackageSet> {
        let mut events: Vec<&InstallEvent> = self.events.iter().filter(|e| e.service == service).collect();
        events.sort_by_key(|e| e.ts);
        let (first, rest) = events.split_first()?;
        let mut state = first.full_snapshot.clone()?;
        for ev in rest {
            state.apply(&ev.delta);
        }
        Some(state)
    }

    pub fn write_lines<W: Write>(&self, mut w: W) -> Result<()> {
        for ev in &self.events {
            writeln!(w, "{}", ev.to_line())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pkgs(entries: &[(&str, &str)]) -> PackageSet {
        entries.iter().copied().collect()
    }

    fn base_a(curl: &str) -> PackageSet {
        pkgs(&[("libcurl", curl), ("openssl", "3.0.2"), ("zlib", "1.2.13")])
    }

    #[test]
    fn three_rollouts_two_scans() {
        let mut baseline = BTreeMap::new();
        baseline.insert("A".to_string(), base_a("7.80"));
        let mut scanner = Scanner::with_baseline(baseline);

        // First inspection sees no rollout: no entry.
        assert!(scanner.scan(&[], 100).unwrap().is_empty());

        let r1 = Rollout { service: "A".into(), ts: 150, packages: base_a("7.81") };
        let r2 = Rollout { service: "A".into(), ts: 180, packages: base_a("7.82") };
        let events = scanner.scan(&[r2.clone(), r1.clone()], 200).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].ts, 150);
        assert_eq!(events[0].full_snapshot.as_ref(), Some(&base_a("7.81")));
        assert_eq!(events[0].delta, pkgs(&[("libcurl", "7.81")]));
        assert_eq!(events[1].ts, 180);
        assert!(events[1].full_snapshot.is_none());
        assert_eq!(events[1].delta, pkgs(&[("libcurl", "7.82")]));

        let r3 = Rollout { service: "A".into(), ts: 250, packages: base_a("7.83") };
        let events = scanner.scan(&[r3], 300).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].delta, pkgs(&[("libcurl", "7.83")]));
        assert!(events[0].full_snapshot.is_none());
    }

    #[test]
    fn unchanged_inputs_emit_nothing() {
        let mut baseline = BTreeMap::new();
        baseline.insert("A".to_string(), base_a("1"));
        let mut scanner = Scanner::with_baseline(baseline);
        let r = Rollout { service: "A".into(), ts: 10, packages: base_a("1") };
        assert!(scanner.scan(&[r], 20).unwrap().is_empty());
    }

    #[test]
    fn new_service_gets_full_snapshot() {
        let set: PackageSet = (0..10).map(|i| (format!("pkg{i}"), "1.0")).collect();
        let mut scanner = Scanner::new();
        let events = scanner
            .scan(&[Rollout { service: "new".into(), ts: 5, packages: set.clone() }], 5)
            .unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].full_snapshot.as_ref().unwrap().len(), 10);
        assert_eq!(events[0].delta, set);
    }

    #[test]
    fn future_deployment_is_rejected() {
        let mut scanner = Scanner::new();
        let r = Rollout { service: "A".into(), ts: 500, packages: base_a("1") };
        assert!(matches!(scanner.scan(&[r], 100), Err(Error::InvalidInstall(_))));
    }

    #[test]
    fn rescan_is_idempotent() {
        let mut scanner = Scanner::new();
        let r = vec![Rollout { service: "A".into(), ts: 5, packages: base_a("1") }];
        assert_eq!(scanner.scan(&r, 10).unwrap().len(), 1);
        assert!(scanner.scan(&r, 10).unwrap().is_empty());
    }

    #[test]
    fn removal_uses_reserved_token() {
        let before = pkgs(&[("a", "1"), ("b", "2")]);
        let after = pkgs(&[("a", "1")]);
        let delta = before.delta_to(&after);
        assert_eq!(delta.get("b"), Some(REMOVED));
        let mut replay = before.clone();
        replay.apply(&delta);
        assert_eq!(replay, after);
    }

    fn ev(service: &str, ts: Timestamp, delta: &[(&str, &str)], full: bool) -> InstallEvent {
        let delta = pkgs(delta);
        InstallEvent {
            service: service.into(),
            ts,
            full_snapshot: full.then(|| delta.clone()),
            delta,
        }
    }

    #[test]
    fn record_rules() {
        let mut store = SbomStore::in_memory();
        let a = ev("A", 100, &[("x", "1")], true);
        assert_eq!(store.record(&[a.clone()]).unwrap(), 1);
        assert_eq!(store.record(&[a.clone()]).unwrap(), 0);
        assert_eq!(store.len(), 1);
        let second_full = ev("A", 200, &[("x", "2")], true);
        assert!(matches!(store.record(&[second_full]), Err(Error::InvalidInstall(_))));
        let first_without = ev("B", 150, &[("y", "1")], false);
        assert!(store.record(&[first_without]).is_err());
        store.record(&[ev("B", 150, &[("y", "1")], true), ev("A", 200, &[("x", "2")], false)]).unwrap();

        let only_a: BTreeSet<String> = ["A".to_string()].into();
        let got = store.query_window(&only_a, 0, 300);
        assert_eq!(got.iter().map(|e| e.ts).collect::<Vec<_>>(), vec![100, 200]);
        assert!(store.query_window(&BTreeSet::new(), 0, 300).is_empty());
        let b: BTreeSet<String> = ["B".to_string()].into();
        assert_eq!(store.query_window(&b, 150, 150).len(), 1);
    }

    #[test]
    fn line_format_is_bit_exact() {
        let line = r#"{"service":"home-timeline-service","ts":3600,"delta":["@scope/pkg@2.0","pyyaml@6.0.1"],"full":["@scope/pkg@2.0","pyyaml@6.0.1","requests@2.31"]}"#;
        assert_eq!(InstallEvent::from_line(line).unwrap().to_line(), line);
        let removal = r#"{"service":"s","ts":30,"delta":["gone@∅"]}"#;
        assert_eq!(InstallEvent::from_line(removal).unwrap().to_line(), removal);
    }

    #[test]
    fn thousand_events_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("installs.jsonl");
        let mut store = SbomStore::open(&path).unwrap();
        let mut events = Vec::new();
        for i in 0..1000i64 {
            let service = format!("svc{}", i % 7);
            let full = i < 7;
            // Deliberately appended out of time order.
            let ts = (1000 - i) * 30;
            let mut e = ev(&service, ts, &[("pkg", &i.to_string())], full);
            if !full {
                e.full_snapshot = None;
            }
            events.push(e);
        }
        store.record(&events).unwrap();
        drop(store);

        let reopened = SbomStore::open(&path).unwrap();
        assert_eq!(reopened.len(), 1000);
        let ordered = reopened.ordered();
        assert!(ordered.windows(2).all(|w| w[0].ts <= w[1].ts));
    }

    #[test]
    fn partial_trailing_line_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let good = ev("A", 30, &[("x", "1")], true).to_line();
        std::fs::write(&path, format!("{good}\n{{\"service\":\"A\",\"ts\":6")).unwrap();
        let store = SbomStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{good}\n"));
    }

    fn arb_set() -> impl Strategy<Value = PackageSet> {
        proptest::collection::btree_map("[a-e]", "[0-3]", 0..5).prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn replay_reconstructs_state(states in proptest::collection::vec(arb_set(), 1..12)) {
            let mut scanner = Scanner::new();
            let mut store = SbomStore::in_memory();
            for (i, set) in states.iter().enumerate() {
                let ts = i as Timestamp * 60;
                let events = scanner.scan(&[Rollout { service: "svc".into(), ts, packages: set.clone() }], ts).unwrap();
                store.record(&events).unwrap();
            }
            let expected = scanner.snapshot().get("svc").cloned();
            match store.replay("svc") {
                Some(state) => prop_assert_eq!(Some(state), expected),
                None => prop_assert!(expected.is_none() || expected == Some(PackageSet::new())),
            }
            let all: BTreeSet<String> = ["svc".to_string()].into();
            let q = store.query_window(&all, 0, 10_000);
            prop_assert!(q.windows(2).all(|w| w[0].ts < w[1].ts));
        }
    }
}
