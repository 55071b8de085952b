//! Service-level call graph from trace spans, and the critical-path filter.
//!
//! An edge `caller -> callee` is added whenever a span's parent belongs to a
//! different service. The critical path of a service is the service itself
//! together with everything upstream (transitive callers) and downstream
//! (transitive callees) of it.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::sbom::InstallEvent;
use crate::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub trace_id: String,
    pub span_id: String,
    pub parent_span_id: Option<String>,
    pub service: String,
    pub start: Timestamp,
    /// Seconds.
    pub duration: f64,
}

pub fn read_spans<R: BufRead>(reader: R) -> Result<Vec<Span>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_spans<W: Write>(mut w: W, spans: &[Span]) -> Result<()> {
    for s in spans {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    nodes: BTreeSet<String>,
    edges: BTreeSet<(String, String)>,
    #[serde(skip)]
    children: BTreeMap<String, BTreeSet<String>>,
    #[serde(skip)]
    parents: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct GraphBuild {
    pub graph: CausalGraph,
    /// Spans whose parent could not be found in their trace.
    pub skipped_spans: usize,
}

impl CausalGraph {
    /// Build and validate a DAG from explicit nodes and edges.
    pub fn from_edges<I, S>(nodes: I, edges: &[(S, S)]) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = CausalGraph::default();
        for n in nodes {
            g.add_node(n.as_ref());
        }
        for (a, b) in edges {
            g.add_edge(a.as_ref(), b.as_ref());
        }
        g.check_acyclic()?;
        Ok(g)
    }

    fn add_node(&mut self, n: &str) {
        self.nodes.insert(n.to_string());
    }

    fn add_edge(&mut self, caller: &str, callee: &str) {
        if caller == callee {
            return;
        }
        self.add_node(caller);
        self.add_node(callee);
        if self.edges.insert((caller.to_string(), callee.to_string())) {
            self.children.entry(caller.to_string()).or_default().insert(callee.to_string());
            self.parents.entry(callee.to_string()).or_default().insert(caller.to_string());
        }
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(String, String)> {
        &self.edges
    }

    pub fn contains(&self, service: &str) -> bool {
        self.nodes.contains(service)
    }

    pub fn callees(&self, service: &str) -> impl Iterator<Item = &String> {
        self.children.get(service).into_iter().flatten()
    }

    pub fn callers(&self, service: &str) -> impl Iterator<Item = &String> {
        self.parents.get(service).into_iter().flatten()
    }

    /// Kahn's algorithm; on failure walks back from a leftover node to name
    /// one concrete cycle.
    fn check_acyclic(&self) -> Result<()> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for (_, b) in &self.edges {
            *indegree.get_mut(b.as_str()).expect("edge endpoint is a node") += 1;
        }
        let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut seen = 0;
        while let Some(n) = queue.pop_front() {
            seen += 1;
            for c in self.callees(n) {
                let d = indegree.get_mut(c.as_str()).expect("callee is a node");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(c);
                }
            }
        }
        if seen == self.nodes.len() {
            return Ok(());
        }
        // Every leftover node has a leftover caller, so walking callers must
        // revisit a node.
        let leftover: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d > 0).map(|(n, _)| *n).collect();
        let mut path: Vec<&str> = vec![leftover.iter().next().copied().expect("cycle leaves nodes")];
        loop {
            let cur = *path.last().expect("nonempty");
            let prev = self
                .callers(cur)
                .map(String::as_str)
                .find(|p| leftover.contains(p))
                .expect("leftover node has a leftover caller");
            if let Some(pos) = path.iter().position(|n| *n == prev) {
                let mut cycle: Vec<String> = path[pos..].iter().rev().map(|s| s.to_string()).collect();
                cycle.push(cycle[0].clone());
                return Err(Error::Cycle(cycle));
            }
            path.push(prev);
        }
    }

    fn reach(&self, start: &str, forward: bool) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start.to_string()]);
        while let Some(n) = queue.pop_front() {
            let next: Vec<&String> = if forward {
                self.callees(&n).collect()
            } else {
                self.callers(&n).collect()
            };
            for m in next {
                if seen.insert(m.clone()) {
                    queue.push_back(m.clone());
                }
            }
        }
        seen
    }

    /// Transitive callees.
    pub fn descendants(&self, service: &str) -> BTreeSet<String> {
        self.reach(service, true)
    }

    /// Transitive callers.
    pub fn ancestors(&self, service: &str) -> BTreeSet<String> {
        self.reach(service, false)
    }

    /// Shortest hop count to every descendant.
    pub fn descendant_hops(&self, service: &str) -> BTreeMap<String, usize> {
        let mut hops = BTreeMap::new();
        let mut queue = VecDeque::from([(service.to_string(), 0usize)]);
        while let Some((n, d)) = queue.pop_front() {
            for c in self.callees(&n) {
                if !hops.contains_key(c) && c != service {
                    hops.insert(c.clone(), d + 1);
                    queue.push_back((c.clone(), d + 1));
                }
            }
        }
        hops
    }

    pub fn critical_path(&self, service: &str) -> Result<BTreeSet<String>> {
        if !self.contains(service) {
            return Err(Error::UnknownService(service.to_string()));
        }
        let mut out = self.ancestors(service);
        out.extend(self.descendants(service));
        out.insert(service.to_string());
        Ok(out)
    }

    /// Restore the adjacency caches after deserialization.
    pub fn reindex(mut self) -> Self {
        let edges = std::mem::take(&mut self.edges);
        self.children.clear();
        self.parents.clear();
        for (a, b) in &edges {
            self.add_edge(a, b);
        }
        self
    }
}

/// Union the per-trace cross-service calls of `spans` into one DAG.
pub fn build_graph(spans: &[Span]) -> Result<GraphBuild> {
    let mut by_id: HashMap<(&str, &str), &Span> = HashMap::with_capacity(spans.len());
    for s in spans {
        by_id.insert((s.trace_id.as_str(), s.span_id.as_str()), s);
    }
    let mut out = GraphBuild::default();
    for s in spans {
        out.graph.add_node(&s.service);
    }
    for s in spans {
        let Some(pid) = &s.parent_span_id else { continue };
        match by_id.get(&(s.trace_id.as_str(), pid.as_str())) {
            Some(parent) => out.graph.add_edge(&parent.service, &s.service),
            None => out.skipped_spans += 1,
        }
    }
    if out.skipped_spans > 0 {
        warn!(skipped = out.skipped_spans, "spans with unresolvable parents skipped");
    }
    out.graph.check_acyclic()?;
    Ok(out)
}

/// Keep the events whose service lies on the critical path, order preserved.
pub fn filter_installs(events: &[InstallEvent], critical: &BTreeSet<String>) -> Vec<InstallEvent> {
    events.iter().filter(|e| critical.contains(&e.service)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sbom::PackageSet;
    use proptest::prelude::*;

    fn span(trace: &str, id: &str, parent: Option<&str>, service: &str) -> Span {
        Span {
            trace_id: trace.into(),
            span_id: id.into(),
            parent_span_id: parent.map(Into::into),
            service: service.into(),
            start: 0,
            duration: 0.01,
        }
    }

    #[test]
    fn single_root_span() {
        let g = build_graph(&[span("t", "1", None, "a")]).unwrap().graph;
        assert_eq!(g.nodes().len(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn same_service_child_adds_no_edge() {
        let g = build_graph(&[span("t", "1", None, "a"), span("t", "2", Some("1"), "a")]).unwrap().graph;
        assert_eq!(g.nodes().len(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn unresolvable_parent_is_tallied() {
        let b = build_graph(&[span("t", "1", None, "a"), span("t", "2", Some("missing"), "b")]).unwrap();
        assert_eq!(b.skipped_spans, 1);
        assert!(b.graph.edges().is_empty());
    }

    #[test]
    fn parent_lookup_is_per_trace() {
        let b = build_graph(&[span("t1", "1", None, "a"), span("t2", "2", Some("1"), "b")]).unwrap();
        assert_eq!(b.skipped_spans, 1);
    }

    #[test]
    fn cycle_is_named() {
        let spans = vec![
            span("t1", "1", None, "a"),
            span("t1", "2", Some("1"), "b"),
            span("t2", "3", None, "b"),
            span("t2", "4", Some("3"), "c"),
            span("t3", "5", None, "c"),
            span("t3", "6", Some("5"), "a"),
        ];
        match build_graph(&spans) {
            Err(Error::Cycle(c)) => {
                assert_eq!(c.first(), c.last());
                assert_eq!(c.len(), 4);
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn chain_and_isolated_node() {
        let g = CausalGraph::from_edges(["a", "b", "c", "z"], &[("a", "b"), ("b", "c")]).unwrap();
        let want: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(g.critical_path("b").unwrap(), want);
        assert_eq!(g.critical_path("z").unwrap(), BTreeSet::from(["z".to_string()]));
        assert!(matches!(g.critical_path("nope"), Err(Error::UnknownService(_))));
        assert_eq!(g.descendant_hops("a"), BTreeMap::from([("b".into(), 1), ("c".into(), 2)]));
    }

    #[test]
    fn filter_installs_keeps_order() {
        let mk = |s: &str, ts| InstallEvent {
            service: s.into(),
            ts,
            delta: [("p", "1")].into_iter().collect::<PackageSet>(),
            full_snapshot: None,
        };
        let events = vec![mk("a", 1), mk("b", 2), mk("a", 3)];
        let crit: BTreeSet<String> = ["a".to_string()].into();
        assert_eq!(filter_installs(&events, &crit).iter().map(|e| e.ts).collect::<Vec<_>>(), vec![1, 3]);
        let all: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        assert_eq!(filter_installs(&events, &all), events);
        assert!(filter_installs(&events, &BTreeSet::new()).is_empty());
    }

    /// Random DAG on n nodes: edges only from lower to higher index.
    fn arb_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..=30).prop_flat_map(|n| {
            let pairs = proptest::collection::vec((0..n, 0..n), 0..(n * 2));
            (Just(n), pairs.prop_map(|v| v.into_iter().filter(|(a, b)| a < b).collect()))
        })
    }

    /// Floyd-Warshall style closure on a boolean matrix.
    fn closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
        let mut r = vec![vec![false; n]; n];
        for &(a, b) in edges {
            r[a][b] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if r[i][k] && r[k][j] {
                        r[i][j] = true;
                    }
                }
            }
        }
        r
    }

    proptest! {
        #[test]
        fn critical_path_matches_closure_and_is_symmetric((n, edges) in arb_dag()) {
            let names: Vec<String> = (0..n).map(|i| format!("s{i:02}")).collect();
            let named: Vec<(String, String)> = edges.iter().map(|(a, b)| (names[*a].clone(), names[*b].clone())).collect();
            let g = CausalGraph::from_edges(names.clone(), &named).unwrap();
            let r = closure(n, &edges);
            for a in 0..n {
                let cp = g.critical_path(&names[a]).unwrap();
                prop_assert!(cp.contains(&names[a]));
                prop_assert!(cp.is_subset(g.nodes()));
                for b in 0..n {
                    let expected = a == b || r[a][b] || r[b][a];
                    prop_assert_eq!(cp.contains(&names[b]), expected);
                    let back = g.critical_path(&names[b]).unwrap();
                    prop_assert_eq!(cp.contains(&names[b]), back.contains(&names[a]));
                }
            }
        }

        #[test]
        fn build_is_permutation_invariant(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut spans = vec![
                span("t1", "1", None, "a"),
                span("t1", "2", Some("1"), "b"),
                span("t1", "3", Some("2"), "c"),
                span("t2", "4", None, "a"),
                span("t2", "5", Some("4"), "d"),
            ];
            let base = build_graph(&spans).unwrap().graph;
            spans.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(build_graph(&spans).unwrap().graph, base);
        }
    }
}
