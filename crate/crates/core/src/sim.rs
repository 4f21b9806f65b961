//! Deterministic discrete-event simulation of an instance graph on a modeled
//! cluster.
//!
//! Dispatch is plain list scheduling: ready instances are considered in
//! `(ready_time, instance id)` order and the head of the list blocks the rest
//! when it does not fit. There is no backfilling and no preemption.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphError, InstanceGraph};
use crate::model::{ClusterSpec, JobCategory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("instance graph has a cycle through '{0}'")]
    CycleDetected(String),
    #[error("instance '{id}' needs {demand} nodes but the cluster has {available}")]
    InfeasibleInstance { id: String, demand: u32, available: u32 },
    #[error("instance '{id}' is on queue '{queue}', which the cluster does not define")]
    UnknownQueue { id: String, queue: String },
    #[error("export failed: {0}")]
    Export(String),
}

impl From<GraphError> for SimError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::CycleDetected(id) => SimError::CycleDetected(id),
            other => SimError::CycleDetected(other.to_string()),
        }
    }
}

/// Node pool available to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeLimit {
    /// Every instance gets fresh nodes; capacity never binds.
    Unlimited,
    Nodes(u32),
}

/// Ready-list ordering. Only one policy exists today.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Policy {
    #[default]
    ReadyTimeThenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    Submit,
    Start,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub instance_id: String,
    pub kind: EventKind,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationResult {
    pub events: Vec<SimEvent>,
    pub makespan_s: f64,
    pub critical_path: Vec<String>,
    pub critical_path_s: f64,
    /// Busy time of each node in the pool (the whole cluster when limited,
    /// every node touched when unlimited).
    pub per_node_busy_s: Vec<f64>,
    pub per_category_busy_s: BTreeMap<JobCategory, f64>,
}

impl SimulationResult {
    /// Start and finish time of an instance.
    pub fn interval(&self, id: &str) -> Option<(f64, f64)> {
        let find = |k: EventKind| {
            self.events.iter().find(|e| e.instance_id == id && e.kind == k).map(|e| e.time_s)
        };
        Some((find(EventKind::Start)?, find(EventKind::Finish)?))
    }

    pub fn write_events_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| SimError::Export(e.to_string());
        w.write_record(["instance_id", "kind", "time_s"]).map_err(err)?;
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Submit => "Submit",
                EventKind::Start => "Start",
                EventKind::Finish => "Finish",
            };
            w.write_record([e.instance_id.as_str(), kind, &e.time_s.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| SimError::Export(e.to_string()))
    }

    /// Makespan, critical path and utilization as a JSON document.
    pub fn summary_json(&self) -> serde_json::Value {
        let u = utilization(self);
        serde_json::json!({
            "makespan_s": self.makespan_s,
            "critical_path_s": self.critical_path_s,
            "critical_path": self.critical_path,
            "utilization": { "aggregate": u.aggregate, "per_node": u.per_node },
            "per_category_busy_s": self.per_category_busy_s,
        })
    }
}

/// Longest duration-weighted path. Ties go to the lexicographically smaller
/// instance id, both for the end point and for each predecessor step.
pub fn critical_path(graph: &InstanceGraph) -> Result<(f64, Vec<String>), SimError> {
    let order = graph.topo_order()?;
    let n = graph.len();
    let mut dist = vec![0.0_f64; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    for &i in &order {
        let mut best: Option<usize> = None;
        for &p in graph.preds(i) {
            match best {
                Some(b) if dist[p] <= dist[b] => {}
                _ => best = Some(p),
            }
        }
        dist[i] = graph.instance(i).duration_s + best.map_or(0.0, |b| dist[b]);
        via[i] = best;
    }
    let Some(end) = (0..n).reduce(|b, i| if dist[i] > dist[b] { i } else { b }) else {
        return Ok((0.0, Vec::new()));
    };
    let mut chain = vec![end];
    while let Some(p) = via[*chain.last().expect("non-empty")] {
        chain.push(p);
    }
    chain.reverse();
    let ids = chain.into_iter().map(|i| graph.instance(i).id.clone()).collect();
    Ok((dist[end], ids))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Demand {
    Nodes(u32),
    Core,
}

#[derive(Debug, Clone, Default)]
struct Node {
    exclusive: bool,
    shared_used: u32,
    occupants: u32,
    since: f64,
    busy: f64,
}

struct Pool {
    nodes: Vec<Node>,
    limit: Option<u32>,
    cores_per_node: u32,
}

impl Pool {
    fn new(limit: NodeLimit, cores_per_node: u32) -> Self {
        match limit {
            NodeLimit::Unlimited => Pool { nodes: Vec::new(), limit: None, cores_per_node },
            NodeLimit::Nodes(k) => Pool { nodes: vec![Node::default(); k as usize], limit: Some(k), cores_per_node },
        }
    }

    fn occupy(&mut self, i: usize, t: f64) {
        let node = &mut self.nodes[i];
        if node.occupants == 0 {
            node.since = t;
        }
        node.occupants += 1;
    }

    /// Lowest-numbered free nodes (or a partially used shared node for a
    /// core request). Grows the pool when unlimited.
    fn allocate(&mut self, demand: Demand, t: f64) -> Option<Vec<usize>> {
        match demand {
            Demand::Nodes(k) => {
                let mut free: Vec<usize> =
                    (0..self.nodes.len()).filter(|&i| self.nodes[i].occupants == 0).take(k as usize).collect();
                if free.len() < k as usize {
                    if self.limit.is_some() {
                        return None;
                    }
                    while free.len() < k as usize {
                        self.nodes.push(Node::default());
                        free.push(self.nodes.len() - 1);
                    }
                }
                for &i in &free {
                    self.nodes[i].exclusive = true;
                    self.occupy(i, t);
                }
                Some(free)
            }
            Demand::Core => {
                let cap = self.cores_per_node;
                let shared = (0..self.nodes.len())
                    .find(|&i| !self.nodes[i].exclusive && self.nodes[i].occupants > 0 && self.nodes[i].shared_used < cap);
                let pick = shared.or_else(|| (0..self.nodes.len()).find(|&i| self.nodes[i].occupants == 0));
                let i = match pick {
                    Some(i) => i,
                    None if self.limit.is_none() => {
                        self.nodes.push(Node::default());
                        self.nodes.len() - 1
                    }
                    None => return None,
                };
                self.nodes[i].exclusive = false;
                self.nodes[i].shared_used += 1;
                self.occupy(i, t);
                Some(vec![i])
            }
        }
    }

    fn release(&mut self, held: &[usize], demand: Demand, t: f64) {
        for &i in held {
            let node = &mut self.nodes[i];
            if demand == Demand::Core {
                node.shared_used -= 1;
            }
            node.occupants -= 1;
            if node.occupants == 0 {
                node.busy += t - node.since;
                node.exclusive = false;
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Simulates `graph` on `cluster` and returns the event log and aggregates.
/// Identical inputs always produce identical results.
pub fn simulate(
    graph: &InstanceGraph,
    cluster: &ClusterSpec,
    limit: NodeLimit,
    policy: Policy,
) -> Result<SimulationResult, SimError> {
    let Policy::ReadyTimeThenId = policy;
    let (critical_path_s, critical_path) = critical_path(graph)?;

    let n = graph.len();
    let mut demand = Vec::with_capacity(n);
    let mut queue_of = Vec::with_capacity(n);
    for inst in graph.instances() {
        let q = cluster.queue(&inst.queue).ok_or_else(|| SimError::UnknownQueue {
            id: inst.id.clone(),
            queue: inst.queue.clone(),
        })?;
        let d = if q.exclusive_nodes {
            let k = inst.cores.div_ceil(cluster.cores_per_node.max(1)).max(1);
            if let NodeLimit::Nodes(avail) = limit {
                if k > avail {
                    return Err(SimError::InfeasibleInstance { id: inst.id.clone(), demand: k, available: avail });
                }
            }
            Demand::Nodes(k)
        } else {
            Demand::Core
        };
        demand.push(d);
        queue_of.push((inst.queue.clone(), q.max_concurrent_jobs));
    }

    let mut pool = Pool::new(limit, cluster.cores_per_node.max(1));
    let mut queue_running: BTreeMap<String, u32> = BTreeMap::new();
    let mut remaining: Vec<usize> = (0..n).map(|i| graph.preds(i).len()).collect();
    let mut ready: BTreeSet<Key> = BTreeSet::new();
    let mut running: BinaryHeap<std::cmp::Reverse<Key>> = BinaryHeap::new();
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut events = Vec::with_capacity(3 * n);
    let mut per_category_busy_s = BTreeMap::new();
    let mut makespan_s = 0.0_f64;

    let submit = |i: usize, t: f64, ready: &mut BTreeSet<Key>, events: &mut Vec<SimEvent>| {
        ready.insert(Key(t, i));
        events.push(SimEvent { instance_id: graph.instance(i).id.clone(), kind: EventKind::Submit, time_s: t });
    };
    for (i, _) in remaining.iter().enumerate().filter(|(_, &r)| r == 0) {
        submit(i, 0.0, &mut ready, &mut events);
    }

    let mut now = 0.0_f64;
    loop {
        // dispatch in list order; the head blocks when it does not fit
        while let Some(&Key(rt, i)) = ready.first() {
            let (qname, qmax) = &queue_of[i];
            let in_queue = queue_running.get(qname).copied().unwrap_or(0);
            if qmax.is_some_and(|m| in_queue >= m) {
                break;
            }
            let Some(nodes) = pool.allocate(demand[i], now) else { break };
            ready.remove(&Key(rt, i));
            held[i] = nodes;
            *queue_running.entry(qname.clone()).or_insert(0) += 1;
            let inst = graph.instance(i);
            events.push(SimEvent { instance_id: inst.id.clone(), kind: EventKind::Start, time_s: now });
            running.push(std::cmp::Reverse(Key(now + inst.duration_s, i)));
        }

        let Some(std::cmp::Reverse(Key(t, _))) = running.peek().copied() else { break };
        now = t;
        while let Some(std::cmp::Reverse(Key(ft, i))) = running.peek().copied() {
            if ft != t {
                break;
            }
            running.pop();
            let inst = graph.instance(i);
            pool.release(&held[i], demand[i], t);
            *queue_running.get_mut(&queue_of[i].0).expect("queue counted at start") -= 1;
            *per_category_busy_s.entry(inst.category).or_insert(0.0) += inst.duration_s;
            makespan_s = makespan_s.max(t);
            events.push(SimEvent { instance_id: inst.id.clone(), kind: EventKind::Finish, time_s: t });
            for &s in graph.succs(i) {
                remaining[s] -= 1;
                if remaining[s] == 0 {
                    submit(s, t, &mut ready, &mut events);
                }
            }
        }
    }

    debug_assert!(ready.is_empty(), "every instance dispatched");
    Ok(SimulationResult {
        events,
        makespan_s,
        critical_path,
        critical_path_s,
        per_node_busy_s: pool.nodes.iter().map(|nd| nd.busy).collect(),
        per_category_busy_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Utilization {
    pub per_node: Vec<f64>,
    pub aggregate: f64,
}

/// Busy time over makespan, per node and for the whole pool.
pub fn utilization(result: &SimulationResult) -> Utilization {
    let span = result.makespan_s;
    if span <= 0.0 || result.per_node_busy_s.is_empty() {
        return Utilization { per_node: vec![0.0; result.per_node_busy_s.len()], aggregate: 0.0 };
    }
    let per_node = result.per_node_busy_s.iter().map(|b| b / span).collect();
    let busy: f64 = result.per_node_busy_s.iter().sum();
    let aggregate = busy / (result.per_node_busy_s.len() as f64 * span);
    Utilization { per_node, aggregate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Instance;

    fn graph(nodes: &[(&str, f64)], edges: &[(&str, &str)]) -> InstanceGraph {
        let inst = nodes.iter().map(|(id, d)| Instance::new(*id, *d)).collect();
        InstanceGraph::from_parts(inst, edges.iter().copied()).unwrap()
    }

    fn one_node() -> ClusterSpec {
        ClusterSpec { node_count: 1, ..Default::default() }
    }

    #[test]
    fn chain_critical_path() {
        let g = graph(&[("A", 1.0), ("B", 2.0)], &[("A", "B")]);
        assert_eq!(critical_path(&g).unwrap(), (3.0, vec!["A".to_string(), "B".to_string()]));
    }

    #[test]
    fn join_takes_longer_branch() {
        let g = graph(&[("S", 0.0), ("L", 5.0), ("R", 3.0), ("J", 0.0)], &[("S", "L"), ("S", "R"), ("L", "J"), ("R", "J")]);
        let (len, chain) = critical_path(&g).unwrap();
        assert_eq!(len, 5.0);
        assert_eq!(chain, vec!["S", "L", "J"]);
    }

    #[test]
    fn critical_path_ties_break_lexicographically() {
        let g = graph(&[("b", 2.0), ("a", 2.0), ("z", 1.0)], &[("b", "z"), ("a", "z")]);
        assert_eq!(critical_path(&g).unwrap().1, vec!["a", "z"]);
    }

    #[test]
    fn critical_path_rejects_cycles() {
        let g = graph(&[("a", 1.0), ("b", 1.0)], &[("a", "b"), ("b", "a")]);
        assert!(matches!(critical_path(&g), Err(SimError::CycleDetected(_))));
    }

    #[test]
    fn unlimited_makespan_is_critical_path() {
        let g = graph(&[("A", 1.0), ("B", 4.0), ("C", 2.0), ("D", 1.0)], &[("A", "B"), ("A", "C"), ("C", "D")]);
        let r = simulate(&g, &ClusterSpec::default(), NodeLimit::Unlimited, Policy::default()).unwrap();
        assert_eq!(r.makespan_s, 5.0);
        assert_eq!(r.makespan_s, r.critical_path_s);
    }

    #[test]
    fn single_node_serializes_everything() {
        let g = graph(&[("A", 1.0), ("B", 4.0), ("C", 2.5)], &[]);
        let r = simulate(&g, &one_node(), NodeLimit::Nodes(1), Policy::default()).unwrap();
        assert_eq!(r.makespan_s, 7.5);
        assert_eq!(r.interval("B"), Some((1.0, 5.0)));
        assert_eq!(utilization(&r).aggregate, 1.0);
    }

    #[test]
    fn infeasible_instance() {
        let g = InstanceGraph::from_parts(vec![Instance::new("F", 1.0).on_queue("np", 612)], Vec::<(&str, &str)>::new()).unwrap();
        let c = ClusterSpec { node_count: 4, ..Default::default() };
        assert_eq!(
            simulate(&g, &c, NodeLimit::Nodes(4), Policy::default()),
            Err(SimError::InfeasibleInstance { id: "F".into(), demand: 17, available: 4 })
        );
    }

    #[test]
    fn unknown_queue() {
        let g = InstanceGraph::from_parts(vec![Instance::new("F", 1.0).on_queue("nf", 1)], Vec::<(&str, &str)>::new()).unwrap();
        assert!(matches!(
            simulate(&g, &ClusterSpec::default(), NodeLimit::Unlimited, Policy::default()),
            Err(SimError::UnknownQueue { .. })
        ));
    }

    #[test]
    fn shared_queue_packs_cores_on_one_node() {
        let g = graph(&[], &[]);
        assert!(g.is_empty());
        let inst = (0..3).map(|i| Instance::new(format!("s{i}"), 2.0).on_queue("ns", 1)).collect();
        let g = InstanceGraph::from_parts(inst, Vec::<(&str, &str)>::new()).unwrap();
        let c = ClusterSpec { node_count: 1, cores_per_node: 2, ..Default::default() };
        let r = simulate(&g, &c, NodeLimit::Nodes(1), Policy::default()).unwrap();
        // two fit side by side, the third waits
        assert_eq!(r.makespan_s, 4.0);
        assert_eq!(r.per_node_busy_s, vec![4.0]);
    }

    #[test]
    fn exclusive_job_waits_for_shared_node_to_drain() {
        let inst = vec![
            Instance::new("a_shared", 3.0).on_queue("ns", 1),
            Instance::new("b_excl", 1.0).on_queue("np", 1),
        ];
        let g = InstanceGraph::from_parts(inst, Vec::<(&str, &str)>::new()).unwrap();
        let r = simulate(&g, &one_node(), NodeLimit::Nodes(1), Policy::default()).unwrap();
        assert_eq!(r.interval("b_excl"), Some((3.0, 4.0)));
    }

    #[test]
    fn queue_concurrency_limit() {
        let mut c = ClusterSpec::default();
        c.queues.get_mut("np").unwrap().max_concurrent_jobs = Some(1);
        let g = graph(&[("A", 1.0), ("B", 1.0)], &[]);
        let r = simulate(&g, &c, NodeLimit::Unlimited, Policy::default()).unwrap();
        assert_eq!(r.makespan_s, 2.0);
    }

    #[test]
    fn utilization_cases() {
        let two = ClusterSpec { node_count: 2, ..Default::default() };
        let g = graph(&[("A", 2.0), ("B", 2.0)], &[]);
        let par = simulate(&g, &two, NodeLimit::Nodes(2), Policy::default()).unwrap();
        assert_eq!(utilization(&par).aggregate, 1.0);

        let g = graph(&[("A", 2.0), ("B", 2.0)], &[("A", "B")]);
        let ser = simulate(&g, &two, NodeLimit::Nodes(2), Policy::default()).unwrap();
        let u = utilization(&ser);
        assert_eq!(u.aggregate, 0.5);
        assert_eq!(u.per_node, vec![1.0, 0.0]);
    }

    #[test]
    fn events_are_ordered_and_exported() {
        let g = graph(&[("A", 1.5), ("B", 2.0)], &[("A", "B")]);
        let r = simulate(&g, &ClusterSpec::default(), NodeLimit::Unlimited, Policy::default()).unwrap();
        let kinds: Vec<_> = r.events.iter().map(|e| (e.instance_id.as_str(), e.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                ("A", EventKind::Submit),
                ("A", EventKind::Start),
                ("A", EventKind::Finish),
                ("B", EventKind::Submit),
                ("B", EventKind::Start),
                ("B", EventKind::Finish),
            ]
        );
        let mut buf = Vec::new();
        r.write_events_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("instance_id,kind,time_s\nA,Submit,0\n"));
        assert!(text.ends_with("B,Finish,3.5\n"));
        assert_eq!(r.summary_json()["makespan_s"], 3.5);
    }
}
