#![allow(dead_code)]

use std::collections::BTreeMap;

use epsim::graph::{Instance, InstanceGraph};
use epsim::profile::Phase;
use epsim::schedule::{ScaleInfo, ScheduleDocument, ScheduledJob};
use proptest::prelude::*;

/// Adjacency as `(from, to)` pairs with `from < to`, so always acyclic.
#[derive(Debug, Clone)]
pub struct Dag {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

pub fn dag(max_nodes: usize) -> impl Strategy<Value = Dag> {
    (1..=max_nodes).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..j).map(move |i| (i, j))).collect();
        let m = pairs.len();
        proptest::collection::vec(proptest::bool::weighted(0.15), m).prop_map(move |keep| Dag {
            n,
            edges: pairs.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect(),
        })
    })
}

/// Shape of one simulated instance: integer duration and resource demand.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub duration: u32,
    /// `None` for a one-core shared-queue job, else cores on the exclusive queue.
    pub exclusive_cores: Option<u32>,
}

pub fn shape(max_nodes_per_job: u32) -> impl Strategy<Value = Shape> {
    (1u32..=6, prop_oneof![Just(None), (1u32..=36 * max_nodes_per_job).prop_map(Some)])
        .prop_map(|(duration, exclusive_cores)| Shape { duration, exclusive_cores })
}

pub fn sim_case(max_instances: usize, max_nodes_per_job: u32) -> impl Strategy<Value = (Dag, Vec<Shape>)> {
    dag(max_instances).prop_flat_map(move |d| {
        let n = d.n;
        (Just(d), proptest::collection::vec(shape(max_nodes_per_job), n))
    })
}

pub fn inst_id(i: usize) -> String {
    format!("i{i:02}")
}

pub fn build_graph(d: &Dag, shapes: &[Shape]) -> InstanceGraph {
    let instances = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let base = Instance::new(inst_id(i), f64::from(s.duration));
            match s.exclusive_cores {
                Some(c) => base.on_queue("np", c),
                None => base.on_queue("ns", 1),
            }
        })
        .collect();
    let edges: Vec<(String, String)> = d.edges.iter().map(|&(a, b)| (inst_id(a), inst_id(b))).collect();
    InstanceGraph::from_parts(instances, edges).unwrap()
}

#[derive(Clone, Copy, PartialEq)]
enum NodeUse {
    Free,
    Exclusive,
    Shared(u32),
}

/// Brute-force replay of the list-scheduling policy, advancing a clock one
/// time unit at a time (all durations are integers). At each tick finished
/// jobs release resources, newly ready jobs join the list, then the list is
/// walked in (ready time, id) order and stops at the first job that does not
/// fit. Returns start times indexed by instance number.
pub fn replay_oracle(d: &Dag, shapes: &[Shape], nodes: usize, cores_per_node: u32) -> Vec<u32> {
    let n = shapes.len();
    let mut preds = vec![Vec::new(); n];
    for &(a, b) in &d.edges {
        preds[b].push(a);
    }
    let mut start: Vec<Option<u32>> = vec![None; n];
    let mut finish: Vec<Option<u32>> = vec![None; n];
    let mut ready_at: Vec<Option<u32>> = vec![None; n];
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pool = vec![NodeUse::Free; nodes];
    let mut t = 0u32;
    loop {
        for i in 0..n {
            if let (Some(s), None) = (start[i], finish[i]) {
                if s + shapes[i].duration == t {
                    finish[i] = Some(t);
                    for &k in &held[i] {
                        pool[k] = match (pool[k], shapes[i].exclusive_cores) {
                            (NodeUse::Shared(c), None) if c > 1 => NodeUse::Shared(c - 1),
                            _ => NodeUse::Free,
                        };
                    }
                }
            }
        }
        for i in 0..n {
            if ready_at[i].is_none() && preds[i].iter().all(|&p| finish[p].is_some()) {
                ready_at[i] = Some(t);
            }
        }
        let mut list: Vec<usize> = (0..n).filter(|&i| ready_at[i].is_some() && start[i].is_none()).collect();
        list.sort_by_key(|&i| (ready_at[i].unwrap(), i));
        for i in list {
            let pick: Option<Vec<usize>> = match shapes[i].exclusive_cores {
                Some(c) => {
                    let k = c.div_ceil(cores_per_node) as usize;
                    let free: Vec<usize> = (0..nodes).filter(|&x| pool[x] == NodeUse::Free).take(k).collect();
                    (free.len() == k).then_some(free)
                }
                None => (0..nodes)
                    .find(|&x| matches!(pool[x], NodeUse::Shared(c) if c < cores_per_node))
                    .or_else(|| (0..nodes).find(|&x| pool[x] == NodeUse::Free))
                    .map(|x| vec![x]),
            };
            let Some(p) = pick else { break };
            for &x in &p {
                pool[x] = match (pool[x], shapes[i].exclusive_cores) {
                    (NodeUse::Shared(c), None) => NodeUse::Shared(c + 1),
                    (NodeUse::Free, None) => NodeUse::Shared(1),
                    _ => NodeUse::Exclusive,
                };
            }
            held[i] = p;
            start[i] = Some(t);
        }
        if finish.iter().all(Option::is_some) {
            break;
        }
        t += 1;
    }
    start.into_iter().map(Option::unwrap).collect()
}

/// A schedule document over `d` with small desk-friendly phases.
pub fn schedule_doc(d: &Dag, write_bytes: &[u64], compute_s: &[f64]) -> ScheduleDocument {
    let mut deps = vec![Vec::new(); d.n];
    for &(a, b) in &d.edges {
        deps[b].push(a);
    }
    ScheduleDocument {
        jobs: (0..d.n)
            .map(|i| ScheduledJob {
                job_id: i,
                name: format!("job{i}"),
                depends_on: deps[i].clone(),
                phases: vec![
                    Phase::IoRead { bytes: 512 },
                    Phase::Compute { duration_s: compute_s[i] },
                    Phase::IoWrite { bytes: write_bytes[i] },
                ],
                metadata: BTreeMap::new(),
            })
            .collect(),
        created_from: vec!["generated".into()],
        scale: ScaleInfo::default(),
    }
}

pub fn exec_case(max_nodes: usize) -> impl Strategy<Value = (Dag, Vec<u64>, Vec<f64>, usize)> {
    dag(max_nodes).prop_flat_map(|d| {
        let n = d.n;
        (
            Just(d),
            proptest::collection::vec(0u64..4096, n),
            proptest::collection::vec(0.0f64..0.003, n),
            1usize..=4,
        )
    })
}
