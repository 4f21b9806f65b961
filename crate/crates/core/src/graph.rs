//! Expanded instance graph shared by the simulator and schedule generator.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobCategory, MemberKind};

/// One concrete run of a job for one member (and one repetition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub job: String,
    pub category: JobCategory,
    pub queue: String,
    pub cores: u32,
    pub member: u32,
    pub kind: MemberKind,
    pub repeat: u32,
    pub wave: u32,
    pub duration_s: f64,
    pub energy_kj: f64,
}

impl Instance {
    /// A free-standing instance on the exclusive `np` queue using one core.
    pub fn new(id: impl Into<String>, duration_s: f64) -> Self {
        let id = id.into();
        Instance {
            job: id.clone(),
            id,
            category: JobCategory::Other,
            queue: "np".into(),
            cores: 1,
            member: 0,
            kind: MemberKind::Control,
            repeat: 0,
            wave: 0,
            duration_s,
            energy_kj: 0.0,
        }
    }

    pub fn on_queue(mut self, queue: impl Into<String>, cores: u32) -> Self {
        self.queue = queue.into();
        self.cores = cores;
        self
    }

    pub fn in_category(mut self, category: JobCategory) -> Self {
        self.category = category;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate instance id '{0}'")]
    DuplicateId(String),
    #[error("edge references unknown instance '{0}'")]
    UnknownId(String),
    #[error("instance graph has a cycle through '{0}'")]
    CycleDetected(String),
}

/// Instances sorted by id, so index order equals lexicographic id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceGraph {
    instances: Vec<Instance>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

impl InstanceGraph {
    /// Builds a graph from instances and `(from_id, to_id)` edges. Duplicate
    /// edges are collapsed. Acyclicity is not checked here.
    pub fn from_parts<I, S>(mut instances: Vec<Instance>, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        instances.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = instances.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(GraphError::DuplicateId(w[0].id.clone()));
        }
        let index: HashMap<&str, usize> =
            instances.iter().enumerate().map(|(i, inst)| (inst.id.as_str(), i)).collect();
        let mut preds = vec![Vec::new(); instances.len()];
        let mut succs = vec![Vec::new(); instances.len()];
        for (from, to) in edges {
            let lookup = |s: &str| index.get(s).copied().ok_or_else(|| GraphError::UnknownId(s.to_string()));
            let (a, b) = (lookup(from.as_ref())?, lookup(to.as_ref())?);
            preds[b].push(a);
            succs[a].push(b);
        }
        for list in preds.iter_mut().chain(succs.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(InstanceGraph { instances, preds, succs })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, i: usize) -> &Instance {
        &self.instances[i]
    }

    pub fn preds(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    pub fn succs(&self, i: usize) -> &[usize] {
        &self.succs[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.instances.binary_search_by(|inst| inst.id.as_str().cmp(id)).ok()
    }

    pub fn edge_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    /// Kahn's algorithm, smallest index (lexicographic id) first.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut heap: BinaryHeap<Reverse<usize>> =
            indeg.iter().enumerate().filter(|(_, d)| **d == 0).map(|(i, _)| Reverse(i)).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(Reverse(i)) = heap.pop() {
            order.push(i);
            for &s in &self.succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    heap.push(Reverse(s));
                }
            }
        }
        if order.len() != self.len() {
            let stuck = indeg.iter().position(|&d| d > 0).expect("some node left unsorted");
            return Err(GraphError::CycleDetected(self.instances[stuck].id.clone()));
        }
        Ok(order)
    }

    /// Copy with every instance duration transformed by `f`.
    pub fn map_durations(&self, mut f: impl FnMut(&Instance) -> f64) -> Self {
        let mut g = self.clone();
        for inst in &mut g.instances {
            inst.duration_s = f(inst);
        }
        g
    }
}
