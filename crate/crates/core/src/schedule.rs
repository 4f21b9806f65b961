//! Schedule documents: fully expanded synthetic jobs with dense ids, their
//! dependencies and phases.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{DependencyEdge, EnsembleConfig, JobProfile, ModelError, SuiteModel};
use crate::profile::{Phase, UnifiedJobProfile};
use crate::whatif::{Scenario, WhatIfError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("no profile for job '{0}'")]
    MissingProfile(String),
    #[error("profile for job '{0}' has no catalog entry")]
    UnknownJob(String),
    #[error("dependency cycle through job {0}")]
    CycleDetected(String),
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("invalid scale factor: io={io}, compute={compute}")]
    InvalidScale { io: f64, compute: f64 },
    #[error(transparent)]
    Scenario(#[from] WhatIfError),
    #[error(transparent)]
    Model(ModelError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledJob {
    pub job_id: usize,
    pub name: String,
    pub depends_on: Vec<usize>,
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleInfo {
    pub io_scale: f64,
    pub compute_scale: f64,
}

impl Default for ScaleInfo {
    fn default() -> Self {
        ScaleInfo { io_scale: 1.0, compute_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDocument {
    pub jobs: Vec<ScheduledJob>,
    #[serde(default)]
    pub created_from: Vec<String>,
    #[serde(default)]
    pub scale: ScaleInfo,
}

impl ScheduleDocument {
    /// Ids must be dense from 0 in order, dependencies must exist, and the
    /// dependency relation must be acyclic.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        for (i, job) in self.jobs.iter().enumerate() {
            if job.job_id != i {
                return Err(ScheduleError::Invalid(format!("job at position {i} has id {}", job.job_id)));
            }
            if let Some(d) = job.depends_on.iter().find(|&&d| d >= self.jobs.len()) {
                return Err(ScheduleError::Invalid(format!("job {i} depends on unknown id {d}")));
            }
        }
        topo_order(self).map(|_| ())
    }

    pub fn from_json_str(s: &str) -> Result<Self, ScheduleError> {
        let doc: ScheduleDocument =
            serde_json::from_str(s).map_err(|e| ScheduleError::Invalid(format!("schedule document: {e}")))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("schedule serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScheduleError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| ScheduleError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScheduleError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| ScheduleError::Io(format!("{}: {e}", path.display())))
    }

    /// Sum of IoWrite bytes over all jobs.
    pub fn total_write_bytes(&self) -> u64 {
        self.jobs
            .iter()
            .flat_map(|j| &j.phases)
            .map(|p| match p {
                Phase::IoWrite { bytes } => *bytes,
                _ => 0,
            })
            .sum()
    }
}

/// Deterministic topological order, smallest ready id first.
pub fn topo_order(doc: &ScheduleDocument) -> Result<Vec<usize>, ScheduleError> {
    let n = doc.jobs.len();
    let mut indeg = vec![0usize; n];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (pos, job) in doc.jobs.iter().enumerate() {
        for &d in &job.depends_on {
            if d >= n {
                return Err(ScheduleError::Invalid(format!("job {} depends on unknown id {d}", job.job_id)));
            }
            indeg[pos] += 1;
            dependents[d].push(pos);
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = heap.pop() {
        order.push(i);
        for &s in &dependents[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).expect("unsorted job remains");
        return Err(ScheduleError::CycleDetected(stuck.to_string()));
    }
    Ok(order)
}

fn scale_phase(p: &Phase, io: f64, compute: f64) -> Phase {
    let bytes = |b: u64| (b as f64 * io).round() as u64;
    match *p {
        Phase::IoRead { bytes: b } => Phase::IoRead { bytes: bytes(b) },
        Phase::IoWrite { bytes: b } => Phase::IoWrite { bytes: bytes(b) },
        Phase::Compute { duration_s } => Phase::Compute { duration_s: duration_s * compute },
        Phase::MpiExchange { bytes, ranks } => Phase::MpiExchange { bytes, ranks },
    }
}

/// Multiplies IO bytes and compute durations; the scale metadata composes.
pub fn scale_schedule(doc: &ScheduleDocument, io_factor: f64, compute_factor: f64) -> Result<ScheduleDocument, ScheduleError> {
    if !(io_factor >= 0.0 && compute_factor >= 0.0 && io_factor.is_finite() && compute_factor.is_finite()) {
        return Err(ScheduleError::InvalidScale { io: io_factor, compute: compute_factor });
    }
    let mut out = doc.clone();
    for job in &mut out.jobs {
        for p in &mut job.phases {
            *p = scale_phase(p, io_factor, compute_factor);
        }
    }
    out.scale.io_scale *= io_factor;
    out.scale.compute_scale *= compute_factor;
    Ok(out)
}

/// Builds a schedule from unified profiles and the dependency list.
///
/// `catalog` supplies each job's member role and repetition; every profile
/// needs a catalog entry and every edge endpoint needs a profile. Members
/// come from `cfg` unless the scenario overrides them; IO bytes and compute
/// durations are scaled by the scenario's `io_scale` and `compute_scale`.
pub fn generate_schedule(
    profiles: &[UnifiedJobProfile],
    edges: &[DependencyEdge],
    catalog: &[JobProfile],
    cfg: &EnsembleConfig,
    scenario: &Scenario,
) -> Result<ScheduleDocument, ScheduleError> {
    scenario.validate()?;
    let ensemble = scenario.ensemble(cfg);

    let by_name: HashMap<&str, &UnifiedJobProfile> = profiles.iter().map(|p| (p.job.as_str(), p)).collect();
    for e in edges {
        for end in [&e.from_job, &e.to_job] {
            if !by_name.contains_key(end.as_str()) {
                return Err(ScheduleError::MissingProfile(end.clone()));
            }
        }
    }
    let mut jobs = Vec::new();
    for p in profiles {
        let entry = catalog
            .iter()
            .find(|j| j.name == p.job)
            .ok_or_else(|| ScheduleError::UnknownJob(p.job.clone()))?;
        jobs.push(entry.clone());
    }

    let model = SuiteModel { ensemble, jobs, edges: edges.to_vec(), ..Default::default() };
    let graph = model.expand().map_err(|e| match e {
        ModelError::Invalid(errs) => match errs.iter().find_map(|e| match e {
            ModelError::CycleDetected(c) => Some(c.join(" -> ")),
            _ => None,
        }) {
            Some(cycle) => ScheduleError::CycleDetected(cycle),
            None => ScheduleError::Model(ModelError::Invalid(errs)),
        },
        other => ScheduleError::Model(other),
    })?;
    let order = graph.topo_order().map_err(|e| ScheduleError::CycleDetected(e.to_string()))?;

    let mut id_of = vec![0usize; graph.len()];
    for (id, &i) in order.iter().enumerate() {
        id_of[i] = id;
    }
    let scheduled = order
        .iter()
        .enumerate()
        .map(|(id, &i)| {
            let inst = graph.instance(i);
            let mut depends_on: Vec<usize> = graph.preds(i).iter().map(|&p| id_of[p]).collect();
            depends_on.sort_unstable();
            let phases = by_name[inst.job.as_str()]
                .phases
                .iter()
                .map(|p| scale_phase(p, scenario.io_scale, scenario.compute_scale))
                .collect();
            let mut metadata = BTreeMap::new();
            metadata.insert("job".into(), Value::from(inst.job.clone()));
            metadata.insert("member".into(), Value::from(inst.member));
            metadata.insert("member_kind".into(), Value::from(inst.kind.as_str()));
            metadata.insert("category".into(), Value::from(inst.category.as_str()));
            metadata.insert("repeat".into(), Value::from(inst.repeat));
            metadata.insert("wave".into(), Value::from(inst.wave));
            ScheduledJob { job_id: id, name: inst.id.clone(), depends_on, phases, metadata }
        })
        .collect();

    let mut created_from: Vec<String> = profiles.iter().flat_map(|p| p.provenance.iter().cloned()).collect();
    created_from.sort();
    created_from.dedup();
    Ok(ScheduleDocument {
        jobs: scheduled,
        created_from,
        scale: ScaleInfo { io_scale: scenario.io_scale, compute_scale: scenario.compute_scale },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JobCategory, MemberRole};

    fn doc(deps: &[&[usize]]) -> ScheduleDocument {
        ScheduleDocument {
            jobs: deps
                .iter()
                .enumerate()
                .map(|(i, d)| ScheduledJob {
                    job_id: i,
                    name: format!("j{i}"),
                    depends_on: d.to_vec(),
                    phases: vec![Phase::IoWrite { bytes: 100 }],
                    metadata: BTreeMap::new(),
                })
                .collect(),
            created_from: vec![],
            scale: ScaleInfo::default(),
        }
    }

    #[test]
    fn topo_chain_and_diamond() {
        assert_eq!(topo_order(&doc(&[&[], &[0], &[1]])).unwrap(), vec![0, 1, 2]);
        assert_eq!(topo_order(&doc(&[&[], &[0], &[0], &[1, 2]])).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(topo_order(&doc(&[&[2], &[], &[1]])).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn topo_self_loop() {
        assert!(matches!(topo_order(&doc(&[&[0]])), Err(ScheduleError::CycleDetected(_))));
    }

    #[test]
    fn validate_rejects_sparse_ids() {
        let mut d = doc(&[&[], &[0]]);
        d.jobs[1].job_id = 5;
        assert!(matches!(d.validate(), Err(ScheduleError::Invalid(_))));
    }

    #[test]
    fn scaling_identity_composition_and_zero() {
        let d = doc(&[&[], &[0]]);
        assert_eq!(scale_schedule(&d, 1.0, 1.0).unwrap(), d);
        let twice = scale_schedule(&scale_schedule(&d, 2.0, 1.0).unwrap(), 2.0, 1.0).unwrap();
        assert_eq!(twice.jobs[0].phases, vec![Phase::IoWrite { bytes: 400 }]);
        assert_eq!(twice.scale.io_scale, 4.0);
        let zero = scale_schedule(&d, 0.0, 1.0).unwrap();
        assert_eq!(zero.jobs[1].phases, vec![Phase::IoWrite { bytes: 0 }]);
        assert!(matches!(scale_schedule(&d, -1.0, 1.0), Err(ScheduleError::InvalidScale { .. })));
    }

    fn profile(job: &str, write: u64) -> UnifiedJobProfile {
        UnifiedJobProfile {
            job: job.into(),
            phases: vec![Phase::Compute { duration_s: 1.0 }, Phase::IoWrite { bytes: write }],
            provenance: vec![format!("{job}.ioprof")],
        }
    }

    fn catalog() -> Vec<JobProfile> {
        ["A", "B"].iter().map(|n| JobProfile::new(*n, JobCategory::Other, MemberRole::All)).collect()
    }

    #[test]
    fn two_job_schedule() {
        let cfg = EnsembleConfig::new(1, 1).unwrap();
        let d = generate_schedule(
            &[profile("B", 10), profile("A", 10)],
            &[DependencyEdge::new("A", "B")],
            &catalog(),
            &cfg,
            &Scenario::identity(),
        )
        .unwrap();
        assert_eq!(d.jobs.len(), 2);
        assert_eq!(d.jobs[0].metadata["job"], "A");
        assert_eq!(d.jobs[1].metadata["job"], "B");
        assert_eq!(d.jobs[1].depends_on, vec![0]);
        assert_eq!(d.created_from, vec!["A.ioprof".to_string(), "B.ioprof".to_string()]);
        d.validate().unwrap();
    }

    #[test]
    fn io_scale_applies_to_bytes() {
        let cfg = EnsembleConfig::new(1, 1).unwrap();
        let s = Scenario { io_scale: 2.0, ..Scenario::identity() };
        let d = generate_schedule(&[profile("A", 100)], &[], &catalog(), &cfg, &s).unwrap();
        assert_eq!(d.jobs[0].phases[1], Phase::IoWrite { bytes: 200 });
        assert_eq!(d.scale.io_scale, 2.0);
    }

    #[test]
    fn missing_profile_and_cycles() {
        let cfg = EnsembleConfig::new(1, 1).unwrap();
        let e = generate_schedule(&[profile("A", 1)], &[DependencyEdge::new("A", "B")], &catalog(), &cfg, &Scenario::identity());
        assert_eq!(e, Err(ScheduleError::MissingProfile("B".into())));
        let e = generate_schedule(
            &[profile("A", 1), profile("B", 1)],
            &[DependencyEdge::new("A", "B"), DependencyEdge::new("B", "A")],
            &catalog(),
            &cfg,
            &Scenario::identity(),
        );
        assert!(matches!(e, Err(ScheduleError::CycleDetected(_))));
        let e = generate_schedule(&[profile("Z", 1)], &[], &catalog(), &cfg, &Scenario::identity());
        assert_eq!(e, Err(ScheduleError::UnknownJob("Z".into())));
    }
}
