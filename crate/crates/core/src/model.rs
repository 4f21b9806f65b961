//! Suite workload model: jobs, categories, member roles, dependency edges and
//! the ensemble/cluster configuration, plus validation and expansion of the
//! job-level DAG into concrete per-member instances.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::InstanceGraph;
use crate::graph::Instance;

/// Accounting category of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobCategory {
    LBCs,
    DataAssimilation,
    Forecast,
    PostProcessing,
    Other,
}

impl JobCategory {
    pub const ALL: [JobCategory; 5] = [
        JobCategory::LBCs,
        JobCategory::DataAssimilation,
        JobCategory::Forecast,
        JobCategory::PostProcessing,
        JobCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobCategory::LBCs => "LBCs",
            JobCategory::DataAssimilation => "DataAssimilation",
            JobCategory::Forecast => "Forecast",
            JobCategory::PostProcessing => "PostProcessing",
            JobCategory::Other => "Other",
        }
    }
}

impl fmt::Display for JobCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown job category '{s}'"))
    }
}

/// Which ensemble members run a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemberRole {
    All,
    ControlOnly,
    PerturbedOnly,
}

impl MemberRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MemberRole::All => "All",
            MemberRole::ControlOnly => "ControlOnly",
            MemberRole::PerturbedOnly => "PerturbedOnly",
        }
    }

    /// Number of members that run a job with this role.
    pub fn multiplier(self, cfg: &EnsembleConfig) -> u32 {
        match self {
            MemberRole::All => cfg.n_total,
            MemberRole::ControlOnly => cfg.n_control,
            MemberRole::PerturbedOnly => cfg.n_perturbed(),
        }
    }

    pub fn includes(self, kind: MemberKind) -> bool {
        matches!(
            (self, kind),
            (MemberRole::All, _)
                | (MemberRole::ControlOnly, MemberKind::Control)
                | (MemberRole::PerturbedOnly, MemberKind::Perturbed)
        )
    }
}

impl fmt::Display for MemberRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemberRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [MemberRole::All, MemberRole::ControlOnly, MemberRole::PerturbedOnly]
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown member role '{s}'"))
    }
}

/// Kind of a single ensemble member. Also used as the member-path selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemberKind {
    Control,
    Perturbed,
}

impl MemberKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MemberKind::Control => "control",
            MemberKind::Perturbed => "perturbed",
        }
    }
}

impl fmt::Display for MemberKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemberKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" | "ctrl" => Ok(MemberKind::Control),
            "perturbed" | "pert" => Ok(MemberKind::Perturbed),
            _ => Err(format!("unknown member kind '{s}'")),
        }
    }
}

/// Affine energy contribution of a job in kJ:
/// `per_control * n + per_perturbed * (N - n) + per_any * N + fixed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerm {
    #[serde(default)]
    pub per_control_kj: f64,
    #[serde(default)]
    pub per_perturbed_kj: f64,
    #[serde(default)]
    pub per_any_kj: f64,
    #[serde(default)]
    pub fixed_kj: f64,
    /// Optional split of `per_any_kj` into equally weighted variants (one per
    /// physics package). When present, `per_any_kj` is their mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants_kj: Vec<f64>,
}

impl EnergyTerm {
    pub fn fixed(kj: f64) -> Self {
        EnergyTerm { fixed_kj: kj, ..Default::default() }
    }

    pub fn per_any(kj: f64) -> Self {
        EnergyTerm { per_any_kj: kj, ..Default::default() }
    }

    pub fn split(per_control_kj: f64, per_perturbed_kj: f64) -> Self {
        EnergyTerm { per_control_kj, per_perturbed_kj, ..Default::default() }
    }

    /// Builds a term whose per-member coefficient is the mean of `variants`.
    pub fn from_variants(variants: Vec<f64>) -> Self {
        let per_any_kj = if variants.is_empty() {
            0.0
        } else {
            variants.iter().sum::<f64>() / variants.len() as f64
        };
        EnergyTerm { per_any_kj, variants_kj: variants, ..Default::default() }
    }

    pub fn evaluate(&self, cfg: &EnsembleConfig) -> f64 {
        let n = f64::from(cfg.n_control);
        let total = f64::from(cfg.n_total);
        self.per_control_kj * n + self.per_perturbed_kj * (total - n) + self.per_any_kj * total + self.fixed_kj
    }

    /// Energy of one member of the given kind, excluding the fixed part.
    pub fn per_member(&self, kind: MemberKind) -> f64 {
        match kind {
            MemberKind::Control => self.per_control_kj + self.per_any_kj,
            MemberKind::Perturbed => self.per_perturbed_kj + self.per_any_kj,
        }
    }

    /// Multiplies every coefficient by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        EnergyTerm {
            per_control_kj: self.per_control_kj * factor,
            per_perturbed_kj: self.per_perturbed_kj * factor,
            per_any_kj: self.per_any_kj * factor,
            fixed_kj: self.fixed_kj * factor,
            variants_kj: self.variants_kj.iter().map(|v| v * factor).collect(),
        }
    }

    fn fields(&self) -> [(&'static str, f64); 4] {
        [
            ("per_control_kj", self.per_control_kj),
            ("per_perturbed_kj", self.per_perturbed_kj),
            ("per_any_kj", self.per_any_kj),
            ("fixed_kj", self.fixed_kj),
        ]
    }
}

/// How many times a job runs per member, and in how many sequential waves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionSpec {
    pub instances: u32,
    pub waves: u32,
    pub wave_widths: Vec<u32>,
}

impl Default for RepetitionSpec {
    fn default() -> Self {
        RepetitionSpec { instances: 1, waves: 1, wave_widths: vec![1] }
    }
}

impl RepetitionSpec {
    /// Derives wave widths from totals: one instance in the first wave, the
    /// rest spread as evenly as possible over the remaining waves (wider
    /// waves first). 13 instances in 4 waves gives `[1, 4, 4, 4]`.
    pub fn with_waves(instances: u32, waves: u32) -> Result<Self, String> {
        if instances == 0 || waves == 0 {
            return Err("instances and waves must be at least 1".into());
        }
        if waves > instances {
            return Err(format!("{waves} waves cannot hold {instances} instances"));
        }
        let wave_widths = if waves == 1 {
            vec![instances]
        } else {
            let rest = instances - 1;
            let tail = waves - 1;
            let (base, extra) = (rest / tail, rest % tail);
            std::iter::once(1)
                .chain((0..tail).map(|k| base + u32::from(k < extra)))
                .collect()
        };
        Ok(RepetitionSpec { instances, waves, wave_widths })
    }

    pub fn is_repeated(&self) -> bool {
        self.instances > 1 || self.waves > 1
    }

    fn check(&self) -> Result<(), String> {
        if self.instances == 0 || self.waves == 0 {
            return Err("instances and waves must be at least 1".into());
        }
        if self.wave_widths.len() != self.waves as usize {
            return Err(format!(
                "{} wave widths given for {} waves",
                self.wave_widths.len(),
                self.waves
            ));
        }
        if self.wave_widths.contains(&0) {
            return Err("wave widths must be positive".into());
        }
        let sum: u32 = self.wave_widths.iter().sum();
        if sum != self.instances {
            return Err(format!("wave widths sum to {sum}, expected {}", self.instances));
        }
        Ok(())
    }

    /// Wave index of each repetition instance, in order.
    pub fn wave_of_each(&self) -> Vec<u32> {
        self.wave_widths
            .iter()
            .enumerate()
            .flat_map(|(w, &width)| std::iter::repeat_n(w as u32, width as usize))
            .collect()
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One suite job as measured: category, queue, size, per-role wall-clock and
/// its energy term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProfile {
    pub name: String,
    pub category: JobCategory,
    pub role: MemberRole,
    pub queue: String,
    pub cores_per_member: u32,
    /// Wall-clock of a control member, spanning all waves of a repeated job.
    #[serde(default)]
    pub wallclock_ctrl_s: f64,
    #[serde(default)]
    pub wallclock_pert_s: f64,
    pub energy: EnergyTerm,
    #[serde(default)]
    pub repetition: RepetitionSpec,
    #[serde(default, skip_serializing_if = "is_false")]
    pub contaminated: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub low_confidence: bool,
}

impl JobProfile {
    pub fn new(name: impl Into<String>, category: JobCategory, role: MemberRole) -> Self {
        JobProfile {
            name: name.into(),
            category,
            role,
            queue: "np".into(),
            cores_per_member: 1,
            wallclock_ctrl_s: 0.0,
            wallclock_pert_s: 0.0,
            energy: EnergyTerm::default(),
            repetition: RepetitionSpec::default(),
            contaminated: false,
            low_confidence: false,
        }
    }

    pub fn wallclock(&self, kind: MemberKind) -> f64 {
        match kind {
            MemberKind::Control => self.wallclock_ctrl_s,
            MemberKind::Perturbed => self.wallclock_pert_s,
        }
    }

    /// Duration of one expanded instance for a member of `kind`.
    pub fn instance_duration(&self, kind: MemberKind) -> f64 {
        if self.repetition.is_repeated() {
            self.wallclock(kind) / f64::from(self.repetition.waves)
        } else {
            self.wallclock(kind)
        }
    }

    /// Number of member-level runs of this job for `cfg`.
    pub fn member_count(&self, cfg: &EnsembleConfig) -> u32 {
        self.role.multiplier(cfg)
    }

    /// Total number of expanded instances for `cfg`.
    pub fn instance_count(&self, cfg: &EnsembleConfig) -> u32 {
        self.member_count(cfg) * self.repetition.instances
    }
}

/// Which member pairs an edge connects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeScope {
    #[default]
    SameMember,
    ControlToAll,
    ControlToPerturbed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub from_job: String,
    pub to_job: String,
    #[serde(default)]
    pub scope: EdgeScope,
}

impl DependencyEdge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        DependencyEdge { from_job: from.into(), to_job: to.into(), scope: EdgeScope::SameMember }
    }

    pub fn scoped(from: impl Into<String>, to: impl Into<String>, scope: EdgeScope) -> Self {
        DependencyEdge { from_job: from.into(), to_job: to.into(), scope }
    }
}

/// Ensemble size: `n` control members out of `N` total. Members `0..n` are
/// control members, `n..N` perturbed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnsembleConfig {
    #[serde(rename = "n")]
    pub n_control: u32,
    #[serde(rename = "N")]
    pub n_total: u32,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { n_control: 2, n_total: 22 }
    }
}

impl EnsembleConfig {
    pub fn new(n_control: u32, n_total: u32) -> Result<Self, ModelError> {
        let cfg = EnsembleConfig { n_control, n_total };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.n_control == 0 || self.n_control > self.n_total {
            return Err(ModelError::InvalidEnsemble { n: self.n_control, total: self.n_total });
        }
        Ok(())
    }

    pub fn n_perturbed(&self) -> u32 {
        self.n_total.saturating_sub(self.n_control)
    }

    pub fn kind_of(&self, member: u32) -> MemberKind {
        if member < self.n_control {
            MemberKind::Control
        } else {
            MemberKind::Perturbed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSpec {
    /// Jobs on an exclusive queue reserve whole nodes; others share nodes
    /// one core at a time.
    pub exclusive_nodes: bool,
    /// `None` means no per-queue limit.
    #[serde(default)]
    pub max_concurrent_jobs: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub node_count: u32,
    pub cores_per_node: u32,
    pub queues: BTreeMap<String, QueueSpec>,
    pub idle_power_kw: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        let mut queues = BTreeMap::new();
        queues.insert("np".to_string(), QueueSpec { exclusive_nodes: true, max_concurrent_jobs: None });
        queues.insert("ns".to_string(), QueueSpec { exclusive_nodes: false, max_concurrent_jobs: None });
        ClusterSpec { node_count: 64, cores_per_node: 36, queues, idle_power_kw: 0.1 }
    }
}

impl ClusterSpec {
    /// Looks a queue up by name, ignoring ASCII case.
    pub fn queue(&self, name: &str) -> Option<&QueueSpec> {
        self.queues
            .get(name)
            .or_else(|| self.queues.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v))
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.node_count == 0 {
            return Err(ModelError::InvalidCluster("node_count must be at least 1".into()));
        }
        if self.cores_per_node == 0 {
            return Err(ModelError::InvalidCluster("cores_per_node must be at least 1".into()));
        }
        if self.idle_power_kw.is_nan() || self.idle_power_kw < 0.0 {
            return Err(ModelError::InvalidCluster("idle_power_kw must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("edge {from} -> {to} references unknown job '{missing}'")]
    UnknownJobInEdge { from: String, to: String, missing: String },
    #[error("job '{job}': {reason}")]
    RoleEnergyMismatch { job: String, reason: String },
    #[error("unknown job '{0}'")]
    UnknownJob(String),
    #[error("job '{0}' defined more than once")]
    DuplicateJob(String),
    #[error("job '{job}': {field} must be non-negative and finite")]
    NegativeValue { job: String, field: String },
    #[error("job '{job}': invalid repetition: {reason}")]
    InvalidRepetition { job: String, reason: String },
    #[error("job '{0}': cores_per_member must be at least 1")]
    InvalidCores(String),
    #[error("invalid ensemble: need 1 <= n <= N, got n={n}, N={total}")]
    InvalidEnsemble { n: u32, total: u32 },
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("suite model is invalid ({} error(s)); first: {}", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    Invalid(Vec<ModelError>),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationWarning {
    LowConfidence { job: String, wallclock_s: f64 },
    Contaminated { job: String },
    UnknownQueue { job: String, queue: String },
}

impl fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationWarning::LowConfidence { job, wallclock_s } => write!(
                f,
                "job '{job}': wall-clock {wallclock_s} s is below counter resolution, energy is low-confidence"
            ),
            ValidationWarning::Contaminated { job } => {
                write!(f, "job '{job}': measured on a shared queue, energy may be overestimated")
            }
            ValidationWarning::UnknownQueue { job, queue } => {
                write!(f, "job '{job}': queue '{queue}' is not defined in the cluster")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<ModelError>,
    pub warnings: Vec<ValidationWarning>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Job catalog plus dependency edges and the ensemble/cluster configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteModel {
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub jobs: Vec<JobProfile>,
    #[serde(default)]
    pub edges: Vec<DependencyEdge>,
}

impl SuiteModel {
    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        serde_json::from_str(s).map_err(|e| ModelError::Parse(format!("suite model: {e}")))
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("suite model serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string())
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn job(&self, name: &str) -> Option<&JobProfile> {
        self.jobs.iter().find(|j| j.name == name)
    }

    pub fn category_of(&self, name: &str) -> Result<JobCategory, ModelError> {
        self.job(name)
            .map(|j| j.category)
            .ok_or_else(|| ModelError::UnknownJob(name.to_string()))
    }

    /// Same model with a different ensemble size.
    pub fn with_ensemble(&self, cfg: EnsembleConfig) -> Self {
        SuiteModel { ensemble: cfg, ..self.clone() }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if let Err(e) = self.ensemble.check() {
            report.errors.push(e);
        }
        if let Err(e) = self.cluster.check() {
            report.errors.push(e);
        }

        let mut seen = BTreeSet::new();
        for job in &self.jobs {
            if !seen.insert(job.name.as_str()) {
                report.errors.push(ModelError::DuplicateJob(job.name.clone()));
            }
            check_job(job, &mut report);
            if self.cluster.queue(&job.queue).is_none() {
                report.warnings.push(ValidationWarning::UnknownQueue {
                    job: job.name.clone(),
                    queue: job.queue.clone(),
                });
            }
        }

        let mut edges_ok = true;
        for edge in &self.edges {
            for end in [&edge.from_job, &edge.to_job] {
                if !seen.contains(end.as_str()) {
                    edges_ok = false;
                    report.errors.push(ModelError::UnknownJobInEdge {
                        from: edge.from_job.clone(),
                        to: edge.to_job.clone(),
                        missing: end.clone(),
                    });
                }
            }
        }
        if edges_ok {
            if let Some(cycle) = find_job_cycle(&self.edges) {
                report.errors.push(ModelError::CycleDetected(cycle));
            }
        }
        report
    }

    /// Expands the job-level DAG into per-member, per-repetition instances.
    pub fn expand(&self) -> Result<InstanceGraph, ModelError> {
        let report = self.validate();
        if !report.is_valid() {
            return Err(ModelError::Invalid(report.errors));
        }
        Ok(expand_valid(self))
    }
}

fn check_job(job: &JobProfile, report: &mut ValidationReport) {
    let name = &job.name;
    let mut numbers = vec![("wallclock_ctrl_s", job.wallclock_ctrl_s), ("wallclock_pert_s", job.wallclock_pert_s)];
    numbers.extend(job.energy.fields());
    numbers.extend(job.energy.variants_kj.iter().map(|&v| ("variants_kj", v)));
    for (field, value) in numbers {
        if !(value >= 0.0 && value.is_finite()) {
            report.errors.push(ModelError::NegativeValue { job: name.clone(), field: field.into() });
        }
    }
    if job.cores_per_member == 0 {
        report.errors.push(ModelError::InvalidCores(name.clone()));
    }
    if let Err(reason) = job.repetition.check() {
        report.errors.push(ModelError::InvalidRepetition { job: name.clone(), reason });
    }

    let e = &job.energy;
    let mismatch = |reason: &str| ModelError::RoleEnergyMismatch { job: name.clone(), reason: reason.into() };
    match job.role {
        MemberRole::ControlOnly => {
            if job.wallclock_pert_s != 0.0 {
                report.errors.push(mismatch("control-only job has a perturbed wall-clock"));
            }
            if e.per_perturbed_kj != 0.0 || e.per_any_kj != 0.0 {
                report.errors.push(mismatch("control-only job has per-perturbed or per-member energy"));
            }
        }
        MemberRole::PerturbedOnly => {
            if job.wallclock_ctrl_s != 0.0 {
                report.errors.push(mismatch("perturbed-only job has a control wall-clock"));
            }
            if e.per_control_kj != 0.0 {
                report.errors.push(mismatch("perturbed-only job has per-control energy"));
            }
        }
        MemberRole::All => {}
    }
    if !e.variants_kj.is_empty() {
        let mean = e.variants_kj.iter().sum::<f64>() / e.variants_kj.len() as f64;
        if (mean - e.per_any_kj).abs() > 1e-9 * mean.abs().max(1.0) {
            report.errors.push(mismatch("per_any_kj is not the mean of variants_kj"));
        }
    }

    if job.low_confidence {
        report.warnings.push(ValidationWarning::LowConfidence {
            job: name.clone(),
            wallclock_s: job.wallclock_ctrl_s.max(job.wallclock_pert_s),
        });
    }
    if job.contaminated {
        report.warnings.push(ValidationWarning::Contaminated { job: name.clone() });
    }
}

/// Finds a cycle in the job-level edge set, rotated to start at its
/// lexicographically smallest job.
pub fn find_job_cycle(edges: &[DependencyEdge]) -> Option<Vec<String>> {
    let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in edges {
        adj.entry(e.from_job.as_str()).or_default().insert(e.to_job.as_str());
        adj.entry(e.to_job.as_str()).or_default();
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark: HashMap<&str, Mark> = adj.keys().map(|k| (*k, Mark::New)).collect();

    for &root in adj.keys() {
        if mark[root] != Mark::New {
            continue;
        }
        // iterative DFS keeping the active path
        let mut path: Vec<&str> = vec![root];
        let mut iters = vec![adj[root].iter()];
        mark.insert(root, Mark::Active);
        while let Some(it) = iters.last_mut() {
            match it.next() {
                Some(&next) => match mark[next] {
                    Mark::New => {
                        mark.insert(next, Mark::Active);
                        path.push(next);
                        iters.push(adj[next].iter());
                    }
                    Mark::Active => {
                        let start = path.iter().position(|p| *p == next).expect("active node on path");
                        let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                        let min = cycle
                            .iter()
                            .enumerate()
                            .min_by(|a, b| a.1.cmp(b.1))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        cycle.rotate_left(min);
                        return Some(cycle);
                    }
                    Mark::Done => {}
                },
                None => {
                    let done = path.pop().expect("path tracks iterators");
                    mark.insert(done, Mark::Done);
                    iters.pop();
                }
            }
        }
    }
    None
}

pub(crate) fn instance_id(job: &str, member: u32, repeat: Option<u32>) -> String {
    match repeat {
        Some(r) => format!("{job}/m{member:03}/r{r:02}"),
        None => format!("{job}/m{member:03}"),
    }
}

fn expand_valid(model: &SuiteModel) -> InstanceGraph {
    let cfg = &model.ensemble;
    let mut instances = Vec::new();
    for job in &model.jobs {
        let count = job.instance_count(cfg);
        let fixed_share = if count > 0 { job.energy.fixed_kj / f64::from(count) } else { 0.0 };
        let reps = f64::from(job.repetition.instances);
        let waves = job.repetition.wave_of_each();
        for member in 0..cfg.n_total {
            let kind = cfg.kind_of(member);
            if !job.role.includes(kind) {
                continue;
            }
            let duration = job.instance_duration(kind);
            let energy = job.energy.per_member(kind) / reps + fixed_share;
            for (r, &wave) in waves.iter().enumerate() {
                let repeat = job.repetition.is_repeated().then_some(r as u32);
                instances.push(Instance {
                    id: instance_id(&job.name, member, repeat),
                    job: job.name.clone(),
                    category: job.category,
                    queue: job.queue.clone(),
                    cores: job.cores_per_member,
                    member,
                    kind,
                    repeat: r as u32,
                    wave,
                    duration_s: duration,
                    energy_kj: energy,
                });
            }
        }
    }

    // (job, member) -> (entry ids, exit ids), wave chains
    let mut groups: HashMap<(&str, u32), Vec<Vec<String>>> = HashMap::new();
    for inst in &instances {
        let waves = groups.entry((inst.job.as_str(), inst.member)).or_default();
        let w = inst.wave as usize;
        if waves.len() <= w {
            waves.resize(w + 1, Vec::new());
        }
        waves[w].push(inst.id.clone());
    }

    let mut edges: Vec<(String, String)> = Vec::new();
    for waves in groups.values() {
        for pair in waves.windows(2) {
            for a in &pair[0] {
                for b in &pair[1] {
                    edges.push((a.clone(), b.clone()));
                }
            }
        }
    }

    for edge in &model.edges {
        for src_member in 0..cfg.n_total {
            let Some(src) = groups.get(&(edge.from_job.as_str(), src_member)) else { continue };
            let targets: Vec<u32> = match edge.scope {
                EdgeScope::SameMember => vec![src_member],
                EdgeScope::ControlToAll if src_member < cfg.n_control => (0..cfg.n_total).collect(),
                EdgeScope::ControlToPerturbed if src_member < cfg.n_control => {
                    (cfg.n_control..cfg.n_total).collect()
                }
                _ => continue,
            };
            let exits = src.last().expect("group has a wave");
            for dst_member in targets {
                let Some(dst) = groups.get(&(edge.to_job.as_str(), dst_member)) else { continue };
                for a in exits {
                    for b in &dst[0] {
                        edges.push((a.clone(), b.clone()));
                    }
                }
            }
        }
    }

    InstanceGraph::from_parts(instances, edges).expect("expanded ids are unique and edges resolve")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(name: &str, role: MemberRole) -> JobProfile {
        let mut j = JobProfile::new(name, JobCategory::Other, role);
        match role {
            MemberRole::PerturbedOnly => j.wallclock_pert_s = 1.0,
            _ => {
                j.wallclock_ctrl_s = 1.0;
                if role == MemberRole::All {
                    j.wallclock_pert_s = 1.0;
                }
            }
        }
        j
    }

    #[test]
    fn empty_model_is_valid_without_warnings() {
        let m = SuiteModel::default();
        let r = m.validate();
        assert!(r.is_valid(), "{:?}", r.errors);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn two_cycle_is_named() {
        let m = SuiteModel {
            jobs: vec![job("A", MemberRole::All), job("B", MemberRole::All)],
            edges: vec![DependencyEdge::new("B", "A"), DependencyEdge::new("A", "B")],
            ..Default::default()
        };
        let r = m.validate();
        assert_eq!(r.errors, vec![ModelError::CycleDetected(vec!["A".into(), "B".into()])]);
        assert!(matches!(m.expand(), Err(ModelError::Invalid(_))));
    }

    #[test]
    fn dangling_edge_is_reported() {
        let m = SuiteModel {
            jobs: vec![job("A", MemberRole::All)],
            edges: vec![DependencyEdge::new("A", "Z")],
            ..Default::default()
        };
        let r = m.validate();
        assert_eq!(
            r.errors,
            vec![ModelError::UnknownJobInEdge { from: "A".into(), to: "Z".into(), missing: "Z".into() }]
        );
    }

    #[test]
    fn control_only_with_perturbed_energy_is_rejected() {
        let mut j = job("Screening", MemberRole::ControlOnly);
        j.energy = EnergyTerm::split(99.7, 1.0);
        let m = SuiteModel { jobs: vec![j], ..Default::default() };
        assert!(matches!(m.validate().errors[..], [ModelError::RoleEnergyMismatch { .. }]));
    }

    #[test]
    fn perturbed_only_with_control_wallclock_is_rejected() {
        let mut j = job("PertAna", MemberRole::PerturbedOnly);
        j.wallclock_ctrl_s = 3.0;
        let m = SuiteModel { jobs: vec![j], ..Default::default() };
        assert!(matches!(m.validate().errors[..], [ModelError::RoleEnergyMismatch { .. }]));
    }

    #[test]
    fn flags_become_warnings() {
        let mut j = job("FirstGuess", MemberRole::All);
        j.low_confidence = true;
        j.contaminated = true;
        let m = SuiteModel { jobs: vec![j], ..Default::default() };
        let r = m.validate();
        assert!(r.is_valid());
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn invalid_ensemble() {
        assert!(EnsembleConfig::new(0, 3).is_err());
        assert!(EnsembleConfig::new(4, 3).is_err());
        assert!(EnsembleConfig::new(1, 1).is_ok());
    }

    #[test]
    fn wave_widths_from_totals() {
        assert_eq!(RepetitionSpec::with_waves(13, 4).unwrap().wave_widths, vec![1, 4, 4, 4]);
        assert_eq!(RepetitionSpec::with_waves(1, 1).unwrap(), RepetitionSpec::default());
        assert_eq!(RepetitionSpec::with_waves(6, 3).unwrap().wave_widths, vec![1, 3, 2]);
        assert_eq!(RepetitionSpec::with_waves(3, 3).unwrap().wave_widths, vec![1, 1, 1]);
        assert!(RepetitionSpec::with_waves(2, 3).is_err());
    }

    #[test]
    fn inconsistent_repetition_is_rejected() {
        let mut j = job("gl_bd", MemberRole::All);
        j.repetition = RepetitionSpec { instances: 13, waves: 4, wave_widths: vec![1, 4, 4] };
        let m = SuiteModel { jobs: vec![j], ..Default::default() };
        assert!(matches!(m.validate().errors[..], [ModelError::InvalidRepetition { .. }]));
    }

    #[test]
    fn category_lookup() {
        let mut j = job("PertAna", MemberRole::PerturbedOnly);
        j.category = JobCategory::Other;
        let m = SuiteModel { jobs: vec![j], ..Default::default() };
        assert_eq!(m.category_of("PertAna").unwrap(), JobCategory::Other);
        assert_eq!(m.category_of("NoSuchJob"), Err(ModelError::UnknownJob("NoSuchJob".into())));
    }

    #[test]
    fn single_member_single_instance() {
        let m = SuiteModel {
            ensemble: EnsembleConfig::new(1, 1).unwrap(),
            jobs: vec![job("A", MemberRole::All)],
            ..Default::default()
        };
        let g = m.expand().unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.instance(0).id, "A/m000");
    }

    #[test]
    fn control_to_perturbed_edges_fan_out() {
        let mut a = job("Blend", MemberRole::ControlOnly);
        a.category = JobCategory::DataAssimilation;
        let b = job("PertAna", MemberRole::PerturbedOnly);
        let m = SuiteModel {
            ensemble: EnsembleConfig::new(2, 5).unwrap(),
            jobs: vec![a, b],
            edges: vec![DependencyEdge::scoped("Blend", "PertAna", EdgeScope::ControlToPerturbed)],
            ..Default::default()
        };
        let g = m.expand().unwrap();
        assert_eq!(g.len(), 5);
        for i in 0..g.len() {
            let inst = g.instance(i);
            if inst.job == "PertAna" {
                assert_eq!(g.preds(i).len(), 2);
            } else {
                assert_eq!(g.succs(i).len(), 3);
            }
        }
    }

    #[test]
    fn same_member_edge_skips_members_without_instances() {
        let m = SuiteModel {
            ensemble: EnsembleConfig::new(1, 3).unwrap(),
            jobs: vec![job("Screening", MemberRole::ControlOnly), job("Forecast", MemberRole::All)],
            edges: vec![DependencyEdge::new("Screening", "Forecast")],
            ..Default::default()
        };
        let g = m.expand().unwrap();
        let edges: usize = (0..g.len()).map(|i| g.preds(i).len()).sum();
        assert_eq!(edges, 1);
    }

    #[test]
    fn energy_term_round_trips_through_json() {
        let t = EnergyTerm::from_variants(vec![4957.4, 7982.3]);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<EnergyTerm>(&s).unwrap(), t);
        assert!((t.per_any_kj - 6469.85).abs() < 1e-9);
    }

    #[test]
    fn ensemble_uses_short_keys() {
        let s = serde_json::to_string(&EnsembleConfig::default()).unwrap();
        assert_eq!(s, r#"{"n":2,"N":22}"#);
    }
}
