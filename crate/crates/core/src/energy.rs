//! Energy and wall-clock accounting over a suite model.
//!
//! Energy is schedule-independent: member runs may overlap in time, but their
//! energies always add. All quantities are in kJ, seconds and kW.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::model::{EnergyTerm, EnsembleConfig, JobCategory, JobProfile, MemberKind, SuiteModel};

/// Published rounded suite total for `n = 2`, `N = 22`, in kJ.
pub const PUBLISHED_TOTAL_2_22_KJ: f64 = 146_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("fraction denominator is zero")]
    DegenerateTotal,
    #[error("csv export failed: {0}")]
    Export(String),
}

/// `a·n + b·(N−n) + c·N + d`.
pub fn job_energy(term: &EnergyTerm, cfg: &EnsembleConfig) -> f64 {
    term.evaluate(cfg)
}

/// Suite energy as `A·n + B·N + D`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AffineTotal {
    pub per_control_kj: f64,
    pub per_member_kj: f64,
    pub fixed_kj: f64,
}

impl AffineTotal {
    pub fn evaluate(&self, cfg: &EnsembleConfig) -> f64 {
        self.per_control_kj * f64::from(cfg.n_control) + self.per_member_kj * f64::from(cfg.n_total) + self.fixed_kj
    }
}

pub fn affine_total(model: &SuiteModel) -> AffineTotal {
    model.jobs.iter().fold(AffineTotal::default(), |acc, job| {
        let e = &job.energy;
        AffineTotal {
            per_control_kj: acc.per_control_kj + (e.per_control_kj - e.per_perturbed_kj),
            per_member_kj: acc.per_member_kj + (e.per_perturbed_kj + e.per_any_kj),
            fixed_kj: acc.fixed_kj + e.fixed_kj,
        }
    })
}

/// Suite total by job-by-job summation.
pub fn suite_total(model: &SuiteModel, cfg: &EnsembleConfig) -> f64 {
    model.jobs.iter().map(|j| job_energy(&j.energy, cfg)).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BreakdownOptions {
    pub exclude_forecast: bool,
    pub exclude_contaminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub per_job_kj: BTreeMap<String, f64>,
    pub per_category_kj: BTreeMap<JobCategory, f64>,
    pub total_kj: f64,
    pub fractions: BTreeMap<JobCategory, f64>,
    /// Fractions are over the non-Forecast total.
    pub forecast_excluded: bool,
    /// Contaminated jobs were left out of every figure.
    pub contaminated_excluded: bool,
    /// Jobs whose energy was measured on a shared queue.
    pub contaminated_jobs: Vec<String>,
}

fn breakdown_from<'a>(
    jobs: impl Iterator<Item = (&'a JobProfile, f64)>,
    opts: BreakdownOptions,
) -> Result<EnergyBreakdown, EnergyError> {
    let mut per_job_kj = BTreeMap::new();
    let mut per_category_kj = BTreeMap::new();
    let mut contaminated_jobs = Vec::new();
    for (job, kj) in jobs {
        if job.contaminated {
            contaminated_jobs.push(job.name.clone());
            if opts.exclude_contaminated {
                continue;
            }
        }
        *per_job_kj.entry(job.name.clone()).or_insert(0.0) += kj;
        *per_category_kj.entry(job.category).or_insert(0.0) += kj;
    }
    let total_kj: f64 = per_job_kj.values().sum();

    let counted = |c: &JobCategory| !(opts.exclude_forecast && *c == JobCategory::Forecast);
    let denom: f64 = per_category_kj.iter().filter(|(c, _)| counted(c)).map(|(_, v)| v).sum();
    if denom == 0.0 {
        return Err(EnergyError::DegenerateTotal);
    }
    let fractions = per_category_kj
        .iter()
        .filter(|(c, _)| counted(c))
        .map(|(c, v)| (*c, v / denom))
        .collect();
    Ok(EnergyBreakdown {
        per_job_kj,
        per_category_kj,
        total_kj,
        fractions,
        forecast_excluded: opts.exclude_forecast,
        contaminated_excluded: opts.exclude_contaminated,
        contaminated_jobs,
    })
}

/// Whole-suite energy per job and category for ensemble `cfg`.
pub fn category_breakdown(
    model: &SuiteModel,
    cfg: &EnsembleConfig,
    opts: BreakdownOptions,
) -> Result<EnergyBreakdown, EnergyError> {
    breakdown_from(model.jobs.iter().map(|j| (j, job_energy(&j.energy, cfg))), opts)
}

/// Energy of a single member of the given kind.
pub fn member_breakdown(
    model: &SuiteModel,
    cfg: &EnsembleConfig,
    kind: MemberKind,
    opts: BreakdownOptions,
) -> Result<EnergyBreakdown, EnergyError> {
    let jobs = model
        .jobs
        .iter()
        .filter(|j| j.role.includes(kind))
        .map(|j| (j, member_energy(j, cfg, kind)));
    breakdown_from(jobs, opts)
}

/// Energy of one member-level run of `job`: the role coefficient plus an
/// equal share of the fixed part.
pub fn member_energy(job: &JobProfile, cfg: &EnsembleConfig, kind: MemberKind) -> f64 {
    let members = job.member_count(cfg);
    let fixed = if members > 0 { job.energy.fixed_kj / f64::from(members) } else { 0.0 };
    job.energy.per_member(kind) + fixed
}

/// Energy of each physics variant of a job whose per-member coefficient is
/// split over variants (the members divide equally between them).
pub fn variant_energies(term: &EnergyTerm, cfg: &EnsembleConfig) -> Vec<f64> {
    let k = term.variants_kj.len() as f64;
    term.variants_kj.iter().map(|v| v * f64::from(cfg.n_total) / k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallclockBreakdown {
    pub kind: MemberKind,
    pub per_category_s: BTreeMap<JobCategory, f64>,
    pub total_s: f64,
    pub fractions: BTreeMap<JobCategory, f64>,
}

/// Serial per-member wall-clock by category for one member kind.
pub fn wallclock_breakdown(model: &SuiteModel, kind: MemberKind) -> WallclockBreakdown {
    let mut per_category_s = BTreeMap::new();
    for job in model.jobs.iter().filter(|j| j.role.includes(kind)) {
        *per_category_s.entry(job.category).or_insert(0.0) += job.wallclock(kind);
    }
    let total_s: f64 = per_category_s.values().sum();
    let fractions = per_category_s
        .iter()
        .map(|(c, v)| (*c, if total_s > 0.0 { v / total_s } else { 0.0 }))
        .collect();
    WallclockBreakdown { kind, per_category_s, total_s, fractions }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub job: String,
    pub role: MemberKind,
    pub wallclock_s: f64,
    pub energy_kj: f64,
    pub power_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerScatter {
    pub points: Vec<ScatterPoint>,
    /// Power of one idle node; the reference line is `energy = idle_power_kw · t`.
    pub idle_power_kw: f64,
    /// Jobs left out because their wall-clock is zero.
    pub skipped: Vec<String>,
}

impl PowerScatter {
    pub fn point(&self, job: &str, role: MemberKind) -> Option<&ScatterPoint> {
        self.points.iter().find(|p| p.job == job && p.role == role)
    }

    /// Energy on the idle line after `duration_s`.
    pub fn idle_energy_kj(&self, duration_s: f64) -> f64 {
        self.idle_power_kw * duration_s
    }

    /// Writes points, iso-power lines and the idle line as one CSV.
    /// Line samples use the job column for the line label and `reference`
    /// as the role.
    pub fn write_csv<W: Write>(&self, out: W, iso_powers_kw: &[f64], sample_s: &[f64]) -> Result<(), EnergyError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| EnergyError::Export(e.to_string());
        w.write_record(["job", "role", "wallclock_s", "energy_kj", "power_kw"]).map_err(err)?;
        for p in &self.points {
            w.write_record([
                p.job.clone(),
                p.role.to_string(),
                p.wallclock_s.to_string(),
                p.energy_kj.to_string(),
                p.power_kw.to_string(),
            ])
            .map_err(err)?;
        }
        let lines = iso_powers_kw
            .iter()
            .map(|&p| (format!("iso_{p}kW"), p))
            .chain(std::iter::once(("idle".to_string(), self.idle_power_kw)));
        for (label, power) in lines {
            for &t in sample_s {
                w.write_record([
                    label.clone(),
                    "reference".to_string(),
                    t.to_string(),
                    (power * t).to_string(),
                    power.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| EnergyError::Export(e.to_string()))
    }
}

/// One point per (job, member kind) with per-member wall-clock and energy.
pub fn power_scatter(model: &SuiteModel, cfg: &EnsembleConfig) -> PowerScatter {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for job in &model.jobs {
        for kind in [MemberKind::Control, MemberKind::Perturbed] {
            if !job.role.includes(kind) {
                continue;
            }
            let wallclock_s = job.wallclock(kind);
            if wallclock_s <= 0.0 {
                log::warn!("power scatter: skipping {} ({kind}) with zero wall-clock", job.name);
                skipped.push(job.name.clone());
                continue;
            }
            let energy_kj = member_energy(job, cfg, kind);
            points.push(ScatterPoint {
                job: job.name.clone(),
                role: kind,
                wallclock_s,
                energy_kj,
                power_kw: energy_kj / wallclock_s,
            });
        }
    }
    PowerScatter { points, idle_power_kw: model.cluster.idle_power_kw, skipped }
}

/// Writes the energy breakdown as CSV: one row per job, then one per category.
pub fn write_breakdown_csv<W: Write>(b: &EnergyBreakdown, out: W) -> Result<(), EnergyError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| EnergyError::Export(e.to_string());
    w.write_record(["scope", "name", "energy_kj", "fraction", "contaminated"]).map_err(err)?;
    let total = b.total_kj;
    for (job, kj) in &b.per_job_kj {
        let frac = if total > 0.0 { kj / total } else { 0.0 };
        let flag = b.contaminated_jobs.contains(job);
        w.write_record(["job", job, &kj.to_string(), &frac.to_string(), &flag.to_string()])
            .map_err(err)?;
    }
    for (cat, kj) in &b.per_category_kj {
        let frac = b.fractions.get(cat).map(|f| f.to_string()).unwrap_or_default();
        w.write_record(["category", cat.as_str(), &kj.to_string(), &frac, ""]).map_err(err)?;
    }
    w.flush().map_err(|e| EnergyError::Export(e.to_string()))
}
