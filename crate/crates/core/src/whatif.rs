//! Scenario transforms over a suite model and closed-form speedup bounds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{category_breakdown, suite_total, BreakdownOptions};
use crate::model::{EnsembleConfig, JobCategory, MemberKind, ModelError, SuiteModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WhatIfError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{category} is the whole {path} path; the speedup bound is infinite")]
    DegeneratePath { category: JobCategory, path: MemberKind },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

/// A what-if scenario. Absent entries mean "unchanged".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(rename = "n_prime", default, skip_serializing_if = "Option::is_none")]
    pub control_members: Option<u32>,
    #[serde(rename = "N_prime", default, skip_serializing_if = "Option::is_none")]
    pub total_members: Option<u32>,
    /// Wall-clock divisor per category, each ≥ 1.
    #[serde(default)]
    pub speedup: BTreeMap<JobCategory, f64>,
    /// Energy multiplier per category, each ≥ 0.
    #[serde(default)]
    pub energy_factor: BTreeMap<JobCategory, f64>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub io_scale: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub compute_scale: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            control_members: None,
            total_members: None,
            speedup: BTreeMap::new(),
            energy_factor: BTreeMap::new(),
            io_scale: 1.0,
            compute_scale: 1.0,
        }
    }
}

impl Scenario {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn members(n: u32, total: u32) -> Self {
        Scenario { control_members: Some(n), total_members: Some(total), ..Default::default() }
    }

    pub fn with_speedup(mut self, category: JobCategory, divisor: f64) -> Self {
        self.speedup.insert(category, divisor);
        self
    }

    pub fn with_energy_factor(mut self, category: JobCategory, factor: f64) -> Self {
        self.energy_factor.insert(category, factor);
        self
    }

    pub fn from_json_str(s: &str) -> Result<Self, WhatIfError> {
        let s: Scenario = serde_json::from_str(s).map_err(|e| WhatIfError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WhatIfError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| WhatIfError::InvalidScenario(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), WhatIfError> {
        for (c, d) in &self.speedup {
            if !d.is_finite() || *d < 1.0 {
                return Err(WhatIfError::InvalidScenario(format!("speedup for {c} must be a finite value >= 1, got {d}")));
            }
        }
        for (c, f) in &self.energy_factor {
            if !f.is_finite() || *f < 0.0 {
                return Err(WhatIfError::InvalidScenario(format!("energy factor for {c} must be >= 0, got {f}")));
            }
        }
        for (name, v) in [("io_scale", self.io_scale), ("compute_scale", self.compute_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(WhatIfError::InvalidScenario(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Target ensemble given the model's current one.
    pub fn ensemble(&self, current: &EnsembleConfig) -> EnsembleConfig {
        EnsembleConfig {
            n_control: self.control_members.unwrap_or(current.n_control),
            n_total: self.total_members.unwrap_or(current.n_total),
        }
    }

    /// Pointwise product with `later`; member counts come from `later` when set.
    pub fn then(&self, later: &Scenario) -> Scenario {
        let product = |a: &BTreeMap<JobCategory, f64>, b: &BTreeMap<JobCategory, f64>| {
            let mut out = a.clone();
            for (c, v) in b {
                *out.entry(*c).or_insert(1.0) *= v;
            }
            out
        };
        Scenario {
            control_members: later.control_members.or(self.control_members),
            total_members: later.total_members.or(self.total_members),
            speedup: product(&self.speedup, &later.speedup),
            energy_factor: product(&self.energy_factor, &later.energy_factor),
            io_scale: self.io_scale * later.io_scale,
            compute_scale: self.compute_scale * later.compute_scale,
        }
    }
}

/// Returns a new model with wall-clocks divided by the category speedup,
/// energies multiplied by the category energy factor and the ensemble set to
/// the scenario's target.
pub fn apply_scenario(model: &SuiteModel, s: &Scenario) -> Result<SuiteModel, WhatIfError> {
    s.validate()?;
    let ensemble = s.ensemble(&model.ensemble);
    ensemble.check()?;
    let mut out = model.clone();
    out.ensemble = ensemble;
    for job in &mut out.jobs {
        if let Some(d) = s.speedup.get(&job.category) {
            job.wallclock_ctrl_s /= d;
            job.wallclock_pert_s /= d;
        }
        if let Some(f) = s.energy_factor.get(&job.category) {
            job.energy = job.energy.scaled(*f);
        }
    }
    Ok(out)
}

/// Serial per-member path time for `kind`, optionally only one category.
pub fn path_time(model: &SuiteModel, kind: MemberKind, only: Option<JobCategory>) -> f64 {
    model
        .jobs
        .iter()
        .filter(|j| j.role.includes(kind) && only.is_none_or(|c| j.category == c))
        .map(|j| j.wallclock(kind))
        .sum()
}

/// Limit of the path speedup when `category` takes no time: `T / (T − T_cat)`.
pub fn max_speedup(model: &SuiteModel, category: JobCategory, path: MemberKind) -> Result<f64, WhatIfError> {
    let total = path_time(model, path, None);
    let cat = path_time(model, path, Some(category));
    let rest = total - cat;
    if rest <= 0.0 {
        return Err(WhatIfError::DegeneratePath { category, path });
    }
    Ok(total / rest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Savings {
    pub saved_kj: f64,
    /// Relative to the baseline suite total.
    pub fraction: f64,
}

/// Energy saved when `category` energy is multiplied by `factor` ∈ [0, 1].
pub fn energy_savings(
    model: &SuiteModel,
    cfg: &EnsembleConfig,
    category: JobCategory,
    factor: f64,
) -> Result<Savings, WhatIfError> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(WhatIfError::InvalidScenario(format!("energy factor must lie in [0, 1], got {factor}")));
    }
    let total = suite_total(model, cfg);
    let cat = category_breakdown(model, cfg, BreakdownOptions::default())
        .map(|b| b.per_category_kj.get(&category).copied().unwrap_or(0.0))
        .unwrap_or(0.0);
    let saved_kj = (1.0 - factor) * cat;
    let fraction = if total > 0.0 { saved_kj / total } else { 0.0 };
    Ok(Savings { saved_kj, fraction })
}
