//! Profiler output ingestion.
//!
//! Two line-oriented text formats stand in for MPI and IO profiler logs:
//!
//! ```text
//! mpiprof v1                 ioprof v1
//! # comment                  job=Canari
//! job=Forecast               mode=single
//! wallclock_s=1290           wallclock_s=12.5
//! mpi_time_s=210             read_bytes=1048576
//! ranks=612                  write_bytes=4096
//!                            file_opens=3
//! ```
//!
//! The first line is the format header. Blank lines and `#` comments are
//! ignored, every other line is `key=value`. Values are numbers except for
//! `job` and `mode`. Keys outside the known set are kept as extra metrics.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ClusterSpec, EnergyTerm, EnsembleConfig, JobCategory, JobProfile, MemberRole, RepetitionSpec, SuiteModel,
};

/// Jobs shorter than this many seconds get a low-confidence energy flag.
pub const DEFAULT_RESOLUTION_THRESHOLD_S: f64 = 1.0;

pub const MPI_HEADER: &str = "mpiprof v1";
pub const IO_HEADER: &str = "ioprof v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("missing key '{0}'")]
    MissingKey(String),
    #[error("parallel profile (ranks={ranks}) cannot be read in single mode")]
    ModeMismatch { ranks: f64 },
    #[error("record for job '{found}' cannot be merged into job '{expected}'")]
    JobNameMismatch { expected: String, found: String },
    #[error("duplicate source: {0}")]
    DuplicateSource(String),
    #[error("no records to merge")]
    NoRecords,
    #[error("measurement table schema: {0}")]
    Schema(String),
    #[error("row {row}: column '{column}' is negative")]
    NegativeValue { row: usize, column: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProfileSource {
    MpiProfile,
    IoProfileParallel,
    IoProfileSingle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoMode {
    Parallel,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProfileRecord {
    pub job: String,
    pub source: ProfileSource,
    pub metrics: BTreeMap<String, f64>,
    /// File the record was read from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl RawProfileRecord {
    pub fn metric(&self, key: &str) -> f64 {
        self.metrics.get(key).copied().unwrap_or(0.0)
    }

    fn is_io(&self) -> bool {
        self.source != ProfileSource::MpiProfile
    }
}

struct KeyValues {
    job: Option<String>,
    mode: Option<(usize, String)>,
    metrics: BTreeMap<String, f64>,
    lines: BTreeMap<String, usize>,
}

fn parse_key_values(text: &str, header: &str) -> Result<KeyValues, ProfileError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == header => {}
        Some((_, h)) => {
            return Err(ProfileError::Format { line: 1, message: format!("expected header '{header}', found '{h}'") })
        }
        None => return Err(ProfileError::Format { line: 1, message: format!("empty file, expected header '{header}'") }),
    }
    let mut kv = KeyValues { job: None, mode: None, metrics: BTreeMap::new(), lines: BTreeMap::new() };
    for (line, l) in lines {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let Some((key, value)) = l.split_once('=') else {
            return Err(ProfileError::Format { line, message: format!("expected key=value, found '{l}'") });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-') {
            return Err(ProfileError::Format { line, message: format!("invalid key '{key}'") });
        }
        if kv.lines.insert(key.to_string(), line).is_some() {
            return Err(ProfileError::Format { line, message: format!("duplicate key '{key}'") });
        }
        match key {
            "job" if value.is_empty() => {
                return Err(ProfileError::Format { line, message: "empty job name".into() })
            }
            "job" => kv.job = Some(value.to_string()),
            "mode" => kv.mode = Some((line, value.to_ascii_lowercase())),
            _ => {
                let v: f64 = value.parse().map_err(|_| ProfileError::Format {
                    line,
                    message: format!("value of '{key}' is not a number: '{value}'"),
                })?;
                if !v.is_finite() {
                    return Err(ProfileError::Format { line, message: format!("value of '{key}' is not finite") });
                }
                kv.metrics.insert(key.to_string(), v);
            }
        }
    }
    Ok(kv)
}

impl KeyValues {
    fn require(&self, key: &str) -> Result<f64, ProfileError> {
        self.metrics.get(key).copied().ok_or_else(|| ProfileError::MissingKey(key.to_string()))
    }

    fn line_of(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(1)
    }

    fn check_positive(&self, key: &str) -> Result<(), ProfileError> {
        if self.require(key)? <= 0.0 {
            return Err(ProfileError::Format { line: self.line_of(key), message: format!("'{key}' must be positive") });
        }
        Ok(())
    }

    fn check_count(&self, key: &str) -> Result<(), ProfileError> {
        if let Some(&v) = self.metrics.get(key) {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(ProfileError::Format {
                    line: self.line_of(key),
                    message: format!("'{key}' must be a non-negative integer"),
                });
            }
        }
        Ok(())
    }

    fn check_ranks(&self) -> Result<(), ProfileError> {
        let r = self.require("ranks")?;
        if r < 1.0 || r.fract() != 0.0 {
            return Err(ProfileError::Format { line: self.line_of("ranks"), message: "'ranks' must be an integer >= 1".into() });
        }
        Ok(())
    }
}

/// Parses an `mpiprof v1` document.
pub fn parse_mpi_profile(text: &str) -> Result<RawProfileRecord, ProfileError> {
    let kv = parse_key_values(text, MPI_HEADER)?;
    let job = kv.job.clone().ok_or_else(|| ProfileError::MissingKey("job".into()))?;
    if let Some((line, _)) = kv.mode {
        return Err(ProfileError::Format { line, message: "'mode' is not an mpiprof key".into() });
    }
    kv.check_positive("wallclock_s")?;
    let mpi = kv.require("mpi_time_s")?;
    if mpi < 0.0 {
        return Err(ProfileError::Format { line: kv.line_of("mpi_time_s"), message: "'mpi_time_s' must be non-negative".into() });
    }
    kv.check_ranks()?;
    kv.check_count("mpi_bytes")?;
    if kv.metrics.get("cpu_s").is_some_and(|v| *v < 0.0) {
        return Err(ProfileError::Format { line: kv.line_of("cpu_s"), message: "'cpu_s' must be non-negative".into() });
    }
    Ok(RawProfileRecord { job, source: ProfileSource::MpiProfile, metrics: kv.metrics, origin: None })
}

/// Parses an `ioprof v1` document. Single mode forces `ranks = 1` and
/// rejects files that describe a parallel run.
pub fn parse_io_profile(text: &str, mode: IoMode) -> Result<RawProfileRecord, ProfileError> {
    let mut kv = parse_key_values(text, IO_HEADER)?;
    let job = kv.job.clone().ok_or_else(|| ProfileError::MissingKey("job".into()))?;
    kv.check_positive("wallclock_s")?;
    for key in ["read_bytes", "write_bytes", "file_opens"] {
        kv.require(key)?;
        kv.check_count(key)?;
    }
    let declared = match &kv.mode {
        None => None,
        Some((_, m)) if m == "single" => Some(IoMode::Single),
        Some((_, m)) if m == "parallel" => Some(IoMode::Parallel),
        Some((line, m)) => {
            return Err(ProfileError::Format { line: *line, message: format!("unknown mode '{m}'") })
        }
    };
    let source = match mode {
        IoMode::Parallel => {
            kv.check_ranks()?;
            ProfileSource::IoProfileParallel
        }
        IoMode::Single => {
            let ranks = kv.metrics.get("ranks").copied().unwrap_or(1.0);
            if declared == Some(IoMode::Parallel) || ranks != 1.0 {
                return Err(ProfileError::ModeMismatch { ranks });
            }
            kv.metrics.insert("ranks".into(), 1.0);
            ProfileSource::IoProfileSingle
        }
    };
    Ok(RawProfileRecord { job, source, metrics: kv.metrics, origin: None })
}

fn read_text(path: &Path) -> Result<String, ProfileError> {
    std::fs::read_to_string(path).map_err(|e| ProfileError::Io(format!("{}: {e}", path.display())))
}

pub fn read_mpi_profile(path: impl AsRef<Path>) -> Result<RawProfileRecord, ProfileError> {
    let path = path.as_ref();
    let mut r = parse_mpi_profile(&read_text(path)?)?;
    r.origin = Some(path.display().to_string());
    Ok(r)
}

pub fn read_io_profile(path: impl AsRef<Path>, mode: IoMode) -> Result<RawProfileRecord, ProfileError> {
    let path = path.as_ref();
    let mut r = parse_io_profile(&read_text(path)?, mode)?;
    r.origin = Some(path.display().to_string());
    Ok(r)
}

/// One step of a synthetic job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Phase {
    IoRead { bytes: u64 },
    Compute { duration_s: f64 },
    MpiExchange { bytes: u64, ranks: u32 },
    IoWrite { bytes: u64 },
}

/// Everything known about one job from all its profiler records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedJobProfile {
    pub job: String,
    pub phases: Vec<Phase>,
    pub provenance: Vec<String>,
}

impl UnifiedJobProfile {
    pub fn from_json_str(s: &str) -> Result<Self, ProfileError> {
        let p: UnifiedJobProfile =
            serde_json::from_str(s).map_err(|e| ProfileError::Format { line: e.line(), message: e.to_string() })?;
        if p.phases.is_empty() {
            return Err(ProfileError::Format { line: 1, message: format!("profile '{}' has no phases", p.job) });
        }
        Ok(p)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("profile serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        Self::from_json_str(&read_text(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| ProfileError::Io(format!("{}: {e}", path.display())))
    }
}

/// Merges the records of one job into phases `[IoRead, Compute, MpiExchange,
/// IoWrite]`. Compute time is the MPI record's wall-clock minus its MPI time,
/// or the summed IO-record wall-clock when no MPI record exists.
pub fn merge_profiles(records: &[RawProfileRecord]) -> Result<UnifiedJobProfile, ProfileError> {
    let first = records.first().ok_or(ProfileError::NoRecords)?;
    let job = first.job.clone();
    if let Some(r) = records.iter().find(|r| r.job != job) {
        // report the lexicographically smaller name as expected so the error
        // does not depend on input order
        let (a, b) = if r.job < job { (r.job.clone(), job.clone()) } else { (job.clone(), r.job.clone()) };
        return Err(ProfileError::JobNameMismatch { expected: a, found: b });
    }
    let mpi: Vec<&RawProfileRecord> = records.iter().filter(|r| !r.is_io()).collect();
    if mpi.len() > 1 {
        return Err(ProfileError::DuplicateSource(format!("job '{job}' has {} MPI profiles", mpi.len())));
    }
    let mut provenance: Vec<String> = records.iter().filter_map(|r| r.origin.clone()).collect();
    provenance.sort();
    if let Some(w) = provenance.windows(2).find(|w| w[0] == w[1]) {
        return Err(ProfileError::DuplicateSource(w[0].clone()));
    }

    let io: Vec<&RawProfileRecord> = records.iter().filter(|r| r.is_io()).collect();
    let mut phases = Vec::with_capacity(4);
    if !io.is_empty() {
        let read: f64 = io.iter().map(|r| r.metric("read_bytes")).sum();
        phases.push(Phase::IoRead { bytes: read as u64 });
    }
    let compute = match mpi.first() {
        Some(m) => {
            let (wall, comm) = (m.metric("wallclock_s"), m.metric("mpi_time_s"));
            if comm > wall {
                log::warn!("job '{job}': mpi_time_s {comm} exceeds wallclock_s {wall}; compute clamped to 0");
            }
            (wall - comm).max(0.0)
        }
        None => {
            // order-independent sum
            let mut walls: Vec<f64> = io.iter().map(|r| r.metric("wallclock_s")).collect();
            walls.sort_by(f64::total_cmp);
            walls.iter().sum()
        }
    };
    phases.push(Phase::Compute { duration_s: compute });
    if let Some(m) = mpi.first() {
        phases.push(Phase::MpiExchange { bytes: m.metric("mpi_bytes") as u64, ranks: m.metric("ranks") as u32 });
    }
    if !io.is_empty() {
        let written: f64 = io.iter().map(|r| r.metric("write_bytes")).sum();
        phases.push(Phase::IoWrite { bytes: written as u64 });
    }
    Ok(UnifiedJobProfile { job, phases, provenance })
}

/// Groups records by job and merges each group. Output is sorted by job.
pub fn merge_all(records: Vec<RawProfileRecord>) -> Result<Vec<UnifiedJobProfile>, ProfileError> {
    let mut by_job: BTreeMap<String, Vec<RawProfileRecord>> = BTreeMap::new();
    for r in records {
        by_job.entry(r.job.clone()).or_default().push(r);
    }
    by_job.values().map(|rs| merge_profiles(rs)).collect()
}

/// Column order of the measurement table.
pub const MEASUREMENT_COLUMNS: [&str; 14] = [
    "job",
    "stage",
    "queue",
    "cores_per_member",
    "wallclock_ctrl_s",
    "wallclock_pert_s",
    "a_per_control_kj",
    "b_per_perturbed_kj",
    "c_per_any_kj",
    "d_fixed_kj",
    "role",
    "repeat_instances",
    "repeat_waves",
    "contaminated",
];

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64, ProfileError> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "--" {
        return Ok(0.0);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| ProfileError::Schema(format!("row {row}: column '{column}' is not a number: '{cell}'")))?;
    if !v.is_finite() {
        return Err(ProfileError::Schema(format!("row {row}: column '{column}' is not finite")));
    }
    if v < 0.0 {
        return Err(ProfileError::NegativeValue { row, column: column.to_string() });
    }
    Ok(v)
}

fn parse_count(cell: &str, row: usize, column: &str, default: u32) -> Result<u32, ProfileError> {
    if cell.trim().is_empty() {
        return Ok(default);
    }
    let v = parse_number(cell, row, column)?;
    if v.fract() != 0.0 || v > f64::from(u32::MAX) {
        return Err(ProfileError::Schema(format!("row {row}: column '{column}' must be an integer")));
    }
    Ok(v as u32)
}

fn parse_flag(cell: &str, row: usize) -> Result<bool, ProfileError> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "" | "false" | "no" | "0" => Ok(false),
        "true" | "yes" | "1" => Ok(true),
        other => Err(ProfileError::Schema(format!("row {row}: contaminated must be true/false, got '{other}'"))),
    }
}

/// Reads the per-job measurement table into a jobs-only suite model with the
/// default ensemble and cluster. Jobs whose longest wall-clock is below
/// `resolution_s` are flagged low-confidence.
///
/// `c_per_any_kj` may hold a `;`-separated list of per-variant values, in
/// which case the coefficient is their mean.
pub fn ingest_measurements<R: Read>(input: R, resolution_s: f64) -> Result<SuiteModel, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let headers = rdr.headers().map_err(|e| ProfileError::Schema(e.to_string()))?.clone();
    let found: Vec<&str> = headers.iter().collect();
    if found != MEASUREMENT_COLUMNS {
        return Err(ProfileError::Schema(format!(
            "expected columns {}, found {}",
            MEASUREMENT_COLUMNS.join(","),
            found.join(",")
        )));
    }

    let mut jobs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| ProfileError::Schema(format!("row {row}: {e}")))?;
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize| parse_number(cell(k), row, MEASUREMENT_COLUMNS[k]);

        let name = cell(0).to_string();
        if name.is_empty() {
            return Err(ProfileError::Schema(format!("row {row}: empty job name")));
        }
        let category: JobCategory = cell(1).parse().map_err(|e| ProfileError::Schema(format!("row {row}: {e}")))?;
        let role: MemberRole = cell(10).parse().map_err(|e| ProfileError::Schema(format!("row {row}: {e}")))?;
        let c_cell = cell(8);
        let energy_any = if c_cell.contains(';') {
            let variants = c_cell
                .split(';')
                .map(|v| parse_number(v, row, MEASUREMENT_COLUMNS[8]))
                .collect::<Result<Vec<_>, _>>()?;
            EnergyTerm::from_variants(variants)
        } else {
            EnergyTerm::per_any(num(8)?)
        };
        let energy = EnergyTerm {
            per_control_kj: num(6)?,
            per_perturbed_kj: num(7)?,
            fixed_kj: num(9)?,
            ..energy_any
        };
        let instances = parse_count(cell(11), row, MEASUREMENT_COLUMNS[11], 1)?;
        let waves = parse_count(cell(12), row, MEASUREMENT_COLUMNS[12], 1)?;
        let repetition =
            RepetitionSpec::with_waves(instances, waves).map_err(|e| ProfileError::Schema(format!("row {row}: {e}")))?;

        let mut job = JobProfile::new(name, category, role);
        job.queue = cell(2).to_string();
        job.cores_per_member = parse_count(cell(3), row, MEASUREMENT_COLUMNS[3], 1)?;
        job.wallclock_ctrl_s = num(4)?;
        job.wallclock_pert_s = num(5)?;
        job.energy = energy;
        job.repetition = repetition;
        job.contaminated = parse_flag(cell(13), row)?;
        job.low_confidence = job.wallclock_ctrl_s.max(job.wallclock_pert_s) < resolution_s;
        jobs.push(job);
    }

    Ok(SuiteModel {
        ensemble: EnsembleConfig::default(),
        cluster: ClusterSpec::default(),
        jobs,
        edges: Vec::new(),
    })
}

pub fn load_measurements(path: impl AsRef<Path>, resolution_s: f64) -> Result<SuiteModel, ProfileError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| ProfileError::Io(format!("{}: {e}", path.display())))?;
    ingest_measurements(file, resolution_s)
}

/// Writes the job catalog back in the measurement table schema.
pub fn write_measurements<W: Write>(jobs: &[JobProfile], out: W) -> Result<(), ProfileError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| ProfileError::Io(e.to_string());
    w.write_record(MEASUREMENT_COLUMNS).map_err(err)?;
    for j in jobs {
        let c = if j.energy.variants_kj.is_empty() {
            j.energy.per_any_kj.to_string()
        } else {
            j.energy.variants_kj.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
        };
        w.write_record([
            j.name.clone(),
            j.category.to_string(),
            j.queue.clone(),
            j.cores_per_member.to_string(),
            j.wallclock_ctrl_s.to_string(),
            j.wallclock_pert_s.to_string(),
            j.energy.per_control_kj.to_string(),
            j.energy.per_perturbed_kj.to_string(),
            c,
            j.energy.fixed_kj.to_string(),
            j.role.to_string(),
            j.repetition.instances.to_string(),
            j.repetition.waves.to_string(),
            j.contaminated.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| ProfileError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mpi_profile_echoes_metrics() {
        let r = parse_mpi_profile("mpiprof v1\njob=X\nwallclock_s=10\nmpi_time_s=2\nranks=4\nflops=12.5\n").unwrap();
        assert_eq!(r.source, ProfileSource::MpiProfile);
        assert_eq!(r.metric("wallclock_s"), 10.0);
        assert_eq!(r.metric("mpi_time_s"), 2.0);
        assert_eq!(r.metric("ranks"), 4.0);
        assert_eq!(r.metric("flops"), 12.5);
    }

    #[test]
    fn mpi_profile_missing_ranks() {
        let e = parse_mpi_profile("mpiprof v1\njob=X\nwallclock_s=10\nmpi_time_s=2\n").unwrap_err();
        assert_eq!(e, ProfileError::MissingKey("ranks".into()));
    }

    #[test]
    fn format_errors_carry_line_numbers() {
        let e = parse_mpi_profile("mpiprof v1\njob=X\n\n# c\nwallclock_s ten\n").unwrap_err();
        assert!(matches!(e, ProfileError::Format { line: 5, .. }), "{e:?}");
        let e = parse_mpi_profile("mpiprof v1\njob=X\nwallclock_s=abc\n").unwrap_err();
        assert!(matches!(e, ProfileError::Format { line: 3, .. }), "{e:?}");
        let e = parse_mpi_profile("mpiprof v1\njob=X\nranks=1\nranks=2\n").unwrap_err();
        assert!(matches!(e, ProfileError::Format { line: 4, .. }), "{e:?}");
        let e = parse_mpi_profile("ioprof v1\n").unwrap_err();
        assert!(matches!(e, ProfileError::Format { line: 1, .. }), "{e:?}");
    }

    #[test]
    fn io_single_mode() {
        let r = parse_io_profile(
            "ioprof v1\njob=Y\nmode=single\nwallclock_s=3\nread_bytes=0\nwrite_bytes=1048576\nfile_opens=1\n",
            IoMode::Single,
        )
        .unwrap();
        assert_eq!(r.source, ProfileSource::IoProfileSingle);
        assert_eq!(r.metric("ranks"), 1.0);
        assert_eq!(r.metric("write_bytes"), 1_048_576.0);
    }

    #[test]
    fn parallel_file_read_as_single() {
        let text = "ioprof v1\njob=Y\nwallclock_s=3\nread_bytes=0\nwrite_bytes=5\nfile_opens=1\nranks=36\n";
        assert_eq!(parse_io_profile(text, IoMode::Single), Err(ProfileError::ModeMismatch { ranks: 36.0 }));
        assert!(parse_io_profile(text, IoMode::Parallel).is_ok());
    }

    #[test]
    fn empty_io_file() {
        assert!(matches!(parse_io_profile("", IoMode::Single), Err(ProfileError::Format { line: 1, .. })));
    }

    #[test]
    fn fractional_bytes_rejected() {
        let text = "ioprof v1\njob=Y\nwallclock_s=3\nread_bytes=0.5\nwrite_bytes=5\nfile_opens=1\n";
        assert!(matches!(parse_io_profile(text, IoMode::Single), Err(ProfileError::Format { line: 4, .. })));
    }

    fn rec(job: &str, source: ProfileSource, kv: &[(&str, f64)]) -> RawProfileRecord {
        RawProfileRecord {
            job: job.into(),
            source,
            metrics: kv.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            origin: None,
        }
    }

    #[test]
    fn merge_mpi_and_io() {
        let mpi = rec("J", ProfileSource::MpiProfile, &[("wallclock_s", 10.0), ("mpi_time_s", 2.0), ("ranks", 4.0)]);
        let io = rec(
            "J",
            ProfileSource::IoProfileParallel,
            &[("wallclock_s", 10.0), ("read_bytes", 100.0), ("write_bytes", 200.0), ("ranks", 4.0)],
        );
        let p = merge_profiles(&[mpi, io]).unwrap();
        assert_eq!(
            p.phases,
            vec![
                Phase::IoRead { bytes: 100 },
                Phase::Compute { duration_s: 8.0 },
                Phase::MpiExchange { bytes: 0, ranks: 4 },
                Phase::IoWrite { bytes: 200 },
            ]
        );
    }

    #[test]
    fn merge_rejects_mixed_jobs_and_duplicate_mpi() {
        let a = rec("A", ProfileSource::IoProfileSingle, &[("wallclock_s", 1.0)]);
        let b = rec("B", ProfileSource::IoProfileSingle, &[("wallclock_s", 1.0)]);
        assert!(matches!(merge_profiles(&[a, b]), Err(ProfileError::JobNameMismatch { .. })));
        let m = rec("A", ProfileSource::MpiProfile, &[("wallclock_s", 1.0)]);
        assert!(matches!(merge_profiles(&[m.clone(), m]), Err(ProfileError::DuplicateSource(_))));
        assert_eq!(merge_profiles(&[]), Err(ProfileError::NoRecords));
    }

    #[test]
    fn io_only_merge_uses_io_wallclock() {
        let io = rec("J", ProfileSource::IoProfileSingle, &[("wallclock_s", 7.0), ("read_bytes", 1.0), ("write_bytes", 2.0)]);
        let p = merge_profiles(&[io]).unwrap();
        assert_eq!(
            p.phases,
            vec![Phase::IoRead { bytes: 1 }, Phase::Compute { duration_s: 7.0 }, Phase::IoWrite { bytes: 2 }]
        );
    }

    #[test]
    fn compute_clamped_at_zero() {
        let mpi = rec("J", ProfileSource::MpiProfile, &[("wallclock_s", 1.0), ("mpi_time_s", 2.0), ("ranks", 2.0)]);
        let p = merge_profiles(&[mpi]).unwrap();
        assert_eq!(p.phases[0], Phase::Compute { duration_s: 0.0 });
    }

    const HEADER: &str = "job,stage,queue,cores_per_member,wallclock_ctrl_s,wallclock_pert_s,a_per_control_kj,b_per_perturbed_kj,c_per_any_kj,d_fixed_kj,role,repeat_instances,repeat_waves,contaminated\n";

    #[test]
    fn measurements_negative_and_schema_errors() {
        let bad = format!("{HEADER}X,Other,np,1,1,1,0,0,-1,0,All,1,1,false\n");
        assert_eq!(
            ingest_measurements(bad.as_bytes(), 1.0).unwrap_err(),
            ProfileError::NegativeValue { row: 1, column: "c_per_any_kj".into() }
        );
        let wrong = "job,stage\nX,Other\n";
        assert!(matches!(ingest_measurements(wrong.as_bytes(), 1.0), Err(ProfileError::Schema(_))));
        let cat = format!("{HEADER}X,Nope,np,1,1,1,0,0,1,0,All,1,1,false\n");
        assert!(matches!(ingest_measurements(cat.as_bytes(), 1.0), Err(ProfileError::Schema(_))));
    }

    #[test]
    fn measurements_flags_short_jobs() {
        let text = format!("{HEADER}FirstGuess,DataAssimilation,ns,1,0.7,0.7,0,0,0.1,0,All,1,1,true\nScreening,DataAssimilation,np,324,212,--,99.7,0,0,0,ControlOnly,1,1,false\n");
        let m = ingest_measurements(text.as_bytes(), 1.0).unwrap();
        assert!(m.jobs[0].low_confidence);
        assert!(m.jobs[0].contaminated);
        assert!(!m.jobs[1].low_confidence);
        assert_eq!(m.jobs[1].wallclock_pert_s, 0.0);
        assert!(m.validate().is_valid());
    }
}
