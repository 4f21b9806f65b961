//! Desk-scale execution of a schedule document as stub jobs.
//!
//! A single dispatcher loop hands ready jobs (smallest id first) to a pool of
//! `parallelism` workers. A job starts only after all of its dependencies
//! exited successfully; when a job fails, everything downstream of it is
//! marked skipped.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::Phase;
use crate::schedule::{ScheduleDocument, ScheduleError};

pub const DEFAULT_DESK_SCALE: f64 = 100.0;
pub const DEFAULT_COMPUTE_CEILING_S: f64 = 30.0;
/// Environment variable naming the default scratch directory.
pub const SCRATCH_ENV: &str = "EPSIM_SCRATCH";

const CHUNK: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("working directory {path} is not writable: {reason}")]
    WorkdirUnwritable { path: PathBuf, reason: String },
    #[error("job {job_id} ({name}) failed: {reason}; {skipped} dependent job(s) skipped")]
    JobFailed { job_id: usize, name: String, reason: String, skipped: usize },
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// A job as handed to a backend: phases already reduced to desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubJob {
    pub job_id: usize,
    pub name: String,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubReport {
    pub bytes_read: u64,
    pub bytes_written: u64,
    /// Bytes an MPI exchange would have moved; nothing is sent.
    pub mpi_bytes_logged: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobFailure {
    pub exit_code: Option<i32>,
    pub message: String,
}

/// Where a stub job runs.
pub trait Backend: Sync {
    fn run(&self, job: &StubJob, scratch: &Path) -> Result<StubReport, JobFailure>;
}

/// Runs each stub inside the calling worker thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct InlineBackend;

impl Backend for InlineBackend {
    fn run(&self, job: &StubJob, scratch: &Path) -> Result<StubReport, JobFailure> {
        run_stub(job, scratch).map_err(|e| JobFailure { exit_code: None, message: e.to_string() })
    }
}

/// Spawns one local process per job: `program [args…] --job <spec.json>
/// --scratch <dir>`. The process must print a JSON [`StubReport`] on stdout.
#[derive(Debug, Clone)]
pub struct LocalProcessBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl LocalProcessBackend {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        LocalProcessBackend { program: program.into(), args }
    }

    /// Uses the running executable's `stub` subcommand.
    pub fn current_exe() -> std::io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?, vec!["stub".into()]))
    }
}

impl Backend for LocalProcessBackend {
    fn run(&self, job: &StubJob, scratch: &Path) -> Result<StubReport, JobFailure> {
        let fail = |message: String| JobFailure { exit_code: None, message };
        let spec = scratch.join("job.json");
        fs::write(&spec, serde_json::to_vec(job).expect("stub job serializes"))
            .map_err(|e| fail(format!("writing {}: {e}", spec.display())))?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg("--job")
            .arg(&spec)
            .arg("--scratch")
            .arg(scratch)
            .output()
            .map_err(|e| fail(format!("spawning {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(JobFailure {
                exit_code: out.status.code(),
                message: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("unreadable stub report: {e}")))
    }
}

fn fill(buf: &mut [u8], seed: usize) {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = ((i + seed) % 251) as u8;
    }
}

fn write_bytes(path: &Path, bytes: u64, append: bool) -> std::io::Result<u64> {
    let file = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    let mut w = BufWriter::new(file);
    let mut buf = vec![0u8; CHUNK];
    fill(&mut buf, 0);
    let mut left = bytes;
    while left > 0 {
        let n = left.min(CHUNK as u64) as usize;
        w.write_all(&buf[..n])?;
        left -= n as u64;
    }
    w.flush()?;
    Ok(bytes)
}

fn spin(duration_s: f64) {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return;
    }
    let until = Instant::now() + Duration::from_secs_f64(duration_s);
    let mut x = 0u64;
    while Instant::now() < until {
        for _ in 0..1000 {
            x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(1));
        }
    }
}

/// Executes the phases of one stub job against files in `scratch`.
///
/// Reads come from `input.dat` (prepared first, not counted), writes go to
/// `output.dat`, compute busy-spins, and MPI exchanges are only logged.
pub fn run_stub(job: &StubJob, scratch: &Path) -> std::io::Result<StubReport> {
    fs::create_dir_all(scratch)?;
    let mut report = StubReport::default();
    let output = scratch.join("output.dat");
    let mut wrote_any = false;
    for phase in &job.phases {
        match *phase {
            Phase::IoRead { bytes } => {
                let input = scratch.join("input.dat");
                write_bytes(&input, bytes, false)?;
                let mut f = File::open(&input)?;
                let mut buf = vec![0u8; CHUNK];
                loop {
                    let n = f.read(&mut buf)?;
                    if n == 0 {
                        break;
                    }
                    report.bytes_read += n as u64;
                }
            }
            Phase::Compute { duration_s } => spin(duration_s),
            Phase::MpiExchange { bytes, ranks } => {
                log::info!("job {} ({}): MPI exchange of {bytes} bytes over {ranks} ranks not performed", job.job_id, job.name);
                report.mpi_bytes_logged += bytes;
            }
            Phase::IoWrite { bytes } => {
                report.bytes_written += write_bytes(&output, bytes, wrote_any)?;
                wrote_any = true;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOptions {
    pub parallelism: usize,
    pub workdir: PathBuf,
    /// Compute durations are divided by this factor...
    pub desk_scale: f64,
    /// ...and capped at this many seconds per phase.
    pub compute_ceiling_s: f64,
    pub keep_scratch: bool,
}

impl ExecOptions {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        ExecOptions {
            parallelism: 4,
            workdir: workdir.into(),
            desk_scale: DEFAULT_DESK_SCALE,
            compute_ceiling_s: DEFAULT_COMPUTE_CEILING_S,
            keep_scratch: false,
        }
    }

    /// Scratch directory from `EPSIM_SCRATCH`, else the system temp dir.
    pub fn default_workdir() -> PathBuf {
        std::env::var_os(SCRATCH_ENV).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("epsim-scratch"))
    }

    fn desk_phase(&self, p: &Phase) -> Phase {
        match *p {
            Phase::Compute { duration_s } => Phase::Compute {
                duration_s: (duration_s / self.desk_scale.max(f64::MIN_POSITIVE)).min(self.compute_ceiling_s),
            },
            ref other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Succeeded,
    Failed { exit_code: Option<i32>, message: String },
    Skipped { failed_dependency: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub job_id: usize,
    pub name: String,
    /// Seconds since the run started.
    pub start_wallclock: Option<f64>,
    pub end_wallclock: Option<f64>,
    pub exit_status: JobStatus,
    pub bytes_written: u64,
    pub bytes_read: u64,
}

/// Append-only log ordered by completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    /// Unix time of the run start, in seconds.
    pub started_unix_s: f64,
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn record(&self, job_id: usize) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.job_id == job_id)
    }

    pub fn failed(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| matches!(r.exit_status, JobStatus::Failed { .. }))
    }

    pub fn skipped(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| matches!(r.exit_status, JobStatus::Skipped { .. }))
    }

    pub fn total_bytes_written(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_written).sum()
    }

    /// Largest number of jobs whose run intervals overlap.
    pub fn max_concurrency(&self) -> usize {
        let mut edges: Vec<(f64, i32)> = Vec::new();
        for r in &self.records {
            if let (Some(s), Some(e)) = (r.start_wallclock, r.end_wallclock) {
                edges.push((s, 1));
                edges.push((e, -1));
            }
        }
        // ends sort before starts at equal times
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut cur = 0i32;
        let mut max = 0i32;
        for (_, d) in edges {
            cur += d;
            max = max.max(cur);
        }
        max as usize
    }

    /// Checks that every started job started after all its dependencies
    /// ended. Returns the offending job ids.
    pub fn dependency_violations(&self, doc: &ScheduleDocument) -> Vec<usize> {
        let mut end = vec![None; doc.jobs.len()];
        for r in &self.records {
            if r.job_id < end.len() {
                end[r.job_id] = r.end_wallclock;
            }
        }
        self.records
            .iter()
            .filter_map(|r| {
                let start = r.start_wallclock?;
                let ok = doc.jobs[r.job_id].depends_on.iter().all(|&d| end[d].is_some_and(|e| e <= start));
                (!ok).then_some(r.job_id)
            })
            .collect()
    }

    /// `Err(JobFailed)` for the first failed job, if any.
    pub fn into_result(self) -> Result<RunLog, ExecError> {
        if let Some(f) = self.failed().next() {
            let reason = match &f.exit_status {
                JobStatus::Failed { exit_code: Some(c), message } => format!("exit code {c}: {message}"),
                JobStatus::Failed { exit_code: None, message } => message.clone(),
                _ => unreachable!(),
            };
            return Err(ExecError::JobFailed {
                job_id: f.job_id,
                name: f.name.clone(),
                reason,
                skipped: self.skipped().count(),
            });
        }
        Ok(self)
    }
}

fn job_dir(workdir: &Path, job_id: usize) -> PathBuf {
    workdir.join(format!("job_{job_id:05}"))
}

fn check_workdir(dir: &Path) -> Result<(), ExecError> {
    let unwritable = |reason: String| ExecError::WorkdirUnwritable { path: dir.to_path_buf(), reason };
    fs::create_dir_all(dir).map_err(|e| unwritable(e.to_string()))?;
    let probe = dir.join(format!(".epsim-probe-{}", std::process::id()));
    fs::write(&probe, b"ok").map_err(|e| unwritable(e.to_string()))?;
    fs::remove_file(&probe).map_err(|e| unwritable(e.to_string()))
}

struct Done {
    job_id: usize,
    start: f64,
    end: f64,
    outcome: Result<StubReport, JobFailure>,
}

/// Runs every job of `doc` through `backend`. Job failures are recorded in
/// the log rather than returned; see [`RunLog::into_result`].
pub fn execute(doc: &ScheduleDocument, backend: &dyn Backend, opts: &ExecOptions) -> Result<RunLog, ExecError> {
    if opts.parallelism == 0 {
        return Err(ExecError::InvalidParallelism);
    }
    doc.validate()?;
    check_workdir(&opts.workdir)?;

    let n = doc.jobs.len();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut waiting: Vec<usize> = vec![0; n];
    for job in &doc.jobs {
        waiting[job.job_id] = job.depends_on.len();
        for &d in &job.depends_on {
            dependents[d].push(job.job_id);
        }
    }

    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let t0 = Instant::now();
    let mut records = Vec::with_capacity(n);
    let mut settled = vec![false; n];

    let (job_tx, job_rx) = mpsc::channel::<StubJob>();
    let job_rx = Mutex::new(job_rx);
    let (done_tx, done_rx) = mpsc::channel::<Done>();
    std::thread::scope(|scope| {
        let workers = opts.parallelism.min(n.max(1));
        for _ in 0..workers {
            let done_tx = done_tx.clone();
            let job_rx = &job_rx;
            scope.spawn(move || loop {
                let next = job_rx.lock().expect("job queue lock").recv();
                let Ok(job) = next else { break };
                let dir = job_dir(&opts.workdir, job.job_id);
                let start = t0.elapsed().as_secs_f64();
                let outcome = fs::create_dir_all(&dir)
                    .map_err(|e| JobFailure { exit_code: None, message: e.to_string() })
                    .and_then(|_| backend.run(&job, &dir));
                let end = t0.elapsed().as_secs_f64();
                if done_tx.send(Done { job_id: job.job_id, start, end, outcome }).is_err() {
                    break;
                }
            });
        }
        drop(done_tx);

        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| waiting[i] == 0).map(Reverse).collect();
        let mut in_flight = 0usize;
        let mut remaining = n;
        while remaining > 0 {
            while in_flight < workers {
                let Some(Reverse(id)) = ready.pop() else { break };
                let job = &doc.jobs[id];
                let stub = StubJob {
                    job_id: id,
                    name: job.name.clone(),
                    phases: job.phases.iter().map(|p| opts.desk_phase(p)).collect(),
                };
                job_tx.send(stub).expect("workers alive while jobs remain");
                in_flight += 1;
            }
            let done = done_rx.recv().expect("a worker reports every dispatched job");
            in_flight -= 1;
            remaining -= 1;
            let id = done.job_id;
            settled[id] = true;
            let name = doc.jobs[id].name.clone();
            match done.outcome {
                Ok(report) => {
                    records.push(RunRecord {
                        job_id: id,
                        name,
                        start_wallclock: Some(done.start),
                        end_wallclock: Some(done.end),
                        exit_status: JobStatus::Succeeded,
                        bytes_written: report.bytes_written,
                        bytes_read: report.bytes_read,
                    });
                    for &s in &dependents[id] {
                        waiting[s] -= 1;
                        if waiting[s] == 0 && !settled[s] {
                            ready.push(Reverse(s));
                        }
                    }
                }
                Err(failure) => {
                    log::warn!("job {id} ({name}) failed: {}", failure.message);
                    records.push(RunRecord {
                        job_id: id,
                        name,
                        start_wallclock: Some(done.start),
                        end_wallclock: Some(done.end),
                        exit_status: JobStatus::Failed { exit_code: failure.exit_code, message: failure.message },
                        bytes_written: 0,
                        bytes_read: 0,
                    });
                    let mut queue: VecDeque<usize> = dependents[id].iter().copied().collect();
                    while let Some(s) = queue.pop_front() {
                        if settled[s] {
                            continue;
                        }
                        settled[s] = true;
                        remaining -= 1;
                        records.push(RunRecord {
                            job_id: s,
                            name: doc.jobs[s].name.clone(),
                            start_wallclock: None,
                            end_wallclock: None,
                            exit_status: JobStatus::Skipped { failed_dependency: id },
                            bytes_written: 0,
                            bytes_read: 0,
                        });
                        queue.extend(dependents[s].iter().copied());
                    }
                }
            }
        }
        drop(job_tx);
    });

    let log = RunLog { started_unix_s, records };
    if !opts.keep_scratch && log.failed().next().is_none() {
        for id in 0..n {
            let dir = job_dir(&opts.workdir, id);
            if dir.exists() {
                if let Err(e) = fs::remove_dir_all(&dir) {
                    log::warn!("could not remove scratch {}: {e}", dir.display());
                }
            }
        }
    }
    Ok(log)
}
