//! The reference ensemble suite shipped with the crate.

use crate::model::{DependencyEdge, SuiteModel};
use crate::profile::{
    ingest_measurements, merge_all, parse_io_profile, parse_mpi_profile, IoMode, RawProfileRecord, UnifiedJobProfile,
    DEFAULT_RESOLUTION_THRESHOLD_S,
};

/// Per-job measurement table of the reference suite.
pub const TABLE_CSV: &str = include_str!("../data/rmi_eps_table2.csv");
/// Dependency edges between the reference jobs.
pub const EDGES_JSON: &str = include_str!("../data/rmi_eps_edges.json");

/// Synthetic sample profiler files, one or two per job: `(file name, text)`.
pub const SAMPLE_PROFILES: &[(&str, &str)] = &[
    ("addsurf.ioprof", include_str!("../data/profiles/addsurf.ioprof")),
    ("addsurf.mpiprof", include_str!("../data/profiles/addsurf.mpiprof")),
    ("archive_c2a.ioprof", include_str!("../data/profiles/archive_c2a.ioprof")),
    ("archive_odb.ioprof", include_str!("../data/profiles/archive_odb.ioprof")),
    ("bator.ioprof", include_str!("../data/profiles/bator.ioprof")),
    ("bator.mpiprof", include_str!("../data/profiles/bator.mpiprof")),
    ("blend.ioprof", include_str!("../data/profiles/blend.ioprof")),
    ("blend.mpiprof", include_str!("../data/profiles/blend.mpiprof")),
    ("canari.ioprof", include_str!("../data/profiles/canari.ioprof")),
    ("canari.mpiprof", include_str!("../data/profiles/canari.mpiprof")),
    ("extractbd.ioprof", include_str!("../data/profiles/extractbd.ioprof")),
    ("firstguess.ioprof", include_str!("../data/profiles/firstguess.ioprof")),
    ("forecast.ioprof", include_str!("../data/profiles/forecast.ioprof")),
    ("forecast.mpiprof", include_str!("../data/profiles/forecast.mpiprof")),
    ("gl_bd.ioprof", include_str!("../data/profiles/gl_bd.ioprof")),
    ("gl_bd.mpiprof", include_str!("../data/profiles/gl_bd.mpiprof")),
    ("interpol_ec_sst.ioprof", include_str!("../data/profiles/interpol_ec_sst.ioprof")),
    ("interpol_ec_sst.mpiprof", include_str!("../data/profiles/interpol_ec_sst.mpiprof")),
    ("makegrib_an.ioprof", include_str!("../data/profiles/makegrib_an.ioprof")),
    ("makegrib_an.mpiprof", include_str!("../data/profiles/makegrib_an.mpiprof")),
    ("mars_prefetch_bd.ioprof", include_str!("../data/profiles/mars_prefetch_bd.ioprof")),
    ("minim.ioprof", include_str!("../data/profiles/minim.ioprof")),
    ("minim.mpiprof", include_str!("../data/profiles/minim.mpiprof")),
    ("pertana.ioprof", include_str!("../data/profiles/pertana.ioprof")),
    ("screening.ioprof", include_str!("../data/profiles/screening.ioprof")),
    ("screening.mpiprof", include_str!("../data/profiles/screening.mpiprof")),
];

pub fn edges() -> Vec<DependencyEdge> {
    serde_json::from_str(EDGES_JSON).expect("bundled edges parse")
}

/// The reference suite at the default ensemble size (n=2, N=22).
pub fn suite() -> SuiteModel {
    let mut m = ingest_measurements(TABLE_CSV.as_bytes(), DEFAULT_RESOLUTION_THRESHOLD_S).expect("bundled table parses");
    m.edges = edges();
    m
}

/// Parses one sample file; parallel unless the file declares `mode=single`.
pub fn parse_sample(file: &str, text: &str) -> RawProfileRecord {
    let mut r = if file.ends_with(".mpiprof") {
        parse_mpi_profile(text)
    } else if text.lines().any(|l| l.trim() == "mode=single") {
        parse_io_profile(text, IoMode::Single)
    } else {
        parse_io_profile(text, IoMode::Parallel)
    }
    .expect("bundled sample parses");
    r.origin = Some(format!("bundled:{file}"));
    r
}

/// Unified profiles for every job of the reference suite, sorted by job.
pub fn profiles() -> Vec<UnifiedJobProfile> {
    merge_all(SAMPLE_PROFILES.iter().map(|(f, t)| parse_sample(f, t)).collect()).expect("bundled samples merge")
}
