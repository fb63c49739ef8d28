//! Results directory: run manifest, records, traces and checkpoints.
//!
//! ```text
//! <root>/manifest.json          written once, before training
//! <root>/records/<key>.json     one ExperimentRecord per job
//! <root>/traces/<key>.csv       per-step losses
//! <root>/traces/<key>.weights.csv
//! <root>/checkpoints/<key>.{bin,json}
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fgasl_core::config::Config;
use fgasl_core::orchestrator::{plan_suite, run_job, ExperimentOutcome, ExperimentRecord, Executor, RunStatus, Strategy, TraceRow};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Parallel;
use crate::store::{read_json, save_checkpoint};
use crate::{Error, Result};

/// Column names of the per-step trace CSV.
pub const TRACE_HEADER: [&str; 8] = [
    "round",
    "client_id",
    "step",
    "supervised",
    "unsupervised",
    "perturbation",
    "accepted_fraction",
    "t_un",
];

/// Column names of the aggregation CSV.
pub const WEIGHTS_HEADER: [&str; 4] = ["round", "client_id", "gap", "weight"];

/// Paths inside a results root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultsDir {
    pub root: PathBuf,
}

impl ResultsDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResultsDir { root: root.into() }
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.records(), self.traces(), self.checkpoints()] {
            fs::create_dir_all(&d).map_err(Error::io(&d))?;
        }
        Ok(())
    }

    /// Writes the record, traces and final checkpoint of one experiment.
    pub fn write_outcome(&self, outcome: &ExperimentOutcome) -> Result<()> {
        let key = outcome.record.key();
        let path = self.records().join(format!("{key}.json"));
        let text = serde_json::to_string_pretty(&outcome.record).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, text).map_err(Error::io(&path))?;
        if outcome.record.status == RunStatus::Completed {
            write_traces(&self.traces().join(format!("{key}.csv")), &outcome.traces)?;
            write_weights(&self.traces().join(format!("{key}.weights.csv")), &outcome.record)?;
        }
        if let Some((arch, params)) = &outcome.model {
            save_checkpoint(&self.checkpoints(), &key, arch, params, outcome.record.rounds)?;
        }
        Ok(())
    }

    /// Every record in the directory, ordered by key.
    pub fn load_records(&self) -> Result<Vec<ExperimentRecord>> {
        let dir = self.records();
        let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&dir)(e)),
        };
        paths.sort();
        paths.iter().map(|p| read_json(p)).collect()
    }
}

/// Writes per-step traces with [`TRACE_HEADER`].
pub fn write_traces(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        let s = &r.step;
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            s.step.to_string(),
            s.supervised.to_string(),
            s.unsupervised.to_string(),
            s.perturbation.to_string(),
            s.accepted_fraction.to_string(),
            s.t_un.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io(path))
}

/// Writes one `(round, client, gap, weight)` row per client and round.
pub fn write_weights(path: &Path, record: &ExperimentRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(WEIGHTS_HEADER)?;
    for a in &record.aggregation {
        for ((c, g), wt) in a.client_ids.iter().zip(&a.gaps).zip(&a.weights) {
            w.write_record([a.round.to_string(), c.to_string(), g.to_string(), wt.to_string()])?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// Written before training starts and never modified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the effective configuration's JSON.
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub records_dir: PathBuf,
    pub traces_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub config: Config,
}

pub fn config_hash(config: &Config) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(config: &Config, dir: &ResultsDir) -> Self {
        RunManifest {
            config_hash: config_hash(config),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.suite.master_seed,
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            records_dir: dir.records(),
            traces_dir: dir.traces(),
            checkpoints_dir: dir.checkpoints(),
            config: config.clone(),
        }
    }

    /// Fails if a manifest already exists.
    pub fn write_new(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(Error::io(path))?;
        f.write_all(text.as_bytes()).map_err(Error::io(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SuiteSummary {
    pub completed: usize,
    pub failed: usize,
}

/// Validates `config`, writes the run manifest, then runs every job and
/// writes each outcome as soon as it finishes.
pub fn run_suite_to_dir(config: &Config, dir: &ResultsDir, executor: &Parallel) -> Result<(SuiteSummary, Vec<ExperimentRecord>)> {
    config.validate()?;
    for s in &config.suite.strategies {
        Strategy::by_name(s)?;
    }
    dir.create()?;
    RunManifest::new(config, dir).write_new(&dir.manifest())?;
    let jobs = plan_suite(config);
    let results: Vec<Result<ExperimentRecord>> = executor.map(jobs.len(), |i| {
        let outcome = run_job(config, &jobs[i], executor);
        if let Some(e) = &outcome.record.error {
            log::warn!("{} failed: {e}", outcome.record.key());
        }
        dir.write_outcome(&outcome)?;
        Ok(outcome.record)
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let completed = records.iter().filter(|r| r.status == RunStatus::Completed).count();
    Ok((
        SuiteSummary {
            completed,
            failed: records.len() - completed,
        },
        records,
    ))
}
