//! Job records and the JSON-lines job table.
//!
//! Every state change appends a full snapshot of the job to `jobs.jsonl`;
//! on startup the last snapshot per id wins. Progress ticks stay in memory.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use bdinvert::inversion::{FinalMetrics, InversionConfig};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const API_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!((self, next), (Queued, Running) | (Running, Done) | (Running, Failed) | (Queued, Failed))
    }

    pub fn is_final(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Invert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub iteration: usize,
    pub total: usize,
    pub current_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub v: u32,
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: JobProgress,
    /// Result directory relative to the data directory, set once done.
    pub result_ref: Option<String>,
    pub error: Option<String>,
    pub final_metrics: Option<FinalMetrics>,
    pub config: InversionConfig,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
    pub finished_at: Option<f64>,
}

impl Job {
    pub fn new(id: String, config: InversionConfig) -> Self {
        Job {
            v: API_VERSION,
            id,
            kind: JobKind::Invert,
            state: JobState::Queued,
            progress: JobProgress {
                iteration: 0,
                total: config.iterations,
                current_loss: None,
            },
            result_ref: None,
            error: None,
            final_metrics: None,
            config,
            created_at: bdinvert::pipeline::unix_now(),
            finished_at: None,
        }
    }
}

pub struct JobTable {
    jobs: HashMap<String, Job>,
    order: Vec<String>,
    log: File,
    path: PathBuf,
}

impl JobTable {
    /// Open or create the table. Returns the table and the ids of jobs that
    /// were still queued, in submission order. Jobs caught running by a
    /// restart are marked failed.
    pub fn open(path: &Path) -> Result<(Self, Vec<String>), ServiceError> {
        let mut jobs: HashMap<String, Job> = HashMap::new();
        let mut order = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| ServiceError::io(path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| ServiceError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Job>(&line) {
                    Ok(job) => {
                        if !jobs.contains_key(&job.id) {
                            order.push(job.id.clone());
                        }
                        jobs.insert(job.id.clone(), job);
                    }
                    // a torn final line after a crash is expected
                    Err(e) => log::warn!("skipping line {} of {}: {e}", n + 1, path.display()),
                }
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        let torn = std::fs::read(path)
            .map(|b| b.last().is_some_and(|&c| c != b'\n'))
            .unwrap_or(false);
        if torn {
            log.write_all(b"\n").map_err(|e| ServiceError::io(path, e))?;
        }
        let mut table = JobTable {
            jobs,
            order,
            log,
            path: path.to_path_buf(),
        };
        let mut pending = Vec::new();
        for id in table.order.clone() {
            match table.jobs[&id].state {
                JobState::Queued => pending.push(id),
                JobState::Running => {
                    table.update(&id, |j| {
                        j.state = JobState::Failed;
                        j.error = Some("interrupted by a service restart".into());
                        j.finished_at = Some(bdinvert::pipeline::unix_now());
                    })?;
                }
                _ => {}
            }
        }
        Ok((table, pending))
    }

    fn append(&mut self, job: &Job) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(job)?;
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .and_then(|_| self.log.flush())
            .map_err(|e| ServiceError::io(&self.path, e))
    }

    pub fn insert(&mut self, job: Job) -> Result<(), ServiceError> {
        self.append(&job)?;
        self.order.push(job.id.clone());
        self.jobs.insert(job.id.clone(), job);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Job> {
        self.jobs.get(id)
    }

    /// Apply `f` to a job. State changes are checked against the allowed
    /// transitions and persisted; other edits stay in memory.
    pub fn update(&mut self, id: &str, f: impl FnOnce(&mut Job)) -> Result<(), ServiceError> {
        let job = self.jobs.get_mut(id).ok_or_else(|| ServiceError::UnknownJob(id.to_string()))?;
        let before = job.state;
        let mut next = job.clone();
        f(&mut next);
        if next.state != before && !before.can_become(next.state) {
            return Err(ServiceError::Transition {
                id: id.to_string(),
                from: before,
                to: next.state,
            });
        }
        next.progress.iteration = next.progress.iteration.min(next.progress.total);
        *job = next.clone();
        if next.state != before {
            self.append(&next)?;
        }
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }
}
