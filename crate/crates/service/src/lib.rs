//! HTTP facade over inversion and editing.
//!
//! Inversions run asynchronously on a FIFO queue served by worker threads;
//! edits are answered synchronously from stored results. Results live under
//! `<data_dir>/results/<job id>/` in the CLI's archive format.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use bdinvert::pipeline::{Assets, CheckpointLayout};

pub mod api;
pub mod jobs;
mod worker;

pub use jobs::{Job, JobState, JobTable, API_VERSION};

pub const DEFAULT_PORT: u16 = 8080;
pub const JOBS_FILE: &str = "jobs.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {id}: illegal transition {from:?} -> {to:?}")]
    Transition { id: String, from: JobState, to: JobState },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] bdinvert::Error),
}

impl ServiceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub port: u16,
    pub checkpoint_dir: PathBuf,
    /// Job table, uploaded inputs and results.
    pub data_dir: PathBuf,
    pub workers: usize,
    /// Allowed console origin for CORS; any origin when unset.
    pub console_origin: Option<String>,
}

impl ServiceConfig {
    /// Defaults overridden by `BDINVERT_PORT`, `BDINVERT_CKPT_DIR`,
    /// `BDINVERT_DATA_DIR` and `BDINVERT_CONSOLE_ORIGIN`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        ServiceConfig {
            port: var("BDINVERT_PORT").and_then(|p| p.parse().ok()).unwrap_or(DEFAULT_PORT),
            checkpoint_dir: var("BDINVERT_CKPT_DIR").map(PathBuf::from).unwrap_or_else(|| "checkpoints".into()),
            data_dir: var("BDINVERT_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| "service-data".into()),
            workers: 1,
            console_origin: var("BDINVERT_CONSOLE_ORIGIN"),
        }
    }
}

pub(crate) struct Shared {
    pub config: ServiceConfig,
    /// `None` when the required checkpoints were missing at startup.
    pub assets: Option<Arc<Assets>>,
    pub assets_error: Option<String>,
    pub jobs: Mutex<JobTable>,
    pub queue: Mutex<Sender<String>>,
}

impl Shared {
    pub fn results_dir(&self) -> PathBuf {
        self.config.data_dir.join("results")
    }

    pub fn inputs_dir(&self) -> PathBuf {
        self.config.data_dir.join("inputs")
    }
}

/// A running service: shared state plus its worker threads.
pub struct Service {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl Service {
    /// Load checkpoints, replay the job table, requeue pending jobs and
    /// start the workers. Missing checkpoints are not fatal: inversion
    /// requests then answer 409.
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        let assets = Assets::load(&CheckpointLayout::new(&config.checkpoint_dir));
        let (assets, assets_error) = match assets {
            Ok(a) => (Some(Arc::new(a)), None),
            Err(e) => {
                log::warn!("checkpoints unavailable: {e}");
                (None, Some(e.to_string()))
            }
        };
        Self::with_assets(config, assets, assets_error)
    }

    pub fn with_assets(
        config: ServiceConfig,
        assets: Option<Arc<Assets>>,
        assets_error: Option<String>,
    ) -> Result<Self, ServiceError> {
        for d in [config.data_dir.clone(), config.data_dir.join("results"), config.data_dir.join("inputs")] {
            std::fs::create_dir_all(&d).map_err(|e| ServiceError::io(&d, e))?;
        }
        let (table, pending) = JobTable::open(&config.data_dir.join(JOBS_FILE))?;
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            config,
            assets,
            assets_error,
            jobs: Mutex::new(table),
            queue: Mutex::new(tx),
        });
        let rx: Arc<Mutex<Receiver<String>>> = Arc::new(Mutex::new(rx));
        let workers = (0..shared.config.workers.max(1))
            .map(|_| {
                let (s, r) = (shared.clone(), rx.clone());
                std::thread::spawn(move || worker::run(s, r))
            })
            .collect();
        for id in pending {
            log::info!("requeueing job {id}");
            shared.queue.lock().expect("queue lock").send(id).ok();
        }
        Ok(Service { shared, workers })
    }

    pub fn router(&self) -> axum::Router {
        api::router(self.shared.clone())
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.shared.jobs.lock().expect("jobs lock").get(id).cloned()
    }

    pub fn data_dir(&self) -> &Path {
        &self.shared.config.data_dir
    }

    /// Stop accepting work and wait for the workers to drain the queue.
    pub fn shutdown(self) {
        let Service { shared, workers } = self;
        // replacing the sender closes the channel once the router is gone
        let (dead, _) = mpsc::channel();
        *shared.queue.lock().expect("queue lock") = dead;
        drop(shared);
        for w in workers {
            w.join().ok();
        }
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let port = config.port;
    let service = Service::start(config)?;
    let app = service.router();
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServiceError::io("socket", e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, app).await.map_err(|e| ServiceError::io("socket", e))
}
