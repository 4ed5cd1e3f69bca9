//! Projects held in memory, mirrored to disk, with background training.
//!
//! Each project keeps its data behind a read/write lock. Mutations hold the
//! write lock only while they apply and persist a change. Training works on
//! a clone taken when the job starts, so reads and coding carry on while it
//! runs; the result is published by briefly taking the write lock again.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use themetopic_core::engine::{FitTrace, IterationView};
use themetopic_core::{EngineError, TrainConfig};

use crate::error::{Result, ServiceError};
use crate::project::{apply_overrides, ProjectData};
use crate::storage::{slug, validate_project_id, Storage};

pub type JobId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running { started_at: u64 },
    Done { version: u64 },
    Failed { message: String },
    Cancelled,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Done { .. } | Self::Failed { .. } | Self::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub job_id: JobId,
    pub project_id: String,
    pub config: TrainConfig,
    /// Unix time in milliseconds.
    pub created_at: u64,
    #[serde(flatten)]
    pub state: JobState,
    /// Iterations finished so far.
    pub iterations: usize,
    pub trace: Option<FitTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ProjectStatus {
    Idle,
    Running { started_at: u64 },
    Failed { message: String },
}

struct JobEntry {
    job: TrainingJob,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
struct JobTable {
    next_id: JobId,
    jobs: BTreeMap<JobId, JobEntry>,
}

impl JobTable {
    fn active(&self) -> Option<&JobEntry> {
        self.jobs.values().find(|e| !e.job.state.is_terminal())
    }

    /// Moves a job to `state` unless it already finished.
    fn transition(&mut self, id: JobId, state: JobState) {
        if let Some(e) = self.jobs.get_mut(&id) {
            if !e.job.state.is_terminal() {
                e.job.state = state;
            }
        }
    }
}

pub struct ProjectHandle {
    data: RwLock<ProjectData>,
    jobs: Mutex<JobTable>,
}

impl ProjectHandle {
    fn new(data: ProjectData) -> Self {
        Self {
            data: RwLock::new(data),
            jobs: Mutex::new(JobTable::default()),
        }
    }

    pub fn read<T>(&self, f: impl FnOnce(&ProjectData) -> T) -> T {
        f(&self.data.read())
    }

    pub fn status(&self) -> ProjectStatus {
        let jobs = self.jobs.lock();
        let Some(last) = jobs.jobs.values().next_back() else {
            return ProjectStatus::Idle;
        };
        match &last.job.state {
            JobState::Queued => ProjectStatus::Running {
                started_at: last.job.created_at,
            },
            JobState::Running { started_at } => ProjectStatus::Running {
                started_at: *started_at,
            },
            JobState::Failed { message } => ProjectStatus::Failed {
                message: message.clone(),
            },
            _ => ProjectStatus::Idle,
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Responses remembered per client request id.
#[derive(Default)]
struct ReplayCache {
    entries: HashMap<String, (u16, Vec<u8>)>,
    order: VecDeque<String>,
}

const REPLAY_CAPACITY: usize = 4096;

pub struct Workbench {
    storage: Option<Storage>,
    projects: RwLock<BTreeMap<String, Arc<ProjectHandle>>>,
    replay: Mutex<ReplayCache>,
}

impl Workbench {
    /// A workbench that keeps everything in memory.
    pub fn in_memory() -> Self {
        Self {
            storage: None,
            projects: RwLock::new(BTreeMap::new()),
            replay: Mutex::new(ReplayCache::default()),
        }
    }

    /// A workbench backed by `storage`; every stored project is loaded.
    pub fn open(storage: Storage) -> Result<Self> {
        let mut projects = BTreeMap::new();
        for id in storage.list()? {
            let data = storage.load(&id)?;
            projects.insert(id, Arc::new(ProjectHandle::new(data)));
        }
        Ok(Self {
            storage: Some(storage),
            projects: RwLock::new(projects),
            replay: Mutex::new(ReplayCache::default()),
        })
    }

    pub fn storage(&self) -> Option<&Storage> {
        self.storage.as_ref()
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.projects.read().keys().cloned().collect()
    }

    pub fn project(&self, project_id: &str) -> Result<Arc<ProjectHandle>> {
        self.projects
            .read()
            .get(project_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("project {project_id}")))
    }

    pub fn create_project(&self, project_id: Option<String>, name: &str) -> Result<Arc<ProjectHandle>> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ServiceError::Validation("project name must not be empty".into()));
        }
        let mut projects = self.projects.write();
        let id = match project_id {
            Some(id) => {
                validate_project_id(&id)?;
                if projects.contains_key(&id) {
                    return Err(ServiceError::Validation(format!("project {id} already exists")));
                }
                id
            }
            None => {
                let base = slug(name);
                let mut id = base.clone();
                let mut n = 1;
                while projects.contains_key(&id) {
                    n += 1;
                    id = format!("{base}-{n}");
                }
                id
            }
        };
        let data = ProjectData::new(id.clone(), name);
        if let Some(s) = &self.storage {
            s.save(&data)?;
        }
        let handle = Arc::new(ProjectHandle::new(data));
        projects.insert(id, Arc::clone(&handle));
        Ok(handle)
    }

    /// Applies `f` under the project's write lock, then persists through
    /// `persist`. If either step fails the in-memory data is left unchanged.
    pub fn mutate<T>(
        &self,
        project_id: &str,
        persist: fn(&Storage, &ProjectData) -> Result<()>,
        f: impl FnOnce(&mut ProjectData) -> Result<T>,
    ) -> Result<T> {
        let handle = self.project(project_id)?;
        let mut data = handle.data.write();
        let mut next = data.clone();
        let out = f(&mut next)?;
        if let Some(storage) = &self.storage {
            persist(storage, &next)?;
        }
        *data = next;
        Ok(out)
    }

    /// Rejects corpus changes while a job is training on the old corpus.
    pub fn ensure_idle(&self, project_id: &str) -> Result<()> {
        let handle = self.project(project_id)?;
        let busy = handle.jobs.lock().active().is_some();
        if busy {
            Err(ServiceError::Busy)
        } else {
            Ok(())
        }
    }

    /// Queues a training run and starts it on the blocking thread pool.
    /// Must be called from within a Tokio runtime.
    pub fn start_training(self: &Arc<Self>, project_id: &str, overrides: &Value) -> Result<TrainingJob> {
        let handle = self.project(project_id)?;
        let (frozen, config) = {
            let data = handle.data.read();
            let config = apply_overrides(&data.config, overrides)?;
            if data.corpus.is_none() {
                return Err(ServiceError::Validation("project has no documents".into()));
            }
            (data.clone(), config)
        };
        let (job, cancel) = {
            let mut jobs = handle.jobs.lock();
            if jobs.active().is_some() {
                return Err(ServiceError::Busy);
            }
            jobs.next_id += 1;
            let job = TrainingJob {
                job_id: jobs.next_id,
                project_id: project_id.to_owned(),
                config: config.clone(),
                created_at: now_ms(),
                state: JobState::Queued,
                iterations: 0,
                trace: None,
            };
            let cancel = Arc::new(AtomicBool::new(false));
            jobs.jobs.insert(
                job.job_id,
                JobEntry {
                    job: job.clone(),
                    cancel: Arc::clone(&cancel),
                },
            );
            (job, cancel)
        };

        let this = Arc::clone(self);
        let job_id = job.job_id;
        tokio::task::spawn_blocking(move || this.run_job(&handle, job_id, frozen, config, &cancel));
        Ok(job)
    }

    fn run_job(
        &self,
        handle: &ProjectHandle,
        job_id: JobId,
        frozen: ProjectData,
        config: TrainConfig,
        cancel: &AtomicBool,
    ) {
        if cancel.load(Ordering::Relaxed) {
            return;
        }
        handle.jobs.lock().transition(
            job_id,
            JobState::Running {
                started_at: now_ms(),
            },
        );
        let mut observer = |view: &IterationView<'_>| {
            if let Some(e) = handle.jobs.lock().jobs.get_mut(&job_id) {
                e.job.iterations = view.iteration;
            }
            if cancel.load(Ordering::Relaxed) {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        };
        let result = frozen.train(&config, &mut observer);
        drop(frozen);

        let outcome = match result {
            Ok(out) => {
                let trace = out.trace.clone();
                self.publish(handle, out, &config)
                    .map(|version| (JobState::Done { version }, Some(trace)))
            }
            Err(e) => Err(e),
        };
        let (state, trace) = match outcome {
            Ok(done) => done,
            Err(ServiceError::Engine(EngineError::Cancelled)) => (JobState::Cancelled, None),
            Err(e) => {
                tracing::warn!(job_id, error = %e, "training failed");
                (JobState::Failed { message: e.to_string() }, None)
            }
        };
        let mut jobs = handle.jobs.lock();
        if let Some(e) = jobs.jobs.get_mut(&job_id) {
            if !e.job.state.is_terminal() {
                e.job.trace = trace;
                e.job.state = state;
            }
        }
    }

    /// Writes the new snapshot first, then the regenerated annotations, and
    /// only then swaps them into memory.
    fn publish(&self, handle: &ProjectHandle, out: themetopic_core::engine::FitOutput, config: &TrainConfig) -> Result<u64> {
        let mut data = handle.data.write();
        let mut next = data.clone();
        let snapshot = next.publish(out, config);
        if let Some(storage) = &self.storage {
            storage.save_snapshot(&next.project_id, &snapshot)?;
            storage.save_annotations(&next)?;
        }
        *data = next;
        Ok(snapshot.version)
    }

    pub fn job(&self, project_id: &str, job_id: JobId) -> Result<TrainingJob> {
        let handle = self.project(project_id)?;
        let jobs = handle.jobs.lock();
        jobs.jobs
            .get(&job_id)
            .map(|e| e.job.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("job {job_id}")))
    }

    /// Asks a job to stop after its current iteration.
    pub fn cancel_job(&self, project_id: &str, job_id: JobId) -> Result<TrainingJob> {
        let handle = self.project(project_id)?;
        let mut jobs = handle.jobs.lock();
        let entry = jobs
            .jobs
            .get_mut(&job_id)
            .ok_or_else(|| ServiceError::NotFound(format!("job {job_id}")))?;
        entry.cancel.store(true, Ordering::Relaxed);
        if entry.job.state == JobState::Queued {
            entry.job.state = JobState::Cancelled;
        }
        Ok(entry.job.clone())
    }

    /// Polls until the job reaches a terminal state.
    pub async fn wait_for_job(&self, project_id: &str, job_id: JobId) -> Result<TrainingJob> {
        loop {
            let job = self.job(project_id, job_id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            tokio::time::sleep(std::time::Duration::from_millis(5)).await;
        }
    }

    pub(crate) fn replay_get(&self, key: &str) -> Option<(u16, Vec<u8>)> {
        self.replay.lock().entries.get(key).cloned()
    }

    pub(crate) fn replay_put(&self, key: String, status: u16, body: Vec<u8>) {
        let mut cache = self.replay.lock();
        if cache.entries.insert(key.clone(), (status, body)).is_none() {
            cache.order.push_back(key);
        }
        while cache.order.len() > REPLAY_CAPACITY {
            if let Some(old) = cache.order.pop_front() {
                cache.entries.remove(&old);
            }
        }
    }
}
