//! Shared service state: uploads, plugin stacks, the inversion cache and the job store.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use image::RgbImage;
use nullface_core::engine::Engine;
use nullface_core::inversion::InversionRecord;
use nullface_core::masks::SegmentationMap;
use nullface_core::pipeline::{Stack, StackSpec};
use nullface_core::runs::RunManifest;
use nullface_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tokio::sync::{OnceCell, Semaphore};

use crate::ServiceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Invert,
    Anonymize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobResult {
    pub inversion_id: String,
    /// Path of the result endpoint.
    pub result_url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity_distance: Option<f64>,
    pub manifest: RunManifest,
    /// Whether this job found its result already on disk.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<JobResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Milliseconds since service start.
    pub created_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
    #[serde(skip)]
    pub(crate) result_file: Option<PathBuf>,
}

pub(crate) struct StoredImage {
    pub path: PathBuf,
    pub image: Arc<RgbImage>,
}

/// One cached inversion; `record` is filled once, by whichever job gets there first.
pub(crate) struct InversionEntry {
    pub id: String,
    pub image_id: String,
    pub steps: usize,
    pub seed: u64,
    pub backend: String,
    pub job_id: String,
    pub record: OnceCell<std::result::Result<Arc<InversionRecord>, String>>,
}

impl InversionEntry {
    pub fn dir(&self, state: &AppState) -> PathBuf {
        state.config().run_dir.join("inversions").join(&self.id)
    }
}

/// Cache key: the inversion depends only on (image, steps, seed, backend).
pub(crate) fn inversion_id(image_id: &str, steps: usize, seed: u64, backend: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("{image_id}\n{steps}\n{seed}\n{backend}").as_bytes());
    format!("inv-{}", &hex::encode(h.finalize())[..16])
}

struct Inner {
    config: ServiceConfig,
    slots: Semaphore,
    images: RwLock<HashMap<String, Arc<StoredImage>>>,
    segmentations: Mutex<HashMap<String, Arc<SegmentationMap>>>,
    stacks: Mutex<HashMap<(String, u32, u32), Stack>>,
    inversions: Mutex<HashMap<String, Arc<InversionEntry>>>,
    jobs: RwLock<HashMap<String, Job>>,
    inversions_computed: AtomicUsize,
    started: Instant,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Engine work is limited to `NULLFACE_WORKERS` concurrent jobs.
    pub fn new(config: ServiceConfig) -> Result<Self> {
        for sub in ["images", "inversions", "results", "masks"] {
            let dir = config.run_dir.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let workers = Engine::from_env()?.workers();
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                slots: Semaphore::new(workers),
                images: RwLock::default(),
                segmentations: Mutex::default(),
                stacks: Mutex::default(),
                inversions: Mutex::default(),
                jobs: RwLock::default(),
                inversions_computed: AtomicUsize::new(0),
                started: Instant::now(),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    /// Inversions actually computed since start (cache hits excluded).
    pub fn inversions_computed(&self) -> usize {
        self.inner.inversions_computed.load(Ordering::SeqCst)
    }

    pub(crate) fn note_inversion(&self) {
        self.inner.inversions_computed.fetch_add(1, Ordering::SeqCst);
    }

    pub(crate) fn now_ms(&self) -> u64 {
        self.inner.started.elapsed().as_millis() as u64
    }

    pub(crate) async fn slot(&self) -> tokio::sync::SemaphorePermit<'_> {
        self.inner.slots.acquire().await.expect("semaphore is never closed")
    }

    pub(crate) fn add_image(&self, id: String, stored: StoredImage) {
        self.inner.images.write().unwrap().insert(id, Arc::new(stored));
    }

    pub(crate) fn image(&self, id: &str) -> Option<Arc<StoredImage>> {
        self.inner.images.read().unwrap().get(id).cloned()
    }

    pub(crate) fn cached_segmentation(&self, id: &str) -> Option<Arc<SegmentationMap>> {
        self.inner.segmentations.lock().unwrap().get(id).cloned()
    }

    pub(crate) fn store_segmentation(&self, id: &str, seg: Arc<SegmentationMap>) {
        self.inner.segmentations.lock().unwrap().insert(id.to_string(), seg);
    }

    pub(crate) fn stack_spec(&self, backend: &str) -> StackSpec {
        StackSpec {
            backbone: backend.to_string(),
            plugin_path: self.inner.config.plugin_path.clone(),
            ..StackSpec::default()
        }
    }

    /// Stack for `backend` at the given image size, built once. Blocking.
    pub(crate) fn stack(&self, backend: &str, width: u32, height: u32) -> Result<Stack> {
        let key = (backend.to_string(), width, height);
        if let Some(s) = self.inner.stacks.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let stack = self.stack_spec(backend).build(width, height)?;
        Ok(self.inner.stacks.lock().unwrap().entry(key).or_insert(stack).clone())
    }

    /// Returns the entry for `id`, inserting `make()` if absent. The flag tells
    /// whether the entry was created by this call.
    pub(crate) fn inversion_entry(&self, id: &str, make: impl FnOnce() -> InversionEntry) -> (Arc<InversionEntry>, bool) {
        let mut map = self.inner.inversions.lock().unwrap();
        if let Some(e) = map.get(id) {
            return (e.clone(), false);
        }
        let e = Arc::new(make());
        map.insert(id.to_string(), e.clone());
        (e, true)
    }

    pub(crate) fn find_inversion(&self, id: &str) -> Option<Arc<InversionEntry>> {
        self.inner.inversions.lock().unwrap().get(id).cloned()
    }

    pub(crate) fn new_job(&self, kind: JobKind, config: serde_json::Value) -> Job {
        let job = Job {
            id: format!("job-{}", uuid::Uuid::new_v4().simple()),
            kind,
            state: JobState::Queued,
            config,
            result: None,
            error: None,
            created_ms: self.now_ms(),
            started_ms: None,
            finished_ms: None,
            result_file: None,
        };
        self.inner.jobs.write().unwrap().insert(job.id.clone(), job.clone());
        job
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.inner.jobs.read().unwrap().get(id).cloned()
    }

    /// Moves a job forward; only queued→running and running→done/failed are allowed.
    pub(crate) fn transition(&self, id: &str, to: JobState, outcome: Option<std::result::Result<(JobResult, PathBuf), String>>) {
        let now = self.now_ms();
        let mut jobs = self.inner.jobs.write().unwrap();
        let Some(job) = jobs.get_mut(id) else {
            return;
        };
        let allowed = matches!(
            (job.state, to),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        );
        if !allowed {
            log::error!("job {id}: refused transition {:?} -> {to:?}", job.state);
            return;
        }
        job.state = to;
        match to {
            JobState::Running => job.started_ms = Some(now),
            _ => job.finished_ms = Some(now),
        }
        match outcome {
            Some(Ok((result, file))) => {
                job.result = Some(result);
                job.result_file = Some(file);
            }
            Some(Err(e)) => job.error = Some(e),
            None => {}
        }
    }
}
