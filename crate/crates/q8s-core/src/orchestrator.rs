//! The execution state machine for one notebook cell.
//!
//! Drives analyze, image build/push (skipped on cache hits), manifest
//! submission, status polling, log collection, and cleanup. Cleanup runs on
//! every path out of the machine, including errors, timeouts, and aborts, so
//! a cell execution never leaks Jobs or ConfigMaps.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analyzer::{Analyzer, CellSource, DependencyManifest};
use crate::client::{ClusterApiError, ClusterClient, JobPhase};
use crate::imagespec::{build_spec, BuildDriver, BuildStep, ImageError, ImageSpec, ImageStore};
use crate::manifests::{make_manifests, ConfigMapManifest, JobManifest};

pub const DEFAULT_BASE_IMAGE: &str = "nvidia/cuda:12.4.1-runtime-ubuntu22.04";
pub const DEFAULT_REGISTRY: &str = "registry.com/user";

/// Transient API failures are retried this many times before giving up.
const MAX_RETRIES: u32 = 5;

#[derive(Debug, Clone)]
pub struct ExecutionOptions {
    pub base_image: String,
    pub registry: String,
    pub gpu_count: u32,
    pub poll_interval: Duration,
    /// Wall-clock budget for the job to finish once submitted.
    pub timeout: Duration,
    /// Base delay for exponential backoff on transient API failures.
    pub retry_backoff: Duration,
    /// Seeds name-suffix generation for reproducible manifests.
    pub seed: Option<u64>,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        ExecutionOptions {
            base_image: DEFAULT_BASE_IMAGE.to_string(),
            registry: DEFAULT_REGISTRY.to_string(),
            gpu_count: 1,
            poll_interval: Duration::from_secs(2),
            timeout: Duration::from_secs(3600),
            retry_backoff: Duration::from_millis(250),
            seed: None,
        }
    }
}

/// States a run moves through. Building and Pushing are skipped on image
/// cache hits; any state may jump to CleaningUp on error or abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionPhase {
    Preparing,
    Building,
    Pushing,
    Submitting,
    Pending,
    Running,
    Collecting,
    CleaningUp,
    Done,
}

impl std::fmt::Display for ExecutionPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExecutionPhase::Preparing => "preparing",
            ExecutionPhase::Building => "building",
            ExecutionPhase::Pushing => "pushing",
            ExecutionPhase::Submitting => "submitting",
            ExecutionPhase::Pending => "pending",
            ExecutionPhase::Running => "running",
            ExecutionPhase::Collecting => "collecting",
            ExecutionPhase::CleaningUp => "cleaning-up",
            ExecutionPhase::Done => "done",
        };
        f.write_str(s)
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Succeeded,
    Failed,
    TimedOut,
    Aborted,
    InfraError,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Outcome::Succeeded => "succeeded",
            Outcome::Failed => "failed",
            Outcome::TimedOut => "timed-out",
            Outcome::Aborted => "aborted",
            Outcome::InfraError => "infra-error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PhaseStamp {
    pub phase: ExecutionPhase,
    pub at: SystemTime,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ExecutionResult {
    pub outcome: Outcome,
    /// Container exit code, when the job ran to completion.
    pub exit_code: Option<i32>,
    /// Job logs when the container exited 0, otherwise empty.
    pub stdout: String,
    /// Job logs when the container exited nonzero, otherwise empty.
    pub stderr: String,
    pub job_name: String,
    pub timeline: Vec<PhaseStamp>,
    /// Diagnostic for TimedOut, Aborted, and InfraError outcomes.
    pub failure: Option<String>,
}

impl ExecutionResult {
    pub fn phases(&self) -> Vec<ExecutionPhase> {
        self.timeline.iter().map(|s| s.phase).collect()
    }
}

/// Cooperative cancellation for an in-flight run; cloneable so a control
/// channel can abort while the run owns the other handle.
#[derive(Clone)]
pub struct AbortHandle {
    tx: Arc<tokio::sync::watch::Sender<bool>>,
}

impl AbortHandle {
    pub fn new() -> Self {
        AbortHandle { tx: Arc::new(tokio::sync::watch::channel(false).0) }
    }

    pub fn abort(&self) {
        self.tx.send_replace(true);
    }

    pub fn is_aborted(&self) -> bool {
        *self.tx.borrow()
    }

    /// Resolves once [`abort`](Self::abort) has been called.
    pub async fn wait_aborted(&self) {
        let mut rx = self.tx.subscribe();
        loop {
            if *rx.borrow_and_update() {
                return;
            }
            if rx.changed().await.is_err() {
                // Sender kept alive by self; unreachable, but never abort.
                std::future::pending::<()>().await;
            }
        }
    }
}

impl Default for AbortHandle {
    fn default() -> Self {
        AbortHandle::new()
    }
}

/// Everything derived from a cell before touching the cluster.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub manifest: DependencyManifest,
    pub image: ImageSpec,
    pub job: JobManifest,
    pub configmap: ConfigMapManifest,
}

/// Analyzes the cell and mints its image spec and manifests without any
/// cluster interaction. Shared by real runs and dry runs.
pub fn plan_cell<R: rand::Rng>(
    analyzer: &Analyzer,
    cell: &CellSource,
    opts: &ExecutionOptions,
    rng: &mut R,
) -> Result<ExecutionPlan, ImageError> {
    let manifest = analyzer.analyze(cell);
    let image = build_spec(&manifest, &opts.base_image, &opts.registry)?;
    let (job, configmap) = make_manifests(cell, &image.image_ref, opts, rng);
    Ok(ExecutionPlan { manifest, image, job, configmap })
}

pub struct Orchestrator {
    client: ClusterClient,
    driver: Arc<dyn BuildDriver>,
    store: ImageStore,
    analyzer: Analyzer,
    opts: ExecutionOptions,
    rng: Mutex<ChaCha8Rng>,
}

struct Run {
    timeline: Vec<PhaseStamp>,
    job_name: String,
    configmap_name: String,
    created_job: bool,
    created_cm: bool,
}

impl Run {
    fn enter(&mut self, phase: ExecutionPhase) {
        self.timeline.push(PhaseStamp { phase, at: SystemTime::now() });
    }
}

enum RunFailure {
    Aborted,
    TimedOut,
    Api(ClusterApiError),
    Other(String),
}

impl RunFailure {
    fn message(&self) -> String {
        match self {
            RunFailure::Aborted => "execution aborted".to_string(),
            RunFailure::TimedOut => "execution timed out".to_string(),
            RunFailure::Api(e) => e.to_string(),
            RunFailure::Other(m) => m.clone(),
        }
    }
}

struct Collected {
    exit_code: i32,
    logs: String,
}

impl Orchestrator {
    pub fn new(client: ClusterClient, driver: Arc<dyn BuildDriver>, opts: ExecutionOptions) -> Self {
        let rng = match opts.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_rng(&mut rand::rng()),
        };
        Orchestrator {
            client,
            driver,
            store: ImageStore::new(),
            analyzer: Analyzer::new(),
            opts,
            rng: Mutex::new(rng),
        }
    }

    pub fn with_analyzer(mut self, analyzer: Analyzer) -> Self {
        self.analyzer = analyzer;
        self
    }

    /// Swaps in a store, e.g. one persisting built digests across sessions.
    pub fn with_store(mut self, store: ImageStore) -> Self {
        self.store = store;
        self
    }

    pub fn options(&self) -> &ExecutionOptions {
        &self.opts
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    /// Runs one cell to a terminal outcome. Never panics on cluster
    /// misbehavior; infrastructure problems come back as
    /// [`Outcome::InfraError`] with cleanup already attempted.
    pub async fn execute_cell(&self, cell: &CellSource, abort: &AbortHandle) -> ExecutionResult {
        let mut run = Run {
            timeline: Vec::new(),
            job_name: String::new(),
            configmap_name: String::new(),
            created_job: false,
            created_cm: false,
        };
        run.enter(ExecutionPhase::Preparing);

        let plan = {
            let mut rng = self.rng.lock().unwrap();
            plan_cell(&self.analyzer, cell, &self.opts, &mut *rng)
        };
        let plan = match plan {
            Ok(plan) => plan,
            Err(e) => {
                // Nothing was created; still close the timeline uniformly.
                run.enter(ExecutionPhase::CleaningUp);
                run.enter(ExecutionPhase::Done);
                return self.assemble(run, Err(RunFailure::Other(e.to_string())), None);
            }
        };
        run.job_name = plan.job.name.clone();
        run.configmap_name = plan.configmap.name.clone();

        let body = self.run_to_collection(&plan, abort, &mut run).await;
        run.enter(ExecutionPhase::CleaningUp);
        let cleanup_failure = self.cleanup(&mut run).await.err();
        run.enter(ExecutionPhase::Done);
        self.assemble(run, body, cleanup_failure)
    }

    async fn run_to_collection(
        &self,
        plan: &ExecutionPlan,
        abort: &AbortHandle,
        run: &mut Run,
    ) -> Result<Collected, RunFailure> {
        check_abort(abort)?;

        if self.store.needs_rebuild(&plan.image) {
            tokio::select! {
                result = self.store.ensure_image_observed(&plan.image, self.driver.as_ref(), |step| {
                    match step {
                        BuildStep::Build => run.enter(ExecutionPhase::Building),
                        BuildStep::Push => run.enter(ExecutionPhase::Pushing),
                    }
                }) => {
                    result.map_err(|e| RunFailure::Other(e.to_string()))?;
                }
                _ = abort.wait_aborted() => return Err(RunFailure::Aborted),
            }
        }
        check_abort(abort)?;

        run.enter(ExecutionPhase::Submitting);
        self.with_retry(abort, || self.client.create_configmap(&plan.configmap)).await?;
        run.created_cm = true;
        check_abort(abort)?;
        self.with_retry(abort, || self.client.create_job(&plan.job)).await?;
        run.created_job = true;

        run.enter(ExecutionPhase::Pending);
        let submitted = Instant::now();
        let mut seen_running = false;
        loop {
            check_abort(abort)?;
            let status = self.with_retry(abort, || self.client.get_job_status(&run.job_name)).await?;
            match status.phase {
                JobPhase::Active => {
                    if !seen_running {
                        seen_running = true;
                        run.enter(ExecutionPhase::Running);
                    }
                }
                JobPhase::Succeeded | JobPhase::Failed => {
                    run.enter(ExecutionPhase::Collecting);
                    let pod = status
                        .pod_name
                        .ok_or_else(|| RunFailure::Other("job finished but its pod was not found".into()))?;
                    let exit_code = status
                        .exit_code
                        .ok_or_else(|| RunFailure::Other("job finished without reporting an exit code".into()))?;
                    let logs = self.with_retry(abort, || self.client.get_pod_logs(&pod)).await?;
                    return Ok(Collected { exit_code, logs });
                }
                JobPhase::Pending => {}
            }
            if submitted.elapsed() >= self.opts.timeout {
                return Err(RunFailure::TimedOut);
            }
            tokio::select! {
                _ = tokio::time::sleep(self.opts.poll_interval) => {}
                _ = abort.wait_aborted() => return Err(RunFailure::Aborted),
            }
        }
    }

    /// Retries transient API failures with exponential backoff; all other
    /// errors surface immediately.
    async fn with_retry<T, Fut>(
        &self,
        abort: &AbortHandle,
        mut call: impl FnMut() -> Fut,
    ) -> Result<T, RunFailure>
    where
        Fut: std::future::Future<Output = Result<T, ClusterApiError>>,
    {
        let mut attempt = 0u32;
        loop {
            match call().await {
                Ok(value) => return Ok(value),
                Err(ClusterApiError::ApiUnavailable { .. }) if attempt < MAX_RETRIES => {
                    let backoff = self.opts.retry_backoff * 2u32.saturating_pow(attempt);
                    attempt += 1;
                    tokio::select! {
                        _ = tokio::time::sleep(backoff) => {}
                        _ = abort.wait_aborted() => return Err(RunFailure::Aborted),
                    }
                }
                Err(e) => return Err(RunFailure::Api(e)),
            }
        }
    }

    /// Deletes whatever was created, tolerating already-deleted resources.
    /// Runs to completion even when the run was aborted.
    async fn cleanup(&self, run: &mut Run) -> Result<(), String> {
        let no_abort = AbortHandle::new();
        let mut problems = Vec::new();
        if run.created_job {
            match self.with_retry(&no_abort, || self.client.delete_job(&run.job_name)).await {
                Ok(()) | Err(RunFailure::Api(ClusterApiError::NotFound { .. })) => run.created_job = false,
                Err(f) => problems.push(format!("job {}: {}", run.job_name, f.message())),
            }
        }
        if run.created_cm {
            match self.with_retry(&no_abort, || self.client.delete_configmap(&run.configmap_name)).await {
                Ok(()) | Err(RunFailure::Api(ClusterApiError::NotFound { .. })) => run.created_cm = false,
                Err(f) => problems.push(format!("configmap {}: {}", run.configmap_name, f.message())),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(format!("cleanup failed: {}", problems.join("; ")))
        }
    }

    fn assemble(
        &self,
        run: Run,
        body: Result<Collected, RunFailure>,
        cleanup_failure: Option<String>,
    ) -> ExecutionResult {
        let (mut outcome, exit_code, stdout, stderr, mut failure) = match body {
            Ok(c) if c.exit_code == 0 => (Outcome::Succeeded, Some(0), c.logs, String::new(), None),
            Ok(c) => (Outcome::Failed, Some(c.exit_code), String::new(), c.logs, None),
            Err(RunFailure::Aborted) => {
                (Outcome::Aborted, None, String::new(), String::new(), Some("execution aborted".to_string()))
            }
            Err(RunFailure::TimedOut) => {
                let message = format!("job did not finish within {:?}", self.opts.timeout);
                (Outcome::TimedOut, None, String::new(), String::new(), Some(message))
            }
            Err(f) => (Outcome::InfraError, None, String::new(), String::new(), Some(f.message())),
        };
        if let Some(cleanup) = cleanup_failure {
            // Leaked resources turn any outcome into an infrastructure error.
            outcome = Outcome::InfraError;
            failure = Some(match failure {
                Some(existing) => format!("{existing}; {cleanup}"),
                None => cleanup,
            });
        }
        ExecutionResult {
            outcome,
            exit_code,
            stdout,
            stderr,
            job_name: run.job_name,
            timeline: run.timeline,
            failure,
        }
    }
}

fn check_abort(abort: &AbortHandle) -> Result<(), RunFailure> {
    if abort.is_aborted() {
        Err(RunFailure::Aborted)
    } else {
        Ok(())
    }
}
