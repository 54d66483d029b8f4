//! Container image synthesis for dependency manifests.
//!
//! Each distinct manifest maps to one image: a Dockerfile generated from a
//! fixed template plus a requirements file, addressed by a content digest so
//! the image is rebuilt only when the dependencies (or the template, or the
//! base image) change.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::analyzer::DependencyManifest;

/// Bump when the Dockerfile template changes so cached digests invalidate.
const TEMPLATE_VERSION: &str = "q8s-image-v1";

/// Repository name appended to the registry prefix.
const IMAGE_REPOSITORY: &str = "job-dependencies";

/// Everything needed to build and name one cell image.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ImageSpec {
    pub base_image: String,
    pub dockerfile: String,
    pub requirements: String,
    /// Hex sha256 over template version, base image, and requirements.
    pub digest: String,
    /// Full pushable reference, tagged with the first 12 digest characters.
    pub image_ref: String,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("invalid image reference: {reason}")]
    InvalidReference { reason: String },
    #[error("image build failed: {message}")]
    BuildFailed { message: String },
    #[error("image push failed: {message}")]
    PushFailed { message: String },
}

/// Renders the Dockerfile and requirements text and derives the content
/// digest. An empty manifest produces a bare `FROM` Dockerfile and empty
/// requirements.
pub fn build_spec(
    manifest: &DependencyManifest,
    base_image: &str,
    registry: &str,
) -> Result<ImageSpec, ImageError> {
    validate_ref_component(base_image, "base image")?;
    validate_ref_component(registry, "registry")?;
    if registry.ends_with('/') {
        return Err(ImageError::InvalidReference { reason: "registry must not end with '/'".into() });
    }

    let requirements = if manifest.is_empty() {
        String::new()
    } else {
        let mut text = manifest.packages().join("\n");
        text.push('\n');
        text
    };

    let dockerfile = if manifest.is_empty() {
        format!("FROM {base_image}\n")
    } else {
        format!(
            "FROM {base_image}\n\
             COPY requirements.txt /tmp/requirements.txt\n\
             RUN pip install --no-cache-dir -r /tmp/requirements.txt\n"
        )
    };

    let mut hasher = Sha256::new();
    hasher.update(TEMPLATE_VERSION.as_bytes());
    hasher.update(b"\n");
    hasher.update(base_image.as_bytes());
    hasher.update(b"\n");
    hasher.update(requirements.as_bytes());
    let digest = hex::encode(hasher.finalize());
    let image_ref = format!("{registry}/{IMAGE_REPOSITORY}:{}", &digest[..12]);

    Ok(ImageSpec { base_image: base_image.to_string(), dockerfile, requirements, digest, image_ref })
}

fn validate_ref_component(value: &str, what: &str) -> Result<(), ImageError> {
    if value.is_empty() {
        return Err(ImageError::InvalidReference { reason: format!("{what} is empty") });
    }
    if value.chars().any(char::is_whitespace) {
        return Err(ImageError::InvalidReference { reason: format!("{what} contains whitespace: {value:?}") });
    }
    Ok(())
}

/// Performs the actual build and push work for an [`ImageSpec`].
#[async_trait::async_trait]
pub trait BuildDriver: Send + Sync {
    async fn build(&self, spec: &ImageSpec) -> Result<(), ImageError>;
    async fn push(&self, image_ref: &str) -> Result<(), ImageError>;
}

/// Tracks which image digests have been built and pushed, so repeated cells
/// skip the build entirely. Concurrent requests for the same digest coalesce
/// into a single build.
pub struct ImageStore {
    inner: Mutex<StoreInner>,
    cache_file: Option<PathBuf>,
}

struct StoreInner {
    built: HashSet<String>,
    gates: HashMap<String, Arc<tokio::sync::Mutex<()>>>,
}

impl ImageStore {
    pub fn new() -> Self {
        ImageStore {
            inner: Mutex::new(StoreInner { built: HashSet::new(), gates: HashMap::new() }),
            cache_file: None,
        }
    }

    /// Persists built digests to `path` (one per line) and preloads any
    /// digests already recorded there. Write failures degrade to in-memory
    /// caching rather than failing the execution.
    pub fn with_cache_file(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let built = std::fs::read_to_string(&path)
            .map(|text| text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
            .unwrap_or_default();
        ImageStore {
            inner: Mutex::new(StoreInner { built, gates: HashMap::new() }),
            cache_file: Some(path),
        }
    }

    /// True when the spec's digest has not been successfully built and
    /// pushed yet.
    pub fn needs_rebuild(&self, spec: &ImageSpec) -> bool {
        !self.inner.lock().unwrap().built.contains(&spec.digest)
    }

    /// Builds and pushes the image unless it is already cached. Returns
    /// `true` when this call performed the build. A failed build or push
    /// leaves the digest uncached so a later attempt retries.
    pub async fn ensure_image(&self, spec: &ImageSpec, driver: &dyn BuildDriver) -> Result<bool, ImageError> {
        self.ensure_image_observed(spec, driver, |_| {}).await
    }

    /// Like [`ensure_image`](Self::ensure_image) but reports the build and
    /// push steps as they start, for phase tracking.
    pub async fn ensure_image_observed(
        &self,
        spec: &ImageSpec,
        driver: &dyn BuildDriver,
        mut observe: impl FnMut(BuildStep) + Send,
    ) -> Result<bool, ImageError> {
        let gate = {
            let mut inner = self.inner.lock().unwrap();
            if inner.built.contains(&spec.digest) {
                return Ok(false);
            }
            inner.gates.entry(spec.digest.clone()).or_insert_with(|| Arc::new(tokio::sync::Mutex::new(()))).clone()
        };
        let _guard = gate.lock().await;
        if !self.needs_rebuild(spec) {
            // Another task finished the build while we waited on the gate.
            return Ok(false);
        }
        observe(BuildStep::Build);
        driver.build(spec).await?;
        observe(BuildStep::Push);
        driver.push(&spec.image_ref).await?;
        let mut inner = self.inner.lock().unwrap();
        inner.built.insert(spec.digest.clone());
        if let Some(path) = &self.cache_file {
            let mut digests: Vec<&String> = inner.built.iter().collect();
            digests.sort();
            let mut text = digests.into_iter().cloned().collect::<Vec<_>>().join("\n");
            text.push('\n');
            let _ = std::fs::write(path, text);
        }
        Ok(true)
    }
}

impl Default for ImageStore {
    fn default() -> Self {
        ImageStore::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildStep {
    Build,
    Push,
}

/// Records build and push calls instead of running anything; failures can be
/// scripted. Intended for tests and offline dry runs.
#[derive(Default)]
pub struct RecordingDriver {
    state: Mutex<RecordingState>,
    delay: Option<std::time::Duration>,
}

#[derive(Default)]
struct RecordingState {
    builds: Vec<BuildRecord>,
    pushes: Vec<String>,
    build_error: Option<String>,
    push_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildRecord {
    pub image_ref: String,
    pub dockerfile: String,
    pub requirements: String,
}

impl RecordingDriver {
    pub fn new() -> Self {
        RecordingDriver::default()
    }

    /// Every build/push while in effect pauses this long; exposes the
    /// coalescing window to tests.
    pub fn with_delay(delay: std::time::Duration) -> Self {
        RecordingDriver { delay: Some(delay), ..RecordingDriver::default() }
    }

    /// Scripts all subsequent builds to fail until cleared with `None`.
    pub fn set_build_error(&self, message: Option<&str>) {
        self.state.lock().unwrap().build_error = message.map(str::to_string);
    }

    /// Scripts all subsequent pushes to fail until cleared with `None`.
    pub fn set_push_error(&self, message: Option<&str>) {
        self.state.lock().unwrap().push_error = message.map(str::to_string);
    }

    pub fn builds(&self) -> Vec<BuildRecord> {
        self.state.lock().unwrap().builds.clone()
    }

    pub fn pushes(&self) -> Vec<String> {
        self.state.lock().unwrap().pushes.clone()
    }

    pub fn build_count(&self) -> usize {
        self.state.lock().unwrap().builds.len()
    }

    pub fn push_count(&self) -> usize {
        self.state.lock().unwrap().pushes.len()
    }
}

#[async_trait::async_trait]
impl BuildDriver for RecordingDriver {
    async fn build(&self, spec: &ImageSpec) -> Result<(), ImageError> {
        if let Some(delay) = self.delay {
            tokio::time::sleep(delay).await;
        }
        let mut state = self.state.lock().unwrap();
        if let Some(message) = &state.build_error {
            return Err(ImageError::BuildFailed { message: message.clone() });
        }
        state.builds.push(BuildRecord {
            image_ref: spec.image_ref.clone(),
            dockerfile: spec.dockerfile.clone(),
            requirements: spec.requirements.clone(),
        });
        Ok(())
    }

    async fn push(&self, image_ref: &str) -> Result<(), ImageError> {
        if let Some(delay) = self.delay {
            tokio::time::sleep(delay).await;
        }
        let mut state = self.state.lock().unwrap();
        if let Some(message) = &state.push_error {
            return Err(ImageError::PushFailed { message: message.clone() });
        }
        state.pushes.push(image_ref.to_string());
        Ok(())
    }
}

/// Succeeds without doing anything. Useful when the image already exists or
/// when running end to end against a fake cluster with no container tooling.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopDriver;

#[async_trait::async_trait]
impl BuildDriver for NoopDriver {
    async fn build(&self, _spec: &ImageSpec) -> Result<(), ImageError> {
        Ok(())
    }

    async fn push(&self, _image_ref: &str) -> Result<(), ImageError> {
        Ok(())
    }
}

/// Shells out to a container CLI (`docker` by default; anything with
/// compatible `build`/`push` subcommands works, e.g. `podman`).
pub struct ShellDriver {
    program: String,
}

impl ShellDriver {
    pub fn new(program: impl Into<String>) -> Self {
        ShellDriver { program: program.into() }
    }
}

impl Default for ShellDriver {
    fn default() -> Self {
        ShellDriver::new("docker")
    }
}

#[async_trait::async_trait]
impl BuildDriver for ShellDriver {
    async fn build(&self, spec: &ImageSpec) -> Result<(), ImageError> {
        let context = tempfile::tempdir()
            .map_err(|e| ImageError::BuildFailed { message: format!("cannot create build context: {e}") })?;
        std::fs::write(context.path().join("Dockerfile"), &spec.dockerfile)
            .and_then(|()| std::fs::write(context.path().join("requirements.txt"), &spec.requirements))
            .map_err(|e| ImageError::BuildFailed { message: format!("cannot write build context: {e}") })?;
        let output = tokio::process::Command::new(&self.program)
            .arg("build")
            .arg("-t")
            .arg(&spec.image_ref)
            .arg(context.path())
            .output()
            .await
            .map_err(|e| ImageError::BuildFailed { message: format!("cannot run {}: {e}", self.program) })?;
        if !output.status.success() {
            return Err(ImageError::BuildFailed { message: tail(&output.stderr) });
        }
        Ok(())
    }

    async fn push(&self, image_ref: &str) -> Result<(), ImageError> {
        let output = tokio::process::Command::new(&self.program)
            .arg("push")
            .arg(image_ref)
            .output()
            .await
            .map_err(|e| ImageError::PushFailed { message: format!("cannot run {}: {e}", self.program) })?;
        if !output.status.success() {
            return Err(ImageError::PushFailed { message: tail(&output.stderr) });
        }
        Ok(())
    }
}

fn tail(stderr: &[u8]) -> String {
    let text = String::from_utf8_lossy(stderr);
    let lines: Vec<&str> = text.lines().rev().take(5).collect();
    lines.into_iter().rev().collect::<Vec<_>>().join("\n")
}
