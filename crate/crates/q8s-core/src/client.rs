//! Minimal Kubernetes API client for the job-execution workflow.
//!
//! Speaks to exactly seven endpoints: create/status/delete for Jobs, create/
//! delete for ConfigMaps, a pod lookup by job-name label, and pod logs.
//! Everything else is out of scope on purpose.

use url::Url;

use crate::kubeconfig::{ClusterConfig, ConfigError, Credential};
use crate::manifests::{ConfigMapManifest, JobManifest};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ClusterApiError {
    #[error("unauthorized: {message}")]
    Unauthorized { message: String },
    #[error("{resource} not found")]
    NotFound { resource: String },
    #[error("conflict on {resource}: {message}")]
    Conflict { resource: String, message: String },
    #[error("{resource} rejected by the API server: {message}")]
    InvalidManifest { resource: String, message: String },
    #[error("cluster API unavailable: {message}")]
    ApiUnavailable { message: String },
}

/// Coarse job lifecycle as reported by the API server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobPhase {
    /// Created but no pod running yet (scheduling, image pull, GPU wait).
    Pending,
    Active,
    Succeeded,
    Failed,
}

impl JobPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobPhase::Succeeded | JobPhase::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobStatus {
    pub phase: JobPhase,
    /// Container exit code; populated once the job is terminal.
    pub exit_code: Option<i32>,
    /// Pod backing the job, once one exists.
    pub pod_name: Option<String>,
}

pub struct ClusterClient {
    http: reqwest::Client,
    base: Url,
    namespace: String,
}

impl ClusterClient {
    pub fn new(config: &ClusterConfig) -> Result<Self, ConfigError> {
        ClusterClient::with_timeouts(config, std::time::Duration::from_secs(10), std::time::Duration::from_secs(60))
    }

    pub fn with_timeouts(
        config: &ClusterConfig,
        connect_timeout: std::time::Duration,
        request_timeout: std::time::Duration,
    ) -> Result<Self, ConfigError> {
        let mut builder = reqwest::Client::builder()
            .connect_timeout(connect_timeout)
            .timeout(request_timeout);
        if let Some(ca) = &config.ca_bundle {
            let cert = reqwest::Certificate::from_pem(ca)
                .map_err(|e| ConfigError::Malformed { reason: format!("CA bundle is not valid PEM: {e}") })?;
            builder = builder.add_root_certificate(cert);
        }
        match &config.credential {
            Credential::BearerToken(token) => {
                let mut headers = reqwest::header::HeaderMap::new();
                let mut value = reqwest::header::HeaderValue::from_str(&format!("Bearer {token}"))
                    .map_err(|_| ConfigError::Malformed { reason: "token contains non-header bytes".into() })?;
                value.set_sensitive(true);
                headers.insert(reqwest::header::AUTHORIZATION, value);
                builder = builder.default_headers(headers);
            }
            Credential::ClientCert { cert_pem, key_pem } => {
                let mut combined = key_pem.clone();
                combined.extend_from_slice(cert_pem);
                let identity = reqwest::Identity::from_pem(&combined).map_err(|e| ConfigError::Malformed {
                    reason: format!("client certificate or key is not valid PEM: {e}"),
                })?;
                builder = builder.identity(identity);
            }
        }
        if config.insecure && config.is_loopback() {
            builder = builder.danger_accept_invalid_certs(true);
        }
        let http = builder
            .build()
            .map_err(|e| ConfigError::Malformed { reason: format!("cannot build HTTP client: {e}") })?;
        Ok(ClusterClient { http, base: config.server_url.clone(), namespace: config.namespace.clone() })
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    /// Submits the Job; returns the server-assigned name.
    pub async fn create_job(&self, manifest: &JobManifest) -> Result<String, ClusterApiError> {
        let url = self.url(&job_collection_path(&self.namespace));
        let body = self
            .execute(self.http.post(url).json(&manifest.to_json()), &format!("job {}", manifest.name))
            .await?;
        created_name(&body).ok_or_else(unexpected_body)
    }

    /// Submits the ConfigMap; returns the server-assigned name.
    pub async fn create_configmap(&self, manifest: &ConfigMapManifest) -> Result<String, ClusterApiError> {
        let url = self.url(&configmap_collection_path(&self.namespace));
        let body = self
            .execute(self.http.post(url).json(&manifest.to_json()), &format!("configmap {}", manifest.name))
            .await?;
        created_name(&body).ok_or_else(unexpected_body)
    }

    /// Reads the Job and reduces its conditions to a [`JobStatus`]. Once the
    /// job is terminal the backing pod is looked up for its exit code.
    pub async fn get_job_status(&self, name: &str) -> Result<JobStatus, ClusterApiError> {
        let url = self.url(&job_path(&self.namespace, name));
        let body = self.execute(self.http.get(url), &format!("job {name}")).await?;
        let job: serde_json::Value = serde_json::from_slice(&body).map_err(|_| unexpected_body())?;

        let phase = derive_phase(&job);
        if !phase.is_terminal() {
            return Ok(JobStatus { phase, exit_code: None, pod_name: None });
        }
        let (pod_name, exit_code) = self.lookup_pod(name).await?;
        Ok(JobStatus { phase, exit_code, pod_name })
    }

    async fn lookup_pod(&self, job_name: &str) -> Result<(Option<String>, Option<i32>), ClusterApiError> {
        let url = self.url(&pod_list_path(&self.namespace, job_name));
        let body = self.execute(self.http.get(url), &format!("pods of job {job_name}")).await?;
        let list: serde_json::Value = serde_json::from_slice(&body).map_err(|_| unexpected_body())?;
        let Some(pod) = list["items"].as_array().and_then(|items| items.first()) else {
            return Ok((None, None));
        };
        let pod_name = pod["metadata"]["name"].as_str().map(str::to_string);
        let exit_code = pod["status"]["containerStatuses"]
            .as_array()
            .and_then(|cs| cs.first())
            .and_then(|c| c["state"]["terminated"]["exitCode"].as_i64())
            .map(|c| c as i32);
        Ok((pod_name, exit_code))
    }

    /// Fetches the pod's full container log.
    pub async fn get_pod_logs(&self, pod_name: &str) -> Result<String, ClusterApiError> {
        let url = self.url(&pod_log_path(&self.namespace, pod_name));
        let body = self.execute(self.http.get(url), &format!("pod {pod_name} logs")).await?;
        String::from_utf8(body).map_err(|_| unexpected_body())
    }

    /// Deletes the Job and, via background propagation, its pods.
    pub async fn delete_job(&self, name: &str) -> Result<(), ClusterApiError> {
        let url = self.url(&format!("{}?propagationPolicy=Background", job_path(&self.namespace, name)));
        self.execute(self.http.delete(url), &format!("job {name}")).await?;
        Ok(())
    }

    pub async fn delete_configmap(&self, name: &str) -> Result<(), ClusterApiError> {
        let url = self.url(&configmap_path(&self.namespace, name));
        self.execute(self.http.delete(url), &format!("configmap {name}")).await?;
        Ok(())
    }

    fn url(&self, path: &str) -> Url {
        // Paths are rooted, so join replaces any base path.
        self.base.join(path).expect("API path is a valid URL suffix")
    }

    async fn execute(&self, request: reqwest::RequestBuilder, resource: &str) -> Result<Vec<u8>, ClusterApiError> {
        let response = request
            .send()
            .await
            .map_err(|e| ClusterApiError::ApiUnavailable { message: transport_message(&e) })?;
        let status = response.status();
        let body = response
            .bytes()
            .await
            .map_err(|e| ClusterApiError::ApiUnavailable { message: transport_message(&e) })?
            .to_vec();
        if status.is_success() {
            return Ok(body);
        }
        let message = status_message(&body, status.as_u16());
        Err(match status.as_u16() {
            401 | 403 => ClusterApiError::Unauthorized { message },
            404 => ClusterApiError::NotFound { resource: resource.to_string() },
            409 => ClusterApiError::Conflict { resource: resource.to_string(), message },
            422 => ClusterApiError::InvalidManifest { resource: resource.to_string(), message },
            _ => ClusterApiError::ApiUnavailable { message },
        })
    }
}

/// Conditions win over counters: a Complete/Failed condition decides, then
/// `active > 0` means a pod is running, otherwise the job is still pending.
fn derive_phase(job: &serde_json::Value) -> JobPhase {
    let status = &job["status"];
    if let Some(conditions) = status["conditions"].as_array() {
        for condition in conditions {
            if condition["status"].as_str() != Some("True") {
                continue;
            }
            match condition["type"].as_str() {
                Some("Complete") => return JobPhase::Succeeded,
                Some("Failed") => return JobPhase::Failed,
                _ => {}
            }
        }
    }
    if status["active"].as_i64().unwrap_or(0) > 0 {
        JobPhase::Active
    } else {
        JobPhase::Pending
    }
}

fn created_name(body: &[u8]) -> Option<String> {
    let value: serde_json::Value = serde_json::from_slice(body).ok()?;
    value["metadata"]["name"].as_str().map(str::to_string)
}

fn unexpected_body() -> ClusterApiError {
    ClusterApiError::ApiUnavailable { message: "unexpected response body from API server".into() }
}

fn transport_message(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "request timed out".to_string()
    } else if e.is_connect() {
        format!("connection failed: {e}")
    } else {
        e.to_string()
    }
}

/// Kubernetes error bodies are Status objects; surface their message.
fn status_message(body: &[u8], code: u16) -> String {
    serde_json::from_slice::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v["message"].as_str().map(str::to_string))
        .filter(|m| !m.is_empty())
        .unwrap_or_else(|| format!("HTTP {code}"))
}

pub(crate) fn job_collection_path(namespace: &str) -> String {
    format!("/apis/batch/v1/namespaces/{namespace}/jobs")
}

pub(crate) fn job_path(namespace: &str, name: &str) -> String {
    format!("/apis/batch/v1/namespaces/{namespace}/jobs/{name}")
}

pub(crate) fn configmap_collection_path(namespace: &str) -> String {
    format!("/api/v1/namespaces/{namespace}/configmaps")
}

pub(crate) fn configmap_path(namespace: &str, name: &str) -> String {
    format!("/api/v1/namespaces/{namespace}/configmaps/{name}")
}

// The only non-alphanumeric byte in a label selector of this shape is the
// '=' between key and value, percent-encoded by hand; job names are DNS
// labels so the rest passes through a query string untouched.
pub(crate) fn pod_list_path(namespace: &str, job_name: &str) -> String {
    format!("/api/v1/namespaces/{namespace}/pods?labelSelector=job-name%3D{job_name}")
}

pub(crate) fn pod_log_path(namespace: &str, pod_name: &str) -> String {
    format!("/api/v1/namespaces/{namespace}/pods/{pod_name}/log")
}
