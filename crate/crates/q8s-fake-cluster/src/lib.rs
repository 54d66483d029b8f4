//! An in-process stand-in for the Kubernetes API server.
//!
//! Serves the seven endpoints the job workflow uses over real loopback HTTP,
//! so client code runs unmodified. Job lifecycles are scripted (so many
//! pending polls, so many running polls, then a terminal state with an exit
//! code and logs), faults can be injected per operation occurrence, and
//! every request is recorded for conformance assertions.
//!
//! Each response closes its connection; a dropped connection is then a
//! deterministic transport error on the client side rather than a silent
//! retry on a reused socket.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("cannot bind loopback listener: {0}")]
    BindFailed(#[from] std::io::Error),
}

/// How a job progresses, observed one status poll at a time: `pending_polls`
/// polls report Pending, the next `running_polls` report Active, and every
/// later poll reports the terminal state derived from `exit_code`.
#[derive(Debug, Clone)]
pub struct LifecycleScript {
    pub pending_polls: u32,
    pub running_polls: u32,
    pub exit_code: i32,
    pub logs: String,
}

impl LifecycleScript {
    pub fn new(pending_polls: u32, running_polls: u32, exit_code: i32, logs: impl Into<String>) -> Self {
        LifecycleScript { pending_polls, running_polls, exit_code, logs: logs.into() }
    }

    /// Immediate success with empty logs.
    pub fn quick_success() -> Self {
        LifecycleScript::new(0, 1, 0, "")
    }
}

impl Default for LifecycleScript {
    fn default() -> Self {
        LifecycleScript::quick_success()
    }
}

/// The server-side operations a fault can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    CreateJob,
    CreateConfigMap,
    GetJobStatus,
    ListPods,
    GetPodLogs,
    DeleteJob,
    DeleteConfigMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Respond with this HTTP status and a Status body.
    HttpStatus(u16),
    /// Close the connection without writing a response.
    DropConnection,
    /// The job's image never pulls: from this poll on it stays Pending
    /// forever. Only meaningful on [`Operation::GetJobStatus`].
    PullError,
}

struct FaultRule {
    pattern: String,
    operation: Operation,
    occurrence: u32,
    fault: Fault,
    hits: u32,
}

struct ScriptRule {
    pattern: String,
    script: LifecycleScript,
}

struct JobState {
    manifest: Value,
    script: LifecycleScript,
    observations: u32,
    frozen_pending: bool,
}

impl JobState {
    fn phase(&self) -> JobPhase {
        if self.frozen_pending || self.observations <= self.script.pending_polls {
            JobPhase::Pending
        } else if self.observations <= self.script.pending_polls + self.script.running_polls {
            JobPhase::Running
        } else {
            JobPhase::Terminal
        }
    }

    fn pod_exists(&self) -> bool {
        !self.frozen_pending && self.observations > self.script.pending_polls
    }
}

#[derive(PartialEq)]
enum JobPhase {
    Pending,
    Running,
    Terminal,
}

struct State {
    scripts: Vec<ScriptRule>,
    faults: Vec<FaultRule>,
    jobs: HashMap<(String, String), JobState>,
    configmaps: HashMap<(String, String), Value>,
    request_log: Vec<(String, String)>,
    auth_log: Vec<Option<String>>,
}

/// Point-in-time copy of the server's state.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub jobs: Vec<String>,
    pub configmaps: Vec<String>,
    /// Every request received, as (method, target) with the raw query.
    pub request_log: Vec<(String, String)>,
    /// Authorization header of each request, in request_log order.
    pub auth_log: Vec<Option<String>>,
}

impl Snapshot {
    /// Status GETs this job has received.
    pub fn status_gets(&self, job_name: &str) -> usize {
        let suffix = format!("/jobs/{job_name}");
        self.request_log.iter().filter(|(m, t)| m == "GET" && t.ends_with(&suffix)).count()
    }

    pub fn count(&self, method: &str, target_part: &str) -> usize {
        self.request_log.iter().filter(|(m, t)| m == method && t.contains(target_part)).count()
    }
}

pub struct FakeClusterBuilder {
    scripts: Vec<ScriptRule>,
    faults: Vec<FaultRule>,
}

impl FakeClusterBuilder {
    /// Scripts the lifecycle for jobs whose name starts with `pattern`. The
    /// longest matching pattern wins; unmatched jobs get the default script.
    pub fn script(mut self, pattern: impl Into<String>, script: LifecycleScript) -> Self {
        self.scripts.push(ScriptRule { pattern: pattern.into(), script });
        self
    }

    /// Injects `fault` on the `occurrence`-th (1-based) `operation` whose
    /// subject name starts with `pattern`. An empty pattern matches all.
    pub fn fault(mut self, pattern: impl Into<String>, operation: Operation, occurrence: u32, fault: Fault) -> Self {
        assert!(occurrence >= 1, "occurrences are 1-based");
        assert!(
            fault != Fault::PullError || operation == Operation::GetJobStatus,
            "pull errors surface through job status polls"
        );
        self.faults.push(FaultRule { pattern: pattern.into(), operation, occurrence, fault, hits: 0 });
        self
    }

    pub async fn start(self) -> Result<FakeCluster, StartError> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(State {
            scripts: self.scripts,
            faults: self.faults,
            jobs: HashMap::new(),
            configmaps: HashMap::new(),
            request_log: Vec::new(),
            auth_log: Vec::new(),
        }));
        let accept_state = state.clone();
        let accept_task = tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else { break };
                let state = accept_state.clone();
                tokio::spawn(async move {
                    let _ = handle_connection(stream, state).await;
                });
            }
        });
        Ok(FakeCluster { addr, state, accept_task })
    }
}

pub struct FakeCluster {
    addr: SocketAddr,
    state: Arc<Mutex<State>>,
    accept_task: tokio::task::JoinHandle<()>,
}

impl FakeCluster {
    pub fn builder() -> FakeClusterBuilder {
        FakeClusterBuilder { scripts: Vec::new(), faults: Vec::new() }
    }

    /// Starts with default scripts and no faults.
    pub async fn start() -> Result<Self, StartError> {
        FakeCluster::builder().start().await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn snapshot(&self) -> Snapshot {
        let state = self.state.lock().unwrap();
        let mut jobs: Vec<String> = state.jobs.keys().map(|(_, name)| name.clone()).collect();
        jobs.sort();
        let mut configmaps: Vec<String> = state.configmaps.keys().map(|(_, name)| name.clone()).collect();
        configmaps.sort();
        Snapshot {
            jobs,
            configmaps,
            request_log: state.request_log.clone(),
            auth_log: state.auth_log.clone(),
        }
    }

    /// The Job manifest as submitted, if the job currently exists.
    pub fn job_manifest(&self, name: &str) -> Option<Value> {
        let state = self.state.lock().unwrap();
        state
            .jobs
            .iter()
            .find(|((_, job), _)| job == name)
            .map(|(_, job)| job.manifest.clone())
    }

    /// The ConfigMap manifest as submitted, if it currently exists.
    pub fn configmap_manifest(&self, name: &str) -> Option<Value> {
        let state = self.state.lock().unwrap();
        state
            .configmaps
            .iter()
            .find(|((_, cm), _)| cm == name)
            .map(|(_, manifest)| manifest.clone())
    }
}

impl Drop for FakeCluster {
    fn drop(&mut self) {
        self.accept_task.abort();
    }
}

enum Reply {
    Http { status: u16, content_type: &'static str, body: String },
    Drop,
}

fn json_reply(status: u16, body: Value) -> Reply {
    Reply::Http { status, content_type: "application/json", body: body.to_string() }
}

fn status_body(code: u16, message: &str) -> Value {
    let status = if code < 400 { "Success" } else { "Failure" };
    json!({"kind": "Status", "apiVersion": "v1", "status": status, "message": message, "code": code})
}

async fn handle_connection(stream: TcpStream, state: Arc<Mutex<State>>) -> std::io::Result<()> {
    let (read_half, mut write_half) = stream.into_split();
    let mut reader = BufReader::new(read_half);

    let mut request_line = String::new();
    if reader.read_line(&mut request_line).await? == 0 {
        return Ok(());
    }
    let mut parts = request_line.split_whitespace();
    let (Some(method), Some(target)) = (parts.next(), parts.next()) else { return Ok(()) };
    let (method, target) = (method.to_string(), target.to_string());

    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).await? == 0 {
            return Ok(());
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            } else if name.eq_ignore_ascii_case("authorization") {
                authorization = Some(value.trim().to_string());
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body).await?;
    }

    let reply = route(&method, &target, authorization, &body, &state);
    match reply {
        Reply::Drop => Ok(()),
        Reply::Http { status, content_type, body } => {
            let reason = match status {
                200 => "OK",
                201 => "Created",
                403 => "Forbidden",
                404 => "Not Found",
                409 => "Conflict",
                422 => "Unprocessable Entity",
                500 => "Internal Server Error",
                _ => "Status",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            write_half.write_all(response.as_bytes()).await?;
            write_half.shutdown().await
        }
    }
}

struct Route {
    operation: Operation,
    namespace: String,
    /// Name the operation addresses: job name, configmap name, or pod name.
    name: String,
}

/// Decodes the `%3D` that a URL-encoded `labelSelector=job-name=...` carries.
fn selector_job_name(query: &str) -> Option<String> {
    for pair in query.split('&') {
        if let Some(value) = pair.strip_prefix("labelSelector=") {
            let decoded = value.replace("%3D", "=");
            if let Some(name) = decoded.strip_prefix("job-name=") {
                return Some(name.to_string());
            }
        }
    }
    None
}

fn parse_route(method: &str, path: &str, query: &str) -> Option<Route> {
    let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    match (method, segments.as_slice()) {
        ("POST", ["apis", "batch", "v1", "namespaces", ns, "jobs"]) => {
            Some(Route { operation: Operation::CreateJob, namespace: ns.to_string(), name: String::new() })
        }
        ("GET", ["apis", "batch", "v1", "namespaces", ns, "jobs", name]) => {
            Some(Route { operation: Operation::GetJobStatus, namespace: ns.to_string(), name: name.to_string() })
        }
        ("DELETE", ["apis", "batch", "v1", "namespaces", ns, "jobs", name]) => {
            Some(Route { operation: Operation::DeleteJob, namespace: ns.to_string(), name: name.to_string() })
        }
        ("POST", ["api", "v1", "namespaces", ns, "configmaps"]) => {
            Some(Route { operation: Operation::CreateConfigMap, namespace: ns.to_string(), name: String::new() })
        }
        ("DELETE", ["api", "v1", "namespaces", ns, "configmaps", name]) => {
            Some(Route { operation: Operation::DeleteConfigMap, namespace: ns.to_string(), name: name.to_string() })
        }
        ("GET", ["api", "v1", "namespaces", ns, "pods"]) => {
            let job = selector_job_name(query)?;
            Some(Route { operation: Operation::ListPods, namespace: ns.to_string(), name: job })
        }
        ("GET", ["api", "v1", "namespaces", ns, "pods", pod, "log"]) => {
            Some(Route { operation: Operation::GetPodLogs, namespace: ns.to_string(), name: pod.to_string() })
        }
        _ => None,
    }
}

fn pod_name_for(job_name: &str) -> String {
    format!("{job_name}-pod")
}

fn job_name_of_pod(pod_name: &str) -> Option<&str> {
    pod_name.strip_suffix("-pod")
}

fn route(method: &str, target: &str, authorization: Option<String>, body: &[u8], state: &Mutex<State>) -> Reply {
    let mut state = state.lock().unwrap();
    state.request_log.push((method.to_string(), target.to_string()));
    state.auth_log.push(authorization);

    let (path, query) = match target.split_once('?') {
        Some((p, q)) => (p, q),
        None => (target, ""),
    };
    let Some(route) = parse_route(method, path, query) else {
        return json_reply(404, status_body(404, &format!("no route for {method} {path}")));
    };

    // Faults fire before any state changes, keyed by the subject's name.
    let subject = match route.operation {
        Operation::CreateJob | Operation::CreateConfigMap => manifest_name(body).unwrap_or_default(),
        Operation::GetPodLogs => job_name_of_pod(&route.name).unwrap_or(&route.name).to_string(),
        _ => route.name.clone(),
    };
    let mut triggered: Option<Fault> = None;
    for rule in state.faults.iter_mut() {
        if rule.operation == route.operation && subject.starts_with(rule.pattern.as_str()) {
            rule.hits += 1;
            if rule.hits == rule.occurrence && triggered.is_none() {
                triggered = Some(rule.fault);
            }
        }
    }
    match triggered {
        Some(Fault::DropConnection) => return Reply::Drop,
        Some(Fault::HttpStatus(code)) => return json_reply(code, status_body(code, "injected fault")),
        Some(Fault::PullError) => {
            let key = (route.namespace.clone(), subject.clone());
            if let Some(job) = state.jobs.get_mut(&key) {
                job.frozen_pending = true;
            }
            // Falls through: the poll itself succeeds and reports Pending.
        }
        None => {}
    }

    let ns = route.namespace.clone();
    match route.operation {
        Operation::CreateJob => create_job(&mut state, ns, body),
        Operation::CreateConfigMap => create_configmap(&mut state, ns, body),
        Operation::GetJobStatus => get_job_status(&mut state, ns, &route.name),
        Operation::ListPods => list_pods(&state, ns, &route.name),
        Operation::GetPodLogs => get_pod_logs(&state, ns, &route.name),
        Operation::DeleteJob => delete(&mut state, true, ns, &route.name),
        Operation::DeleteConfigMap => delete(&mut state, false, ns, &route.name),
    }
}

fn manifest_name(body: &[u8]) -> Option<String> {
    let value: Value = serde_json::from_slice(body).ok()?;
    value["metadata"]["name"].as_str().map(str::to_string)
}

fn is_dns_label(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 63
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
        && !s.starts_with('-')
        && !s.ends_with('-')
}

fn validate_job(manifest: &Value) -> Result<String, String> {
    if manifest["apiVersion"].as_str() != Some("batch/v1") {
        return Err("apiVersion must be batch/v1".into());
    }
    if manifest["kind"].as_str() != Some("Job") {
        return Err("kind must be Job".into());
    }
    let name = manifest["metadata"]["name"].as_str().unwrap_or("");
    if !is_dns_label(name) {
        return Err(format!("metadata.name {name:?} is not a DNS label"));
    }
    let pod_spec = &manifest["spec"]["template"]["spec"];
    let containers = pod_spec["containers"].as_array().filter(|c| !c.is_empty()).ok_or("spec.template.spec.containers must be a non-empty array")?;
    let container = &containers[0];
    if container["name"].as_str().unwrap_or("").is_empty() {
        return Err("container name is required".into());
    }
    if container["image"].as_str().unwrap_or("").is_empty() {
        return Err("container image is required".into());
    }
    let command_ok = container["command"]
        .as_array()
        .is_some_and(|c| !c.is_empty() && c.iter().all(|v| v.is_string()));
    if !command_ok {
        return Err("container command must be a non-empty array of strings".into());
    }
    if let Some(resources) = container.get("resources") {
        let gpu = &resources["requests"]["nvidia.com/gpu"];
        if !gpu.is_string() {
            return Err("resources.requests.\"nvidia.com/gpu\" must be a quoted string".into());
        }
    }
    let volume_ok = pod_spec["volumes"]
        .as_array()
        .is_some_and(|vols| vols.iter().all(|v| v["configMap"]["name"].as_str().is_some_and(|n| !n.is_empty())));
    if !volume_ok {
        return Err("volumes must reference configMaps by name".into());
    }
    if pod_spec["restartPolicy"].as_str() != Some("Never") {
        return Err("restartPolicy must be Never".into());
    }
    Ok(name.to_string())
}

fn validate_configmap(manifest: &Value) -> Result<String, String> {
    if manifest["apiVersion"].as_str() != Some("v1") {
        return Err("apiVersion must be v1".into());
    }
    if manifest["kind"].as_str() != Some("ConfigMap") {
        return Err("kind must be ConfigMap".into());
    }
    let name = manifest["metadata"]["name"].as_str().unwrap_or("");
    if !is_dns_label(name) {
        return Err(format!("metadata.name {name:?} is not a DNS label"));
    }
    if !manifest["data"].is_object() || !manifest["data"]["main.py"].is_string() {
        return Err("data must carry main.py".into());
    }
    Ok(name.to_string())
}

fn create_job(state: &mut State, ns: String, body: &[u8]) -> Reply {
    let Ok(manifest) = serde_json::from_slice::<Value>(body) else {
        return json_reply(422, status_body(422, "request body is not JSON"));
    };
    let name = match validate_job(&manifest) {
        Ok(name) => name,
        Err(reason) => return json_reply(422, status_body(422, &reason)),
    };
    let key = (ns, name.clone());
    if state.jobs.contains_key(&key) {
        return json_reply(409, status_body(409, &format!("job {name} already exists")));
    }
    // Longest matching prefix wins so specific scripts override catch-alls.
    let script = state
        .scripts
        .iter()
        .filter(|rule| name.starts_with(rule.pattern.as_str()))
        .max_by_key(|rule| rule.pattern.len())
        .map(|rule| rule.script.clone())
        .unwrap_or_default();
    state.jobs.insert(key, JobState { manifest: manifest.clone(), script, observations: 0, frozen_pending: false });
    json_reply(201, manifest)
}

fn create_configmap(state: &mut State, ns: String, body: &[u8]) -> Reply {
    let Ok(manifest) = serde_json::from_slice::<Value>(body) else {
        return json_reply(422, status_body(422, "request body is not JSON"));
    };
    let name = match validate_configmap(&manifest) {
        Ok(name) => name,
        Err(reason) => return json_reply(422, status_body(422, &reason)),
    };
    let key = (ns, name.clone());
    if state.configmaps.contains_key(&key) {
        return json_reply(409, status_body(409, &format!("configmap {name} already exists")));
    }
    state.configmaps.insert(key, manifest.clone());
    json_reply(201, manifest)
}

fn get_job_status(state: &mut State, ns: String, name: &str) -> Reply {
    let Some(job) = state.jobs.get_mut(&(ns, name.to_string())) else {
        return json_reply(404, status_body(404, &format!("job {name} not found")));
    };
    job.observations += 1;
    let status = match job.phase() {
        JobPhase::Pending => json!({}),
        JobPhase::Running => json!({"active": 1}),
        JobPhase::Terminal => {
            if job.script.exit_code == 0 {
                json!({"succeeded": 1, "conditions": [{"type": "Complete", "status": "True"}]})
            } else {
                json!({"failed": 1, "conditions": [{"type": "Failed", "status": "True"}]})
            }
        }
    };
    json_reply(200, json!({"apiVersion": "batch/v1", "kind": "Job", "metadata": {"name": name}, "status": status}))
}

fn list_pods(state: &State, ns: String, job_name: &str) -> Reply {
    let items = match state.jobs.get(&(ns, job_name.to_string())) {
        Some(job) if job.pod_exists() => {
            let container_state = if job.phase() == JobPhase::Terminal {
                json!({"terminated": {"exitCode": job.script.exit_code}})
            } else {
                json!({"running": {}})
            };
            vec![json!({
                "metadata": {"name": pod_name_for(job_name), "labels": {"job-name": job_name}},
                "status": {"containerStatuses": [{"name": "quantum-task", "state": container_state}]}
            })]
        }
        _ => Vec::new(),
    };
    json_reply(200, json!({"apiVersion": "v1", "kind": "PodList", "items": items}))
}

fn get_pod_logs(state: &State, ns: String, pod_name: &str) -> Reply {
    let job = job_name_of_pod(pod_name)
        .and_then(|job_name| state.jobs.get(&(ns, job_name.to_string())).filter(|j| j.pod_exists()));
    match job {
        Some(job) => Reply::Http { status: 200, content_type: "text/plain", body: job.script.logs.clone() },
        None => json_reply(404, status_body(404, &format!("pod {pod_name} not found"))),
    }
}

fn delete(state: &mut State, is_job: bool, ns: String, name: &str) -> Reply {
    let key = (ns, name.to_string());
    let removed = if is_job { state.jobs.remove(&key).is_some() } else { state.configmaps.remove(&key).is_some() };
    if removed {
        json_reply(200, status_body(200, &format!("{name} deleted")))
    } else {
        let kind = if is_job { "job" } else { "configmap" };
        json_reply(404, status_body(404, &format!("{kind} {name} not found")))
    }
}
