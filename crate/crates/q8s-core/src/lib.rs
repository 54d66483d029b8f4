//! Core pipeline for running notebook cells as Kubernetes jobs: static
//! dependency analysis, container image specs with content-addressed caching,
//! kubeconfig loading, a minimal cluster API client, job/configmap manifest
//! construction, and the execution state machine that ties them together.

pub mod analyzer;
pub mod client;
pub mod imagespec;
pub mod kubeconfig;
pub mod manifests;
pub mod orchestrator;

pub use analyzer::{Analyzer, CellSource, DependencyManifest, MappingTable};
pub use client::{ClusterApiError, ClusterClient, JobPhase, JobStatus};
pub use imagespec::{BuildDriver, ImageError, ImageSpec, ImageStore, NoopDriver, RecordingDriver, ShellDriver};
pub use kubeconfig::{load_kubeconfig, load_kubeconfig_from_env, ClusterConfig, ConfigError, Credential};
pub use manifests::{make_manifests, ConfigMapManifest, JobManifest};
pub use orchestrator::{
    plan_cell, AbortHandle, ExecutionOptions, ExecutionPhase, ExecutionPlan, ExecutionResult,
    Orchestrator, Outcome, PhaseStamp, DEFAULT_BASE_IMAGE, DEFAULT_REGISTRY,
};
