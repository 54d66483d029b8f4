//! Job and ConfigMap construction.
//!
//! The Job runs one cell as a single container (`python /app/main.py`) with
//! the cell's code mounted from a ConfigMap. Names share a fresh 8-hex
//! suffix per execution so concurrent runs never collide.

use rand::RngExt;
use serde::Serialize;

use crate::analyzer::CellSource;
use crate::orchestrator::ExecutionOptions;

pub const JOB_NAME_PREFIX: &str = "quantum-job";
pub const CONFIGMAP_NAME_PREFIX: &str = "task-files";
pub const POD_TEMPLATE_NAME: &str = "quantum-pod";
pub const CONTAINER_NAME: &str = "quantum-task";
pub const VOLUME_NAME: &str = "config-volume";
pub const MOUNT_PATH: &str = "/app";
pub const CODE_FILE_NAME: &str = "main.py";
pub const GPU_RESOURCE: &str = "nvidia.com/gpu";

/// One batch Job running one notebook cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobManifest {
    pub name: String,
    pub image: String,
    pub command: Vec<String>,
    pub gpu_count: u32,
    pub configmap_name: String,
    pub mount_path: String,
}

/// The cell's code, mounted into the job pod as `main.py`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMapManifest {
    pub name: String,
    pub code: String,
}

/// Builds the Job/ConfigMap pair for one cell. Both names carry the same
/// fresh suffix drawn from `rng`.
pub fn make_manifests<R: rand::Rng>(
    cell: &CellSource,
    image_ref: &str,
    opts: &ExecutionOptions,
    rng: &mut R,
) -> (JobManifest, ConfigMapManifest) {
    let suffix = format!("{:08x}", rng.random::<u32>());
    let configmap_name = format!("{CONFIGMAP_NAME_PREFIX}-{suffix}");
    let job = JobManifest {
        name: format!("{JOB_NAME_PREFIX}-{suffix}"),
        image: image_ref.to_string(),
        command: vec!["python".to_string(), format!("{MOUNT_PATH}/{CODE_FILE_NAME}")],
        gpu_count: opts.gpu_count,
        configmap_name: configmap_name.clone(),
        mount_path: MOUNT_PATH.to_string(),
    };
    let configmap = ConfigMapManifest { name: configmap_name, code: cell.text.clone() };
    (job, configmap)
}

impl JobManifest {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.as_object()).expect("job manifest serializes")
    }

    fn as_object(&self) -> JobObject<'_> {
        let resources = (self.gpu_count > 0).then(|| Resources {
            requests: GpuRequest { gpu: self.gpu_count.to_string() },
        });
        JobObject {
            api_version: "batch/v1",
            kind: "Job",
            metadata: Metadata { name: &self.name },
            spec: JobSpec {
                template: PodTemplate {
                    metadata: Metadata { name: POD_TEMPLATE_NAME },
                    spec: PodSpec {
                        containers: vec![Container {
                            name: CONTAINER_NAME,
                            image: &self.image,
                            command: &self.command,
                            resources,
                            volume_mounts: vec![VolumeMount { name: VOLUME_NAME, mount_path: &self.mount_path }],
                        }],
                        volumes: vec![Volume {
                            name: VOLUME_NAME,
                            config_map: ConfigMapRef { name: &self.configmap_name },
                        }],
                        restart_policy: "Never",
                    },
                },
            },
        }
    }
}

impl ConfigMapManifest {
    pub fn to_json(&self) -> serde_json::Value {
        let mut data = serde_json::Map::new();
        data.insert(CODE_FILE_NAME.to_string(), serde_json::Value::String(self.code.clone()));
        serde_json::json!({
            "apiVersion": "v1",
            "kind": "ConfigMap",
            "metadata": {"name": self.name},
            "data": data,
        })
    }
}

// Serialization shadows, declared in the order the API object is written.

#[derive(Serialize)]
struct JobObject<'a> {
    #[serde(rename = "apiVersion")]
    api_version: &'static str,
    kind: &'static str,
    metadata: Metadata<'a>,
    spec: JobSpec<'a>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: &'a str,
}

#[derive(Serialize)]
struct JobSpec<'a> {
    template: PodTemplate<'a>,
}

#[derive(Serialize)]
struct PodTemplate<'a> {
    metadata: Metadata<'a>,
    spec: PodSpec<'a>,
}

#[derive(Serialize)]
struct PodSpec<'a> {
    containers: Vec<Container<'a>>,
    volumes: Vec<Volume<'a>>,
    #[serde(rename = "restartPolicy")]
    restart_policy: &'static str,
}

#[derive(Serialize)]
struct Container<'a> {
    name: &'static str,
    image: &'a str,
    command: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    resources: Option<Resources>,
    #[serde(rename = "volumeMounts")]
    volume_mounts: Vec<VolumeMount<'a>>,
}

#[derive(Serialize)]
struct Resources {
    requests: GpuRequest,
}

#[derive(Serialize)]
struct GpuRequest {
    #[serde(rename = "nvidia.com/gpu")]
    gpu: String,
}

#[derive(Serialize)]
struct VolumeMount<'a> {
    name: &'static str,
    #[serde(rename = "mountPath")]
    mount_path: &'a str,
}

#[derive(Serialize)]
struct Volume<'a> {
    name: &'static str,
    #[serde(rename = "configMap")]
    config_map: ConfigMapRef<'a>,
}

#[derive(Serialize)]
struct ConfigMapRef<'a> {
    name: &'a str,
}
