//! End-to-end tests for the `q8s` binary: argument handling, dry-run
//! stability, config validation, kernelspec installation, and full runs
//! against an in-process fake cluster.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use q8s_fake_cluster::{Fault, FakeCluster, LifecycleScript, Operation};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_q8s"));
    // Tests control the environment entirely; nothing may leak in.
    for var in ["KUBECONFIG", "Q8S_NAMESPACE", "Q8S_BASE_IMAGE", "Q8S_REGISTRY", "Q8S_BUILD_DRIVER", "JUPYTER_DATA_DIR"] {
        cmd.env_remove(var);
    }
    cmd
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn write_cell(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cell.py");
    std::fs::write(&path, text).unwrap();
    path
}

fn write_kubeconfig(dir: &Path, server: &str) -> PathBuf {
    let path = dir.join("kubeconfig.yaml");
    let yaml = format!(
        "apiVersion: v1\nkind: Config\ncurrent-context: fake\n\
         clusters:\n  - name: fake\n    cluster:\n      server: {server}\n\
         users:\n  - name: fake-user\n    user:\n      token: test-token-xyz\n\
         contexts:\n  - name: fake\n    context:\n      cluster: fake\n      user: fake-user\n      namespace: default\n"
    );
    std::fs::write(&path, yaml).unwrap();
    path
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process exited without a code")
}

/// `run` invocation against a fake cluster with fast polling and no real
/// image builds.
fn run_cmd(kubeconfig: &Path, cell: &Path) -> Command {
    run_cmd_with_timeout(kubeconfig, cell, "10")
}

fn run_cmd_with_timeout(kubeconfig: &Path, cell: &Path, timeout: &str) -> Command {
    let mut cmd = bin();
    cmd.arg("run")
        .arg(cell)
        .arg("--kubeconfig")
        .arg(kubeconfig)
        .args(["--poll-interval", "0.02", "--timeout", timeout, "--seed", "7"])
        .env("Q8S_BUILD_DRIVER", "noop");
    cmd
}

#[test]
fn help_and_version_exit_zero() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(exit_code(&help), 0);
    assert!(stdout_of(&help).contains("Run Python notebook cells as Kubernetes jobs"));

    let version = bin().arg("--version").output().unwrap();
    assert_eq!(exit_code(&version), 0);
}

#[test]
fn usage_errors_exit_64() {
    // Unknown flag.
    let out = bin().args(["run", "--bogus"]).output().unwrap();
    assert_eq!(exit_code(&out), 64);

    // Missing subcommand.
    let out = bin().output().unwrap();
    assert_eq!(exit_code(&out), 64);

    // Unreadable cell file.
    let out = bin().args(["dry-run", "/definitely/not/a/cell.py"]).output().unwrap();
    assert_eq!(exit_code(&out), 64);
    assert!(stderr_of(&out).contains("cannot read cell"));

    // Nonsensical poll arguments.
    let dir = tempfile::tempdir().unwrap();
    let cell = write_cell(dir.path(), "print(1)\n");
    let out = bin()
        .arg("run")
        .arg(&cell)
        .arg("--kubeconfig")
        .arg(fixture("kubeconfig-token.yaml"))
        .args(["--poll-interval", "0"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 64);
    assert!(stderr_of(&out).contains("--poll-interval"));
}

#[test]
fn dry_run_is_byte_stable_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cell = write_cell(dir.path(), "import numpy as np\nimport requests\nprint(np.zeros(3))\n");

    let mut outputs = Vec::new();
    for _ in 0..2 {
        let out = bin().arg("dry-run").arg(&cell).args(["--seed", "7"]).output().unwrap();
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
        outputs.push(output_bytes(&out));
    }
    assert_eq!(outputs[0], outputs[1], "same seed must produce identical plans");

    let plan: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(plan["dependencies"], serde_json::json!(["numpy", "requests"]));
    let image_ref = plan["image"]["image_ref"].as_str().unwrap();
    assert!(image_ref.starts_with("registry.com/user/job-dependencies:"), "{image_ref}");
    let dockerfile = plan["image"]["dockerfile"].as_str().unwrap();
    assert!(dockerfile.starts_with("FROM nvidia/cuda:12.4.1-runtime-ubuntu22.04\n"));
    assert!(dockerfile.contains("pip install --no-cache-dir -r /tmp/requirements.txt"));

    let job_name = plan["job"]["metadata"]["name"].as_str().unwrap();
    let suffix = job_name.strip_prefix("quantum-job-").expect("job name prefix");
    assert_eq!(
        plan["configmap"]["metadata"]["name"].as_str().unwrap(),
        format!("task-files-{suffix}")
    );
    assert_eq!(
        plan["configmap"]["data"]["main.py"].as_str().unwrap(),
        "import numpy as np\nimport requests\nprint(np.zeros(3))\n"
    );
    assert_eq!(
        plan["job"]["spec"]["template"]["spec"]["containers"][0]["resources"]["requests"]
            ["nvidia.com/gpu"],
        serde_json::json!("1")
    );
}

fn output_bytes(out: &Output) -> Vec<u8> {
    out.stdout.clone()
}

#[test]
fn dry_run_honors_gpu_and_registry_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cell = write_cell(dir.path(), "x = 1\n");
    let out = bin()
        .arg("dry-run")
        .arg(&cell)
        .args(["--gpu", "0", "--registry", "quay.io/alt", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(plan["job"]["spec"]["template"]["spec"]["containers"][0].get("resources").is_none());
    assert!(plan["image"]["image_ref"].as_str().unwrap().starts_with("quay.io/alt/"));
    // No imports: base image alone, no pip layer.
    assert_eq!(plan["dependencies"], serde_json::json!([]));
    assert_eq!(plan["image"]["dockerfile"], serde_json::json!("FROM nvidia/cuda:12.4.1-runtime-ubuntu22.04\n"));
}

#[test]
fn validate_config_reports_token_configs() {
    let out = bin()
        .arg("validate-config")
        .arg("--kubeconfig")
        .arg(fixture("kubeconfig-token.yaml"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("quantum-dev"));
    assert!(text.contains("https://cluster.example.com:6443"));
    assert!(text.contains("namespace:  quantum"));
    assert!(text.contains("bearer token"));

    // KUBECONFIG from the environment works the same way.
    let out = bin()
        .arg("validate-config")
        .env("KUBECONFIG", fixture("kubeconfig-token.yaml"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    assert!(stdout_of(&out).contains("bearer token"));
}

#[test]
fn validate_config_reports_cert_configs() {
    let out = bin()
        .arg("validate-config")
        .arg("--kubeconfig")
        .arg(fixture("kubeconfig-cert.yaml"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("client certificate"));
    // No namespace in the context: falls back to "default".
    assert!(text.contains("namespace:  default"));
}

#[test]
fn validate_config_rejects_broken_configs() {
    let out = bin()
        .arg("validate-config")
        .arg("--kubeconfig")
        .arg(fixture("kubeconfig-dangling.yaml"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("context"), "stderr: {}", stderr_of(&out));

    // Invalid namespace override fails too.
    let out = bin()
        .arg("validate-config")
        .arg("--kubeconfig")
        .arg(fixture("kubeconfig-token.yaml"))
        .args(["--namespace", "Not-A-Label"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("DNS label"));
}

#[test]
fn install_kernelspec_writes_kernel_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["install-kernelspec", "--binary", "/opt/q8s/bin/q8s"])
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let spec_path = dir.path().join("kernels/q8s/kernel.json");
    assert!(stdout_of(&out).contains(&spec_path.display().to_string()));
    let spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&spec_path).unwrap()).unwrap();
    assert_eq!(
        spec["argv"],
        serde_json::json!(["/opt/q8s/bin/q8s", "serve", "{connection_file}"])
    );
    assert_eq!(spec["display_name"], serde_json::json!("Python Q8s kernel"));
    assert_eq!(spec["language"], serde_json::json!("python"));
    assert_eq!(spec["interrupt_mode"], serde_json::json!("message"));

    // JUPYTER_DATA_DIR steers the default location.
    let env_dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["install-kernelspec", "--binary", "/opt/q8s/bin/q8s"])
        .env("JUPYTER_DATA_DIR", env_dir.path())
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    assert!(env_dir.path().join("kernels/q8s/kernel.json").exists());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_executes_a_cell_end_to_end() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(0, 1, 0, "hi from the cluster\n"))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "print('hi from the cluster')\n");

    let out = run_cmd(&kubeconfig, &cell).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), "hi from the cluster\n");
    assert_eq!(stderr_of(&out), "");

    let snapshot = fake.snapshot();
    assert!(snapshot.jobs.is_empty(), "job must be cleaned up");
    assert!(snapshot.configmaps.is_empty(), "configmap must be cleaned up");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_reads_the_cell_from_stdin() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(0, 1, 0, "stdin cell\n"))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());

    let mut child = run_cmd(&kubeconfig, Path::new("-"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"print('stdin cell')\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), "stdin cell\n");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_passes_container_exit_codes_through() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(0, 1, 5, "boom\n"))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "raise SystemExit(5)\n");

    let out = run_cmd(&kubeconfig, &cell).output().unwrap();
    assert_eq!(exit_code(&out), 5);
    // Failed runs route logs to stderr, with no extra diagnostics.
    assert_eq!(stdout_of(&out), "");
    assert_eq!(stderr_of(&out), "boom\n");
    assert!(fake.snapshot().jobs.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_preserves_oom_kill_codes() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(0, 1, 137, ""))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "x = [0] * 10**12\n");

    let out = run_cmd(&kubeconfig, &cell).output().unwrap();
    assert_eq!(exit_code(&out), 137);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_emits_json_results_on_request() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(1, 2, 0, "structured\n"))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "print('structured')\n");

    let out = run_cmd(&kubeconfig, &cell).args(["--output", "json"]).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["outcome"], serde_json::json!("succeeded"));
    assert_eq!(result["exit_code"], serde_json::json!(0));
    assert_eq!(result["stdout"], serde_json::json!("structured\n"));
    assert!(result["job_name"].as_str().unwrap().starts_with("quantum-job-"));
    let phases: Vec<&str> =
        result["timeline"].as_array().unwrap().iter().map(|s| s["phase"].as_str().unwrap()).collect();
    assert_eq!(phases.first(), Some(&"preparing"));
    assert_eq!(phases.last(), Some(&"done"));
    assert!(phases.contains(&"running"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_times_out_with_124() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(100_000, 0, 0, ""))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "while True: pass\n");

    let out = run_cmd_with_timeout(&kubeconfig, &cell, "0.3").output().unwrap();
    assert_eq!(exit_code(&out), 124);
    assert!(stderr_of(&out).contains("did not finish"), "stderr: {}", stderr_of(&out));

    let snapshot = fake.snapshot();
    assert!(snapshot.jobs.is_empty(), "timed-out job must be deleted");
    assert!(snapshot.configmaps.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_reports_infrastructure_failures_with_70() {
    // Credential rejection is not retried and surfaces as an infra error.
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::quick_success())
        .fault("task-files", Operation::CreateConfigMap, 1, Fault::HttpStatus(401))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "print(1)\n");

    let out = run_cmd(&kubeconfig, &cell).output().unwrap();
    assert_eq!(exit_code(&out), 70);
    assert!(stderr_of(&out).contains("q8s:"), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_kubeconfig_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cell = write_cell(dir.path(), "print(1)\n");

    // No flag, no env, no ~/.kube/config under a scratch HOME.
    let home = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("run")
        .arg(&cell)
        .env("HOME", home.path())
        .env("Q8S_BUILD_DRIVER", "noop")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 64);
    let expected_path = home.path().join(".kube").join("config");
    assert!(
        stderr_of(&out).contains(&expected_path.display().to_string()),
        "message must name the missing path: {}",
        stderr_of(&out)
    );

    // An explicit path that does not exist is named too.
    let out = bin()
        .arg("run")
        .arg(&cell)
        .args(["--kubeconfig", "/definitely/not/a/kubeconfig"])
        .env("Q8S_BUILD_DRIVER", "noop")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 64);
    assert!(stderr_of(&out).contains("/definitely/not/a/kubeconfig"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn namespace_flag_overrides_the_kubeconfig() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::quick_success())
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "print(1)\n");

    let out = run_cmd(&kubeconfig, &cell).args(["--namespace", "experiments"]).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let snapshot = fake.snapshot();
    assert!(snapshot.request_log.iter().all(|(_, target)| target.contains("/namespaces/experiments/")),
        "every request must target the override namespace: {:?}", snapshot.request_log);
}

#[cfg(unix)]
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sigint_interrupts_the_run_with_130() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(100_000, 0, 0, ""))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());
    let cell = write_cell(dir.path(), "while True: pass\n");

    let child = run_cmd(&kubeconfig, &cell)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();

    // Interrupt only once the job is live on the cluster.
    let deadline = Instant::now() + Duration::from_secs(10);
    while fake.snapshot().jobs.is_empty() {
        assert!(Instant::now() < deadline, "job never reached the cluster");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    unsafe {
        libc::kill(child.id() as i32, libc::SIGINT);
    }

    let out = child.wait_with_output().unwrap();
    assert_eq!(exit_code(&out), 130, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("aborted"));

    let snapshot = fake.snapshot();
    assert!(snapshot.jobs.is_empty(), "interrupted job must be cleaned up");
    assert!(snapshot.configmaps.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serve_speaks_the_kernel_protocol_end_to_end() {
    let fake = FakeCluster::builder()
        .script("quantum-job", LifecycleScript::new(0, 1, 0, "served\n"))
        .start()
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kubeconfig = write_kubeconfig(dir.path(), &fake.base_url());

    // Port 0 asks the kernel to bind ephemerally and rewrite the file.
    let connection_file = dir.path().join("connection.json");
    q8s_kernel::ConnectionInfo::generate().save(&connection_file).unwrap();

    let mut child = bin()
        .arg("serve")
        .arg(&connection_file)
        .arg("--kubeconfig")
        .arg(&kubeconfig)
        .args(["--poll-interval", "0.02", "--timeout", "10"])
        .env("Q8S_BUILD_DRIVER", "noop")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();

    // Wait for the rewritten connection file to carry real ports.
    let deadline = Instant::now() + Duration::from_secs(10);
    let info = loop {
        assert!(Instant::now() < deadline, "connection file never got real ports");
        if let Ok(info) = q8s_kernel::ConnectionInfo::load(&connection_file) {
            if info.shell_port != 0 {
                break info;
            }
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    };

    let endpoints = q8s_testkit::client::Endpoints {
        ip: info.ip.clone(),
        shell_port: info.shell_port,
        iopub_port: info.iopub_port,
        control_port: info.control_port,
        hb_port: info.hb_port,
        key: info.key.clone(),
    };
    let mut client = q8s_testkit::client::ReferenceClient::connect(&endpoints).await.unwrap();

    let obs = client.kernel_info().await.unwrap();
    assert_eq!(obs.reply["protocol_version"], serde_json::json!("5.3"));

    let obs = client.execute("print('served')", Duration::from_secs(20)).await.unwrap();
    assert_eq!(obs.reply["status"], serde_json::json!("ok"));
    assert_eq!(obs.iopub_kinds(), vec!["status:busy", "stream:stdout", "status:idle"]);
    assert_eq!(obs.stream_text("stdout"), "served\n");

    let reply = client.shutdown(false).await.unwrap();
    assert_eq!(reply["status"], serde_json::json!("ok"));

    // The kernel process exits cleanly after shutdown_request.
    let deadline = Instant::now() + Duration::from_secs(10);
    let status = loop {
        if let Some(status) = child.try_wait().unwrap() {
            break status;
        }
        assert!(Instant::now() < deadline, "serve did not exit after shutdown");
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(status.code(), Some(0));
    assert!(fake.snapshot().jobs.is_empty());
}
