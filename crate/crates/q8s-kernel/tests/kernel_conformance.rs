//! The kernel over real ZeroMQ sockets, exercised by an independently
//! written protocol client: message framing, signatures, busy/idle
//! bracketing, stream routing, heartbeat, interrupt, and shutdown.

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use url::Url;

use q8s_core::{
    ClusterClient, ClusterConfig, Credential, ExecutionOptions, Orchestrator, RecordingDriver,
};
use q8s_fake_cluster::{FakeCluster, LifecycleScript};
use q8s_kernel::{ConnectionInfo, Kernel};
use q8s_testkit::client::{Endpoints, ReferenceClient};

struct Harness {
    fake: FakeCluster,
    client: ReferenceClient,
    serve: tokio::task::JoinHandle<Result<(), q8s_kernel::KernelError>>,
}

async fn start(script: LifecycleScript) -> Harness {
    let fake = FakeCluster::builder().script("quantum-job-", script).start().await.unwrap();
    let config = ClusterConfig {
        server_url: Url::parse(&fake.base_url()).unwrap(),
        namespace: "default".to_string(),
        context_name: "fake".to_string(),
        ca_bundle: None,
        credential: Credential::BearerToken("t".to_string()),
        insecure: false,
    };
    let cluster = ClusterClient::new(&config).unwrap();
    let opts = ExecutionOptions {
        poll_interval: Duration::from_millis(10),
        timeout: Duration::from_secs(30),
        retry_backoff: Duration::from_millis(5),
        seed: Some(99),
        ..ExecutionOptions::default()
    };
    let orchestrator = Arc::new(Orchestrator::new(cluster, Arc::new(RecordingDriver::new()), opts));

    let bound = Kernel::bind(&ConnectionInfo::generate(), orchestrator).await.unwrap();
    let info = bound.connection_info().clone();
    let serve = tokio::spawn(bound.serve());

    let endpoints = Endpoints {
        ip: info.ip.clone(),
        shell_port: info.shell_port,
        iopub_port: info.iopub_port,
        control_port: info.control_port,
        hb_port: info.hb_port,
        key: info.key.clone(),
    };
    let client = ReferenceClient::connect(&endpoints).await.unwrap();
    Harness { fake, client, serve }
}

const LONG: Duration = Duration::from_secs(20);

#[tokio::test]
async fn kernel_info_names_the_kernel_and_protocol() {
    let mut h = start(LifecycleScript::quick_success()).await;
    let observation = h.client.kernel_info().await.unwrap();

    assert_eq!(observation.reply_type, "kernel_info_reply");
    assert_eq!(observation.reply["status"], "ok");
    assert_eq!(observation.reply["protocol_version"], "5.3");
    assert_eq!(observation.reply["implementation"], "q8s");
    assert_eq!(observation.reply["language_info"]["name"], "python");
    let banner = observation.reply["banner"].as_str().unwrap();
    assert!(banner.contains("Python Q8s kernel"), "banner was {banner:?}");
    assert_eq!(observation.iopub_kinds(), vec!["status:busy", "status:idle"]);
}

#[tokio::test]
async fn execute_publishes_busy_stream_reply_idle_in_order() {
    let mut h = start(LifecycleScript::new(1, 1, 0, "made a bell pair\n")).await;
    let observation = h.client.execute("print('made a bell pair')", LONG).await.unwrap();

    // Publications on the iopub socket arrive in send order, so this
    // sequence is exact; the reply rides the shell socket and is asserted
    // separately because cross-socket arrival order is not defined.
    assert_eq!(observation.iopub_kinds(), vec!["status:busy", "stream:stdout", "status:idle"]);
    assert_eq!(observation.reply_type, "execute_reply");
    assert_eq!(observation.reply["status"], "ok");
    assert_eq!(observation.reply["execution_count"], 1);
    assert_eq!(observation.stream_text("stdout"), "made a bell pair\n");

    let snapshot = h.fake.snapshot();
    assert_eq!(snapshot.jobs.len(), 0, "job cleaned up after the cell");
    assert_eq!(snapshot.configmaps.len(), 0);
}

#[tokio::test]
async fn execution_count_advances_per_execute() {
    let mut h = start(LifecycleScript::quick_success()).await;
    let first = h.client.execute("print(1)", LONG).await.unwrap();
    let second = h.client.execute("print(2)", LONG).await.unwrap();
    assert_eq!(first.reply["execution_count"], 1);
    assert_eq!(second.reply["execution_count"], 2);
}

#[tokio::test]
async fn failing_jobs_reply_error_with_logs_on_stderr() {
    let mut h = start(LifecycleScript::new(0, 1, 4, "Traceback: ValueError\n")).await;
    let observation = h.client.execute("raise ValueError", LONG).await.unwrap();

    assert_eq!(observation.iopub_kinds(), vec!["status:busy", "stream:stderr", "status:idle"]);
    assert_eq!(observation.reply_type, "execute_reply");
    assert_eq!(observation.reply["status"], "error");
    assert_eq!(observation.reply["ename"], "JobFailed");
    assert_eq!(observation.reply["execution_count"], 1);
    let evalue = observation.reply["evalue"].as_str().unwrap();
    assert!(evalue.contains("exited with code 4"), "evalue was {evalue:?}");
    assert_eq!(observation.stream_text("stderr"), "Traceback: ValueError\n");
}

#[tokio::test]
async fn empty_cells_reply_ok_without_streams() {
    let mut h = start(LifecycleScript::new(0, 1, 0, "")).await;
    let observation = h.client.execute("", LONG).await.unwrap();
    assert_eq!(observation.iopub_kinds(), vec!["status:busy", "status:idle"]);
    assert_eq!(observation.reply_type, "execute_reply");
    assert_eq!(observation.reply["status"], "ok");
    assert_eq!(observation.reply["execution_count"], 1);
}

#[tokio::test]
async fn badly_signed_requests_are_dropped_without_reply_or_count() {
    let mut h = start(LifecycleScript::quick_success()).await;

    let forged = h
        .client
        .send_shell_badly_signed("execute_request", json!({"code": "print('evil')"}))
        .await
        .unwrap();
    let observation = h.client.observe(&forged, Duration::from_millis(400)).await;
    assert!(observation.is_err(), "a forged request must get no reply at all");
    assert_eq!(h.fake.snapshot().count("POST", "/jobs"), 0, "nothing was submitted");

    let legit = h.client.execute("print('ok')", LONG).await.unwrap();
    assert_eq!(legit.reply["status"], "ok");
    assert_eq!(legit.reply["execution_count"], 1, "the dropped request must not consume a count");
}

#[tokio::test]
async fn heartbeat_echoes_quickly_while_a_job_is_pending() {
    // ~40 pending polls at 10ms keep the kernel busy well past the probes.
    let mut h = start(LifecycleScript::new(40, 1, 0, "late\n")).await;

    let msg_id = h
        .client
        .send_shell(
            "execute_request",
            json!({
                "code": "print('late')",
                "silent": false,
                "store_history": true,
                "user_expressions": {},
                "allow_stdin": false,
                "stop_on_error": false,
            }),
        )
        .await
        .unwrap();

    tokio::time::sleep(Duration::from_millis(50)).await;
    for _ in 0..3 {
        let latency = h.client.heartbeat_echo().await.unwrap();
        assert!(
            latency < Duration::from_millis(500),
            "heartbeat took {latency:?} while the kernel was mid-execution",
        );
    }

    let observation = h.client.observe(&msg_id, LONG).await.unwrap();
    assert_eq!(observation.reply["status"], "ok");
}

#[tokio::test]
async fn interrupt_aborts_the_cell_and_cleans_up() {
    let mut h = start(LifecycleScript::new(u32::MAX, 0, 0, "")).await;

    let msg_id = h
        .client
        .send_shell(
            "execute_request",
            json!({
                "code": "while True: pass",
                "silent": false,
                "store_history": true,
                "user_expressions": {},
                "allow_stdin": false,
                "stop_on_error": false,
            }),
        )
        .await
        .unwrap();
    tokio::time::sleep(Duration::from_millis(150)).await;

    let reply = h.client.interrupt().await.unwrap();
    assert_eq!(reply["status"], "ok");

    let observation = h.client.observe(&msg_id, LONG).await.unwrap();
    assert_eq!(observation.reply["status"], "error");
    assert_eq!(observation.reply["ename"], "JobAborted");

    let snapshot = h.fake.snapshot();
    assert_eq!(snapshot.jobs.len(), 0, "the interrupted job was deleted");
    assert_eq!(snapshot.configmaps.len(), 0);

    let info = h.client.kernel_info().await.unwrap();
    assert_eq!(info.reply["status"], "ok", "kernel survives an interrupt");
}

#[tokio::test]
async fn queued_executes_run_serially() {
    let mut h = start(LifecycleScript::new(0, 1, 0, "tick\n")).await;
    let content = |code: &str| {
        json!({
            "code": code,
            "silent": false,
            "store_history": true,
            "user_expressions": {},
            "allow_stdin": false,
            "stop_on_error": false,
        })
    };
    let first = h.client.send_shell("execute_request", content("print('a')")).await.unwrap();
    let second = h.client.send_shell("execute_request", content("print('b')")).await.unwrap();

    let a = h.client.observe(&first, LONG).await.unwrap();
    let b = h.client.observe(&second, LONG).await.unwrap();
    assert_eq!(a.reply["execution_count"], 1);
    assert_eq!(b.reply["execution_count"], 2);
    assert_eq!(a.reply["status"], "ok");
    assert_eq!(b.reply["status"], "ok");
}

#[tokio::test]
async fn shutdown_request_stops_the_kernel() {
    let mut h = start(LifecycleScript::quick_success()).await;
    let reply = h.client.shutdown(false).await.unwrap();
    assert_eq!(reply["status"], "ok");
    assert_eq!(reply["restart"], false);

    let stopped = tokio::time::timeout(Duration::from_secs(5), h.serve).await;
    assert!(matches!(stopped, Ok(Ok(Ok(())))), "serve loop must exit cleanly after shutdown");
}
