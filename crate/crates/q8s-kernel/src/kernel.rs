//! Kernel socket lifecycle and the serve loop.
//!
//! Shell requests are handled strictly in order; each is bracketed by
//! busy/idle status publications. The control channel stays responsive
//! during execution so interrupts and shutdowns cut a hung cell loose, and
//! the heartbeat echoes throughout.

use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use tokio::sync::watch;
use zeromq::{PubSocket, RepSocket, RouterSocket, Socket, SocketRecv, SocketSend};

use q8s_core::{AbortHandle, CellSource, Orchestrator, Outcome};

use crate::connection::ConnectionInfo;
use crate::wire::{Header, WireMessage, PROTOCOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("invalid connection file: {0}")]
    InvalidConnection(String),
    #[error("unsupported signature scheme {0:?}, this kernel speaks hmac-sha256")]
    UnsupportedScheme(String),
    #[error("cannot bind kernel sockets: {0}")]
    BindFailed(String),
    #[error("channel transport failed: {0}")]
    Transport(String),
}

pub struct Kernel;

impl Kernel {
    /// Binds all five channels. Zero ports bind ephemerally; the returned
    /// kernel's connection info carries the ports actually bound.
    pub async fn bind(info: &ConnectionInfo, orchestrator: Arc<Orchestrator>) -> Result<BoundKernel, KernelError> {
        info.validate()?;
        let mut shell = RouterSocket::new();
        let mut iopub = PubSocket::new();
        let mut stdin = RouterSocket::new();
        let mut control = RouterSocket::new();
        let mut hb = RepSocket::new();
        let shell_port = bind_port(&mut shell, info, info.shell_port).await?;
        let iopub_port = bind_port(&mut iopub, info, info.iopub_port).await?;
        let stdin_port = bind_port(&mut stdin, info, info.stdin_port).await?;
        let control_port = bind_port(&mut control, info, info.control_port).await?;
        let hb_port = bind_port(&mut hb, info, info.hb_port).await?;
        let info = ConnectionInfo {
            shell_port,
            iopub_port,
            stdin_port,
            control_port,
            hb_port,
            ..info.clone()
        };
        Ok(BoundKernel { info, shell, iopub, stdin, control, hb, orchestrator })
    }
}

async fn bind_port<S: Socket>(socket: &mut S, info: &ConnectionInfo, port: u16) -> Result<u16, KernelError> {
    let endpoint = socket
        .bind(&info.endpoint(port))
        .await
        .map_err(|e| KernelError::BindFailed(format!("{}: {e}", info.endpoint(port))))?;
    if port != 0 {
        return Ok(port);
    }
    let text = endpoint.to_string();
    text.rsplit(':')
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| KernelError::BindFailed(format!("cannot read bound port from {text}")))
}

pub struct BoundKernel {
    info: ConnectionInfo,
    shell: RouterSocket,
    iopub: PubSocket,
    stdin: RouterSocket,
    control: RouterSocket,
    hb: RepSocket,
    orchestrator: Arc<Orchestrator>,
}

impl BoundKernel {
    /// Connection info with the ports actually bound.
    pub fn connection_info(&self) -> &ConnectionInfo {
        &self.info
    }

    /// Serves until a shutdown request arrives on either the control or the
    /// shell channel.
    pub async fn serve(self) -> Result<(), KernelError> {
        let BoundKernel { info, shell, iopub, stdin, control, hb, orchestrator } = self;
        let key = info.key.as_bytes().to_vec();
        let session = uuid::Uuid::new_v4().to_string();
        let (shutdown_tx, mut shutdown_rx) = watch::channel(false);
        let current_abort: Arc<Mutex<Option<AbortHandle>>> = Arc::new(Mutex::new(None));

        let hb_task = tokio::spawn(heartbeat_loop(hb, shutdown_tx.subscribe()));
        let control_task = tokio::spawn(control_loop(
            control,
            key.clone(),
            session.clone(),
            current_abort.clone(),
            shutdown_tx.clone(),
        ));

        let mut channel = ShellChannel {
            socket: shell,
            iopub,
            key,
            session,
            execution_count: 0,
            orchestrator,
            current_abort,
            shutdown: shutdown_tx,
        };
        loop {
            tokio::select! {
                changed = shutdown_rx.changed() => {
                    if changed.is_err() || *shutdown_rx.borrow() {
                        break;
                    }
                }
                message = channel.socket.recv() => {
                    let message = message.map_err(|e| KernelError::Transport(format!("shell recv: {e}")))?;
                    // Unauthenticated or malformed messages are dropped with
                    // no reply and no counter movement.
                    let Ok(request) = WireMessage::decode(&message, &channel.key) else { continue };
                    channel.handle(request).await?;
                }
            }
        }
        let _ = tokio::join!(hb_task, control_task);
        drop(stdin);
        Ok(())
    }
}

struct ShellChannel {
    socket: RouterSocket,
    iopub: PubSocket,
    key: Vec<u8>,
    session: String,
    execution_count: u64,
    orchestrator: Arc<Orchestrator>,
    current_abort: Arc<Mutex<Option<AbortHandle>>>,
    shutdown: watch::Sender<bool>,
}

impl ShellChannel {
    async fn handle(&mut self, request: WireMessage) -> Result<(), KernelError> {
        self.publish_status(&request.header, "busy").await?;
        match request.header.msg_type.as_str() {
            "kernel_info_request" => {
                self.reply(&request, "kernel_info_reply", kernel_info_content()).await?;
            }
            "execute_request" => {
                self.execute(&request).await?;
            }
            "shutdown_request" => {
                let restart = request.content["restart"].as_bool().unwrap_or(false);
                self.reply(&request, "shutdown_reply", json!({"status": "ok", "restart": restart})).await?;
                self.shutdown.send_replace(true);
            }
            "complete_request" => {
                let cursor = request.content["cursor_pos"].as_u64().unwrap_or(0);
                let content = json!({
                    "status": "ok",
                    "matches": [],
                    "cursor_start": cursor,
                    "cursor_end": cursor,
                    "metadata": {},
                });
                self.reply(&request, "complete_reply", content).await?;
            }
            "inspect_request" => {
                let content = json!({"status": "ok", "found": false, "data": {}, "metadata": {}});
                self.reply(&request, "inspect_reply", content).await?;
            }
            "is_complete_request" => {
                self.reply(&request, "is_complete_reply", json!({"status": "unknown"})).await?;
            }
            "comm_info_request" => {
                self.reply(&request, "comm_info_reply", json!({"status": "ok", "comms": {}})).await?;
            }
            "history_request" => {
                self.reply(&request, "history_reply", json!({"status": "ok", "history": []})).await?;
            }
            _ => {}
        }
        self.publish_status(&request.header, "idle").await
    }

    async fn execute(&mut self, request: &WireMessage) -> Result<(), KernelError> {
        self.execution_count += 1;
        let count = self.execution_count;
        let code = request.content["code"].as_str().unwrap_or("").to_string();

        let abort = AbortHandle::new();
        *self.current_abort.lock().unwrap() = Some(abort.clone());
        let cell = CellSource::new(code, request.header.msg_id.clone());
        let result = self.orchestrator.execute_cell(&cell, &abort).await;
        *self.current_abort.lock().unwrap() = None;

        if !result.stdout.is_empty() {
            self.publish(&request.header, "stream", json!({"name": "stdout", "text": result.stdout})).await?;
        }
        if !result.stderr.is_empty() {
            self.publish(&request.header, "stream", json!({"name": "stderr", "text": result.stderr})).await?;
        }
        let detail = result.failure.unwrap_or_default();
        let content = match result.outcome {
            Outcome::Succeeded => {
                json!({"status": "ok", "execution_count": count, "payload": [], "user_expressions": {}})
            }
            Outcome::Failed => {
                let code = result.exit_code.unwrap_or(-1);
                error_content(count, "JobFailed", &format!("job exited with code {code}"))
            }
            Outcome::TimedOut => error_content(count, "JobTimeout", &detail),
            Outcome::Aborted => error_content(count, "JobAborted", &detail),
            Outcome::InfraError => error_content(count, "ClusterError", &detail),
        };
        self.reply(request, "execute_reply", content).await
    }

    async fn reply(&mut self, request: &WireMessage, msg_type: &str, content: Value) -> Result<(), KernelError> {
        let message = WireMessage::reply_to(request, msg_type, &self.session, content);
        self.socket
            .send(message.encode(&self.key))
            .await
            .map_err(|e| KernelError::Transport(format!("shell send: {e}")))
    }

    async fn publish(&mut self, parent: &Header, msg_type: &str, content: Value) -> Result<(), KernelError> {
        let message = WireMessage::publication(Some(parent), msg_type, &self.session, content);
        self.iopub
            .send(message.encode(&self.key))
            .await
            .map_err(|e| KernelError::Transport(format!("iopub send: {e}")))
    }

    async fn publish_status(&mut self, parent: &Header, state: &str) -> Result<(), KernelError> {
        self.publish(parent, "status", json!({"execution_state": state})).await
    }
}

fn error_content(count: u64, ename: &str, evalue: &str) -> Value {
    json!({
        "status": "error",
        "execution_count": count,
        "ename": ename,
        "evalue": evalue,
        "traceback": [],
    })
}

fn kernel_info_content() -> Value {
    json!({
        "status": "ok",
        "protocol_version": PROTOCOL_VERSION,
        "implementation": "q8s",
        "implementation_version": env!("CARGO_PKG_VERSION"),
        "language_info": {
            "name": "python",
            "version": "3",
            "mimetype": "text/x-python",
            "file_extension": ".py",
        },
        "banner": "Python Q8s kernel: notebook cells run as jobs on a Kubernetes cluster",
        "help_links": [],
    })
}

async fn heartbeat_loop(mut socket: RepSocket, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            changed = shutdown.changed() => {
                if changed.is_err() || *shutdown.borrow() {
                    return;
                }
            }
            message = socket.recv() => {
                let Ok(message) = message else { return };
                if socket.send(message).await.is_err() {
                    return;
                }
            }
        }
    }
}

async fn control_loop(
    mut socket: RouterSocket,
    key: Vec<u8>,
    session: String,
    current_abort: Arc<Mutex<Option<AbortHandle>>>,
    shutdown: watch::Sender<bool>,
) {
    let mut shutdown_rx = shutdown.subscribe();
    loop {
        tokio::select! {
            changed = shutdown_rx.changed() => {
                if changed.is_err() || *shutdown_rx.borrow() {
                    return;
                }
            }
            message = socket.recv() => {
                let Ok(message) = message else { return };
                let Ok(request) = WireMessage::decode(&message, &key) else { continue };
                match request.header.msg_type.as_str() {
                    "interrupt_request" => {
                        abort_current(&current_abort);
                        let reply = WireMessage::reply_to(&request, "interrupt_reply", &session, json!({"status": "ok"}));
                        if socket.send(reply.encode(&key)).await.is_err() {
                            return;
                        }
                    }
                    "shutdown_request" => {
                        abort_current(&current_abort);
                        let restart = request.content["restart"].as_bool().unwrap_or(false);
                        let reply = WireMessage::reply_to(
                            &request,
                            "shutdown_reply",
                            &session,
                            json!({"status": "ok", "restart": restart}),
                        );
                        let _ = socket.send(reply.encode(&key)).await;
                        shutdown.send_replace(true);
                    }
                    _ => {}
                }
            }
        }
    }
}

fn abort_current(current: &Mutex<Option<AbortHandle>>) {
    if let Some(handle) = current.lock().unwrap().as_ref() {
        handle.abort();
    }
}
