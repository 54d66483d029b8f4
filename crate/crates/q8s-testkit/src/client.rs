//! From-scratch notebook-protocol client.
//!
//! Implements the wire format independently (multipart frames, delimiter,
//! hmac-sha256 hex signatures, header/parent/metadata/content JSON) so it
//! can verify a kernel implementation rather than share code with it. Every
//! received message has its signature checked; a bad signature is an error.

use std::time::Duration;

use bytes::Bytes;
use hmac::{Hmac, KeyInit, Mac};
use serde_json::{json, Value};
use sha2::Sha256;
use zeromq::{DealerSocket, ReqSocket, Socket, SocketRecv, SocketSend, SubSocket, ZmqMessage};

const DELIMITER: &[u8] = b"<IDS|MSG>";

/// Where a kernel is listening, as read from its connection file.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub ip: String,
    pub shell_port: u16,
    pub iopub_port: u16,
    pub control_port: u16,
    pub hb_port: u16,
    pub key: String,
}

/// One message observed during a request, in arrival order.
#[derive(Debug, Clone)]
pub struct ObservedMessage {
    pub channel: &'static str,
    pub msg_type: String,
    pub content: Value,
}

/// Everything seen while waiting for a shell request to settle: the reply
/// plus the iopub traffic parented to the request, busy through idle.
#[derive(Debug, Clone)]
pub struct Observation {
    pub events: Vec<ObservedMessage>,
    pub reply_type: String,
    pub reply: Value,
}

impl Observation {
    /// Compact event labels in arrival order, e.g.
    /// `["status:busy", "stream:stdout", "execute_reply", "status:idle"]`.
    pub fn kinds(&self) -> Vec<String> {
        self.events.iter().map(label).collect()
    }

    /// Event labels for the iopub channel only. Publications on one PUB
    /// socket arrive in the order they were sent, so this sequence is exact;
    /// the shell reply travels on a different socket and its arrival can
    /// interleave anywhere, which makes [`Observation::kinds`] unsuitable
    /// for strict ordering assertions.
    pub fn iopub_kinds(&self) -> Vec<String> {
        self.events.iter().filter(|m| m.channel == "iopub").map(label).collect()
    }

    pub fn stream_text(&self, name: &str) -> String {
        self.events
            .iter()
            .filter(|m| m.msg_type == "stream" && m.content["name"] == name)
            .filter_map(|m| m.content["text"].as_str())
            .collect()
    }
}

fn label(m: &ObservedMessage) -> String {
    match m.msg_type.as_str() {
        "status" => format!("status:{}", m.content["execution_state"].as_str().unwrap_or("?")),
        "stream" => format!("stream:{}", m.content["name"].as_str().unwrap_or("?")),
        other => other.to_string(),
    }
}

pub struct ReferenceClient {
    shell: DealerSocket,
    iopub: SubSocket,
    control: DealerSocket,
    hb: ReqSocket,
    key: String,
    session: String,
}

fn err(context: &str, e: impl std::fmt::Display) -> String {
    format!("{context}: {e}")
}

fn sign(key: &str, parts: [&[u8]; 4]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    for part in parts {
        mac.update(part);
    }
    hex::encode(mac.finalize().into_bytes())
}

impl ReferenceClient {
    pub async fn connect(endpoints: &Endpoints) -> Result<Self, String> {
        let at = |port: u16| format!("tcp://{}:{}", endpoints.ip, port);
        let mut shell = DealerSocket::new();
        shell.connect(&at(endpoints.shell_port)).await.map_err(|e| err("shell connect", e))?;
        let mut iopub = SubSocket::new();
        iopub.connect(&at(endpoints.iopub_port)).await.map_err(|e| err("iopub connect", e))?;
        iopub.subscribe("").await.map_err(|e| err("iopub subscribe", e))?;
        let mut control = DealerSocket::new();
        control.connect(&at(endpoints.control_port)).await.map_err(|e| err("control connect", e))?;
        let mut hb = ReqSocket::new();
        hb.connect(&at(endpoints.hb_port)).await.map_err(|e| err("hb connect", e))?;

        let mut client = ReferenceClient {
            shell,
            iopub,
            control,
            hb,
            key: endpoints.key.clone(),
            session: uuid::Uuid::new_v4().to_string(),
        };
        client.wait_for_iopub().await?;
        Ok(client)
    }

    /// A fresh subscription can miss publications made before it is fully
    /// registered; keep poking the kernel until its status shows up.
    async fn wait_for_iopub(&mut self) -> Result<(), String> {
        for _ in 0..100 {
            let msg_id = self.send_shell("kernel_info_request", json!({})).await?;
            match self.observe(&msg_id, Duration::from_millis(250)).await {
                Ok(_) => return Ok(()),
                Err(_) => continue,
            }
        }
        Err("iopub subscription never became active".to_string())
    }

    /// Sends a shell request signed with the session key; returns its msg_id.
    pub async fn send_shell(&mut self, msg_type: &str, content: Value) -> Result<String, String> {
        let (msg_id, message) = self.encode(msg_type, &content, None);
        self.shell.send(message).await.map_err(|e| err("shell send", e))?;
        Ok(msg_id)
    }

    /// Sends a shell request signed with the wrong key; a conforming kernel
    /// must drop it without reply.
    pub async fn send_shell_badly_signed(&mut self, msg_type: &str, content: Value) -> Result<String, String> {
        let (msg_id, message) = self.encode(msg_type, &content, Some("not-the-key"));
        self.shell.send(message).await.map_err(|e| err("shell send", e))?;
        Ok(msg_id)
    }

    /// Collects the request's iopub traffic and shell reply until both the
    /// reply and the idle status have arrived.
    pub async fn observe(&mut self, msg_id: &str, timeout: Duration) -> Result<Observation, String> {
        let deadline = tokio::time::Instant::now() + timeout;
        let mut events = Vec::new();
        let mut reply: Option<(String, Value)> = None;
        let mut idle = false;
        while reply.is_none() || !idle {
            tokio::select! {
                msg = self.iopub.recv() => {
                    let msg = msg.map_err(|e| err("iopub recv", e))?;
                    let decoded = decode(&self.key, &msg)?;
                    if decoded.parent_msg_id.as_deref() != Some(msg_id) {
                        continue;
                    }
                    if decoded.msg_type == "status" && decoded.content["execution_state"] == "idle" {
                        idle = true;
                    }
                    events.push(ObservedMessage { channel: "iopub", msg_type: decoded.msg_type, content: decoded.content });
                }
                msg = self.shell.recv() => {
                    let msg = msg.map_err(|e| err("shell recv", e))?;
                    let decoded = decode(&self.key, &msg)?;
                    if decoded.parent_msg_id.as_deref() != Some(msg_id) {
                        continue;
                    }
                    events.push(ObservedMessage { channel: "shell", msg_type: decoded.msg_type.clone(), content: decoded.content.clone() });
                    reply = Some((decoded.msg_type, decoded.content));
                }
                _ = tokio::time::sleep_until(deadline) => {
                    return Err(format!("timed out waiting for reply/idle of {msg_id}"));
                }
            }
        }
        let (reply_type, reply) = reply.unwrap();
        Ok(Observation { events, reply_type, reply })
    }

    pub async fn kernel_info(&mut self) -> Result<Observation, String> {
        let msg_id = self.send_shell("kernel_info_request", json!({})).await?;
        self.observe(&msg_id, Duration::from_secs(10)).await
    }

    pub async fn execute(&mut self, code: &str, timeout: Duration) -> Result<Observation, String> {
        let content = json!({
            "code": code,
            "silent": false,
            "store_history": true,
            "user_expressions": {},
            "allow_stdin": false,
            "stop_on_error": false,
        });
        let msg_id = self.send_shell("execute_request", content).await?;
        self.observe(&msg_id, timeout).await
    }

    /// Round-trips an opaque payload over the heartbeat channel and returns
    /// the echo latency.
    pub async fn heartbeat_echo(&mut self) -> Result<Duration, String> {
        let payload = uuid::Uuid::new_v4().to_string();
        let started = std::time::Instant::now();
        self.hb.send(ZmqMessage::from(payload.as_str())).await.map_err(|e| err("hb send", e))?;
        let reply = tokio::time::timeout(Duration::from_secs(5), self.hb.recv())
            .await
            .map_err(|_| "heartbeat timed out".to_string())?
            .map_err(|e| err("hb recv", e))?;
        let echoed = reply.get(0).map(|b: &Bytes| b.to_vec()).unwrap_or_default();
        if echoed != payload.as_bytes() {
            return Err("heartbeat reply did not echo the payload".to_string());
        }
        Ok(started.elapsed())
    }

    /// Sends a control request and waits for its reply content.
    pub async fn control_request(&mut self, msg_type: &str, content: Value) -> Result<Value, String> {
        let (msg_id, message) = self.encode(msg_type, &content, None);
        self.control.send(message).await.map_err(|e| err("control send", e))?;
        let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
        loop {
            let msg = tokio::select! {
                msg = self.control.recv() => msg.map_err(|e| err("control recv", e))?,
                _ = tokio::time::sleep_until(deadline) => return Err(format!("timed out waiting for {msg_type} reply")),
            };
            let decoded = decode(&self.key, &msg)?;
            if decoded.parent_msg_id.as_deref() == Some(&msg_id) {
                return Ok(decoded.content);
            }
        }
    }

    pub async fn interrupt(&mut self) -> Result<Value, String> {
        self.control_request("interrupt_request", json!({})).await
    }

    pub async fn shutdown(&mut self, restart: bool) -> Result<Value, String> {
        self.control_request("shutdown_request", json!({"restart": restart})).await
    }

    fn encode(&self, msg_type: &str, content: &Value, wrong_key: Option<&str>) -> (String, ZmqMessage) {
        let msg_id = uuid::Uuid::new_v4().to_string();
        let header = json!({
            "msg_id": msg_id,
            "session": self.session,
            "username": "testkit",
            "date": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            "msg_type": msg_type,
            "version": "5.3",
        })
        .to_string();
        let parent = "{}".to_string();
        let metadata = "{}".to_string();
        let body = content.to_string();
        let signature = sign(
            wrong_key.unwrap_or(&self.key),
            [header.as_bytes(), parent.as_bytes(), metadata.as_bytes(), body.as_bytes()],
        );
        let frames: Vec<Bytes> = vec![
            Bytes::from_static(DELIMITER),
            signature.into(),
            header.into(),
            parent.into(),
            metadata.into(),
            body.into(),
        ];
        (msg_id, ZmqMessage::try_from(frames).expect("non-empty frame list"))
    }
}

struct Decoded {
    msg_type: String,
    content: Value,
    parent_msg_id: Option<String>,
}

fn decode(key: &str, msg: &ZmqMessage) -> Result<Decoded, String> {
    let frames: Vec<&Bytes> = (0..msg.len()).filter_map(|i| msg.get(i)).collect();
    let delimiter = frames
        .iter()
        .position(|f| f.as_ref() == DELIMITER)
        .ok_or_else(|| "message has no delimiter frame".to_string())?;
    if frames.len() < delimiter + 6 {
        return Err(format!("message has {} frames after the delimiter, need 5", frames.len() - delimiter - 1));
    }
    let signature = frames[delimiter + 1];
    let header = frames[delimiter + 2];
    let parent = frames[delimiter + 3];
    let metadata = frames[delimiter + 4];
    let content = frames[delimiter + 5];

    let expected = sign(key, [header.as_ref(), parent.as_ref(), metadata.as_ref(), content.as_ref()]);
    if expected.as_bytes() != signature.as_ref() {
        return Err("message signature is invalid".to_string());
    }

    let header: Value = serde_json::from_slice(header).map_err(|e| err("header parse", e))?;
    let parent: Value = serde_json::from_slice(parent).map_err(|e| err("parent parse", e))?;
    let content: Value = serde_json::from_slice(content).map_err(|e| err("content parse", e))?;
    Ok(Decoded {
        msg_type: header["msg_type"].as_str().unwrap_or("").to_string(),
        content,
        parent_msg_id: parent["msg_id"].as_str().map(str::to_string),
    })
}
