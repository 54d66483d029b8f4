//! Wire format: multipart messages of identity frames, the `<IDS|MSG>`
//! delimiter, an hmac-sha256 hex signature, and four JSON frames (header,
//! parent header, metadata, content).

use bytes::Bytes;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use zeromq::ZmqMessage;

pub const DELIMITER: &[u8] = b"<IDS|MSG>";
pub const PROTOCOL_VERSION: &str = "5.3";

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("message signature is invalid")]
    BadSignature,
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub msg_id: String,
    pub session: String,
    pub username: String,
    pub date: String,
    pub msg_type: String,
    pub version: String,
}

impl Header {
    pub fn new(msg_type: &str, session: &str) -> Self {
        Header {
            msg_id: uuid::Uuid::new_v4().to_string(),
            session: session.to_string(),
            username: "kernel".to_string(),
            date: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            msg_type: msg_type.to_string(),
            version: PROTOCOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WireMessage {
    /// Routing frames before the delimiter: peer identities on routers, the
    /// topic frame on iopub.
    pub identities: Vec<Bytes>,
    pub header: Header,
    pub parent_header: Option<Header>,
    pub metadata: Value,
    pub content: Value,
}

fn signature(key: &[u8], parts: [&[u8]; 4]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    for part in parts {
        mac.update(part);
    }
    hex::encode(mac.finalize().into_bytes())
}

impl WireMessage {
    /// A reply on the same channel: inherits the routing identities and
    /// records the request header as parent.
    pub fn reply_to(request: &WireMessage, msg_type: &str, session: &str, content: Value) -> Self {
        WireMessage {
            identities: request.identities.clone(),
            header: Header::new(msg_type, session),
            parent_header: Some(request.header.clone()),
            metadata: Value::Object(Default::default()),
            content,
        }
    }

    /// An iopub publication, topic-framed by message type.
    pub fn publication(parent: Option<&Header>, msg_type: &str, session: &str, content: Value) -> Self {
        WireMessage {
            identities: vec![Bytes::copy_from_slice(msg_type.as_bytes())],
            header: Header::new(msg_type, session),
            parent_header: parent.cloned(),
            metadata: Value::Object(Default::default()),
            content,
        }
    }

    pub fn encode(&self, key: &[u8]) -> ZmqMessage {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let parent = match &self.parent_header {
            Some(parent) => serde_json::to_string(parent).expect("parent serializes"),
            None => "{}".to_string(),
        };
        let metadata = self.metadata.to_string();
        let content = self.content.to_string();
        let sig = signature(key, [header.as_bytes(), parent.as_bytes(), metadata.as_bytes(), content.as_bytes()]);

        let mut frames: Vec<Bytes> = self.identities.clone();
        frames.push(Bytes::from_static(DELIMITER));
        frames.push(sig.into());
        frames.push(header.into());
        frames.push(parent.into());
        frames.push(metadata.into());
        frames.push(content.into());
        ZmqMessage::try_from(frames).expect("at least one frame")
    }

    /// Decodes and authenticates a received message. Messages failing the
    /// signature check must be dropped by the caller without reply.
    pub fn decode(message: &ZmqMessage, key: &[u8]) -> Result<Self, WireError> {
        let frames: Vec<&Bytes> = (0..message.len()).filter_map(|i| message.get(i)).collect();
        let delimiter = frames
            .iter()
            .position(|f| f.as_ref() == DELIMITER)
            .ok_or_else(|| WireError::Malformed("no delimiter frame".to_string()))?;
        if frames.len() < delimiter + 6 {
            return Err(WireError::Malformed("too few frames after the delimiter".to_string()));
        }
        let sig_frame = frames[delimiter + 1];
        let header_frame = frames[delimiter + 2];
        let parent_frame = frames[delimiter + 3];
        let metadata_frame = frames[delimiter + 4];
        let content_frame = frames[delimiter + 5];

        let expected = signature(
            key,
            [header_frame.as_ref(), parent_frame.as_ref(), metadata_frame.as_ref(), content_frame.as_ref()],
        );
        // Constant-time comparison: both sides are fixed-length hex of a MAC.
        let mut diff = 0u8;
        let got = sig_frame.as_ref();
        if got.len() != expected.len() {
            return Err(WireError::BadSignature);
        }
        for (a, b) in got.iter().zip(expected.as_bytes()) {
            diff |= a ^ b;
        }
        if diff != 0 {
            return Err(WireError::BadSignature);
        }

        let header: Header = serde_json::from_slice(header_frame)
            .map_err(|e| WireError::Malformed(format!("header: {e}")))?;
        let parent: Value = serde_json::from_slice(parent_frame)
            .map_err(|e| WireError::Malformed(format!("parent header: {e}")))?;
        let parent_header = if parent.as_object().is_some_and(|o| o.is_empty()) {
            None
        } else {
            Some(serde_json::from_value(parent).map_err(|e| WireError::Malformed(format!("parent header: {e}")))?)
        };
        let metadata: Value = serde_json::from_slice(metadata_frame)
            .map_err(|e| WireError::Malformed(format!("metadata: {e}")))?;
        let content: Value = serde_json::from_slice(content_frame)
            .map_err(|e| WireError::Malformed(format!("content: {e}")))?;
        Ok(WireMessage {
            identities: frames[..delimiter].iter().map(|f| Bytes::copy_from_slice(f)).collect(),
            header,
            parent_header,
            metadata,
            content,
        })
    }
}
