//! Connection files: the JSON handshake between a frontend and a kernel,
//! naming the transport, five ports, and the message-signing key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kernel::KernelError;

pub const SIGNATURE_SCHEME: &str = "hmac-sha256";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectionInfo {
    pub transport: String,
    pub ip: String,
    pub shell_port: u16,
    pub iopub_port: u16,
    pub stdin_port: u16,
    pub control_port: u16,
    pub hb_port: u16,
    pub key: String,
    pub signature_scheme: String,
    #[serde(default)]
    pub kernel_name: String,
}

impl ConnectionInfo {
    /// Fresh loopback connection info with a random key. Ports are zero,
    /// meaning "bind ephemerally and report back".
    pub fn generate() -> Self {
        ConnectionInfo {
            transport: "tcp".to_string(),
            ip: "127.0.0.1".to_string(),
            shell_port: 0,
            iopub_port: 0,
            stdin_port: 0,
            control_port: 0,
            hb_port: 0,
            key: uuid::Uuid::new_v4().simple().to_string(),
            signature_scheme: SIGNATURE_SCHEME.to_string(),
            kernel_name: "q8s".to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KernelError::InvalidConnection(format!("cannot read {}: {e}", path.display())))?;
        let info: ConnectionInfo = serde_json::from_str(&text)
            .map_err(|e| KernelError::InvalidConnection(format!("{} is not a connection file: {e}", path.display())))?;
        info.validate()?;
        Ok(info)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let text = serde_json::to_string_pretty(self).expect("connection info serializes");
        std::fs::write(path, text)
            .map_err(|e| KernelError::InvalidConnection(format!("cannot write {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.signature_scheme != SIGNATURE_SCHEME {
            return Err(KernelError::UnsupportedScheme(self.signature_scheme.clone()));
        }
        if self.transport != "tcp" {
            return Err(KernelError::InvalidConnection(format!("unsupported transport {:?}", self.transport)));
        }
        if self.key.is_empty() {
            return Err(KernelError::InvalidConnection("signing key is empty".to_string()));
        }
        if self.ip.is_empty() {
            return Err(KernelError::InvalidConnection("ip is empty".to_string()));
        }
        let mut named = [self.shell_port, self.iopub_port, self.stdin_port, self.control_port, self.hb_port];
        named.sort_unstable();
        // Zero means ephemeral; only explicit ports must be distinct.
        for pair in named.windows(2) {
            if pair[0] != 0 && pair[0] == pair[1] {
                return Err(KernelError::InvalidConnection(format!("port {} is assigned to two channels", pair[0])));
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, port: u16) -> String {
        format!("tcp://{}:{}", self.ip, port)
    }
}
