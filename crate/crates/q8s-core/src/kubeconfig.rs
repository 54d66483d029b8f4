//! Kubeconfig loading.
//!
//! Parses the subset of kubeconfig needed to reach one cluster: clusters,
//! users, contexts, and current-context. Produces a validated
//! [`ClusterConfig`] carrying the endpoint, CA bundle, and exactly one
//! credential. Credential material never appears in `Debug` output or error
//! messages.

use std::fmt;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::Deserialize;
use url::Url;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("kubeconfig not found at {path}")]
    NotFound { path: PathBuf },
    #[error("malformed kubeconfig: {reason}")]
    Malformed { reason: String },
}

fn malformed(reason: impl Into<String>) -> ConfigError {
    ConfigError::Malformed { reason: reason.into() }
}

/// Resolved connection settings for one cluster context.
#[derive(Clone)]
pub struct ClusterConfig {
    pub server_url: Url,
    pub namespace: String,
    pub context_name: String,
    /// PEM-encoded CA bundle used to verify the API server.
    pub ca_bundle: Option<Vec<u8>>,
    pub credential: Credential,
    /// Skip server certificate verification; only honored for loopback.
    pub insecure: bool,
}

#[derive(Clone)]
pub enum Credential {
    BearerToken(String),
    ClientCert { cert_pem: Vec<u8>, key_pem: Vec<u8> },
}

impl Credential {
    pub fn kind(&self) -> &'static str {
        match self {
            Credential::BearerToken(_) => "bearer token",
            Credential::ClientCert { .. } => "client certificate",
        }
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Redacted on purpose; tokens and keys must not reach logs.
        f.write_str(self.kind())
    }
}

impl fmt::Debug for ClusterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClusterConfig")
            .field("server_url", &self.server_url.as_str())
            .field("namespace", &self.namespace)
            .field("context_name", &self.context_name)
            .field("ca_bundle", &self.ca_bundle.as_ref().map(|b| format!("<{} bytes>", b.len())))
            .field("credential", &self.credential)
            .field("insecure", &self.insecure)
            .finish()
    }
}

impl ClusterConfig {
    /// Replaces the namespace, e.g. from a command-line override.
    pub fn with_namespace(mut self, namespace: impl Into<String>) -> Self {
        self.namespace = namespace.into();
        self
    }

    pub fn is_loopback(&self) -> bool {
        match self.server_url.host() {
            Some(url::Host::Domain(d)) => d == "localhost",
            Some(url::Host::Ipv4(ip)) => ip.is_loopback(),
            Some(url::Host::Ipv6(ip)) => ip.is_loopback(),
            None => false,
        }
    }
}

#[derive(Deserialize)]
struct RawKubeconfig {
    #[serde(rename = "current-context")]
    current_context: Option<String>,
    #[serde(default)]
    clusters: Vec<NamedCluster>,
    #[serde(default)]
    users: Vec<NamedUser>,
    #[serde(default)]
    contexts: Vec<NamedContext>,
}

#[derive(Deserialize)]
struct NamedCluster {
    name: String,
    cluster: RawCluster,
}

#[derive(Deserialize)]
struct RawCluster {
    server: String,
    #[serde(rename = "certificate-authority-data")]
    ca_data: Option<String>,
    #[serde(rename = "certificate-authority")]
    ca_file: Option<String>,
    #[serde(rename = "insecure-skip-tls-verify", default)]
    insecure: bool,
}

#[derive(Deserialize)]
struct NamedUser {
    name: String,
    user: RawUser,
}

#[derive(Deserialize, Default)]
struct RawUser {
    token: Option<String>,
    #[serde(rename = "client-certificate-data")]
    cert_data: Option<String>,
    #[serde(rename = "client-key-data")]
    key_data: Option<String>,
    #[serde(rename = "client-certificate")]
    cert_file: Option<String>,
    #[serde(rename = "client-key")]
    key_file: Option<String>,
}

#[derive(Deserialize)]
struct NamedContext {
    name: String,
    context: RawContext,
}

#[derive(Deserialize)]
struct RawContext {
    cluster: String,
    user: String,
    namespace: Option<String>,
}

/// Loads the kubeconfig named by the `KUBECONFIG` environment variable.
pub fn load_kubeconfig_from_env() -> Result<ClusterConfig, ConfigError> {
    let path = std::env::var_os("KUBECONFIG")
        .ok_or_else(|| malformed("KUBECONFIG environment variable is not set"))?;
    load_kubeconfig(Path::new(&path))
}

/// Loads and validates a kubeconfig, resolving its current context.
pub fn load_kubeconfig(path: &Path) -> Result<ClusterConfig, ConfigError> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::NotFound { path: path.to_path_buf() })
        }
        Err(e) => return Err(malformed(format!("cannot read {}: {e}", path.display()))),
    };
    let raw: RawKubeconfig = serde_yaml::from_str(&text).map_err(|e| malformed(format!("invalid YAML: {e}")))?;

    let context_name = raw
        .current_context
        .clone()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| malformed("current-context is not set"))?;
    let context = raw
        .contexts
        .iter()
        .find(|c| c.name == context_name)
        .map(|c| &c.context)
        .ok_or_else(|| malformed(format!("current-context {context_name:?} does not name a context")))?;
    let cluster = raw
        .clusters
        .iter()
        .find(|c| c.name == context.cluster)
        .map(|c| &c.cluster)
        .ok_or_else(|| malformed(format!("context {context_name:?} references unknown cluster {:?}", context.cluster)))?;
    let user = raw
        .users
        .iter()
        .find(|u| u.name == context.user)
        .map(|u| &u.user)
        .ok_or_else(|| malformed(format!("context {context_name:?} references unknown user {:?}", context.user)))?;

    let server_url = Url::parse(&cluster.server).map_err(|e| malformed(format!("invalid server URL: {e}")))?;

    let ca_bundle = match (&cluster.ca_data, &cluster.ca_file) {
        (Some(data), _) => Some(decode_inline(data, "certificate-authority-data")?),
        (None, Some(file)) => Some(read_pem_file(path, file, "certificate-authority")?),
        (None, None) => None,
    };

    let credential = resolve_credential(path, user)?;

    let config = ClusterConfig {
        server_url,
        namespace: context.namespace.clone().unwrap_or_else(|| "default".to_string()),
        context_name,
        ca_bundle,
        credential,
        insecure: cluster.insecure,
    };
    validate(&config)?;
    Ok(config)
}

fn resolve_credential(config_path: &Path, user: &RawUser) -> Result<Credential, ConfigError> {
    let has_token = user.token.as_deref().is_some_and(|t| !t.is_empty());
    let has_cert = user.cert_data.is_some() || user.cert_file.is_some();
    match (has_token, has_cert) {
        (true, true) => Err(malformed("user carries both a token and a client certificate; exactly one is required")),
        (false, false) => Err(malformed("user carries no usable credential (token or client certificate)")),
        (true, false) => Ok(Credential::BearerToken(user.token.clone().unwrap())),
        (false, true) => {
            let cert_pem = match (&user.cert_data, &user.cert_file) {
                (Some(data), _) => decode_inline(data, "client-certificate-data")?,
                (None, Some(file)) => read_pem_file(config_path, file, "client-certificate")?,
                _ => unreachable!(),
            };
            let key_pem = match (&user.key_data, &user.key_file) {
                (Some(data), _) => decode_inline(data, "client-key-data")?,
                (None, Some(file)) => read_pem_file(config_path, file, "client-key")?,
                (None, None) => return Err(malformed("client certificate is missing its key")),
            };
            Ok(Credential::ClientCert { cert_pem, key_pem })
        }
    }
}

fn decode_inline(data: &str, field: &str) -> Result<Vec<u8>, ConfigError> {
    let compact: String = data.chars().filter(|c| !c.is_whitespace()).collect();
    base64::engine::general_purpose::STANDARD
        .decode(compact)
        .map_err(|e| malformed(format!("{field} is not valid base64: {e}")))
}

/// Relative credential paths resolve against the kubeconfig's directory,
/// matching kubectl.
fn read_pem_file(config_path: &Path, file: &str, field: &str) -> Result<Vec<u8>, ConfigError> {
    let file_path = PathBuf::from(file);
    let resolved = if file_path.is_absolute() {
        file_path
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(file_path)
    };
    std::fs::read(&resolved).map_err(|e| malformed(format!("cannot read {field} file {}: {e}", resolved.display())))
}

fn validate(config: &ClusterConfig) -> Result<(), ConfigError> {
    match config.server_url.scheme() {
        "https" => {}
        "http" if config.is_loopback() => {}
        "http" => return Err(malformed("plain http is only allowed for loopback servers")),
        other => return Err(malformed(format!("unsupported server URL scheme {other:?}"))),
    }
    if config.insecure && !config.is_loopback() {
        return Err(malformed("insecure-skip-tls-verify is only honored for loopback servers"));
    }
    if !is_dns_label(&config.namespace) {
        return Err(malformed(format!("namespace {:?} is not a DNS label", config.namespace)));
    }
    Ok(())
}

/// RFC 1123 label: lowercase alphanumerics and hyphens, starts and ends
/// alphanumeric, at most 63 characters.
pub fn is_dns_label(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 63
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
        && !s.starts_with('-')
        && !s.ends_with('-')
}
