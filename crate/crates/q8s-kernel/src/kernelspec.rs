//! Kernelspec generation and installation into the Jupyter data directory.

use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub const KERNEL_NAME: &str = "q8s";
pub const DISPLAY_NAME: &str = "Python Q8s kernel";

/// The kernel.json document Jupyter uses to launch this kernel.
/// `interrupt_mode` is "message": interrupts arrive as control-channel
/// requests, not signals, so a remote job can be cancelled cleanly.
pub fn kernelspec_json(binary: &Path) -> Value {
    json!({
        "argv": [binary.to_string_lossy(), "serve", "{connection_file}"],
        "display_name": DISPLAY_NAME,
        "language": "python",
        "interrupt_mode": "message",
        "env": {},
    })
}

/// Jupyter's per-user data directory: JUPYTER_DATA_DIR beats
/// XDG_DATA_HOME/jupyter beats the platform default.
pub fn jupyter_data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("JUPYTER_DATA_DIR") {
        return PathBuf::from(dir);
    }
    if let Some(dir) = std::env::var_os("XDG_DATA_HOME") {
        if !dir.is_empty() {
            return PathBuf::from(dir).join("jupyter");
        }
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    if cfg!(target_os = "macos") {
        home.join("Library").join("Jupyter")
    } else {
        home.join(".local").join("share").join("jupyter")
    }
}

/// Writes kernels/q8s/kernel.json under `data_dir` (default: the Jupyter
/// data directory) and returns the path written.
pub fn install(binary: &Path, data_dir: Option<&Path>) -> io::Result<PathBuf> {
    let base = data_dir.map(Path::to_path_buf).unwrap_or_else(jupyter_data_dir);
    let dir = base.join("kernels").join(KERNEL_NAME);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("kernel.json");
    let text = serde_json::to_string_pretty(&kernelspec_json(binary))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_names_the_serve_command_and_message_interrupts() {
        let spec = kernelspec_json(Path::new("/usr/local/bin/q8s"));
        assert_eq!(spec["argv"][0], "/usr/local/bin/q8s");
        assert_eq!(spec["argv"][1], "serve");
        assert_eq!(spec["argv"][2], "{connection_file}");
        assert_eq!(spec["display_name"], "Python Q8s kernel");
        assert_eq!(spec["language"], "python");
        assert_eq!(spec["interrupt_mode"], "message");
    }

    #[test]
    fn install_writes_kernel_json_under_kernels_q8s() {
        let dir = tempfile::tempdir().unwrap();
        let path = install(Path::new("/opt/q8s"), Some(dir.path())).unwrap();
        assert_eq!(path, dir.path().join("kernels").join("q8s").join("kernel.json"));
        let text = std::fs::read_to_string(&path).unwrap();
        let spec: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(spec["argv"][0], "/opt/q8s");
    }
}
