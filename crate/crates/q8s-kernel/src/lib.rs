//! Notebook kernel speaking wire protocol 5.3 over five channels: shell and
//! control routers, an iopub publisher, a stdin router (bound, unused), and
//! a heartbeat echo. Execute requests hand the cell to the job orchestrator
//! and stream the collected logs back.

pub mod connection;
pub mod kernel;
pub mod kernelspec;
pub mod wire;

pub use connection::ConnectionInfo;
pub use kernel::{BoundKernel, Kernel, KernelError};
