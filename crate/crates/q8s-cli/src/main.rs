//! `q8s`: run notebook cells as Kubernetes jobs, from the command line or as
//! a Jupyter kernel.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use q8s_core::{
    kubeconfig::is_dns_label, load_kubeconfig, plan_cell, AbortHandle, Analyzer, BuildDriver,
    CellSource, ClusterClient, ClusterConfig, ExecutionOptions, ExecutionResult, NoopDriver,
    Orchestrator, Outcome, ShellDriver,
};
use q8s_kernel::{ConnectionInfo, Kernel};

/// Usage and argument errors.
const EXIT_USAGE: u8 = 64;
/// Cluster or build infrastructure failed before or after the job ran.
const EXIT_INFRA: u8 = 70;
/// The job outlived the execution timeout.
const EXIT_TIMEOUT: u8 = 124;
/// Interrupted, matching the shell convention for SIGINT.
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "q8s", version, about = "Run Python notebook cells as Kubernetes jobs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a cell on the cluster and print its output
    Run(RunArgs),
    /// Print the image spec and manifests a cell would produce, without a cluster
    DryRun(DryRunArgs),
    /// Load a kubeconfig and report the resolved cluster, credential, and namespace
    ValidateConfig(ValidateConfigArgs),
    /// Register this binary as a Jupyter kernel
    InstallKernelspec(InstallKernelspecArgs),
    /// Serve the Jupyter kernel protocol from a connection file
    Serve(ServeArgs),
}

#[derive(Args)]
struct ClusterArgs {
    /// Path to the kubeconfig describing the target cluster
    #[arg(long, env = "KUBECONFIG", value_name = "PATH")]
    kubeconfig: Option<PathBuf>,
    /// Namespace for jobs and configmaps (default: the kubeconfig context's)
    #[arg(long, env = "Q8S_NAMESPACE")]
    namespace: Option<String>,
}

#[derive(Args)]
struct BuildArgs {
    /// Base image synthesized task images start from
    #[arg(long, env = "Q8S_BASE_IMAGE", default_value = q8s_core::DEFAULT_BASE_IMAGE)]
    base_image: String,
    /// Registry prefix images are tagged and pushed under
    #[arg(long, env = "Q8S_REGISTRY", default_value = q8s_core::DEFAULT_REGISTRY)]
    registry: String,
    /// GPUs requested per job; 0 omits the GPU resource request
    #[arg(long, default_value_t = 1)]
    gpu: u32,
    /// Seed for deterministic resource name suffixes
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PollArgs {
    /// Seconds between job status polls
    #[arg(long, default_value_t = 2.0, value_name = "SECONDS")]
    poll_interval: f64,
    /// Seconds before a job is abandoned and cleaned up
    #[arg(long, default_value_t = 3600.0, value_name = "SECONDS")]
    timeout: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Python cell to execute: a file path, or - for stdin
    cell: PathBuf,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    build: BuildArgs,
    #[command(flatten)]
    poll: PollArgs,
    /// Output format: text streams the job output, json prints the full result
    #[arg(long, value_parser = ["text", "json"], default_value = "text")]
    output: String,
}

#[derive(Args)]
struct DryRunArgs {
    /// Python cell to plan: a file path, or - for stdin
    cell: PathBuf,
    #[command(flatten)]
    build: BuildArgs,
}

#[derive(Args)]
struct ValidateConfigArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
}

#[derive(Args)]
struct InstallKernelspecArgs {
    /// Kernel binary path to record in kernel.json (default: this binary)
    #[arg(long, value_name = "PATH")]
    binary: Option<PathBuf>,
    /// Jupyter data directory to install under (default: the user's)
    #[arg(long, value_name = "PATH")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Jupyter connection file with ports and the signing key
    connection_file: PathBuf,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    build: BuildArgs,
    #[command(flatten)]
    poll: PollArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_INFRA, &format!("cannot start async runtime: {e}")),
    };
    let code = runtime.block_on(async {
        match cli.command {
            Command::Run(args) => cmd_run(args).await,
            Command::DryRun(args) => cmd_dry_run(args),
            Command::ValidateConfig(args) => cmd_validate_config(args),
            Command::InstallKernelspec(args) => cmd_install_kernelspec(args),
            Command::Serve(args) => cmd_serve(args).await,
        }
    });
    ExitCode::from(code)
}

fn fail(code: u8, message: &str) -> ExitCode {
    eprintln!("q8s: {message}");
    ExitCode::from(code)
}

fn read_cell(path: &Path) -> Result<String, String> {
    if path == Path::new("-") {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| format!("cannot read cell from stdin: {e}"))?;
        return Ok(text);
    }
    std::fs::read_to_string(path).map_err(|e| format!("cannot read cell {}: {e}", path.display()))
}

/// Flag and Q8S_NAMESPACE beat the kubeconfig context's namespace, which
/// itself defaults to "default".
fn cluster_config(args: &ClusterArgs) -> Result<ClusterConfig, String> {
    let path = match &args.kubeconfig {
        Some(path) => path.clone(),
        None => {
            let default = std::env::var_os("HOME")
                .map(|home| PathBuf::from(home).join(".kube").join("config"));
            match default {
                Some(path) if path.exists() => path,
                Some(path) => {
                    return Err(format!(
                        "no kubeconfig at {}: pass --kubeconfig or set KUBECONFIG",
                        path.display()
                    ))
                }
                None => return Err("no kubeconfig: pass --kubeconfig or set KUBECONFIG".to_string()),
            }
        }
    };
    let mut config = load_kubeconfig(&path).map_err(|e| e.to_string())?;
    if let Some(namespace) = &args.namespace {
        if !is_dns_label(namespace) {
            return Err(format!("namespace {namespace:?} is not a valid DNS label"));
        }
        config = config.with_namespace(namespace);
    }
    Ok(config)
}

fn execution_options(build: &BuildArgs, poll: &PollArgs) -> Result<ExecutionOptions, String> {
    if !(poll.poll_interval > 0.0) {
        return Err("--poll-interval must be positive".to_string());
    }
    if !(poll.timeout > 0.0) {
        return Err("--timeout must be positive".to_string());
    }
    Ok(ExecutionOptions {
        base_image: build.base_image.clone(),
        registry: build.registry.clone(),
        gpu_count: build.gpu,
        poll_interval: Duration::from_secs_f64(poll.poll_interval),
        timeout: Duration::from_secs_f64(poll.timeout),
        seed: build.seed,
        ..ExecutionOptions::default()
    })
}

/// Q8S_BUILD_DRIVER picks the image builder: "shell" (default) shells out to
/// docker, "noop" skips building for clusters that already have the image,
/// and any other value names the container tool to shell out to.
fn build_driver() -> Arc<dyn BuildDriver> {
    match std::env::var("Q8S_BUILD_DRIVER").ok().as_deref() {
        Some("noop") => Arc::new(NoopDriver),
        Some("shell") | Some("") | None => Arc::new(ShellDriver::default()),
        Some(program) => Arc::new(ShellDriver::new(program)),
    }
}

async fn cmd_run(args: RunArgs) -> u8 {
    let code = match read_cell(&args.cell) {
        Ok(code) => code,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    // A missing or broken kubeconfig is the user's to fix: usage, not infra.
    let config = match cluster_config(&args.cluster) {
        Ok(config) => config,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    let client = match ClusterClient::new(&config) {
        Ok(client) => client,
        Err(e) => return report(EXIT_INFRA, &e.to_string()),
    };
    let opts = match execution_options(&args.build, &args.poll) {
        Ok(opts) => opts,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    let orchestrator = Orchestrator::new(client, build_driver(), opts);

    let abort = AbortHandle::new();
    let interrupter = abort.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            interrupter.abort();
        }
    });

    let cell = CellSource::new(code, uuid::Uuid::new_v4().to_string());
    let result = orchestrator.execute_cell(&cell, &abort).await;

    if args.output == "json" {
        match serde_json::to_string_pretty(&result) {
            Ok(text) => println!("{text}"),
            Err(e) => return report(EXIT_INFRA, &format!("cannot render result: {e}")),
        }
    } else {
        print!("{}", result.stdout);
        eprint!("{}", result.stderr);
        if !matches!(result.outcome, Outcome::Succeeded | Outcome::Failed) {
            if let Some(failure) = &result.failure {
                eprintln!("q8s: {failure}");
            }
        }
    }
    exit_code_for(&result)
}

fn exit_code_for(result: &ExecutionResult) -> u8 {
    match result.outcome {
        Outcome::Succeeded => 0,
        // The container's own exit code passes through.
        Outcome::Failed => match result.exit_code {
            Some(code) if code != 0 => (code & 0xff) as u8,
            _ => 1,
        },
        Outcome::TimedOut => EXIT_TIMEOUT,
        Outcome::Aborted => EXIT_INTERRUPTED,
        Outcome::InfraError => EXIT_INFRA,
    }
}

fn report(code: u8, message: &str) -> u8 {
    eprintln!("q8s: {message}");
    code
}

fn cmd_dry_run(args: DryRunArgs) -> u8 {
    let code = match read_cell(&args.cell) {
        Ok(code) => code,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    let opts = match execution_options(&args.build, &PollArgs { poll_interval: 2.0, timeout: 3600.0 }) {
        Ok(opts) => opts,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    use rand::SeedableRng;
    let mut rng = match opts.seed {
        Some(seed) => rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        None => rand_chacha::ChaCha8Rng::from_rng(&mut rand::rng()),
    };
    let cell = CellSource::new(code, "dry-run".to_string());
    let plan = match plan_cell(&Analyzer::new(), &cell, &opts, &mut rng) {
        Ok(plan) => plan,
        Err(e) => return report(EXIT_USAGE, &e.to_string()),
    };
    let document = serde_json::json!({
        "dependencies": plan.manifest.packages(),
        "image": plan.image,
        "job": plan.job.to_json(),
        "configmap": plan.configmap.to_json(),
    });
    match serde_json::to_string_pretty(&document) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => report(EXIT_INFRA, &format!("cannot render plan: {e}")),
    }
}

fn cmd_validate_config(args: ValidateConfigArgs) -> u8 {
    match cluster_config(&args.cluster) {
        Ok(config) => {
            println!("context:    {}", config.context_name);
            println!("server:     {}", config.server_url);
            println!("namespace:  {}", config.namespace);
            println!("credential: {}", config.credential.kind());
            println!(
                "ca bundle:  {}",
                if config.ca_bundle.is_some() { "present" } else { "system roots" }
            );
            0
        }
        Err(message) => report(1, &message),
    }
}

fn cmd_install_kernelspec(args: InstallKernelspecArgs) -> u8 {
    let binary = match args.binary {
        Some(path) => path,
        None => match std::env::current_exe() {
            Ok(path) => path,
            Err(e) => return report(EXIT_INFRA, &format!("cannot locate this binary: {e}")),
        },
    };
    match q8s_kernel::kernelspec::install(&binary, args.data_dir.as_deref()) {
        Ok(path) => {
            println!("installed kernelspec: {}", path.display());
            0
        }
        Err(e) => report(EXIT_INFRA, &format!("cannot install kernelspec: {e}")),
    }
}

async fn cmd_serve(args: ServeArgs) -> u8 {
    let info = match ConnectionInfo::load(&args.connection_file) {
        Ok(info) => info,
        Err(e) => return report(EXIT_USAGE, &e.to_string()),
    };
    let config = match cluster_config(&args.cluster) {
        Ok(config) => config,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    let client = match ClusterClient::new(&config) {
        Ok(client) => client,
        Err(e) => return report(EXIT_INFRA, &e.to_string()),
    };
    let opts = match execution_options(&args.build, &args.poll) {
        Ok(opts) => opts,
        Err(message) => return report(EXIT_USAGE, &message),
    };
    let orchestrator = Arc::new(Orchestrator::new(client, build_driver(), opts));
    let bound = match Kernel::bind(&info, orchestrator).await {
        Ok(bound) => bound,
        Err(e) => return report(EXIT_INFRA, &e.to_string()),
    };
    let had_ephemeral_ports = info.shell_port == 0
        || info.iopub_port == 0
        || info.stdin_port == 0
        || info.control_port == 0
        || info.hb_port == 0;
    if had_ephemeral_ports {
        // Jupyter always supplies concrete ports; rewriting matters only for
        // hand-written files using port 0, so clients can learn the real ports.
        if let Err(e) = bound.connection_info().save(&args.connection_file) {
            return report(EXIT_INFRA, &e.to_string());
        }
    }
    match bound.serve().await {
        Ok(()) => 0,
        Err(e) => report(EXIT_INFRA, &e.to_string()),
    }
}
