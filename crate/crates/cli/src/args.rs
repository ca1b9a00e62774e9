use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gridauth_core::JobAction;

#[derive(Debug, Parser)]
#[command(name = "gridauth", version, about = "Fine-grain authorization for a simulated grid job manager")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate one request against the policies and print the decision.
    Check(CheckArgs),
    /// Submit a job through the gatekeeper.
    Submit(SubmitArgs),
    /// Send a management request for an existing job.
    Manage(ManageArgs),
    /// Advance the simulated clock.
    Tick(TickArgs),
    /// Print the allocation ledger.
    Ledger(StateArgs),
    /// Derive and sign a capability from a VO policy.
    IssueCap(IssueCapArgs),
    /// Run a scenario script and report every expectation.
    Scenario(ScenarioArgs),
}

/// Where the VO half of a decision comes from.
#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, value_name = "FILE")]
    pub resource_policy: PathBuf,
    /// Pull mode: the VO policy document.
    #[arg(long, value_name = "FILE", conflicts_with = "cap")]
    pub vo_policy: Option<PathBuf>,
    /// Push mode: a signed capability. Requires --keys.
    #[arg(long, value_name = "FILE", requires = "keys")]
    pub cap: Option<PathBuf>,
    /// VO signing keys, one `<vo> <64 hex>` per line.
    #[arg(long, value_name = "FILE")]
    pub keys: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StateArgs {
    #[arg(long, value_name = "FILE")]
    pub state: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_name = "FILE")]
    pub cred: PathBuf,
    /// Job description; required for `start`, rejected otherwise.
    #[arg(long, value_name = "FILE")]
    pub rsl: Option<PathBuf>,
    #[arg(long, default_value_t = JobAction::Start)]
    pub action: JobAction,
    /// Jobtag of the target job, for management actions.
    #[arg(long)]
    pub jobtag: Option<String>,
    /// Owner DN of the target job, for management actions.
    #[arg(long)]
    pub owner: Option<String>,
    /// Unix time for expiry checks.
    #[arg(long, default_value_t = 0)]
    pub now: u64,
    #[arg(long)]
    pub explain: bool,
}

/// Engine settings, used only when the state file is created.
#[derive(Debug, Args)]
pub struct EngineArgs {
    #[arg(long, value_name = "FILE")]
    pub gridmap: Option<PathBuf>,
    /// Dynamic account names, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub pool: Option<Vec<String>>,
    #[arg(long)]
    pub epoch: Option<u64>,
    #[arg(long)]
    pub max_active: Option<usize>,
    #[arg(long)]
    pub lease_ttl: Option<u64>,
}

impl EngineArgs {
    pub fn any(&self) -> bool {
        self.gridmap.is_some()
            || self.pool.is_some()
            || self.epoch.is_some()
            || self.max_active.is_some()
            || self.lease_ttl.is_some()
    }
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_name = "FILE")]
    pub cred: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub rsl: PathBuf,
    /// Simulated cpu-seconds the job consumes.
    #[arg(long, default_value_t = 60)]
    pub runtime: u64,
    /// Simulated peak memory, MB.
    #[arg(long, default_value_t = 0)]
    pub memory: u64,
    /// Simulated disk use, MB.
    #[arg(long, default_value_t = 0)]
    pub disk: u64,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub explain: bool,
}

#[derive(Debug, Args)]
pub struct ManageArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_name = "FILE")]
    pub cred: PathBuf,
    #[arg(long)]
    pub job: String,
    #[arg(long)]
    pub action: JobAction,
    /// New priority for `set_priority`.
    #[arg(long, allow_negative_numbers = true)]
    pub priority: Option<i64>,
    #[arg(long)]
    pub explain: bool,
}

#[derive(Debug, Args)]
pub struct TickArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub dt: u64,
}

#[derive(Debug, Args)]
pub struct IssueCapArgs {
    #[arg(long, value_name = "FILE")]
    pub vo_policy: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub cred: PathBuf,
    /// VO signing keys; the credential's VO key signs the token.
    #[arg(long, value_name = "FILE")]
    pub keys: PathBuf,
    /// Unix time at which the capability expires.
    #[arg(long)]
    pub expiry: u64,
    /// Write the token here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    pub script: PathBuf,
}
