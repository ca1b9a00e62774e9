//! Simulated gatekeeper and job manager.
//!
//! Enforcement points sit on job start ([`JobManager::gatekeeper_submit`])
//! and on job management ([`JobManager::manage`]); both consult the same
//! decision point. Jobs run on a discrete clock: an active job consumes
//! `count` cpu-seconds per simulated second until it has consumed its
//! profile's runtime.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credential::{map_identity, CapabilityToken, GridCredential, GridMapFile, KeyRegistry};
use crate::enforce::{
    record_usage, AllocationLedger, DynamicAccountPool, LedgerError, PolicyCaps, PoolError, QuotaScope, SandboxDefaults,
    SandboxSpec, UsageSample,
};
use crate::pdp::{decide, decide_push, open_capability, AuthzQuery, Decision, PdpError, PolicySourceSet, TraceSource};
use crate::policy::{Assertion, PolicyDocument};
use crate::rsl::{attr, parse_rsl, JobAction, RslError, RslRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Active,
    Suspended,
    Done,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::Pending,
        JobState::Active,
        JobState::Suspended,
        JobState::Done,
        JobState::Failed,
        JobState::Canceled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "pending",
            JobState::Active => "active",
            JobState::Suspended => "suspended",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Canceled => "canceled",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Canceled)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Events that move a job between states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateEvent {
    Activate,
    Suspend,
    Resume,
    Cancel,
    Complete,
    Fail,
}

impl StateEvent {
    pub const ALL: [StateEvent; 6] = [
        StateEvent::Activate,
        StateEvent::Suspend,
        StateEvent::Resume,
        StateEvent::Cancel,
        StateEvent::Complete,
        StateEvent::Fail,
    ];
}

/// The fixed transition table. Anything not listed is illegal.
pub fn transition(from: JobState, event: StateEvent) -> Option<JobState> {
    use JobState::*;
    use StateEvent::*;
    match (from, event) {
        (Pending, Activate) => Some(Active),
        (Active, Suspend) => Some(Suspended),
        (Suspended, Resume) => Some(Active),
        (Pending | Active | Suspended, Cancel) => Some(Canceled),
        (Active, Complete) => Some(Done),
        (Active, Fail) => Some(Failed),
        _ => None,
    }
}

/// Drives the simulated execution of a job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimProfile {
    /// Total cpu-seconds the job consumes before it completes.
    pub runtime: u64,
    /// MB.
    pub memory_peak: u64,
    /// MB.
    pub disk: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "lowercase")]
pub enum AccountRef {
    /// From the grid-mapfile.
    Static(String),
    /// Leased from the dynamic pool.
    Dynamic(String),
}

impl AccountRef {
    pub fn name(&self) -> &str {
        match self {
            AccountRef::Static(a) | AccountRef::Dynamic(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub owner: String,
    pub vo: Option<String>,
    pub jobtag: Option<String>,
    pub request: RslRequest,
    pub state: JobState,
    pub account: AccountRef,
    pub sandbox: SandboxSpec,
    pub profile: SimProfile,
    /// Upper bound on consumption, equal to the sandbox cpu limit.
    pub reserved: u64,
    pub consumed: u64,
    /// Whether `reserved` was charged to the VO ledger at admission.
    pub accounted: bool,
    pub priority: i64,
    pub submitted_at: u64,
    pub ended_at: Option<u64>,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Submitted,
    Activated,
    Suspended,
    Resumed,
    Canceled,
    Done,
    Failed,
    Priority,
    Status,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Submitted => "submitted",
            EventKind::Activated => "activated",
            EventKind::Suspended => "suspended",
            EventKind::Resumed => "resumed",
            EventKind::Canceled => "canceled",
            EventKind::Done => "done",
            EventKind::Failed => "failed",
            EventKind::Priority => "priority",
            EventKind::Status => "status",
        }
    }
}

/// One line of the append-only event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub job: String,
    pub kind: EventKind,
    pub detail: String,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} job={} event={} detail={}",
            self.t,
            self.job,
            self.kind.as_str(),
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManagementCommand {
    Cancel,
    Status,
    Suspend,
    Resume,
    SetPriority(i64),
}

impl ManagementCommand {
    pub fn action(self) -> JobAction {
        match self {
            ManagementCommand::Cancel => JobAction::Cancel,
            ManagementCommand::Status => JobAction::Status,
            ManagementCommand::Suspend => JobAction::Suspend,
            ManagementCommand::Resume => JobAction::Resume,
            ManagementCommand::SetPriority(_) => JobAction::SetPriority,
        }
    }
}

/// Where the VO half of a decision comes from.
#[derive(Debug, Clone, Copy)]
pub enum AuthzMode<'a> {
    /// The VO document is available locally.
    Pull(PolicySourceSet<'a>),
    /// The requester presents a VO-signed capability.
    Push {
        resource: &'a PolicyDocument,
        token: &'a CapabilityToken,
        registry: &'a KeyRegistry,
    },
}

impl<'a> AuthzMode<'a> {
    /// Resource policy only, no VO policy and no capabilities.
    pub fn baseline(resource: &'a PolicyDocument) -> Self {
        AuthzMode::Pull(PolicySourceSet::new(resource, None))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JobError {
    #[error("rsl: {0}")]
    Parse(#[from] RslError),
    #[error("denied by policy")]
    DeniedByPolicy(Box<Decision>),
    #[error("quota exceeded ({0})")]
    QuotaExceeded(QuotaScope),
    #[error("no local account available")]
    NoAccountsAvailable,
    #[error("illegal transition: cannot {action} job {job} in state {from}")]
    IllegalTransition { job: String, from: JobState, action: JobAction },
    #[error("unknown job '{0}'")]
    UnknownJob(String),
    #[error("credential for '{0}' has expired")]
    CredentialExpired(String),
    #[error(transparent)]
    Query(#[from] PdpError),
    #[error("ledger: {0}")]
    Ledger(LedgerError),
}

impl From<LedgerError> for JobError {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::QuotaExceeded(scope) => JobError::QuotaExceeded(scope),
            other => JobError::Ledger(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub job: Job,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManagementResult {
    /// The job after the request was applied.
    pub job: Job,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Unix time at simulated second zero; credential and capability
    /// expiry are checked against `epoch + clock`.
    pub epoch: u64,
    /// Name of the protected resource in authorization queries.
    pub resource: String,
    pub lease_ttl: u64,
    pub sandbox: SandboxDefaults,
    /// Most jobs active at once; unlimited when absent.
    pub max_active: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            epoch: 0,
            resource: "gatekeeper".into(),
            lease_ttl: 3600,
            sandbox: SandboxDefaults::default(),
            max_active: None,
        }
    }
}

/// Single owner of all simulator state. Every mutation goes through
/// `&mut self`, which serializes them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobManager {
    pub config: EngineConfig,
    clock: u64,
    next_seq: u64,
    jobs: BTreeMap<String, Job>,
    pub gridmap: GridMapFile,
    pool: DynamicAccountPool,
    ledger: AllocationLedger,
    events: Vec<Event>,
}

struct Authorized {
    decision: Decision,
    /// The VO document the decision used, if any.
    vo: Option<PolicyDocument>,
}

fn authorize(q: &AuthzQuery, mode: &AuthzMode<'_>, now: u64) -> Result<Authorized, JobError> {
    match mode {
        AuthzMode::Pull(sources) => Ok(Authorized {
            decision: decide(q, sources)?,
            vo: sources.vo.cloned(),
        }),
        AuthzMode::Push {
            resource,
            token,
            registry,
        } => {
            let decision = decide_push(q, resource, token, registry, now)?;
            let vo = if decision.is_permit() {
                open_capability(q, token, registry, now).ok()
            } else {
                None
            };
            Ok(Authorized { decision, vo })
        }
    }
}

/// Largest value `name` may take under `block`, if the block bounds it.
fn block_cap(block: &crate::policy::SubjectBlock, name: &str) -> Option<u64> {
    let mut may: Option<Option<i64>> = None;
    let mut cap: Option<i64> = None;
    for a in &block.assertions {
        match a {
            Assertion::MayContain(n, spec) if n == name => {
                let b = spec.upper_bound();
                may = Some(match may {
                    None => b,
                    Some(prev) => prev.zip(b).map(|(x, y)| x.max(y)),
                });
            }
            Assertion::MustContain(n, Some(spec)) if n == name => {
                if let Some(b) = spec.upper_bound() {
                    cap = Some(cap.map_or(b, |c| c.min(b)));
                }
            }
            _ => {}
        }
    }
    let bound = match (may.flatten(), cap) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    };
    bound.map(|b| b.max(0) as u64)
}

/// Bound on `name` across the blocks that permitted: a source bounds it
/// only if every permitting block does, and sources combine by minimum.
fn decision_cap(decision: &Decision, docs: &[(TraceSource, &PolicyDocument)], name: &str) -> Option<u64> {
    let mut overall: Option<u64> = None;
    for (source, doc) in docs {
        let blocks = decision.permitting_blocks(*source);
        if blocks.is_empty() {
            continue;
        }
        let per_source = blocks
            .iter()
            .map(|i| block_cap(&doc.blocks[*i], name))
            .try_fold(0u64, |acc, b| b.map(|b| acc.max(b)));
        if let Some(c) = per_source {
            overall = Some(overall.map_or(c, |o| o.min(c)));
        }
    }
    overall
}

impl JobManager {
    pub fn new(config: EngineConfig, gridmap: GridMapFile, pool: DynamicAccountPool) -> Self {
        JobManager {
            config,
            clock: 0,
            next_seq: 1,
            jobs: BTreeMap::new(),
            gridmap,
            pool,
            ledger: AllocationLedger::new(),
            events: Vec::new(),
        }
    }

    /// Simulated seconds since start.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Unix time used for expiry checks.
    pub fn now(&self) -> u64 {
        self.config.epoch.saturating_add(self.clock)
    }

    pub fn ledger(&self) -> &AllocationLedger {
        &self.ledger
    }

    pub fn pool(&self) -> &DynamicAccountPool {
        &self.pool
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn job_record(&self, id: &str) -> Result<Job, JobError> {
        self.jobs.get(id).cloned().ok_or_else(|| JobError::UnknownJob(id.to_string()))
    }

    fn emit(&mut self, job: &str, kind: EventKind, detail: String) -> Event {
        let e = Event {
            t: self.clock,
            job: job.to_string(),
            kind,
            detail,
        };
        self.events.push(e.clone());
        e
    }

    fn check_credential(&self, cred: &GridCredential) -> Result<(), JobError> {
        if cred.is_expired(self.now()) {
            return Err(JobError::CredentialExpired(cred.subject.clone()));
        }
        Ok(())
    }

    /// Authorizes and admits a job. Nothing changes unless the job is
    /// admitted.
    pub fn gatekeeper_submit(
        &mut self,
        cred: &GridCredential,
        rsl_text: &str,
        mode: &AuthzMode<'_>,
        profile: SimProfile,
    ) -> Result<Admission, JobError> {
        self.check_credential(cred)?;
        let request = parse_rsl(rsl_text)?;
        let query = AuthzQuery::start(cred.clone(), self.config.resource.clone(), request.clone());
        let Authorized { decision, vo: vo_doc } = authorize(&query, mode, self.now())?;
        if !decision.is_permit() {
            return Err(JobError::DeniedByPolicy(Box::new(decision)));
        }

        let resource_doc = match mode {
            AuthzMode::Pull(s) => s.resource,
            AuthzMode::Push { resource, .. } => resource,
        };
        let mut docs = vec![(TraceSource::Resource, resource_doc)];
        if let Some(doc) = &vo_doc {
            docs.push((TraceSource::Vo, doc));
        }
        let caps = PolicyCaps {
            max_cpu_time: decision_cap(&decision, &docs, attr::MAX_CPU_TIME),
            max_memory: decision_cap(&decision, &docs, attr::MAX_MEMORY),
        };
        let groups = cred
            .groups
            .iter()
            .map(|g| match &cred.vo {
                Some(vo) => format!("{vo}_{g}"),
                None => g.clone(),
            });
        let sandbox = SandboxSpec::derive(&request, caps, self.config.sandbox, groups);
        let reserved = sandbox.max_cpu;

        let mut ledger = self.ledger.clone();
        let mut pool = self.pool.clone();

        let accounting = match (&cred.vo, vo_doc.as_ref().and_then(|d| d.allocation.map(|a| (d, a)))) {
            (Some(vo), Some((doc, allocation))) => Some((vo, doc, allocation)),
            _ => None,
        };
        if let Some((vo, doc, allocation)) = accounting {
            if ledger.vo(vo).map(|a| a.allocation) != Some(allocation) {
                ledger.configure_vo(vo, allocation)?;
            }
            let quota = doc.member_quotas.get(&cred.subject).copied().unwrap_or(allocation);
            if ledger.member(vo, &cred.subject).map(|m| m.quota) != Some(quota) {
                ledger.configure_member(vo, &cred.subject, quota)?;
            }
            ledger.reserve(vo, &cred.subject, reserved)?;
        }

        let account = match map_identity(&self.gridmap, &cred.subject) {
            Some(local) => AccountRef::Static(local.to_string()),
            None => {
                let expiry = self.now().saturating_add(self.config.lease_ttl);
                let lease = pool
                    .lease_account(&cred.subject, sandbox.clone(), expiry)
                    .map_err(|_| JobError::NoAccountsAvailable)?;
                AccountRef::Dynamic(lease.account)
            }
        };

        self.ledger = ledger;
        self.pool = pool;
        let seq = self.next_seq;
        self.next_seq += 1;
        let job = Job {
            id: format!("job-{seq}"),
            owner: cred.subject.clone(),
            vo: cred.vo.clone(),
            jobtag: request.jobtag().map(str::to_string),
            request,
            state: JobState::Pending,
            account,
            sandbox,
            profile,
            reserved,
            consumed: 0,
            accounted: accounting.is_some(),
            priority: 0,
            submitted_at: self.clock,
            ended_at: None,
            seq,
        };
        self.emit(
            &job.id,
            EventKind::Submitted,
            format!("owner={} account={} reserved={}", job.owner, job.account.name(), job.reserved),
        );
        self.jobs.insert(job.id.clone(), job.clone());
        Ok(Admission { job, decision })
    }

    /// Authorizes and applies a management request. A denied or illegal
    /// request leaves the job unchanged.
    pub fn manage(
        &mut self,
        id: &str,
        command: ManagementCommand,
        cred: &GridCredential,
        mode: &AuthzMode<'_>,
    ) -> Result<ManagementResult, JobError> {
        let job = self.job_record(id)?;
        self.check_credential(cred)?;
        let action = command.action();
        let query = AuthzQuery::manage(
            cred.clone(),
            self.config.resource.clone(),
            action,
            job.jobtag.clone(),
            job.owner.clone(),
        );
        let decision = authorize(&query, mode, self.now())?.decision;
        if !decision.is_permit() {
            return Err(JobError::DeniedByPolicy(Box::new(decision)));
        }
        let illegal = || JobError::IllegalTransition {
            job: id.to_string(),
            from: job.state,
            action,
        };
        let by = &cred.subject;
        match command {
            ManagementCommand::Status => {
                self.emit(id, EventKind::Status, format!("by={by} state={}", job.state));
            }
            ManagementCommand::SetPriority(p) => {
                if job.state.is_terminal() {
                    return Err(illegal());
                }
                self.jobs.get_mut(id).expect("job exists").priority = p;
                self.emit(id, EventKind::Priority, format!("by={by} priority={p}"));
            }
            ManagementCommand::Suspend => {
                let to = transition(job.state, StateEvent::Suspend).ok_or_else(illegal)?;
                self.jobs.get_mut(id).expect("job exists").state = to;
                self.emit(id, EventKind::Suspended, format!("by={by}"));
            }
            ManagementCommand::Resume => {
                let to = transition(job.state, StateEvent::Resume).ok_or_else(illegal)?;
                self.jobs.get_mut(id).expect("job exists").state = to;
                self.emit(id, EventKind::Resumed, format!("by={by}"));
            }
            ManagementCommand::Cancel => {
                let to = transition(job.state, StateEvent::Cancel).ok_or_else(illegal)?;
                self.finish(id, to, EventKind::Canceled, format!("by={by}"));
            }
        }
        Ok(ManagementResult {
            job: self.job_record(id)?,
            decision,
        })
    }

    /// Moves a job to a terminal state, settles its reservation and
    /// returns its leased account.
    fn finish(&mut self, id: &str, to: JobState, kind: EventKind, detail: String) {
        debug_assert!(to.is_terminal());
        let clock = self.clock;
        let job = self.jobs.get_mut(id).expect("job exists");
        job.state = to;
        job.ended_at = Some(clock);
        let job = job.clone();
        if job.accounted {
            let vo = job.vo.as_deref().expect("accounted jobs have a vo");
            self.ledger
                .settle(vo, &job.owner, job.reserved, job.consumed)
                .expect("reservation made at admission");
        }
        if let AccountRef::Dynamic(account) = &job.account {
            match self.pool.release_account(account) {
                Ok(()) | Err(PoolError::UnknownLease(_)) => {}
                Err(e) => unreachable!("{e}"),
            }
        }
        self.emit(id, kind, detail);
    }

    fn runnable(&self) -> bool {
        self.jobs
            .values()
            .any(|j| matches!(j.state, JobState::Pending | JobState::Active))
    }

    fn renew_leases(&mut self) {
        let expiry = self.now().saturating_add(self.config.lease_ttl);
        let live: Vec<String> = self
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .filter_map(|j| match &j.account {
                AccountRef::Dynamic(a) => Some(a.clone()),
                AccountRef::Static(_) => None,
            })
            .collect();
        for account in live {
            let _ = self.pool.renew(&account, expiry);
        }
    }

    fn step(&mut self) -> Vec<Event> {
        let mut out = Vec::new();

        let mut pending: Vec<&Job> = self.jobs.values().filter(|j| j.state == JobState::Pending).collect();
        pending.sort_by_key(|j| (std::cmp::Reverse(j.priority), j.submitted_at, j.seq));
        let active = self.jobs.values().filter(|j| j.state == JobState::Active).count();
        let room = self.config.max_active.map_or(usize::MAX, |m| m.saturating_sub(active));
        let starting: Vec<String> = pending.into_iter().take(room).map(|j| j.id.clone()).collect();
        for id in starting {
            let job = self.jobs.get_mut(&id).expect("job exists");
            job.state = transition(job.state, StateEvent::Activate).expect("pending activates");
            let detail = format!("priority={}", job.priority);
            out.push(self.emit(&id, EventKind::Activated, detail));
        }

        let mut running: Vec<(u64, String)> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Active)
            .map(|j| (j.seq, j.id.clone()))
            .collect();
        running.sort();
        self.clock += 1;
        for (_, id) in running {
            let job = self.jobs.get_mut(&id).expect("job exists");
            let remaining = job.profile.runtime.saturating_sub(job.consumed);
            let cpu = job.consumed + job.request.count().min(remaining);
            let sample = UsageSample {
                cpu,
                memory: job.profile.memory_peak,
                disk: job.profile.disk,
            };
            match record_usage(&job.sandbox, sample) {
                Err(breach) => {
                    job.consumed = cpu.min(job.sandbox.max_cpu);
                    let detail = format!("limit={} consumed={}", breach.0, job.consumed);
                    self.finish(&id, JobState::Failed, EventKind::Failed, detail);
                    out.push(self.events.last().cloned().expect("just emitted"));
                }
                Ok(()) => {
                    job.consumed = cpu;
                    if cpu >= job.profile.runtime {
                        let detail = format!("consumed={cpu}");
                        self.finish(&id, JobState::Done, EventKind::Done, detail);
                        out.push(self.events.last().cloned().expect("just emitted"));
                    }
                }
            }
        }

        let now = self.now();
        for account in self.pool.expired(now) {
            let owner = self
                .jobs
                .values()
                .find(|j| !j.state.is_terminal() && j.account == AccountRef::Dynamic(account.clone()))
                .map(|j| (j.id.clone(), j.state));
            match owner {
                Some((id, JobState::Active)) => {
                    self.finish(&id, JobState::Failed, EventKind::Failed, "lease-expired".into());
                    out.push(self.events.last().cloned().expect("just emitted"));
                }
                Some((id, from)) => {
                    // Pending and suspended jobs cannot fail; they are
                    // canceled so the account can be reclaimed.
                    debug_assert!(transition(from, StateEvent::Cancel).is_some());
                    self.finish(&id, JobState::Canceled, EventKind::Canceled, "lease-expired".into());
                    out.push(self.events.last().cloned().expect("just emitted"));
                }
                None => {
                    let _ = self.pool.release_account(&account);
                }
            }
        }
        self.renew_leases();
        out
    }

    /// Advances the clock by `dt` seconds and returns the events emitted.
    pub fn tick(&mut self, dt: u64) -> Vec<Event> {
        let mut out = Vec::new();
        for done in 0..dt {
            if !self.runnable() {
                self.clock += dt - done;
                self.renew_leases();
                break;
            }
            out.extend(self.step());
        }
        out
    }

    /// Checks that the ledger equals the live reservations plus the
    /// settled consumption of every accounted job, and the per-job
    /// invariants.
    pub fn check_conservation(&self) -> Result<(), String> {
        self.ledger.check_invariants()?;
        let mut expected: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        let mut per_vo: BTreeMap<&str, u64> = BTreeMap::new();
        for job in self.jobs.values() {
            if job.consumed > job.reserved {
                return Err(format!("{}: consumed {} > reserved {}", job.id, job.consumed, job.reserved));
            }
            if job.state.is_terminal() != job.ended_at.is_some() {
                return Err(format!("{}: ended_at inconsistent with state {}", job.id, job.state));
            }
            if !job.accounted {
                continue;
            }
            let vo = job.vo.as_deref().ok_or_else(|| format!("{}: accounted without vo", job.id))?;
            let charge = if job.state.is_terminal() { job.consumed } else { job.reserved };
            *expected.entry((vo, &job.owner)).or_default() += charge;
            *per_vo.entry(vo).or_default() += charge;
        }
        for (vo, sum) in &per_vo {
            let used = self.ledger.vo(vo).map_or(0, |a| a.used);
            if used != *sum {
                return Err(format!("vo {vo}: ledger {used} != jobs {sum}"));
            }
        }
        for ((vo, member), sum) in &expected {
            let used = self.ledger.member(vo, member).map_or(0, |m| m.used);
            if used != *sum {
                return Err(format!("member {member}: ledger {used} != jobs {sum}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::policy::parse_policy;

    const RESOURCE: &str = r#"policy "site" source resource {
        subject any { allow action start, status, cancel, suspend, resume, set_priority; }
    }"#;
    const OPEN_VO: &str = r#"policy "fusion" source vo {
        allocation 1000 cpu-seconds;
        member-quota "/CN=alice" 600 cpu-seconds;
        member-quota "/CN=bob" 600 cpu-seconds;
        subject any { allow action start; attr maxcputime max 1000; }
        subject group "admins" { allow action suspend, cancel on jobtag "fusion-prod"; }
    }"#;

    fn cred(dn: &str, groups: &[&str]) -> GridCredential {
        GridCredential::new(dn, Some("fusion"), groups.iter().copied(), u64::MAX).unwrap()
    }

    fn engine() -> JobManager {
        let mut map = GridMapFile::new();
        map.insert("/CN=alice", "alice").unwrap();
        JobManager::new(EngineConfig::default(), map, DynamicAccountPool::new(["dyn1", "dyn2"]).unwrap())
    }

    fn docs() -> (PolicyDocument, PolicyDocument) {
        (parse_policy(RESOURCE).unwrap(), parse_policy(OPEN_VO).unwrap())
    }

    fn profile(runtime: u64) -> SimProfile {
        SimProfile { runtime, memory_peak: 10, disk: 10 }
    }

    #[test]
    fn transition_table() {
        use JobState::*;
        let legal: Vec<(JobState, StateEvent, JobState)> = JobState::ALL
            .iter()
            .flat_map(|s| StateEvent::ALL.iter().filter_map(move |e| transition(*s, *e).map(|t| (*s, *e, t))))
            .collect();
        assert_eq!(legal.len(), 8);
        for s in [Done, Failed, Canceled] {
            assert!(StateEvent::ALL.iter().all(|e| transition(s, *e).is_none()));
        }
        assert_eq!(transition(Pending, StateEvent::Resume), None);
    }

    #[test]
    fn admission_reserves_estimate() {
        let (res, vo) = docs();
        let mode = AuthzMode::Pull(PolicySourceSet::new(&res, Some(&vo)));
        let mut e = engine();
        let a = e
            .gatekeeper_submit(&cred("/CN=alice", &[]), "&(executable=\"/bin/x\")(count=2)(maxcputime=100)", &mode, profile(10))
            .unwrap();
        assert_eq!(a.job.state, JobState::Pending);
        assert_eq!(a.job.reserved, 200);
        assert_eq!(a.job.account, AccountRef::Static("alice".into()));
        assert_eq!(e.ledger().report(), ["vo=fusion used=200/1000", "member=/CN=alice used=200/600"]);
        e.check_conservation().unwrap();
    }

    #[test]
    fn quota_failures_are_atomic() {
        let (res, vo) = docs();
        let mode = AuthzMode::Pull(PolicySourceSet::new(&res, Some(&vo)));
        let mut e = engine();
        e.gatekeeper_submit(&cred("/CN=alice", &[]), "&(maxcputime=600)", &mode, profile(10)).unwrap();
        let before = e.clone();
        let err = e.gatekeeper_submit(&cred("/CN=bob", &[]), "&(maxcputime=500)", &mode, profile(10));
        assert_eq!(err.unwrap_err(), JobError::QuotaExceeded(QuotaScope::Vo));
        assert_eq!(e, before);
    }

    #[test]
    fn empty_pool_leaves_ledger_unchanged() {
        let (res, vo) = docs();
        let mode = AuthzMode::Pull(PolicySourceSet::new(&res, Some(&vo)));
        let mut e = JobManager::new(EngineConfig::default(), GridMapFile::new(), DynamicAccountPool::default());
        let before = e.clone();
        let err = e.gatekeeper_submit(&cred("/CN=zed", &[]), "&(maxcputime=5)", &mode, profile(1));
        assert_eq!(err.unwrap_err(), JobError::NoAccountsAvailable);
        assert_eq!(e, before);
    }

    #[test]
    fn consumption_rate_is_count_per_second() {
        let res = parse_policy(RESOURCE).unwrap();
        let mode = AuthzMode::baseline(&res);
        let mut e = engine();
        let alice = GridCredential::new("/CN=alice", None, Vec::<String>::new(), u64::MAX).unwrap();
        let id = e.gatekeeper_submit(&alice, "&(count=2)", &mode, profile(10)).unwrap().job.id;
        let events = e.tick(5);
        let job = e.job_record(&id).unwrap();
        assert_eq!((job.consumed, job.state, job.ended_at), (10, JobState::Done, Some(5)));
        let lines: Vec<String> = events.iter().map(ToString::to_string).collect();
        assert_eq!(lines, ["t=0 job=job-1 event=activated detail=priority=0", "t=5 job=job-1 event=done detail=consumed=10"]);
    }

    #[test]
    fn priority_orders_activation() {
        let res = parse_policy(RESOURCE).unwrap();
        let mode = AuthzMode::baseline(&res);
        let mut e = engine();
        e.config.max_active = Some(1);
        let alice = GridCredential::new("/CN=alice", None, Vec::<String>::new(), u64::MAX).unwrap();
        let low = e.gatekeeper_submit(&alice, "&(count=1)", &mode, profile(3)).unwrap().job.id;
        let high = e.gatekeeper_submit(&alice, "&(count=1)", &mode, profile(3)).unwrap().job.id;
        e.manage(&high, ManagementCommand::SetPriority(5), &alice, &mode).unwrap();
        e.tick(1);
        assert_eq!(e.job_record(&high).unwrap().state, JobState::Active);
        assert_eq!(e.job_record(&low).unwrap().state, JobState::Pending);
    }

    #[test]
    fn suspended_jobs_do_not_consume() {
        let res = parse_policy(RESOURCE).unwrap();
        let mode = AuthzMode::baseline(&res);
        let mut e = engine();
        let alice = GridCredential::new("/CN=alice", None, Vec::<String>::new(), u64::MAX).unwrap();
        let id = e.gatekeeper_submit(&alice, "&(count=1)", &mode, profile(100)).unwrap().job.id;
        e.tick(3);
        e.manage(&id, ManagementCommand::Suspend, &alice, &mode).unwrap();
        e.tick(50);
        assert_eq!(e.job_record(&id).unwrap().consumed, 3);
        assert_eq!(e.clock(), 53);
        let err = e.manage(&id, ManagementCommand::Suspend, &alice, &mode).unwrap_err();
        assert!(matches!(err, JobError::IllegalTransition { from: JobState::Suspended, .. }));
    }

    #[test]
    fn jobtag_grant_lets_admin_suspend() {
        let (res, vo) = docs();
        let mode = AuthzMode::Pull(PolicySourceSet::new(&res, Some(&vo)));
        let mut e = engine();
        let alice = cred("/CN=alice", &[]);
        let carol = cred("/CN=carol", &["admins"]);
        let tagged = e
            .gatekeeper_submit(&alice, r#"&(maxcputime=100)(jobtag="fusion-prod")"#, &mode, profile(100))
            .unwrap()
            .job
            .id;
        let plain = e.gatekeeper_submit(&alice, "&(maxcputime=100)", &mode, profile(100)).unwrap().job.id;
        e.tick(1);
        let r = e.manage(&tagged, ManagementCommand::Suspend, &carol, &mode).unwrap();
        assert_eq!(r.job.state, JobState::Suspended);
        let err = e.manage(&plain, ManagementCommand::Suspend, &carol, &mode).unwrap_err();
        assert!(matches!(err, JobError::DeniedByPolicy(_)));
        let err = e.manage(&plain, ManagementCommand::Status, &carol, &mode).unwrap_err();
        assert!(matches!(err, JobError::DeniedByPolicy(_)));
        e.manage(&tagged, ManagementCommand::Cancel, &carol, &mode).unwrap();
        let job = e.job_record(&tagged).unwrap();
        assert_eq!((job.state, job.ended_at), (JobState::Canceled, Some(1)));
        e.check_conservation().unwrap();
        assert_eq!(e.job_record("job-99"), Err(JobError::UnknownJob("job-99".into())));
    }

    #[test]
    fn cpu_limit_kill() {
        let (res, vo) = docs();
        let mode = AuthzMode::Pull(PolicySourceSet::new(&res, Some(&vo)));
        let mut e = engine();
        let alice = cred("/CN=alice", &[]);
        let id = e
            .gatekeeper_submit(&alice, "&(count=3)(maxcputime=2)", &mode, profile(100))
            .unwrap()
            .job
            .id;
        let events = e.tick(10);
        let job = e.job_record(&id).unwrap();
        assert_eq!((job.state, job.consumed), (JobState::Failed, 6));
        assert_eq!(events.last().unwrap().detail, "limit=cpu consumed=6");
        assert_eq!(e.ledger().report()[0], "vo=fusion used=6/1000");
        e.check_conservation().unwrap();
    }

    #[test]
    fn dynamic_accounts_are_leased_and_returned() {
        let res = parse_policy(RESOURCE).unwrap();
        let mode = AuthzMode::baseline(&res);
        let mut e = engine();
        let zed = GridCredential::new("/CN=zed", None, Vec::<String>::new(), u64::MAX).unwrap();
        let id = e.gatekeeper_submit(&zed, "&(count=1)", &mode, profile(2)).unwrap().job.id;
        assert_eq!(e.job_record(&id).unwrap().account, AccountRef::Dynamic("dyn1".into()));
        assert_eq!(e.pool().lease("dyn1").unwrap().subject, "/CN=zed");
        e.tick(2);
        assert_eq!(e.pool().free().collect::<Vec<_>>(), ["dyn2", "dyn1"]);
    }

    #[test]
    fn expired_credentials_are_refused() {
        let res = parse_policy(RESOURCE).unwrap();
        let mut e = engine();
        e.config.epoch = 1000;
        let old = GridCredential::new("/CN=alice", None, Vec::<String>::new(), 1000).unwrap();
        let err = e.gatekeeper_submit(&old, "&(count=1)", &AuthzMode::baseline(&res), profile(1));
        assert!(matches!(err, Err(JobError::CredentialExpired(_))));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Submit(usize, u64, u64, bool),
        Manage(usize, usize, u8),
        Tick(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0usize..3, 1u64..4, 1u64..200, any::<bool>()).prop_map(|(w, c, t, tag)| Op::Submit(w, c, t, tag)),
            (0usize..3, 0usize..8, 0u8..5).prop_map(|(w, j, a)| Op::Manage(w, j, a)),
            (1u64..40).prop_map(Op::Tick),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_operations_respect_invariants(ops in prop::collection::vec(op(), 1..40)) {
            let (res, vo) = docs();
            let mode = AuthzMode::Pull(PolicySourceSet::new(&res, Some(&vo)));
            let mut e = engine();
            let who = [cred("/CN=alice", &[]), cred("/CN=bob", &[]), cred("/CN=carol", &["admins"])];
            for op in ops {
                let before: BTreeMap<String, JobState> = e.jobs().map(|j| (j.id.clone(), j.state)).collect();
                match op {
                    Op::Submit(w, count, runtime, tag) => {
                        let tag = if tag { "(jobtag=\"fusion-prod\")" } else { "" };
                        let rsl = format!("&(count={count})(maxcputime=100){tag}");
                        let _ = e.gatekeeper_submit(&who[w], &rsl, &mode, profile(runtime));
                    }
                    Op::Manage(w, j, a) => {
                        let cmd = [
                            ManagementCommand::Cancel,
                            ManagementCommand::Status,
                            ManagementCommand::Suspend,
                            ManagementCommand::Resume,
                            ManagementCommand::SetPriority(3),
                        ][a as usize];
                        let _ = e.manage(&format!("job-{}", j + 1), cmd, &who[w], &mode);
                    }
                    Op::Tick(dt) => { e.tick(dt); }
                }
                for job in e.jobs() {
                    if let Some(prev) = before.get(&job.id) {
                        if *prev != job.state {
                            prop_assert!(!prev.is_terminal(), "{} left terminal {}", job.id, prev);
                        }
                    }
                }
                prop_assert!(e.check_conservation().is_ok(), "{:?}", e.check_conservation());
            }
        }
    }
}
