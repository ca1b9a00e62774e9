use std::fs;
use std::io::Write;
use std::path::Path;

use gridauth_core::pdp::AuthzQuery;
use gridauth_core::{
    decide, decide_push, derive_capability, explain, load_credential, parse_policy, parse_rsl, sign_capability,
    AuthzMode, CapabilityToken, Decision, DynamicAccountPool, EngineConfig, GridCredential, GridMapFile, JobError,
    JobManager, KeyRegistry, PdpError, PolicyDocument, PolicySource, PolicySourceSet, SimProfile,
};

use crate::args::{CheckArgs, Command, EngineArgs, IssueCapArgs, ManageArgs, PolicyArgs, StateArgs, SubmitArgs, TickArgs};
use crate::scenario::{management_command, run_scenario};
use crate::state::StateFile;
use crate::{CliError, EXIT_DENIED, EXIT_OK};

type CmdResult = Result<i32, CliError>;

pub(crate) fn dispatch(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Check(a) => check(a, out),
        Command::Submit(a) => submit(a, out),
        Command::Manage(a) => manage(a, out),
        Command::Tick(a) => tick(a, out),
        Command::Ledger(a) => ledger(a, out),
        Command::IssueCap(a) => issue_cap(a, out),
        Command::Scenario(a) => {
            let text = read(&a.script)?;
            let base = a.script.parent().unwrap_or(Path::new("."));
            let report = run_scenario(&text, base).map_err(|e| CliError::Input(format!("{}: {e}", a.script.display())))?;
            write!(out, "{report}")?;
            Ok(if report.all_passed() { EXIT_OK } else { EXIT_DENIED })
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_policy(path: &Path, source: PolicySource) -> Result<PolicyDocument, CliError> {
    let doc = parse_policy(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if doc.source != source {
        return Err(CliError::Input(format!(
            "{}: expected a {source} policy, found {}",
            path.display(),
            doc.source
        )));
    }
    Ok(doc)
}

fn load_cred(path: &Path) -> Result<GridCredential, CliError> {
    load_credential(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_keys(path: &Path) -> Result<KeyRegistry, CliError> {
    KeyRegistry::parse(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

struct Policies {
    resource: PolicyDocument,
    vo: Option<PolicyDocument>,
    cap: Option<(CapabilityToken, KeyRegistry)>,
}

impl Policies {
    fn load(a: &PolicyArgs) -> Result<Self, CliError> {
        let cap = match (&a.cap, &a.keys) {
            (Some(cap), Some(keys)) => {
                let token = CapabilityToken::parse(&read(cap)?)
                    .map_err(|e| CliError::Input(format!("{}: {e}", cap.display())))?;
                Some((token, load_keys(keys)?))
            }
            (None, Some(_)) => return Err(CliError::Input("--keys only applies with --cap".into())),
            _ => None,
        };
        Ok(Policies {
            resource: load_policy(&a.resource_policy, PolicySource::Resource)?,
            vo: a.vo_policy.as_deref().map(|p| load_policy(p, PolicySource::Vo)).transpose()?,
            cap,
        })
    }

    fn mode(&self) -> AuthzMode<'_> {
        match &self.cap {
            Some((token, registry)) => AuthzMode::Push {
                resource: &self.resource,
                token,
                registry,
            },
            None => AuthzMode::Pull(PolicySourceSet::new(&self.resource, self.vo.as_ref())),
        }
    }
}

fn denial(d: &Decision) -> String {
    d.first_denial()
        .map_or_else(|| "no permitting block".to_string(), ToString::to_string)
}

fn job_error(e: JobError) -> CliError {
    match e {
        JobError::DeniedByPolicy(d) => CliError::Denied(denial(&d)),
        e @ (JobError::QuotaExceeded(_)
        | JobError::NoAccountsAvailable
        | JobError::IllegalTransition { .. }
        | JobError::CredentialExpired(_)) => CliError::Denied(e.to_string()),
        e @ (JobError::Parse(_) | JobError::UnknownJob(_) | JobError::Query(_) | JobError::Ledger(_)) => {
            CliError::Input(e.to_string())
        }
    }
}

fn check(a: CheckArgs, out: &mut dyn Write) -> CmdResult {
    let policies = Policies::load(&a.policy)?;
    let cred = load_cred(&a.cred)?;
    let request = match &a.rsl {
        Some(p) => Some(parse_rsl(&read(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?),
        None => None,
    };
    if cred.is_expired(a.now) {
        return Err(CliError::Denied(format!("credential for '{}' has expired", cred.subject)));
    }
    let q = AuthzQuery {
        credential: cred,
        action: a.action,
        target: EngineConfig::default().resource,
        request,
        jobtag: a.jobtag,
        job_owner: a.owner,
    };
    let decision = match policies.mode() {
        AuthzMode::Pull(sources) => decide(&q, &sources),
        AuthzMode::Push {
            resource,
            token,
            registry,
        } => decide_push(&q, resource, token, registry, a.now),
    }
    .map_err(|e| CliError::Input(e.to_string()))?;
    if a.explain {
        write!(out, "{}", explain(&decision))?;
    } else {
        writeln!(out, "decision: {}", decision.effect)?;
    }
    Ok(if decision.is_permit() { EXIT_OK } else { EXIT_DENIED })
}

fn new_engine(a: &EngineArgs) -> Result<JobManager, CliError> {
    let gridmap = match &a.gridmap {
        Some(p) => GridMapFile::parse(&read(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => GridMapFile::new(),
    };
    let pool = DynamicAccountPool::new(a.pool.clone().unwrap_or_default())
        .map_err(|e| CliError::Input(format!("--pool: {e}")))?;
    let mut config = EngineConfig::default();
    if let Some(e) = a.epoch {
        config.epoch = e;
    }
    if let Some(t) = a.lease_ttl {
        config.lease_ttl = t;
    }
    config.max_active = a.max_active;
    Ok(JobManager::new(config, gridmap, pool))
}

fn open_existing(a: &StateArgs) -> Result<(StateFile, JobManager), CliError> {
    let file = StateFile::lock(&a.state)?;
    let engine = file.load()?;
    Ok((file, engine))
}

fn submit(a: SubmitArgs, out: &mut dyn Write) -> CmdResult {
    let policies = Policies::load(&a.policy)?;
    let cred = load_cred(&a.cred)?;
    let rsl = read(&a.rsl)?;
    let file = StateFile::lock(&a.state.state)?;
    let mut engine = if file.exists() {
        if a.engine.any() {
            return Err(CliError::Input(
                "--gridmap, --pool, --epoch, --max-active and --lease-ttl only apply when creating a state file".into(),
            ));
        }
        file.load()?
    } else {
        new_engine(&a.engine)?
    };
    let profile = SimProfile {
        runtime: a.runtime,
        memory_peak: a.memory,
        disk: a.disk,
    };
    match engine.gatekeeper_submit(&cred, &rsl, &policies.mode(), profile) {
        Ok(adm) => {
            if a.explain {
                write!(out, "{}", explain(&adm.decision))?;
            }
            file.save(&engine)?;
            writeln!(out, "job={} state={} reserved={}", adm.job.id, adm.job.state, adm.job.reserved)?;
            Ok(EXIT_OK)
        }
        Err(e) => {
            if let (true, JobError::DeniedByPolicy(d)) = (a.explain, &e) {
                write!(out, "{}", explain(d))?;
            }
            Err(job_error(e))
        }
    }
}

fn manage(a: ManageArgs, out: &mut dyn Write) -> CmdResult {
    let policies = Policies::load(&a.policy)?;
    let cred = load_cred(&a.cred)?;
    let command = management_command(a.action, a.priority).map_err(CliError::Input)?;
    let (file, mut engine) = open_existing(&a.state)?;
    match engine.manage(&a.job, command, &cred, &policies.mode()) {
        Ok(r) => {
            if a.explain {
                write!(out, "{}", explain(&r.decision))?;
            }
            file.save(&engine)?;
            writeln!(out, "job={} state={}", r.job.id, r.job.state)?;
            Ok(EXIT_OK)
        }
        Err(e) => {
            if let (true, JobError::DeniedByPolicy(d)) = (a.explain, &e) {
                write!(out, "{}", explain(d))?;
            }
            Err(job_error(e))
        }
    }
}

fn tick(a: TickArgs, out: &mut dyn Write) -> CmdResult {
    let (file, mut engine) = open_existing(&a.state)?;
    let events = engine.tick(a.dt);
    file.save(&engine)?;
    for e in events {
        writeln!(out, "{e}")?;
    }
    writeln!(out, "clock={}", engine.clock())?;
    Ok(EXIT_OK)
}

fn ledger(a: StateArgs, out: &mut dyn Write) -> CmdResult {
    let (_file, engine) = open_existing(&a)?;
    for line in engine.ledger().report() {
        writeln!(out, "{line}")?;
    }
    Ok(EXIT_OK)
}

fn issue_cap(a: IssueCapArgs, out: &mut dyn Write) -> CmdResult {
    let doc = load_policy(&a.vo_policy, PolicySource::Vo)?;
    let cred = load_cred(&a.cred)?;
    let keys = load_keys(&a.keys)?;
    let claims = derive_capability(&doc, &cred, a.expiry).map_err(|e| match e {
        PdpError::NoApplicableBlocks => CliError::Denied(format!("{e} for '{}'", cred.subject)),
        other => CliError::Input(other.to_string()),
    })?;
    let key = keys
        .get(&claims.vo)
        .ok_or_else(|| CliError::Input(format!("{}: no key for vo '{}'", a.keys.display(), claims.vo)))?;
    let token = sign_capability(key, claims).map_err(|e| CliError::Input(e.to_string()))?;
    match &a.out {
        Some(path) => fs::write(path, token.to_file_string())
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        None => write!(out, "{}", token.to_file_string())?,
    }
    Ok(EXIT_OK)
}
