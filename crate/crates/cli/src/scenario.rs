//! Scenario scripts.
//!
//! One step per line, words split with shell quoting rules, `#` starts a
//! comment line. A step whose last word is `<<TAG` takes the following
//! lines, trimmed, up to a line reading `TAG` as its body.
//!
//! ```text
//! config pool dyn1 dyn2            # also: gridmap DN ACCOUNT, epoch N,
//!                                  #       max-active N, lease-ttl N
//! key fusion <64 hex>
//! load-policy site <<END           # or: load-policy site site.pol
//! ...
//! END
//! load-cred alice subject="/O=Grid/CN=alice" vo=fusion groups=a,b expiry=N
//! issue-cap cap1 policy=fusion cred=alice expiry=N
//! check c1 cred=alice resource=site vo=fusion rsl='&(count=1)'
//! submit s1 cred=alice resource=site cap=cap1 rsl='...' runtime=10
//! manage m1 job=s1 cred=carol resource=site vo=fusion action=suspend
//! tick 5
//! expect s1 outcome ok             # also: expect c1 trace "substring"
//! expect job s1 state done         # also: consumed, reserved, account
//! expect ledger <<END
//! vo=fusion used=0/1000
//! END
//! expect events <<END              # the whole event log, exactly
//! ...
//! END
//! expect clock 5
//! ```
//!
//! Paths are relative to the script's directory. Every labelled step
//! records an outcome code: `ok`, `permit`, `deny`, `denied`,
//! `quota-exceeded(vo)`, `quota-exceeded(member)`, `no-accounts`,
//! `illegal-transition`, `unknown-job`, `credential-expired`,
//! `parse-error`, `invalid-query`, `ledger-error` or
//! `no-applicable-blocks`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use gridauth_core::pdp::{AuthzQuery, PdpError};
use gridauth_core::{
    decide, decide_push, derive_capability, explain, load_credential, parse_policy, parse_rsl, sign_capability,
    AuthzMode, CapabilityToken, DynamicAccountPool, EngineConfig, GridCredential, GridMapFile, JobAction, JobError,
    JobManager, KeyRegistry, ManagementCommand, PolicyDocument, PolicySourceSet, QuotaScope, SimProfile,
};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step {step} (line {line}): {reason}")]
pub struct ScriptError {
    pub step: usize,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectationResult {
    pub step: usize,
    pub line: usize,
    pub text: String,
    pub passed: bool,
    /// What was observed, for failures.
    pub observed: Option<String>,
}

impl fmt::Display for ExpectationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} step {} (line {}): {}", self.step, self.line, self.text)?;
        if let Some(o) = &self.observed {
            write!(f, "\n  observed: {}", o.trim_end().replace('\n', "\n            "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioReport {
    pub results: Vec<ExpectationResult>,
}

impl ScenarioReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Outcome code for a failed job-manager request.
pub fn outcome_code(e: &JobError) -> String {
    match e {
        JobError::Parse(_) => "parse-error".into(),
        JobError::DeniedByPolicy(_) => "denied".into(),
        JobError::QuotaExceeded(QuotaScope::Vo) => "quota-exceeded(vo)".into(),
        JobError::QuotaExceeded(QuotaScope::Member) => "quota-exceeded(member)".into(),
        JobError::NoAccountsAvailable => "no-accounts".into(),
        JobError::IllegalTransition { .. } => "illegal-transition".into(),
        JobError::UnknownJob(_) => "unknown-job".into(),
        JobError::CredentialExpired(_) => "credential-expired".into(),
        JobError::Query(_) => "invalid-query".into(),
        JobError::Ledger(_) => "ledger-error".into(),
    }
}

struct Step {
    line: usize,
    words: Vec<String>,
    body: Option<String>,
}

fn split_steps(text: &str) -> Result<Vec<Step>, ScriptError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut steps = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line_no = i + 1;
        let raw = lines[i].trim();
        i += 1;
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let err = |reason: String| ScriptError {
            step: steps.len() + 1,
            line: line_no,
            reason,
        };
        let mut words = shlex::split(raw).ok_or_else(|| err("unbalanced quotes".into()))?;
        let mut body = None;
        if let Some(tag) = words.last().and_then(|w| w.strip_prefix("<<")).filter(|t| !t.is_empty()) {
            let tag = tag.to_string();
            words.pop();
            let mut text = String::new();
            loop {
                let Some(l) = lines.get(i) else {
                    return Err(err(format!("unterminated <<{tag}")));
                };
                i += 1;
                if l.trim() == tag {
                    break;
                }
                text.push_str(l.trim());
                text.push('\n');
            }
            body = Some(text);
        }
        steps.push(Step {
            line: line_no,
            words,
            body,
        });
    }
    Ok(steps)
}

struct Outcome {
    code: String,
    trace: String,
}

struct Runner<'a> {
    base: &'a Path,
    config: EngineConfig,
    gridmap: GridMapFile,
    pool: Vec<String>,
    engine: Option<JobManager>,
    policies: BTreeMap<String, PolicyDocument>,
    creds: BTreeMap<String, GridCredential>,
    caps: BTreeMap<String, CapabilityToken>,
    keys: KeyRegistry,
    outcomes: BTreeMap<String, Outcome>,
    jobs: BTreeMap<String, String>,
    report: ScenarioReport,
}

type StepResult = Result<(), String>;

fn key_values<'w>(words: &'w [String], allowed: &[&str]) -> Result<BTreeMap<&'w str, &'w str>, String> {
    let mut out = BTreeMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| format!("expected key=value, found '{w}'"))?;
        if !allowed.contains(&k) {
            return Err(format!("unknown key '{k}' (expected one of {})", allowed.join(", ")));
        }
        if out.insert(k, v).is_some() {
            return Err(format!("duplicate key '{k}'"));
        }
    }
    Ok(out)
}

fn required<'m>(kv: &BTreeMap<&str, &'m str>, key: &str) -> Result<&'m str, String> {
    kv.get(key).copied().ok_or_else(|| format!("missing {key}="))
}

fn number<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("{what}: '{s}' is not a number"))
}

fn lookup<'m, T>(map: &'m BTreeMap<String, T>, kind: &str, name: &str) -> Result<&'m T, String> {
    map.get(name).ok_or_else(|| format!("no {kind} named '{name}'"))
}

fn mode<'m>(
    policies: &'m BTreeMap<String, PolicyDocument>,
    caps: &'m BTreeMap<String, CapabilityToken>,
    keys: &'m KeyRegistry,
    kv: &BTreeMap<&str, &str>,
) -> Result<AuthzMode<'m>, String> {
    let resource = lookup(policies, "policy", required(kv, "resource")?)?;
    match (kv.get("vo"), kv.get("cap")) {
        (Some(_), Some(_)) => Err("vo= and cap= are exclusive".into()),
        (None, Some(cap)) => Ok(AuthzMode::Push {
            resource,
            token: lookup(caps, "capability", cap)?,
            registry: keys,
        }),
        (vo, None) => {
            let vo = vo.map(|v| lookup(policies, "policy", v)).transpose()?;
            Ok(AuthzMode::Pull(PolicySourceSet::new(resource, vo)))
        }
    }
}

impl<'a> Runner<'a> {
    fn read(&self, rel: &str) -> Result<String, String> {
        let path = self.base.join(rel);
        fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn source_text(&self, step: &Step, rest: &[String]) -> Result<String, String> {
        match (&step.body, rest) {
            (Some(body), []) => Ok(body.clone()),
            (None, [file]) => self.read(file),
            _ => Err("expected a file name or a <<TAG body".into()),
        }
    }

    fn engine(&mut self) -> Result<&mut JobManager, String> {
        if self.engine.is_none() {
            let pool = DynamicAccountPool::new(self.pool.clone()).map_err(|e| e.to_string())?;
            self.engine = Some(JobManager::new(self.config.clone(), self.gridmap.clone(), pool));
        }
        Ok(self.engine.as_mut().expect("just created"))
    }

    fn label(&mut self, label: &str, outcome: Outcome) -> StepResult {
        if self.outcomes.insert(label.to_string(), outcome).is_some() {
            return Err(format!("label '{label}' used twice"));
        }
        Ok(())
    }

    fn job_id(&self, reference: &str) -> String {
        self.jobs.get(reference).cloned().unwrap_or_else(|| reference.to_string())
    }

    fn config(&mut self, args: &[String]) -> StepResult {
        if self.engine.is_some() {
            return Err("config must precede submit, manage and tick".into());
        }
        match args {
            [what, rest @ ..] if what == "pool" => {
                self.pool.extend(rest.iter().cloned());
                Ok(())
            }
            [what, dn, account] if what == "gridmap" => self.gridmap.insert(dn.clone(), account.clone()).map_err(|e| e.to_string()),
            [what, n] if what == "epoch" => {
                self.config.epoch = number(n, "epoch")?;
                Ok(())
            }
            [what, n] if what == "max-active" => {
                self.config.max_active = Some(number(n, "max-active")?);
                Ok(())
            }
            [what, n] if what == "lease-ttl" => {
                self.config.lease_ttl = number(n, "lease-ttl")?;
                Ok(())
            }
            _ => Err("unknown config form".into()),
        }
    }

    fn load_cred(&mut self, step: &Step, args: &[String]) -> StepResult {
        let [name, rest @ ..] = args else {
            return Err("load-cred needs a name".into());
        };
        let text = if step.body.is_none() && rest.first().is_some_and(|w| w.contains('=')) {
            let kv = key_values(rest, &["subject", "vo", "groups", "expiry"])?;
            kv.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
        } else {
            self.source_text(step, rest)?
        };
        let cred = load_credential(&text).map_err(|e| e.to_string())?;
        self.creds.insert(name.clone(), cred);
        Ok(())
    }

    fn issue_cap(&mut self, args: &[String]) -> StepResult {
        let [name, rest @ ..] = args else {
            return Err("issue-cap needs a name".into());
        };
        let kv = key_values(rest, &["policy", "cred", "expiry"])?;
        let doc = lookup(&self.policies, "policy", required(&kv, "policy")?)?;
        let cred = lookup(&self.creds, "credential", required(&kv, "cred")?)?;
        let expiry = number(required(&kv, "expiry")?, "expiry")?;
        let outcome = match derive_capability(doc, cred, expiry) {
            Ok(claims) => {
                let key = self
                    .keys
                    .get(&claims.vo)
                    .ok_or_else(|| format!("no key for vo '{}'", claims.vo))?;
                let token = sign_capability(key, claims).map_err(|e| e.to_string())?;
                self.caps.insert(name.clone(), token);
                Outcome {
                    code: "ok".into(),
                    trace: String::new(),
                }
            }
            Err(e @ PdpError::NoApplicableBlocks) => Outcome {
                code: "no-applicable-blocks".into(),
                trace: e.to_string(),
            },
            Err(e) => return Err(e.to_string()),
        };
        self.label(name, outcome)
    }

    fn check(&mut self, args: &[String]) -> StepResult {
        let [label, rest @ ..] = args else {
            return Err("check needs a label".into());
        };
        let kv = key_values(rest, &["cred", "resource", "vo", "cap", "rsl", "action", "jobtag", "owner", "job"])?;
        let cred = lookup(&self.creds, "credential", required(&kv, "cred")?)?.clone();
        let action: JobAction = kv
            .get("action")
            .map_or(Ok(JobAction::Start), |a| a.parse())
            .map_err(|e| format!("{e}"))?;
        let mut jobtag = kv.get("jobtag").map(|s| s.to_string());
        let mut owner = kv.get("owner").map(|s| s.to_string());
        if let Some(job) = kv.get("job") {
            let rec = self
                .engine
                .as_ref()
                .ok_or("no jobs submitted yet")?
                .job_record(&self.job_id(job))
                .map_err(|e| e.to_string())?;
            jobtag = rec.jobtag;
            owner = Some(rec.owner);
        }
        let request = kv
            .get("rsl")
            .map(|r| parse_rsl(r))
            .transpose()
            .map_err(|e| format!("rsl: {e}"))?;
        let now = self.engine.as_ref().map_or(self.config.epoch, JobManager::now);
        let q = AuthzQuery {
            credential: cred,
            action,
            target: self.config.resource.clone(),
            request,
            jobtag,
            job_owner: owner,
        };
        let decision = match mode(&self.policies, &self.caps, &self.keys, &kv)? {
            AuthzMode::Pull(sources) => decide(&q, &sources),
            AuthzMode::Push {
                resource,
                token,
                registry,
            } => decide_push(&q, resource, token, registry, now),
        };
        let outcome = match decision {
            Ok(d) => Outcome {
                code: d.effect.to_string(),
                trace: explain(&d),
            },
            Err(e) => Outcome {
                code: "invalid-query".into(),
                trace: e.to_string(),
            },
        };
        self.label(label, outcome)
    }

    fn submit(&mut self, args: &[String]) -> StepResult {
        let [label, rest @ ..] = args else {
            return Err("submit needs a label".into());
        };
        let kv = key_values(rest, &["cred", "resource", "vo", "cap", "rsl", "runtime", "memory", "disk"])?;
        let cred = lookup(&self.creds, "credential", required(&kv, "cred")?)?.clone();
        let rsl = required(&kv, "rsl")?;
        let num = |k: &str, default: u64| kv.get(k).map_or(Ok(default), |v| number(v, k));
        let profile = SimProfile {
            runtime: num("runtime", 60)?,
            memory_peak: num("memory", 0)?,
            disk: num("disk", 0)?,
        };
        self.engine()?;
        let m = mode(&self.policies, &self.caps, &self.keys, &kv)?;
        let engine = self.engine.as_mut().expect("created above");
        let outcome = match engine.gatekeeper_submit(&cred, rsl, &m, profile) {
            Ok(adm) => {
                self.jobs.insert(label.clone(), adm.job.id.clone());
                Outcome {
                    code: "ok".into(),
                    trace: explain(&adm.decision),
                }
            }
            Err(e) => error_outcome(&e),
        };
        self.label(label, outcome)
    }

    fn manage(&mut self, args: &[String]) -> StepResult {
        let [label, rest @ ..] = args else {
            return Err("manage needs a label".into());
        };
        let kv = key_values(rest, &["job", "cred", "resource", "vo", "cap", "action", "priority"])?;
        let cred = lookup(&self.creds, "credential", required(&kv, "cred")?)?.clone();
        let action: JobAction = required(&kv, "action")?.parse().map_err(|e| format!("{e}"))?;
        let command = management_command(action, kv.get("priority").map(|p| number(p, "priority")).transpose()?)?;
        let id = self.job_id(required(&kv, "job")?);
        self.engine()?;
        let m = mode(&self.policies, &self.caps, &self.keys, &kv)?;
        let engine = self.engine.as_mut().expect("created above");
        let outcome = match engine.manage(&id, command, &cred, &m) {
            Ok(r) => Outcome {
                code: "ok".into(),
                trace: explain(&r.decision),
            },
            Err(e) => error_outcome(&e),
        };
        self.label(label, outcome)
    }

    fn expect(&mut self, step: &Step, args: &[String]) -> Result<(bool, Option<String>), String> {
        let joined_body = |body: &Option<String>| body.clone().ok_or_else(|| "expected a <<TAG body".to_string());
        match args {
            [what] if what == "ledger" => {
                let want = joined_body(&step.body)?;
                let got: String = self
                    .engine
                    .as_ref()
                    .map(|e| e.ledger().report())
                    .unwrap_or_default()
                    .iter()
                    .map(|l| format!("{l}\n"))
                    .collect();
                Ok((got == want, Some(got)))
            }
            [what, rest @ ..] if what == "events" => {
                let want = match rest {
                    [file] if step.body.is_none() => self.read(file)?,
                    [] => joined_body(&step.body)?,
                    _ => return Err("expect events takes a file or a <<TAG body".into()),
                };
                let got: String = self
                    .engine
                    .as_ref()
                    .map(|e| e.events().iter().map(|ev| format!("{ev}\n")).collect())
                    .unwrap_or_default();
                Ok((got == want, Some(got)))
            }
            [what, n] if what == "clock" => {
                let want: u64 = number(n, "clock")?;
                let got = self.engine.as_ref().map_or(0, JobManager::clock);
                Ok((got == want, Some(got.to_string())))
            }
            [what, label, field, value] if what == "job" => {
                let id = self
                    .jobs
                    .get(label)
                    .ok_or_else(|| format!("no admitted job labelled '{label}'"))?;
                let job = self
                    .engine
                    .as_ref()
                    .expect("jobs imply an engine")
                    .job_record(id)
                    .map_err(|e| e.to_string())?;
                let got = match field.as_str() {
                    "state" => job.state.to_string(),
                    "consumed" => job.consumed.to_string(),
                    "reserved" => job.reserved.to_string(),
                    "account" => job.account.name().to_string(),
                    "priority" => job.priority.to_string(),
                    other => return Err(format!("unknown job field '{other}'")),
                };
                Ok((&got == value, Some(got)))
            }
            [label, what, value] if what == "outcome" => {
                let o = self.outcomes.get(label).ok_or_else(|| format!("no earlier step labelled '{label}'"))?;
                Ok((&o.code == value, Some(o.code.clone())))
            }
            [label, what, needle] if what == "trace" => {
                let o = self.outcomes.get(label).ok_or_else(|| format!("no earlier step labelled '{label}'"))?;
                Ok((o.trace.contains(needle.as_str()), Some(o.trace.clone())))
            }
            _ => Err("unknown expect form".into()),
        }
    }

    fn run_step(&mut self, step: &Step, index: usize) -> StepResult {
        let (cmd, args) = step.words.split_first().ok_or("empty step")?;
        if step.body.is_some() && !matches!(cmd.as_str(), "load-policy" | "load-cred" | "expect") {
            return Err(format!("'{cmd}' does not take a body"));
        }
        match cmd.as_str() {
            "config" => self.config(args),
            "key" => match args {
                [vo, hex_key] => {
                    let reg = KeyRegistry::parse(&format!("{vo} {hex_key}\n")).map_err(|e| e.to_string())?;
                    self.keys.insert(vo.clone(), *reg.get(vo).expect("just parsed"));
                    Ok(())
                }
                _ => Err("key takes a vo and a 64-digit hex key".into()),
            },
            "load-policy" => {
                let [name, rest @ ..] = args else {
                    return Err("load-policy needs a name".into());
                };
                let doc = parse_policy(&self.source_text(step, rest)?).map_err(|e| e.to_string())?;
                self.policies.insert(name.clone(), doc);
                Ok(())
            }
            "load-cred" => self.load_cred(step, args),
            "issue-cap" => self.issue_cap(args),
            "check" => self.check(args),
            "submit" => self.submit(args),
            "manage" => self.manage(args),
            "tick" => match args {
                [n] => {
                    let dt: u64 = number(n, "tick")?;
                    if dt == 0 {
                        return Err("tick needs a positive duration".into());
                    }
                    self.engine()?.tick(dt);
                    Ok(())
                }
                _ => Err("tick takes one duration".into()),
            },
            "expect" => {
                let (passed, observed) = self.expect(step, args)?;
                let mut text = step.words.join(" ");
                if let Some(body) = &step.body {
                    text.push_str(" <<");
                    for l in body.lines() {
                        text.push_str("\n  ");
                        text.push_str(l);
                    }
                }
                self.report.results.push(ExpectationResult {
                    step: index,
                    line: step.line,
                    text,
                    passed,
                    observed: if passed { None } else { observed },
                });
                Ok(())
            }
            other => Err(format!("unknown step '{other}'")),
        }
    }
}

fn error_outcome(e: &JobError) -> Outcome {
    Outcome {
        code: outcome_code(e),
        trace: match e {
            JobError::DeniedByPolicy(d) => explain(d),
            other => other.to_string(),
        },
    }
}

/// Maps a management action and optional priority onto a command.
pub fn management_command(action: JobAction, priority: Option<i64>) -> Result<ManagementCommand, String> {
    let command = match action {
        JobAction::Start => return Err("start is not a management action".into()),
        JobAction::Cancel => ManagementCommand::Cancel,
        JobAction::Status => ManagementCommand::Status,
        JobAction::Suspend => ManagementCommand::Suspend,
        JobAction::Resume => ManagementCommand::Resume,
        JobAction::SetPriority => {
            return priority
                .map(ManagementCommand::SetPriority)
                .ok_or_else(|| "set_priority needs a priority".into())
        }
    };
    if priority.is_some() {
        return Err(format!("a priority only applies to set_priority, not {action}"));
    }
    Ok(command)
}

/// Runs a script. Paths in it resolve against `base`.
pub fn run_scenario(text: &str, base: &Path) -> Result<ScenarioReport, ScriptError> {
    let steps = split_steps(text)?;
    let mut runner = Runner {
        base,
        config: EngineConfig::default(),
        gridmap: GridMapFile::new(),
        pool: Vec::new(),
        engine: None,
        policies: BTreeMap::new(),
        creds: BTreeMap::new(),
        caps: BTreeMap::new(),
        keys: KeyRegistry::new(),
        outcomes: BTreeMap::new(),
        jobs: BTreeMap::new(),
        report: ScenarioReport::default(),
    };
    for (i, step) in steps.iter().enumerate() {
        runner.run_step(step, i + 1).map_err(|reason| ScriptError {
            step: i + 1,
            line: step.line,
            reason,
        })?;
    }
    Ok(runner.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> Result<ScenarioReport, ScriptError> {
        run_scenario(text, Path::new("."))
    }

    #[test]
    fn empty_script_passes() {
        let r = run("# nothing\n\n").unwrap();
        assert!(r.results.is_empty() && r.all_passed());
        assert_eq!(r.to_string(), "");
    }

    #[test]
    fn failing_expectation_is_pinpointed() {
        let r = run("tick 3\nexpect clock 3\nexpect clock 4\n").unwrap();
        assert!(!r.all_passed());
        assert!(r.results[0].passed);
        let fail = &r.results[1];
        assert_eq!((fail.step, fail.line, fail.passed), (3, 3, false));
        assert_eq!(fail.to_string(), "FAIL step 3 (line 3): expect clock 4\n  observed: 3");
    }

    #[test]
    fn script_errors_name_the_step() {
        let e = run("tick 1\n\nexpect nothing outcome ok\n").unwrap_err();
        assert_eq!((e.step, e.line), (2, 3));
        assert!(e.reason.contains("no earlier step"), "{e}");
        assert!(run("load-policy p <<END\npolicy").unwrap_err().reason.contains("unterminated"));
        assert!(run("frobnicate").is_err());
        assert!(run("tick 1\nconfig epoch 5").is_err());
    }

    #[test]
    fn small_flow() {
        let script = r#"
            config pool dyn1
            load-policy site <<END
            policy "site" source resource { subject any { allow action start, status; } }
            END
            load-cred ann subject="/O=Grid/CN=ann" expiry=100
            submit s1 cred=ann resource=site rsl='&(count=2)' runtime=4
            expect s1 outcome ok
            expect job s1 account dyn1
            tick 2
            expect job s1 state done
            manage m1 job=s1 cred=ann resource=site action=resume
            expect m1 outcome illegal-transition
            check c1 cred=ann resource=site job=s1 action=cancel
            expect c1 outcome permit
            expect c1 trace builtin-owner
            expect events <<END
            t=0 job=job-1 event=submitted detail=owner=/O=Grid/CN=ann account=dyn1 reserved=86400
            t=0 job=job-1 event=activated detail=priority=0
            t=2 job=job-1 event=done detail=consumed=4
            END
        "#;
        let r = run(script).unwrap();
        assert!(r.all_passed(), "{r}");
    }
}
