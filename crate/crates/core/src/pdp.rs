//! Policy decision point.
//!
//! Within one policy source a request is permitted when any applicable
//! block permits it, and a source with no applicable block denies. Across
//! sources any denial wins: the resource policy is always consulted, and
//! the VO policy whenever the credential names a VO. Management requests
//! from the job's owner are always permitted (`builtin-owner`).

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::credential::{verify_capability, CapabilityClaims, CapabilityError, CapabilityToken, GridCredential, KeyRegistry};
use crate::policy::{applicable_blocks, Assertion, PolicyDocument, PolicySource, SpecMatch, SubjectBlock, ValueSpec};
use crate::rsl::{JobAction, RslRequest, RslValue};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PdpError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid policy sources: {0}")]
    InvalidSources(String),
    #[error("credential has no vo")]
    NoVo,
    #[error("no applicable blocks for subject")]
    NoApplicableBlocks,
}

/// An authorization request: who, what action, on which target, and the
/// job description (start) or the job's jobtag and owner (management).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthzQuery {
    pub credential: GridCredential,
    pub action: JobAction,
    pub target: String,
    pub request: Option<RslRequest>,
    pub jobtag: Option<String>,
    pub job_owner: Option<String>,
}

impl AuthzQuery {
    pub fn start(credential: GridCredential, target: impl Into<String>, request: RslRequest) -> Self {
        AuthzQuery {
            credential,
            action: JobAction::Start,
            target: target.into(),
            request: Some(request),
            jobtag: None,
            job_owner: None,
        }
    }

    pub fn manage(
        credential: GridCredential,
        target: impl Into<String>,
        action: JobAction,
        jobtag: Option<String>,
        job_owner: impl Into<String>,
    ) -> Self {
        AuthzQuery {
            credential,
            action,
            target: target.into(),
            request: None,
            jobtag,
            job_owner: Some(job_owner.into()),
        }
    }

    pub fn validate(&self) -> Result<(), PdpError> {
        match (self.action, &self.request) {
            (JobAction::Start, None) => Err(PdpError::InvalidQuery("start requires a job description".into())),
            (JobAction::Start, Some(_)) => Ok(()),
            (a, Some(_)) => Err(PdpError::InvalidQuery(format!("'{a}' must not carry a job description"))),
            (_, None) => Ok(()),
        }
    }

    fn is_owner_management(&self) -> bool {
        self.action.is_management() && self.job_owner.as_deref() == Some(self.credential.subject.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    Permit,
    Deny,
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effect::Permit => "permit",
            Effect::Deny => "deny",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssertionKind {
    MayContain,
    MustContain,
    MustNotContain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationCause {
    Missing,
    Present,
    /// The value is outside the allowed spec.
    ValueFails { value: String, spec: String },
    /// The value matches a forbidden spec.
    ValueForbidden { value: String, spec: String },
    TypeMismatch { value: String, spec: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: AssertionKind,
    pub attr: String,
    pub cause: ViolationCause,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.kind {
            AssertionKind::MayContain => "attr",
            AssertionKind::MustContain => "require attr",
            AssertionKind::MustNotContain => "forbid attr",
        };
        write!(f, "{prefix} '{}' ", self.attr)?;
        match &self.cause {
            ViolationCause::Missing => f.write_str("missing"),
            ViolationCause::Present => f.write_str("present"),
            ViolationCause::ValueFails { value, spec } => write!(f, "value {value} fails {spec}"),
            ViolationCause::ValueForbidden { value, spec } => write!(f, "value {value} matches {spec}"),
            ViolationCause::TypeMismatch { value, spec } => {
                write!(f, "value {value} is not an integer ({spec})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssertionOutcome {
    Satisfied,
    Violated(Violation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenyReason {
    ActionNotAllowed(JobAction),
    JobtagNotGranted { action: JobAction, jobtag: Option<String> },
    Assertion(Violation),
    ClosedWorld(String),
    NoApplicableBlock,
    MissingVoPolicy(String),
    UntrustedVo(String),
    AccountingRequiresMaxcputime,
    Capability(CapabilityError),
    InvalidCapability(String),
    SubjectMismatch,
    VoMismatch,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::ActionNotAllowed(a) => write!(f, "action '{a}' not allowed"),
            DenyReason::JobtagNotGranted { action, jobtag: Some(t) } => {
                write!(f, "jobtag '{t}' not granted for '{action}'")
            }
            DenyReason::JobtagNotGranted { action, jobtag: None } => {
                write!(f, "untagged job; '{action}' granted only on jobtags")
            }
            DenyReason::Assertion(v) => write!(f, "{v}"),
            DenyReason::ClosedWorld(a) => write!(f, "closed-world rejects attribute '{a}'"),
            DenyReason::NoApplicableBlock => f.write_str("no applicable block"),
            DenyReason::MissingVoPolicy(vo) => write!(f, "no policy document for vo '{vo}'"),
            DenyReason::UntrustedVo(vo) => write!(f, "vo '{vo}' not trusted by resource"),
            DenyReason::AccountingRequiresMaxcputime => f.write_str("accounting-requires-maxcputime"),
            DenyReason::Capability(e) => write!(f, "capability rejected: {e}"),
            DenyReason::InvalidCapability(m) => write!(f, "invalid capability: {m}"),
            DenyReason::SubjectMismatch => f.write_str("subject-mismatch"),
            DenyReason::VoMismatch => f.write_str("vo-mismatch"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockDecision {
    Permit,
    Deny(DenyReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSource {
    Resource,
    Vo,
    BuiltinOwner,
    Capability,
}

impl TraceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceSource::Resource => "resource",
            TraceSource::Vo => "vo",
            TraceSource::BuiltinOwner => "builtin-owner",
            TraceSource::Capability => "capability",
        }
    }
}

impl From<PolicySource> for TraceSource {
    fn from(s: PolicySource) -> Self {
        match s {
            PolicySource::Resource => TraceSource::Resource,
            PolicySource::Vo => TraceSource::Vo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub source: TraceSource,
    pub block: Option<usize>,
    pub effect: Effect,
    pub reason: Option<DenyReason>,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.source.as_str())?;
        if let Some(i) = self.block {
            write!(f, "/block[{i}]")?;
        }
        write!(f, ": {}", self.effect)?;
        if let Some(reason) = &self.reason {
            write!(f, " — {reason}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub effect: Effect,
    pub trace: Vec<TraceEntry>,
    /// `count × maxcputime` for start requests that declare a cpu time.
    pub charged_estimate: Option<u64>,
}

impl Decision {
    pub fn is_permit(&self) -> bool {
        self.effect == Effect::Permit
    }

    fn deny(source: TraceSource, reason: DenyReason) -> Self {
        Decision {
            effect: Effect::Deny,
            trace: vec![TraceEntry {
                source,
                block: None,
                effect: Effect::Deny,
                reason: Some(reason),
            }],
            charged_estimate: None,
        }
    }

    fn builtin_owner() -> Self {
        Decision {
            effect: Effect::Permit,
            trace: vec![TraceEntry {
                source: TraceSource::BuiltinOwner,
                block: None,
                effect: Effect::Permit,
                reason: None,
            }],
            charged_estimate: None,
        }
    }

    /// Indices of the blocks of `source` that permitted the request.
    pub fn permitting_blocks(&self, source: TraceSource) -> Vec<usize> {
        self.trace
            .iter()
            .filter(|e| e.source == source && e.effect == Effect::Permit)
            .filter_map(|e| e.block)
            .collect()
    }

    /// First denial recorded in the trace.
    pub fn first_denial(&self) -> Option<&TraceEntry> {
        self.trace.iter().find(|e| e.effect == Effect::Deny)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicySourceSet<'a> {
    pub resource: &'a PolicyDocument,
    pub vo: Option<&'a PolicyDocument>,
}

impl<'a> PolicySourceSet<'a> {
    pub fn new(resource: &'a PolicyDocument, vo: Option<&'a PolicyDocument>) -> Self {
        PolicySourceSet { resource, vo }
    }

    fn check(&self) -> Result<(), PdpError> {
        if self.resource.source != PolicySource::Resource {
            return Err(PdpError::InvalidSources("resource document must have source resource".into()));
        }
        if self.vo.is_some_and(|v| v.source != PolicySource::Vo) {
            return Err(PdpError::InvalidSources("vo document must have source vo".into()));
        }
        Ok(())
    }
}

fn may_violation(attr: &str, value: &RslValue, specs: &[&ValueSpec]) -> Violation {
    let spec = specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" or ");
    let mismatch = specs.iter().all(|s| s.check(value) == SpecMatch::TypeMismatch);
    Violation {
        kind: AssertionKind::MayContain,
        attr: attr.to_string(),
        cause: if mismatch {
            ViolationCause::TypeMismatch {
                value: value.to_string(),
                spec,
            }
        } else {
            ViolationCause::ValueFails {
                value: value.to_string(),
                spec,
            }
        },
    }
}

/// Evaluates one assertion. For `MayContain` this is the membership test
/// of a single spec; absent attributes satisfy it.
pub fn eval_assertion(a: &Assertion, req: &RslRequest) -> AssertionOutcome {
    let violated = |kind, attr: &str, cause| {
        AssertionOutcome::Violated(Violation {
            kind,
            attr: attr.to_string(),
            cause,
        })
    };
    match a {
        Assertion::MayContain(attr, spec) => match req.get(attr) {
            None => AssertionOutcome::Satisfied,
            Some(v) if spec.matches(v) => AssertionOutcome::Satisfied,
            Some(v) => AssertionOutcome::Violated(may_violation(attr, v, &[spec])),
        },
        Assertion::MustContain(attr, spec) => match (req.get(attr), spec) {
            (None, _) => violated(AssertionKind::MustContain, attr, ViolationCause::Missing),
            (Some(_), None) => AssertionOutcome::Satisfied,
            (Some(v), Some(spec)) => match spec.check(v) {
                SpecMatch::Match => AssertionOutcome::Satisfied,
                SpecMatch::NoMatch => violated(
                    AssertionKind::MustContain,
                    attr,
                    ViolationCause::ValueFails {
                        value: v.to_string(),
                        spec: spec.to_string(),
                    },
                ),
                SpecMatch::TypeMismatch => violated(
                    AssertionKind::MustContain,
                    attr,
                    ViolationCause::TypeMismatch {
                        value: v.to_string(),
                        spec: spec.to_string(),
                    },
                ),
            },
        },
        Assertion::MustNotContain(attr, spec) => match (req.get(attr), spec) {
            (None, _) => AssertionOutcome::Satisfied,
            (Some(_), None) => violated(AssertionKind::MustNotContain, attr, ViolationCause::Present),
            (Some(v), Some(spec)) => match spec.check(v) {
                SpecMatch::Match => violated(
                    AssertionKind::MustNotContain,
                    attr,
                    ViolationCause::ValueForbidden {
                        value: v.to_string(),
                        spec: spec.to_string(),
                    },
                ),
                // A value the forbidden spec cannot even type-check is not
                // forbidden by it.
                SpecMatch::NoMatch | SpecMatch::TypeMismatch => AssertionOutcome::Satisfied,
            },
        },
    }
}

/// Evaluates a block already known to apply to the query's credential.
///
/// Start requests check, in order: the action, each assertion in
/// declaration order (all may-contain specs for one attribute are tested
/// together, as a union, at the position of the first), then closed-world.
pub fn eval_block(b: &SubjectBlock, q: &AuthzQuery) -> BlockDecision {
    if !b.allowed_actions.contains(&q.action) {
        return BlockDecision::Deny(DenyReason::ActionNotAllowed(q.action));
    }
    if q.action.is_management() {
        return match b.jobtag_grants.get(&q.action) {
            None => BlockDecision::Permit,
            Some(tags) if q.jobtag.as_ref().is_some_and(|t| tags.contains(t)) => BlockDecision::Permit,
            Some(_) => BlockDecision::Deny(DenyReason::JobtagNotGranted {
                action: q.action,
                jobtag: q.jobtag.clone(),
            }),
        };
    }
    let Some(req) = &q.request else {
        return BlockDecision::Deny(DenyReason::NoApplicableBlock);
    };

    let mut unioned: BTreeSet<&str> = BTreeSet::new();
    for a in &b.assertions {
        match a {
            Assertion::MayContain(attr, _) => {
                if !unioned.insert(attr) {
                    continue;
                }
                let Some(value) = req.get(attr) else { continue };
                let specs: Vec<&ValueSpec> = b
                    .assertions
                    .iter()
                    .filter_map(|x| match x {
                        Assertion::MayContain(n, s) if n == attr => Some(s),
                        _ => None,
                    })
                    .collect();
                if !specs.iter().any(|s| s.matches(value)) {
                    return BlockDecision::Deny(DenyReason::Assertion(may_violation(attr, value, &specs)));
                }
            }
            other => {
                if let AssertionOutcome::Violated(v) = eval_assertion(other, req) {
                    return BlockDecision::Deny(DenyReason::Assertion(v));
                }
            }
        }
    }

    if b.closed_world {
        let allowed = b.named_attributes();
        if let Some(extra) = req.names().find(|n| !allowed.contains(n)) {
            return BlockDecision::Deny(DenyReason::ClosedWorld(extra.to_string()));
        }
    }
    BlockDecision::Permit
}

fn eval_source(doc: &PolicyDocument, q: &AuthzQuery, trace: &mut Vec<TraceEntry>) -> bool {
    let source = TraceSource::from(doc.source);
    let blocks = applicable_blocks(doc, &q.credential);
    if blocks.is_empty() {
        trace.push(TraceEntry {
            source,
            block: None,
            effect: Effect::Deny,
            reason: Some(DenyReason::NoApplicableBlock),
        });
        return false;
    }
    let mut permitted = false;
    for (i, block) in blocks {
        let (effect, reason) = match eval_block(block, q) {
            BlockDecision::Permit => (Effect::Permit, None),
            BlockDecision::Deny(r) => (Effect::Deny, Some(r)),
        };
        permitted |= effect == Effect::Permit;
        trace.push(TraceEntry {
            source,
            block: Some(i),
            effect,
            reason,
        });
    }
    permitted
}

/// Decides `q` against the resource policy and, when the credential
/// names a VO, that VO's policy.
pub fn decide(q: &AuthzQuery, s: &PolicySourceSet<'_>) -> Result<Decision, PdpError> {
    q.validate()?;
    s.check()?;
    if q.is_owner_management() {
        return Ok(Decision::builtin_owner());
    }

    let mut trace = Vec::new();
    let mut permit = eval_source(s.resource, q, &mut trace);

    let mut vo_doc = None;
    if let Some(vo) = &q.credential.vo {
        let deny = |trace: &mut Vec<TraceEntry>, reason| {
            trace.push(TraceEntry {
                source: TraceSource::Vo,
                block: None,
                effect: Effect::Deny,
                reason: Some(reason),
            })
        };
        if !s.resource.trusts(vo) {
            deny(&mut trace, DenyReason::UntrustedVo(vo.clone()));
            permit = false;
        } else if let Some(doc) = s.vo {
            permit &= eval_source(doc, q, &mut trace);
            vo_doc = Some(doc);
        } else {
            deny(&mut trace, DenyReason::MissingVoPolicy(vo.clone()));
            permit = false;
        }
    }

    let mut charged_estimate = None;
    if let Some(req) = &q.request {
        charged_estimate = req.max_cpu_time().map(|t| req.count().saturating_mul(t));
        let accounting = vo_doc.is_some_and(|d| d.allocation.is_some());
        if accounting && charged_estimate.is_none() {
            trace.push(TraceEntry {
                source: TraceSource::Vo,
                block: None,
                effect: Effect::Deny,
                reason: Some(DenyReason::AccountingRequiresMaxcputime),
            });
            permit = false;
        }
    }

    Ok(Decision {
        effect: if permit { Effect::Permit } else { Effect::Deny },
        trace,
        charged_estimate,
    })
}

/// Issues claims carrying `vo_doc` restricted to the blocks that apply to
/// `cred`, plus the allocation and the subject's own member quota.
pub fn derive_capability(vo_doc: &PolicyDocument, cred: &GridCredential, expiry: u64) -> Result<CapabilityClaims, PdpError> {
    if vo_doc.source != PolicySource::Vo {
        return Err(PdpError::InvalidSources("capabilities derive from vo policies".into()));
    }
    let vo = cred.vo.clone().ok_or(PdpError::NoVo)?;
    let blocks: Vec<SubjectBlock> = applicable_blocks(vo_doc, cred)
        .into_iter()
        .map(|(_, b)| b.clone())
        .collect();
    if blocks.is_empty() {
        return Err(PdpError::NoApplicableBlocks);
    }
    let mut fragment = PolicyDocument::new(vo_doc.name.clone(), PolicySource::Vo);
    fragment.blocks = blocks;
    fragment.allocation = vo_doc.allocation;
    if let Some(q) = vo_doc.member_quotas.get(&cred.subject) {
        fragment.member_quotas.insert(cred.subject.clone(), *q);
    }
    Ok(CapabilityClaims {
        subject: cred.subject.clone(),
        vo,
        groups: cred.groups.clone(),
        expiry,
        policy_fragment: fragment.to_string(),
    })
}

/// Verifies a pushed capability for `q` and returns the VO policy it
/// carries, or the reason it cannot be used.
pub fn open_capability(
    q: &AuthzQuery,
    token: &CapabilityToken,
    registry: &KeyRegistry,
    now: u64,
) -> Result<PolicyDocument, DenyReason> {
    let claims = verify_capability(registry, token, now).map_err(DenyReason::Capability)?;
    if claims.subject != q.credential.subject {
        return Err(DenyReason::SubjectMismatch);
    }
    if q.credential.vo.as_deref() != Some(claims.vo.as_str()) {
        return Err(DenyReason::VoMismatch);
    }
    claims
        .fragment()
        .map_err(|e| DenyReason::InvalidCapability(e.to_string()))
}

/// Push mode: the VO policy comes from a signed capability instead of the
/// VO's own document.
pub fn decide_push(
    q: &AuthzQuery,
    resource_doc: &PolicyDocument,
    token: &CapabilityToken,
    registry: &KeyRegistry,
    now: u64,
) -> Result<Decision, PdpError> {
    q.validate()?;
    if q.is_owner_management() {
        return Ok(Decision::builtin_owner());
    }
    match open_capability(q, token, registry, now) {
        Ok(fragment) => decide(q, &PolicySourceSet::new(resource_doc, Some(&fragment))),
        Err(reason) => Ok(Decision::deny(TraceSource::Capability, reason)),
    }
}

/// Multi-line rendering of a decision: the overall effect, then one line
/// per trace entry.
pub fn explain(d: &Decision) -> String {
    let mut out = format!("decision: {}\n", d.effect);
    for entry in &d.trace {
        out.push_str(&entry.to_string());
        out.push('\n');
    }
    if let Some(c) = d.charged_estimate {
        out.push_str(&format!("charged-estimate: {c} cpu-seconds\n"));
    }
    out
}
