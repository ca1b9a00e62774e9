//! Fine-grain authorization for grid job management.
//!
//! Job descriptions ([`rsl`]) are checked against resource-owner and VO
//! policy documents ([`policy`]) by a decision point ([`pdp`]) that
//! supports both pull (VO policy available locally) and push (VO-signed
//! capability tokens, [`credential`]) modes. A simulated gatekeeper and
//! job manager ([`jobmgr`]) place enforcement points on job start and job
//! management, and the [`enforce`] layer supplies dynamic accounts,
//! sandbox limits and VO allocation accounting.

pub mod credential;
pub mod enforce;
pub mod jobmgr;
pub mod pdp;
pub mod policy;
pub mod rsl;

pub use credential::{
    load_credential, map_identity, sign_capability, verify_capability, CapabilityClaims,
    CapabilityError, CapabilityToken, CredentialError, GridCredential, GridMapFile, KeyRegistry,
};
pub use policy::{
    applicable_blocks, parse_policy, validate_policy, Assertion, Diagnostic, DiagnosticKind,
    Matcher, PolicyDocument, PolicyError, PolicySource, SubjectBlock, ValueSpec,
};
pub use rsl::{get_attr, parse_rsl, serialize_rsl, JobAction, RslError, RslRequest, RslValue};
pub use enforce::{
    record_usage, AllocationLedger, DynamicAccountPool, LedgerError, LimitBreached, LimitDimension,
    PoolError, QuotaScope, SandboxDefaults, SandboxSpec, UsageSample,
};
pub use jobmgr::{
    AccountRef, AuthzMode, EngineConfig, Event, Job, JobError, JobManager, JobState,
    ManagementCommand, SimProfile,
};
pub use pdp::{
    decide, decide_push, derive_capability, eval_assertion, eval_block, explain, AuthzQuery,
    Decision, DenyReason, Effect, PdpError, PolicySourceSet, TraceSource,
};
