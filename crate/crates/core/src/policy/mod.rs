//! Resource-owner and VO policy documents.
//!
//! A document is a list of subject blocks. Each block names who it applies
//! to, which actions it allows, and a list of assertions over the job
//! description:
//!
//! | statement                 | assertion                               |
//! |---------------------------|-----------------------------------------|
//! | `attr NAME vspec;`        | may contain NAME, only with these values |
//! | `require attr NAME [vspec];` | must contain NAME (with these values) |
//! | `forbid attr NAME [vspec];`  | must not contain NAME (with these values) |
//! | `closed-world;`           | nothing outside the named attributes     |
//!
//! See [`parse_policy`] for the concrete grammar.

mod parse;
mod print;
mod spec;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::credential::GridCredential;
use crate::rsl::JobAction;

pub use parse::{parse_policy, PolicyError};
pub use spec::{glob_match, Pattern, SpecMatch, ValueSpec};
pub use validate::{validate_policy, Diagnostic, DiagnosticKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicySource {
    Resource,
    Vo,
}

impl PolicySource {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicySource::Resource => "resource",
            PolicySource::Vo => "vo",
        }
    }
}

impl fmt::Display for PolicySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyDocument {
    pub name: String,
    pub source: PolicySource,
    pub blocks: Vec<SubjectBlock>,
    /// VOs whose policy the resource accepts. Empty means no restriction.
    pub trust: Vec<String>,
    /// VO-wide cpu-second allocation.
    pub allocation: Option<u64>,
    /// Per-member cpu-second quotas keyed by subject DN.
    pub member_quotas: BTreeMap<String, u64>,
}

impl PolicyDocument {
    pub fn new(name: impl Into<String>, source: PolicySource) -> Self {
        PolicyDocument {
            name: name.into(),
            source,
            blocks: Vec::new(),
            trust: Vec::new(),
            allocation: None,
            member_quotas: BTreeMap::new(),
        }
    }

    pub fn trusts(&self, vo: &str) -> bool {
        self.trust.is_empty() || self.trust.iter().any(|t| t == vo)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Matcher {
    Identity(String),
    Group(String),
    Any,
}

impl Matcher {
    pub fn matches(&self, cred: &GridCredential) -> bool {
        match self {
            Matcher::Identity(dn) => *dn == cred.subject,
            Matcher::Group(g) => cred.groups.contains(g),
            Matcher::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assertion {
    MayContain(String, ValueSpec),
    MustContain(String, Option<ValueSpec>),
    MustNotContain(String, Option<ValueSpec>),
}

impl Assertion {
    pub fn attr(&self) -> &str {
        match self {
            Assertion::MayContain(a, _)
            | Assertion::MustContain(a, _)
            | Assertion::MustNotContain(a, _) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectBlock {
    pub matcher: Matcher,
    pub allowed_actions: BTreeSet<JobAction>,
    /// Actions restricted to jobs carrying one of the listed jobtags. An
    /// allowed action without an entry applies to every job.
    pub jobtag_grants: BTreeMap<JobAction, BTreeSet<String>>,
    pub assertions: Vec<Assertion>,
    pub closed_world: bool,
}

impl SubjectBlock {
    pub fn new(matcher: Matcher) -> Self {
        SubjectBlock {
            matcher,
            allowed_actions: BTreeSet::new(),
            jobtag_grants: BTreeMap::new(),
            assertions: Vec::new(),
            closed_world: false,
        }
    }

    /// Attribute names a closed-world block accepts: those named by a
    /// may-contain or must-contain assertion.
    pub fn named_attributes(&self) -> BTreeSet<&str> {
        self.assertions
            .iter()
            .filter(|a| !matches!(a, Assertion::MustNotContain(..)))
            .map(Assertion::attr)
            .collect()
    }
}

/// Blocks of `doc` that apply to `cred`, with their indices, in document order.
pub fn applicable_blocks<'a>(
    doc: &'a PolicyDocument,
    cred: &GridCredential,
) -> Vec<(usize, &'a SubjectBlock)> {
    doc.blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.matcher.matches(cred))
        .collect()
}
