use std::fmt;

use super::{Assertion, Matcher, PolicyDocument, SubjectBlock, ValueSpec};
use crate::rsl::RslValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// The block can never be the one that permits a request.
    UnreachableBlock,
    /// No start request can satisfy the block's assertions.
    AlwaysDeny,
    QuotaExceedsAllocation,
}

impl DiagnosticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosticKind::UnreachableBlock => "unreachable block",
            DiagnosticKind::AlwaysDeny => "always-deny",
            DiagnosticKind::QuotaExceedsAllocation => "quota exceeds allocation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub block: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(i) => write!(f, "block[{i}]: {}: {}", self.kind.as_str(), self.message),
            None => write!(f, "{}: {}", self.kind.as_str(), self.message),
        }
    }
}

/// Non-fatal lints. Every always-deny diagnostic is sound: it is only
/// reported when the block provably rejects every start request.
pub fn validate_policy(doc: &PolicyDocument) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    for (j, block) in doc.blocks.iter().enumerate() {
        if block.allowed_actions.is_empty() {
            out.push(Diagnostic {
                kind: DiagnosticKind::UnreachableBlock,
                block: Some(j),
                message: "block allows no actions".into(),
            });
        } else if let Some(i) = doc.blocks[..j].iter().position(|earlier| shadows(earlier, block)) {
            out.push(Diagnostic {
                kind: DiagnosticKind::UnreachableBlock,
                block: Some(j),
                message: format!("shadowed by unconditional block[{i}]"),
            });
        }

        for (must, forbid) in contradictions(block) {
            out.push(Diagnostic {
                kind: DiagnosticKind::AlwaysDeny,
                block: Some(j),
                message: format!("'{must}' contradicts '{forbid}'"),
            });
        }
    }

    if let Some(allocation) = doc.allocation {
        for (dn, quota) in &doc.member_quotas {
            if *quota > allocation {
                out.push(Diagnostic {
                    kind: DiagnosticKind::QuotaExceedsAllocation,
                    block: None,
                    message: format!("member {dn} quota {quota} > allocation {allocation}"),
                });
            }
        }
    }
    out
}

/// `earlier` shadows `later` when it applies to everyone `later` applies to
/// and permits, without conditions, every action `later` permits.
fn shadows(earlier: &SubjectBlock, later: &SubjectBlock) -> bool {
    let covers = earlier.matcher == Matcher::Any || earlier.matcher == later.matcher;
    let unconditional = earlier.assertions.is_empty() && !earlier.closed_world;
    covers
        && unconditional
        && later.allowed_actions.iter().all(|a| {
            if !earlier.allowed_actions.contains(a) {
                return false;
            }
            match (earlier.jobtag_grants.get(a), later.jobtag_grants.get(a)) {
                (None, _) => true,
                (Some(_), None) => false,
                (Some(e), Some(l)) => l.is_subset(e),
            }
        })
}

fn contradictions(block: &SubjectBlock) -> Vec<(&Assertion, &Assertion)> {
    let mut out = Vec::new();
    for must in &block.assertions {
        let Assertion::MustContain(attr, required) = must else {
            continue;
        };
        for forbid in &block.assertions {
            let Assertion::MustNotContain(other, forbidden) = forbid else {
                continue;
            };
            if attr != other {
                continue;
            }
            let always = match (required, forbidden) {
                (_, None) => true,
                (Some(r), Some(f)) => subsumes(f, r),
                (None, Some(_)) => false,
            };
            if always {
                out.push((must, forbid));
            }
        }
    }
    out
}

/// Conservative test that every value satisfying `inner` also satisfies
/// `outer`. May answer `false` for true containments, never the reverse.
fn subsumes(outer: &ValueSpec, inner: &ValueSpec) -> bool {
    if outer == inner {
        return true;
    }
    let outer_alts = outer.alternatives();
    let has_glob = |g: &str| {
        outer_alts
            .iter()
            .any(|alt| matches!(alt, ValueSpec::Enum(items) if items.contains(g) || items.contains("*")))
    };
    inner.alternatives().into_iter().all(|alt| match alt {
        ValueSpec::Range(lo, hi) => interval_covered(*lo, *hi, &outer_alts),
        ValueSpec::Max(m) => interval_covered(i64::MIN, *m, &outer_alts),
        ValueSpec::Min(m) => interval_covered(*m, i64::MAX, &outer_alts),
        ValueSpec::Enum(items) => items.iter().all(|item| {
            if item.contains('*') {
                return has_glob(item);
            }
            let text_ok = outer.matches(&RslValue::Text(item.clone()));
            let int_ok = match item.parse::<i64>() {
                Ok(n) if n.to_string() == *item => outer.matches(&RslValue::Int(n)),
                _ => true,
            };
            text_ok && int_ok
        }),
        ValueSpec::Regex(p) => {
            has_glob("*") || outer_alts.iter().any(|o| matches!(o, ValueSpec::Regex(q) if q == p))
        }
        ValueSpec::Or(_) => unreachable!("alternatives are flattened"),
    })
}

fn interval_covered(lo: i64, hi: i64, outer: &[&ValueSpec]) -> bool {
    let mut intervals: Vec<(i64, i64)> = outer
        .iter()
        .filter_map(|alt| match alt {
            ValueSpec::Range(a, b) => Some((*a, *b)),
            ValueSpec::Max(m) => Some((i64::MIN, *m)),
            ValueSpec::Min(m) => Some((*m, i64::MAX)),
            _ => None,
        })
        .collect();
    intervals.sort();
    let mut next = lo;
    for (a, b) in intervals {
        if a > next {
            break;
        }
        if b >= next {
            if b >= hi {
                return true;
            }
            next = b + 1;
        }
    }
    false
}
