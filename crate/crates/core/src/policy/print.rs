use std::fmt;

use super::{Assertion, Matcher, PolicyDocument, SubjectBlock};
use crate::rsl::quote;

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Identity(dn) => write!(f, "identity {}", quote(dn)),
            Matcher::Group(g) => write!(f, "group {}", quote(g)),
            Matcher::Any => f.write_str("any"),
        }
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assertion::MayContain(a, spec) => write!(f, "attr {a} {spec};"),
            Assertion::MustContain(a, None) => write!(f, "require attr {a};"),
            Assertion::MustContain(a, Some(spec)) => write!(f, "require attr {a} {spec};"),
            Assertion::MustNotContain(a, None) => write!(f, "forbid attr {a};"),
            Assertion::MustNotContain(a, Some(spec)) => write!(f, "forbid attr {a} {spec};"),
        }
    }
}

impl SubjectBlock {
    fn write_indented(&self, f: &mut fmt::Formatter<'_>, indent: &str) -> fmt::Result {
        writeln!(f, "{indent}subject {} {{", self.matcher)?;
        let open: Vec<&str> = self
            .allowed_actions
            .iter()
            .filter(|a| !self.jobtag_grants.contains_key(a))
            .map(|a| a.as_str())
            .collect();
        if !open.is_empty() {
            writeln!(f, "{indent}  allow action {};", open.join(", "))?;
        }
        for (action, tags) in &self.jobtag_grants {
            let tags: Vec<String> = tags.iter().map(|t| quote(t)).collect();
            writeln!(f, "{indent}  allow action {action} on jobtag {};", tags.join(", "))?;
        }
        for a in &self.assertions {
            writeln!(f, "{indent}  {a}")?;
        }
        if self.closed_world {
            writeln!(f, "{indent}  closed-world;")?;
        }
        writeln!(f, "{indent}}}")
    }
}

impl fmt::Display for SubjectBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_indented(f, "")
    }
}

/// Canonical pretty-printed form; reparses to an equal document.
impl fmt::Display for PolicyDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "policy {} source {} {{", quote(&self.name), self.source)?;
        for vo in &self.trust {
            writeln!(f, "  trust vo {};", quote(vo))?;
        }
        if let Some(a) = self.allocation {
            writeln!(f, "  allocation {a} cpu-seconds;")?;
        }
        for (dn, q) in &self.member_quotas {
            writeln!(f, "  member-quota {} {q} cpu-seconds;", quote(dn))?;
        }
        for block in &self.blocks {
            block.write_indented(f, "  ")?;
        }
        writeln!(f, "}}")
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use proptest::prelude::*;

    use super::super::{parse_policy, Pattern, PolicySource, ValueSpec};
    use super::*;
    use crate::rsl::JobAction;

    #[test]
    fn prints_canonical_layout() {
        let doc = parse_policy(
            r#"policy "fusion" source vo { subject group "dev" { closed-world; require attr jobtag; allow action start, status; attr executable in {"/opt/vo/dbg/*"}; } member-quota "/CN=a" 5 cpu-seconds; allocation 10 cpu-seconds; }"#,
        )
        .unwrap();
        let expected = r#"policy "fusion" source vo {
  allocation 10 cpu-seconds;
  member-quota "/CN=a" 5 cpu-seconds;
  subject group "dev" {
    allow action start, status;
    require attr jobtag;
    attr executable in {"/opt/vo/dbg/*"};
    closed-world;
  }
}
"#;
        assert_eq!(doc.to_string(), expected);
    }

    fn arb_spec() -> impl Strategy<Value = ValueSpec> {
        let leaf = prop_oneof![
            prop::collection::btree_set("[a-z/*\"\\\\]{0,5}", 1..4).prop_map(ValueSpec::Enum),
            (-50i64..50, 0i64..50).prop_map(|(lo, d)| ValueSpec::Range(lo, lo + d)),
            "[a-z]{1,3}\\.\\*".prop_map(|s| ValueSpec::Regex(Pattern::new(&s).unwrap())),
            (-100i64..100).prop_map(ValueSpec::Max),
            (-100i64..100).prop_map(ValueSpec::Min),
        ];
        prop_oneof![
            3 => leaf.clone(),
            1 => prop::collection::vec(leaf, 2..4).prop_map(ValueSpec::Or),
        ]
    }

    fn arb_assertion() -> impl Strategy<Value = Assertion> {
        let name = "[a-z_][a-z0-9_]{0,6}";
        prop_oneof![
            (name, arb_spec()).prop_map(|(n, s)| Assertion::MayContain(n, s)),
            (name, prop::option::of(arb_spec())).prop_map(|(n, s)| Assertion::MustContain(n, s)),
            (name, prop::option::of(arb_spec())).prop_map(|(n, s)| Assertion::MustNotContain(n, s)),
        ]
    }

    fn arb_block() -> impl Strategy<Value = SubjectBlock> {
        let matcher = prop_oneof![
            Just(Matcher::Any),
            "[ -~]{0,8}".prop_map(Matcher::Group),
            "/O=Grid/CN=[a-z ]{1,6}".prop_map(Matcher::Identity),
        ];
        let actions = prop::collection::btree_set(prop::sample::select(JobAction::ALL.to_vec()), 0..4);
        let grants = prop::collection::btree_map(
            prop::sample::select(JobAction::ALL[1..].to_vec()),
            prop::collection::btree_set("[a-z-]{1,6}", 1..3),
            0..3,
        );
        (
            matcher,
            actions,
            grants,
            prop::collection::vec(arb_assertion(), 0..5),
            any::<bool>(),
        )
            .prop_map(|(matcher, mut allowed, grants, assertions, closed_world)| {
                allowed.extend(grants.keys().copied());
                SubjectBlock {
                    matcher,
                    allowed_actions: allowed,
                    jobtag_grants: grants,
                    assertions,
                    closed_world,
                }
            })
    }

    fn arb_doc() -> impl Strategy<Value = PolicyDocument> {
        (
            "[ -~]{0,10}",
            any::<bool>(),
            prop::collection::vec(arb_block(), 0..4),
            prop::collection::btree_set("[a-z]{1,5}", 0..3),
            prop::option::of(0u64..100_000),
            prop::collection::btree_map("/CN=[a-z]{1,4}", 0u64..100_000, 0..3),
        )
            .prop_map(|(name, is_vo, blocks, trust, allocation, quotas)| {
                let source = if is_vo { PolicySource::Vo } else { PolicySource::Resource };
                let mut doc = PolicyDocument::new(name, source);
                doc.blocks = blocks;
                if is_vo {
                    doc.allocation = allocation;
                    doc.member_quotas = quotas;
                } else {
                    doc.trust = trust.into_iter().collect();
                    doc.member_quotas = BTreeMap::new();
                }
                doc
            })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(doc in arb_doc()) {
            let text = doc.to_string();
            let back = parse_policy(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(back, doc);
        }
    }

    #[test]
    fn grant_sets_print_sorted() {
        let mut b = SubjectBlock::new(Matcher::Any);
        b.allowed_actions.insert(JobAction::Cancel);
        b.jobtag_grants
            .insert(JobAction::Cancel, BTreeSet::from(["b".to_string(), "a".to_string()]));
        assert!(b.to_string().contains(r#"allow action cancel on jobtag "a", "b";"#));
    }
}
