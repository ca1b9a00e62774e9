use std::collections::BTreeSet;
use std::fmt;

use regex::Regex;

use crate::rsl::{quote, RslValue};

/// A compiled regular expression that compares by its source text.
///
/// Patterns are anchored: they must match the whole value.
#[derive(Clone)]
pub struct Pattern {
    source: String,
    compiled: Regex,
}

impl Pattern {
    pub fn new(source: &str) -> Result<Self, regex::Error> {
        let compiled = Regex::new(&format!("^(?:{source})$"))?;
        Ok(Pattern {
            source: source.to_string(),
            compiled,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_match(&self, s: &str) -> bool {
        self.compiled.is_match(s)
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Eq for Pattern {}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Pattern").field(&self.source).finish()
    }
}

/// Allowed values for one attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueSpec {
    /// Literal strings; `*` matches any run of characters.
    Enum(BTreeSet<String>),
    /// Inclusive integer range.
    Range(i64, i64),
    Regex(Pattern),
    Max(i64),
    Min(i64),
    Or(Vec<ValueSpec>),
}

/// Result of testing a value against a [`ValueSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecMatch {
    Match,
    NoMatch,
    /// Numeric spec applied to a non-integer value.
    TypeMismatch,
}

impl ValueSpec {
    pub fn enumeration<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ValueSpec::Enum(items.into_iter().map(Into::into).collect())
    }

    /// Lists match when every element matches.
    pub fn check(&self, value: &RslValue) -> SpecMatch {
        match value {
            RslValue::List(items) => {
                let mut result = SpecMatch::Match;
                for item in items {
                    match self.check_scalar(Scalar::Text(item)) {
                        SpecMatch::Match => {}
                        other => {
                            result = other;
                            break;
                        }
                    }
                }
                result
            }
            RslValue::Text(s) => self.check_scalar(Scalar::Text(s)),
            RslValue::Int(v) => self.check_scalar(Scalar::Int(*v)),
        }
    }

    pub fn matches(&self, value: &RslValue) -> bool {
        self.check(value) == SpecMatch::Match
    }

    fn check_scalar(&self, value: Scalar<'_>) -> SpecMatch {
        let bool_match = |b: bool| if b { SpecMatch::Match } else { SpecMatch::NoMatch };
        match self {
            ValueSpec::Enum(items) => {
                let text = value.to_text();
                bool_match(items.iter().any(|g| glob_match(g, &text)))
            }
            ValueSpec::Regex(p) => bool_match(p.is_match(&value.to_text())),
            ValueSpec::Range(lo, hi) => match value {
                Scalar::Int(v) => bool_match(*lo <= v && v <= *hi),
                Scalar::Text(_) => SpecMatch::TypeMismatch,
            },
            ValueSpec::Max(m) => match value {
                Scalar::Int(v) => bool_match(v <= *m),
                Scalar::Text(_) => SpecMatch::TypeMismatch,
            },
            ValueSpec::Min(m) => match value {
                Scalar::Int(v) => bool_match(v >= *m),
                Scalar::Text(_) => SpecMatch::TypeMismatch,
            },
            ValueSpec::Or(alts) => {
                let mut saw_no_match = false;
                for alt in alts {
                    match alt.check_scalar(value) {
                        SpecMatch::Match => return SpecMatch::Match,
                        SpecMatch::NoMatch => saw_no_match = true,
                        SpecMatch::TypeMismatch => {}
                    }
                }
                if saw_no_match || alts.is_empty() {
                    SpecMatch::NoMatch
                } else {
                    SpecMatch::TypeMismatch
                }
            }
        }
    }

    /// The alternatives of this spec with nested `Or`s flattened.
    pub fn alternatives(&self) -> Vec<&ValueSpec> {
        match self {
            ValueSpec::Or(alts) => alts.iter().flat_map(ValueSpec::alternatives).collect(),
            other => vec![other],
        }
    }

    /// Inclusive integer upper bound, if every alternative is numeric and bounded above.
    pub fn upper_bound(&self) -> Option<i64> {
        self.alternatives()
            .into_iter()
            .map(|alt| match alt {
                ValueSpec::Range(_, hi) => Some(*hi),
                ValueSpec::Max(m) => Some(*m),
                _ => None,
            })
            .try_fold(i64::MIN, |acc, b| b.map(|b| acc.max(b)))
    }
}

impl fmt::Display for ValueSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueSpec::Enum(items) => {
                f.write_str("in {")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    f.write_str(&quote(item))?;
                }
                f.write_str("}")
            }
            ValueSpec::Range(lo, hi) => write!(f, "range {lo}..{hi}"),
            ValueSpec::Regex(p) => write!(f, "matches {}", quote(p.source())),
            ValueSpec::Max(m) => write!(f, "max {m}"),
            ValueSpec::Min(m) => write!(f, "min {m}"),
            ValueSpec::Or(alts) => {
                for (i, alt) in alts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" or ")?;
                    }
                    write!(f, "{alt}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Scalar<'a> {
    Text(&'a str),
    Int(i64),
}

impl Scalar<'_> {
    fn to_text(self) -> String {
        match self {
            Scalar::Text(s) => s.to_string(),
            Scalar::Int(v) => v.to_string(),
        }
    }
}

/// Anchored glob match where `*` matches any (possibly empty) run.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}
