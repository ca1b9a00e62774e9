//! Job descriptions in the RSL subset used by the job manager.
//!
//! The accepted grammar is a single `&`-conjunction of `(name=value)`
//! clauses:
//!
//! ```text
//! request  := '&' clause+
//! clause   := '(' NAME '=' value ')'
//! value    := INT | STRING | STRING (' ' STRING)+    # lists only for `arguments`
//! ```
//!
//! Attribute names are case-insensitive and normalized to lowercase.
//! Well-known numeric attributes (`count`, `maxmemory`, `maxcputime`) must
//! be positive integers; unknown attributes pass through untouched so that
//! policy can see (and reject) them.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Well-known attribute names.
pub mod attr {
    pub const EXECUTABLE: &str = "executable";
    pub const ARGUMENTS: &str = "arguments";
    pub const COUNT: &str = "count";
    pub const MAX_MEMORY: &str = "maxmemory";
    pub const MAX_CPU_TIME: &str = "maxcputime";
    pub const QUEUE: &str = "queue";
    pub const JOBTAG: &str = "jobtag";
    pub const DIRECTORY: &str = "directory";
    pub const STDOUT: &str = "stdout";
    pub const STDERR: &str = "stderr";
}

const POSITIVE_INT_ATTRS: [&str; 3] = [attr::COUNT, attr::MAX_MEMORY, attr::MAX_CPU_TIME];
const TEXT_ATTRS: [&str; 6] = [
    attr::EXECUTABLE,
    attr::QUEUE,
    attr::JOBTAG,
    attr::DIRECTORY,
    attr::STDOUT,
    attr::STDERR,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RslError {
    #[error("syntax error at byte {pos}: expected {expected}")]
    Syntax { pos: usize, expected: String },
    #[error("duplicate attribute '{0}'")]
    DuplicateAttribute(String),
    #[error("empty request")]
    EmptyRequest,
    #[error("invalid value for '{name}': {reason}")]
    InvalidValue { name: String, reason: String },
    #[error("invalid attribute name '{0}'")]
    InvalidName(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RslValue {
    Text(String),
    Int(i64),
    List(Vec<String>),
}

impl RslValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            RslValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            RslValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for RslValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RslValue::Text(s) => write_quoted(f, s),
            RslValue::Int(v) => write!(f, "{v}"),
            RslValue::List(items) => {
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write_quoted(f, item)?;
                }
                Ok(())
            }
        }
    }
}

/// Writes `s` as a double-quoted string, escaping `"` and `\`.
pub fn write_quoted(out: &mut impl fmt::Write, s: &str) -> fmt::Result {
    out.write_char('"')?;
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.write_char('\\')?;
        }
        out.write_char(c)?;
    }
    out.write_char('"')
}

pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    write_quoted(&mut out, s).expect("writing to a String cannot fail");
    out
}

/// The job-control action a request asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobAction {
    Start,
    Cancel,
    Status,
    Suspend,
    Resume,
    SetPriority,
}

impl JobAction {
    pub const ALL: [JobAction; 6] = [
        JobAction::Start,
        JobAction::Cancel,
        JobAction::Status,
        JobAction::Suspend,
        JobAction::Resume,
        JobAction::SetPriority,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobAction::Start => "start",
            JobAction::Cancel => "cancel",
            JobAction::Status => "status",
            JobAction::Suspend => "suspend",
            JobAction::Resume => "resume",
            JobAction::SetPriority => "set_priority",
        }
    }

    /// Everything except `start` acts on an existing job.
    pub fn is_management(self) -> bool {
        self != JobAction::Start
    }
}

impl fmt::Display for JobAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown job action '{0}'")]
pub struct UnknownAction(pub String);

impl FromStr for JobAction {
    type Err = UnknownAction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobAction::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| UnknownAction(s.to_string()))
    }
}

/// A parsed job description. Attributes keep their source order; equality
/// ignores order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RslRequest {
    attributes: IndexMap<String, RslValue>,
}

impl RslRequest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an attribute, enforcing name syntax, uniqueness and the type
    /// rules for well-known attributes.
    pub fn insert(&mut self, name: &str, value: RslValue) -> Result<(), RslError> {
        let name = normalize_name(name)?;
        check_value(&name, &value)?;
        if self.attributes.contains_key(&name) {
            return Err(RslError::DuplicateAttribute(name));
        }
        self.attributes.insert(name, value);
        Ok(())
    }

    pub fn with(mut self, name: &str, value: RslValue) -> Result<Self, RslError> {
        self.insert(name, value)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&RslValue> {
        self.attributes.get(name.to_ascii_lowercase().as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RslValue)> {
        self.attributes.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn jobtag(&self) -> Option<&str> {
        self.get(attr::JOBTAG).and_then(RslValue::as_text)
    }

    /// Number of processes; defaults to 1 when absent.
    pub fn count(&self) -> u64 {
        self.get(attr::COUNT)
            .and_then(RslValue::as_int)
            .map_or(1, |c| c as u64)
    }

    pub fn max_cpu_time(&self) -> Option<u64> {
        self.get(attr::MAX_CPU_TIME)
            .and_then(RslValue::as_int)
            .map(|v| v as u64)
    }

    pub fn max_memory(&self) -> Option<u64> {
        self.get(attr::MAX_MEMORY)
            .and_then(RslValue::as_int)
            .map(|v| v as u64)
    }
}

impl fmt::Display for RslRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_rsl(self))
    }
}

impl FromStr for RslRequest {
    type Err = RslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rsl(s)
    }
}

impl Serialize for RslRequest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&serialize_rsl(self))
    }
}

impl<'de> Deserialize<'de> for RslRequest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_rsl(&text).map_err(serde::de::Error::custom)
    }
}

fn normalize_name(name: &str) -> Result<String, RslError> {
    let mut chars = name.chars();
    let valid = match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {
            chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        }
        _ => false,
    };
    if !valid {
        return Err(RslError::InvalidName(name.to_string()));
    }
    Ok(name.to_ascii_lowercase())
}

fn check_value(name: &str, value: &RslValue) -> Result<(), RslError> {
    let invalid = |reason: &str| RslError::InvalidValue {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    if POSITIVE_INT_ATTRS.contains(&name) {
        return match value {
            RslValue::Int(v) if *v > 0 => Ok(()),
            RslValue::Int(_) => Err(invalid("must be a positive integer")),
            _ => Err(invalid("must be an integer")),
        };
    }
    if TEXT_ATTRS.contains(&name) && !matches!(value, RslValue::Text(_)) {
        return Err(invalid("must be a string"));
    }
    match value {
        RslValue::List(items) if items.is_empty() => Err(invalid("empty list")),
        RslValue::List(_) if name != attr::ARGUMENTS => {
            Err(invalid("only 'arguments' may hold a list"))
        }
        RslValue::Text(_) | RslValue::Int(_) if name == attr::ARGUMENTS => {
            Err(invalid("'arguments' must be a list of strings"))
        }
        _ => Ok(()),
    }
}

/// Parses RSL text. Attributes keep source order, names are lowercased and
/// strings unescaped. A single `arguments` string parses as a one-element
/// list.
pub fn parse_rsl(text: &str) -> Result<RslRequest, RslError> {
    Parser { text, pos: 0 }.request()
}

/// Canonical form: names in ascending order, strings quoted.
pub fn serialize_rsl(req: &RslRequest) -> String {
    let mut names: Vec<&String> = req.attributes.keys().collect();
    names.sort();
    let mut out = String::from("&");
    for name in names {
        out.push('(');
        out.push_str(name);
        out.push('=');
        out.push_str(&req.attributes[name].to_string());
        out.push(')');
    }
    out
}

/// Looks up an attribute after name normalization.
pub fn get_attr<'a>(req: &'a RslRequest, name: &str) -> Option<&'a RslValue> {
    req.get(name)
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

enum RawValue {
    Int(i64),
    Strings(Vec<String>),
}

impl<'a> Parser<'a> {
    fn request(mut self) -> Result<RslRequest, RslError> {
        self.skip_ws();
        if self.at_end() {
            return Err(RslError::EmptyRequest);
        }
        self.expect('&', "'&'")?;
        self.skip_ws();
        if self.at_end() {
            return Err(RslError::EmptyRequest);
        }
        let mut req = RslRequest::new();
        while !self.at_end() {
            self.clause(&mut req)?;
            self.skip_ws();
        }
        Ok(req)
    }

    fn clause(&mut self, req: &mut RslRequest) -> Result<(), RslError> {
        self.expect('(', "'('")?;
        self.skip_ws();
        let name = self.name()?;
        self.skip_ws();
        self.expect('=', "'='")?;
        self.skip_ws();
        let raw = self.value()?;
        self.skip_ws();
        self.expect(')', "')'")?;

        let lower = name.to_ascii_lowercase();
        let value = match raw {
            RawValue::Int(v) => RslValue::Int(v),
            RawValue::Strings(items) if lower == attr::ARGUMENTS => RslValue::List(items),
            RawValue::Strings(mut items) if items.len() == 1 => {
                RslValue::Text(items.pop().expect("one item"))
            }
            RawValue::Strings(_) => {
                return Err(RslError::InvalidValue {
                    name: lower,
                    reason: "only 'arguments' may hold a list".into(),
                })
            }
        };
        req.insert(name, value)
    }

    fn name(&mut self) -> Result<&'a str, RslError> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos += 1,
            _ => return Err(self.syntax("attribute name")),
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        Ok(&self.text[start..self.pos])
    }

    fn value(&mut self) -> Result<RawValue, RslError> {
        match self.peek() {
            Some('"') => {
                let mut items = vec![self.string()?];
                loop {
                    let save = self.pos;
                    self.skip_ws();
                    if self.peek() == Some('"') {
                        items.push(self.string()?);
                    } else {
                        self.pos = save;
                        return Ok(RawValue::Strings(items));
                    }
                }
            }
            Some(c) if c == '-' || c.is_ascii_digit() => self.int(),
            _ => Err(self.syntax("integer or quoted string")),
        }
    }

    fn int(&mut self) -> Result<RawValue, RslError> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        let digits = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits {
            return Err(self.syntax("digit"));
        }
        self.text[start..self.pos]
            .parse::<i64>()
            .map(RawValue::Int)
            .map_err(|_| RslError::Syntax {
                pos: start,
                expected: "64-bit integer".into(),
            })
    }

    fn string(&mut self) -> Result<String, RslError> {
        self.expect('"', "'\"'")?;
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.syntax("closing '\"'")),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some(c @ ('"' | '\\')) => out.push(c),
                    _ => {
                        return Err(RslError::Syntax {
                            pos: self.pos.saturating_sub(1),
                            expected: "'\\\"' or '\\\\' escape".into(),
                        })
                    }
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn expect(&mut self, c: char, what: &str) -> Result<(), RslError> {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.syntax(what))
        }
    }

    fn syntax(&self, expected: &str) -> RslError {
        RslError::Syntax {
            pos: self.pos,
            expected: expected.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn text(s: &str) -> RslValue {
        RslValue::Text(s.into())
    }

    #[test]
    fn parses_basic_request() {
        let req = parse_rsl(r#"&(executable="/bin/date")(count=1)"#).unwrap();
        assert_eq!(req.get("executable"), Some(&text("/bin/date")));
        assert_eq!(req.get("count"), Some(&RslValue::Int(1)));
        assert_eq!(req.names().collect::<Vec<_>>(), ["executable", "count"]);
    }

    #[test]
    fn lowercases_names() {
        let req = parse_rsl(r#"&(Executable="/bin/x")(JOBTAG="fusion-prod")"#).unwrap();
        assert_eq!(req.names().collect::<Vec<_>>(), ["executable", "jobtag"]);
        assert_eq!(req.jobtag(), Some("fusion-prod"));
    }

    #[test]
    fn rejects_duplicates() {
        assert_eq!(
            parse_rsl("&(count=1)(count=2)"),
            Err(RslError::DuplicateAttribute("count".into()))
        );
        assert_eq!(
            parse_rsl("&(count=1)(COUNT=2)"),
            Err(RslError::DuplicateAttribute("count".into()))
        );
    }

    #[test]
    fn empty_requests() {
        assert_eq!(parse_rsl(""), Err(RslError::EmptyRequest));
        assert_eq!(parse_rsl("  \n"), Err(RslError::EmptyRequest));
        assert_eq!(parse_rsl("& "), Err(RslError::EmptyRequest));
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_rsl("&(count 1)") {
            Err(RslError::Syntax { pos, expected }) => {
                assert_eq!(pos, 8);
                assert_eq!(expected, "'='");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_rsl("(count=1)"), Err(RslError::Syntax { pos: 0, .. })));
        assert!(matches!(parse_rsl(r#"&(x="abc)"#), Err(RslError::Syntax { .. })));
        assert!(matches!(parse_rsl("&(x=99999999999999999999)"), Err(RslError::Syntax { .. })));
        assert!(matches!(parse_rsl("&(x=1)junk"), Err(RslError::Syntax { .. })));
    }

    #[test]
    fn type_checks_well_known_attributes() {
        assert!(matches!(parse_rsl("&(count=0)"), Err(RslError::InvalidValue { .. })));
        assert!(matches!(parse_rsl(r#"&(count="4")"#), Err(RslError::InvalidValue { .. })));
        assert!(matches!(parse_rsl("&(executable=3)"), Err(RslError::InvalidValue { .. })));
        assert!(matches!(
            parse_rsl(r#"&(queue="a" "b")"#),
            Err(RslError::InvalidValue { .. })
        ));
        // unknown attributes are left to policy
        let req = parse_rsl(r#"&(colour="red")(weight=-3)"#).unwrap();
        assert_eq!(req.get("weight"), Some(&RslValue::Int(-3)));
    }

    #[test]
    fn escapes_round_trip() {
        let req = parse_rsl(r#"&(stdout="a \"b\" \\c")"#).unwrap();
        assert_eq!(req.get("stdout"), Some(&text(r#"a "b" \c"#)));
        assert_eq!(serialize_rsl(&req), r#"&(stdout="a \"b\" \\c")"#);
    }

    #[test]
    fn serializes_canonically() {
        let req = RslRequest::new()
            .with("executable", text("/bin/date"))
            .unwrap()
            .with("count", RslValue::Int(1))
            .unwrap();
        assert_eq!(serialize_rsl(&req), r#"&(count=1)(executable="/bin/date")"#);

        let args = RslRequest::new()
            .with("arguments", RslValue::List(vec!["a".into(), "b".into()]))
            .unwrap();
        assert_eq!(serialize_rsl(&args), r#"&(arguments="a" "b")"#);
        assert_eq!(parse_rsl(&serialize_rsl(&args)).unwrap(), args);
    }

    #[test]
    fn single_argument_is_a_list() {
        let req = parse_rsl(r#"&(arguments="-v")"#).unwrap();
        assert_eq!(req.get("arguments"), Some(&RslValue::List(vec!["-v".into()])));
        assert!(matches!(parse_rsl("&(arguments=3)"), Err(RslError::InvalidValue { .. })));
    }

    #[test]
    fn parse_serialize_is_a_fixed_point() {
        let once = serialize_rsl(&parse_rsl(r#"&(executable="/bin/date")(count=1)"#).unwrap());
        let twice = serialize_rsl(&parse_rsl(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn get_attr_normalizes() {
        let req = RslRequest::new().with("jobtag", text("t")).unwrap();
        assert_eq!(get_attr(&req, "JOBTAG"), Some(&text("t")));
        assert_eq!(get_attr(&RslRequest::new(), "count"), None);
        let req = RslRequest::new().with("count", RslValue::Int(4)).unwrap();
        assert_eq!(get_attr(&req, "count"), Some(&RslValue::Int(4)));
    }

    #[test]
    fn whitespace_between_tokens() {
        let req = parse_rsl("  & ( count = 2 )\n\t( queue = \"q\" ) ").unwrap();
        assert_eq!(req.count(), 2);
        assert_eq!(req.get("queue"), Some(&text("q")));
    }

    #[test]
    fn actions_parse_by_exact_name() {
        for a in JobAction::ALL {
            assert_eq!(a.as_str().parse::<JobAction>().unwrap(), a);
        }
        assert!("Start".parse::<JobAction>().is_err());
        assert!("stop".parse::<JobAction>().is_err());
    }

    fn arb_value(name: String) -> BoxedStrategy<(String, RslValue)> {
        let s = "[ -~]{0,8}";
        let v = match name.as_str() {
            "count" | "maxmemory" | "maxcputime" => (1i64..1_000_000).prop_map(RslValue::Int).boxed(),
            "executable" | "queue" | "jobtag" => s.prop_map(RslValue::Text).boxed(),
            "arguments" => prop::collection::vec(s, 1..4).prop_map(RslValue::List).boxed(),
            _ => prop_oneof![
                s.prop_map(RslValue::Text),
                any::<i64>().prop_map(RslValue::Int)
            ]
            .boxed(),
        };
        v.prop_map(move |v| (name.clone(), v)).boxed()
    }

    fn arb_request() -> impl Strategy<Value = RslRequest> {
        let names = prop::sample::subsequence(
            vec!["count", "maxmemory", "maxcputime", "executable", "queue", "jobtag", "arguments", "x_1", "colour"],
            1..6,
        );
        names
            .prop_flat_map(|ns| {
                ns.into_iter()
                    .map(|n| arb_value(n.to_string()))
                    .collect::<Vec<_>>()
            })
            .prop_map(|pairs| {
                let mut req = RslRequest::new();
                for (n, v) in pairs {
                    req.insert(&n, v).unwrap();
                }
                req
            })
    }

    proptest! {
        #[test]
        fn round_trips(req in arb_request()) {
            let text = serialize_rsl(&req);
            let back = parse_rsl(&text).unwrap();
            prop_assert_eq!(&back, &req);
            prop_assert_eq!(serialize_rsl(&back), text);
        }

        #[test]
        fn never_panics_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_rsl(&text);
        }

        #[test]
        fn never_panics_on_near_misses(s in r#"&?[ ()=a-z0-9"\\-]{0,24}"#) {
            let _ = parse_rsl(&s);
        }
    }
}
