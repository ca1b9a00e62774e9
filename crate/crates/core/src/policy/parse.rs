//! Recursive-descent parser for the policy language.
//!
//! ```text
//! policy    := 'policy' STRING 'source' ('resource'|'vo') '{' item* '}'
//! item      := block | 'trust' 'vo' STRING ';' | 'allocation' INT 'cpu-seconds' ';'
//!            | 'member-quota' STRING INT 'cpu-seconds' ';'
//! block     := 'subject' matcher '{' stmt* '}'
//! matcher   := 'identity' STRING | 'group' STRING | 'any'
//! stmt      := 'allow' 'action' actions ('on' 'jobtag' STRING (',' STRING)*)? ';'
//!            | 'attr' NAME vspec ';'
//!            | 'require' 'attr' NAME vspec? ';'
//!            | 'forbid'  'attr' NAME vspec? ';'
//!            | 'closed-world' ';'
//! vspec     := 'in' '{' STRING (',' STRING)* '}' | 'range' INT '..' INT
//!            | 'matches' STRING | 'max' INT | 'min' INT | vspec 'or' vspec
//! ```
//!
//! `#` starts a comment that runs to the end of the line.

use std::collections::BTreeSet;

use thiserror::Error;

use super::{Assertion, Matcher, Pattern, PolicyDocument, PolicySource, SubjectBlock, ValueSpec};
use crate::rsl::JobAction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("{line}:{col}: syntax error: expected {expected}, found {found}")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
        found: String,
    },
    #[error("{line}:{col}: bad regex: {message}")]
    BadRegex {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("{line}:{col}: bad range {lo}..{hi}")]
    BadRange {
        line: usize,
        col: usize,
        lo: i64,
        hi: i64,
    },
    #[error("{line}:{col}: misplaced clause: {reason}")]
    MisplacedClause {
        line: usize,
        col: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Str(String),
    Int(i64),
    Word(String),
    LBrace,
    RBrace,
    Semi,
    Comma,
    DotDot,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Int(v) => format!("integer {v}"),
            Tok::Word(w) => format!("'{w}'"),
            Tok::LBrace => "'{'".into(),
            Tok::RBrace => "'}'".into(),
            Tok::Semi => "';'".into(),
            Tok::Comma => "','".into(),
            Tok::DotDot => "'..'".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, PolicyError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    let syntax = |line, col, expected: &str, found: String| PolicyError::Syntax {
        line,
        col,
        expected: expected.to_string(),
        found,
    };

    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let advance = |i: &mut usize, line: &mut usize, col: &mut usize| {
            if chars[*i] == '\n' {
                *line += 1;
                *col = 1;
            } else {
                *col += 1;
            }
            *i += 1;
        };

        if c.is_whitespace() {
            advance(&mut i, &mut line, &mut col);
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                advance(&mut i, &mut line, &mut col);
            }
            continue;
        }

        let tok = match c {
            '{' => {
                advance(&mut i, &mut line, &mut col);
                Tok::LBrace
            }
            '}' => {
                advance(&mut i, &mut line, &mut col);
                Tok::RBrace
            }
            ';' => {
                advance(&mut i, &mut line, &mut col);
                Tok::Semi
            }
            ',' => {
                advance(&mut i, &mut line, &mut col);
                Tok::Comma
            }
            '.' => {
                if chars.get(i + 1) != Some(&'.') {
                    return Err(syntax(line, col, "'..'", "'.'".into()));
                }
                advance(&mut i, &mut line, &mut col);
                advance(&mut i, &mut line, &mut col);
                Tok::DotDot
            }
            '"' => {
                advance(&mut i, &mut line, &mut col);
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None => {
                            return Err(syntax(line, col, "closing '\"'", "end of input".into()))
                        }
                        Some('"') => {
                            advance(&mut i, &mut line, &mut col);
                            break;
                        }
                        Some('\\') => {
                            advance(&mut i, &mut line, &mut col);
                            match chars.get(i) {
                                Some(&e @ ('"' | '\\')) => {
                                    s.push(e);
                                    advance(&mut i, &mut line, &mut col);
                                }
                                other => {
                                    return Err(syntax(
                                        line,
                                        col,
                                        "'\\\"' or '\\\\' escape",
                                        format!("{other:?}"),
                                    ))
                                }
                            }
                        }
                        Some(&ch) => {
                            s.push(ch);
                            advance(&mut i, &mut line, &mut col);
                        }
                    }
                }
                Tok::Str(s)
            }
            c if c == '-' || c.is_ascii_digit() => {
                let mut s = String::new();
                if c == '-' {
                    s.push('-');
                    advance(&mut i, &mut line, &mut col);
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    s.push(chars[i]);
                    advance(&mut i, &mut line, &mut col);
                }
                if s == "-" {
                    return Err(syntax(start_line, start_col, "digit after '-'", "'-'".into()));
                }
                let v = s
                    .parse::<i64>()
                    .map_err(|_| syntax(start_line, start_col, "64-bit integer", s.clone()))?;
                Tok::Int(v)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '-')
                {
                    s.push(chars[i]);
                    advance(&mut i, &mut line, &mut col);
                }
                Tok::Word(s)
            }
            other => {
                return Err(syntax(line, col, "token", format!("'{other}'")));
            }
        };
        out.push(Spanned {
            tok,
            line: start_line,
            col: start_col,
        });
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

/// Parses a policy document. Regexes are compiled and every structural
/// invariant checked before a document is returned.
pub fn parse_policy(text: &str) -> Result<PolicyDocument, PolicyError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0 };
    let doc = p.document()?;
    p.expect_eof()?;
    Ok(doc)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> PolicyError {
        let t = self.peek();
        PolicyError::Syntax {
            line: t.line,
            col: t.col,
            expected: expected.to_string(),
            found: t.tok.describe(),
        }
    }

    fn misplaced(&self, at: &Spanned, reason: impl Into<String>) -> PolicyError {
        PolicyError::MisplacedClause {
            line: at.line,
            col: at.col,
            reason: reason.into(),
        }
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(x) if x == w)
    }

    fn keyword(&mut self, w: &str) -> Result<Spanned, PolicyError> {
        if self.is_word(w) {
            Ok(self.next())
        } else {
            Err(self.error(&format!("'{w}'")))
        }
    }

    fn punct(&mut self, tok: Tok) -> Result<(), PolicyError> {
        if self.peek().tok == tok {
            self.next();
            Ok(())
        } else {
            Err(self.error(&tok.describe()))
        }
    }

    fn string(&mut self) -> Result<String, PolicyError> {
        match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            _ => Err(self.error("string")),
        }
    }

    fn int(&mut self) -> Result<i64, PolicyError> {
        match self.peek().tok {
            Tok::Int(v) => {
                self.next();
                Ok(v)
            }
            _ => Err(self.error("integer")),
        }
    }

    fn cpu_seconds(&mut self) -> Result<u64, PolicyError> {
        let v = self.int()?;
        if v < 0 {
            self.pos -= 1;
            return Err(self.error("non-negative integer"));
        }
        self.keyword("cpu-seconds")?;
        Ok(v as u64)
    }

    fn expect_eof(&mut self) -> Result<(), PolicyError> {
        if self.peek().tok == Tok::Eof {
            Ok(())
        } else {
            Err(self.error("end of input"))
        }
    }

    fn document(&mut self) -> Result<PolicyDocument, PolicyError> {
        self.keyword("policy")?;
        let name = self.string()?;
        self.keyword("source")?;
        let source = if self.is_word("resource") {
            self.next();
            PolicySource::Resource
        } else if self.is_word("vo") {
            self.next();
            PolicySource::Vo
        } else {
            return Err(self.error("'resource' or 'vo'"));
        };
        let mut doc = PolicyDocument::new(name, source);
        self.punct(Tok::LBrace)?;
        loop {
            let at = self.peek().clone();
            match &at.tok {
                Tok::RBrace => {
                    self.next();
                    break;
                }
                Tok::Word(w) if w == "subject" => {
                    let block = self.block()?;
                    doc.blocks.push(block);
                }
                Tok::Word(w) if w == "trust" => {
                    self.next();
                    self.keyword("vo")?;
                    let vo = self.string()?;
                    self.punct(Tok::Semi)?;
                    if source != PolicySource::Resource {
                        return Err(self.misplaced(&at, "'trust' is only valid in a resource policy"));
                    }
                    if doc.trust.contains(&vo) {
                        return Err(self.misplaced(&at, format!("vo \"{vo}\" trusted twice")));
                    }
                    doc.trust.push(vo);
                }
                Tok::Word(w) if w == "allocation" => {
                    self.next();
                    let amount = self.cpu_seconds()?;
                    self.punct(Tok::Semi)?;
                    if source != PolicySource::Vo {
                        return Err(self.misplaced(&at, "'allocation' is only valid in a vo policy"));
                    }
                    if doc.allocation.is_some() {
                        return Err(self.misplaced(&at, "duplicate 'allocation'"));
                    }
                    doc.allocation = Some(amount);
                }
                Tok::Word(w) if w == "member-quota" => {
                    self.next();
                    let dn = self.string()?;
                    let amount = self.cpu_seconds()?;
                    self.punct(Tok::Semi)?;
                    if source != PolicySource::Vo {
                        return Err(self.misplaced(&at, "'member-quota' is only valid in a vo policy"));
                    }
                    if doc.member_quotas.insert(dn.clone(), amount).is_some() {
                        return Err(self.misplaced(&at, format!("duplicate member-quota for \"{dn}\"")));
                    }
                }
                _ => {
                    return Err(self.error("'subject', 'trust', 'allocation', 'member-quota' or '}'"))
                }
            }
        }
        Ok(doc)
    }

    fn block(&mut self) -> Result<SubjectBlock, PolicyError> {
        self.keyword("subject")?;
        let matcher = if self.is_word("identity") {
            self.next();
            Matcher::Identity(self.string()?)
        } else if self.is_word("group") {
            self.next();
            Matcher::Group(self.string()?)
        } else if self.is_word("any") {
            self.next();
            Matcher::Any
        } else {
            return Err(self.error("'identity', 'group' or 'any'"));
        };
        let mut block = SubjectBlock::new(matcher);
        self.punct(Tok::LBrace)?;
        loop {
            let at = self.peek().clone();
            match &at.tok {
                Tok::RBrace => {
                    self.next();
                    return Ok(block);
                }
                Tok::Word(w) => match w.as_str() {
                    "allow" => self.allow(&mut block, &at)?,
                    "attr" => {
                        self.next();
                        let name = self.attr_name()?;
                        let spec = self.vspec()?;
                        block.assertions.push(Assertion::MayContain(name, spec));
                        self.punct(Tok::Semi)?;
                    }
                    "require" | "forbid" => {
                        let require = w == "require";
                        self.next();
                        self.keyword("attr")?;
                        let name = self.attr_name()?;
                        let spec = if self.peek().tok == Tok::Semi {
                            None
                        } else {
                            Some(self.vspec()?)
                        };
                        self.punct(Tok::Semi)?;
                        block.assertions.push(if require {
                            Assertion::MustContain(name, spec)
                        } else {
                            Assertion::MustNotContain(name, spec)
                        });
                    }
                    "closed-world" => {
                        self.next();
                        self.punct(Tok::Semi)?;
                        block.closed_world = true;
                    }
                    _ => return Err(self.error("statement")),
                },
                _ => return Err(self.error("statement or '}'")),
            }
        }
    }

    fn allow(&mut self, block: &mut SubjectBlock, at: &Spanned) -> Result<(), PolicyError> {
        self.keyword("allow")?;
        self.keyword("action")?;
        let mut actions = vec![self.action()?];
        while self.peek().tok == Tok::Comma {
            self.next();
            actions.push(self.action()?);
        }
        let mut tags: Option<BTreeSet<String>> = None;
        if self.is_word("on") {
            self.next();
            self.keyword("jobtag")?;
            let mut set = BTreeSet::new();
            set.insert(self.string()?);
            while self.peek().tok == Tok::Comma {
                self.next();
                set.insert(self.string()?);
            }
            tags = Some(set);
        }
        self.punct(Tok::Semi)?;

        for action in actions {
            match &tags {
                None => {
                    block.allowed_actions.insert(action);
                    block.jobtag_grants.remove(&action);
                }
                Some(_) if action == JobAction::Start => {
                    return Err(self.misplaced(at, "jobtag grants cannot apply to 'start'"));
                }
                Some(set) => {
                    let unrestricted = block.allowed_actions.contains(&action)
                        && !block.jobtag_grants.contains_key(&action);
                    if !unrestricted {
                        block.allowed_actions.insert(action);
                        block
                            .jobtag_grants
                            .entry(action)
                            .or_default()
                            .extend(set.iter().cloned());
                    }
                }
            }
        }
        Ok(())
    }

    fn action(&mut self) -> Result<JobAction, PolicyError> {
        let expected = "action (start, cancel, status, suspend, resume, set_priority)";
        match &self.peek().tok {
            Tok::Word(w) => match w.parse::<JobAction>() {
                Ok(a) => {
                    self.next();
                    Ok(a)
                }
                Err(_) => Err(self.error(expected)),
            },
            _ => Err(self.error(expected)),
        }
    }

    fn attr_name(&mut self) -> Result<String, PolicyError> {
        match &self.peek().tok {
            Tok::Word(w) if !w.contains('-') => {
                let name = w.to_ascii_lowercase();
                self.next();
                Ok(name)
            }
            _ => Err(self.error("attribute name")),
        }
    }

    fn vspec(&mut self) -> Result<ValueSpec, PolicyError> {
        let mut alts = vec![self.vspec_primary()?];
        while self.is_word("or") {
            self.next();
            alts.push(self.vspec_primary()?);
        }
        Ok(if alts.len() == 1 {
            alts.pop().expect("one alternative")
        } else {
            ValueSpec::Or(alts)
        })
    }

    fn vspec_primary(&mut self) -> Result<ValueSpec, PolicyError> {
        let at = self.peek().clone();
        let word = match &at.tok {
            Tok::Word(w) => w.clone(),
            _ => return Err(self.error("value spec ('in', 'range', 'matches', 'max', 'min')")),
        };
        match word.as_str() {
            "in" => {
                self.next();
                self.punct(Tok::LBrace)?;
                let mut set = BTreeSet::new();
                set.insert(self.string()?);
                while self.peek().tok == Tok::Comma {
                    self.next();
                    set.insert(self.string()?);
                }
                self.punct(Tok::RBrace)?;
                Ok(ValueSpec::Enum(set))
            }
            "range" => {
                self.next();
                let lo = self.int()?;
                self.punct(Tok::DotDot)?;
                let hi = self.int()?;
                if lo > hi {
                    return Err(PolicyError::BadRange {
                        line: at.line,
                        col: at.col,
                        lo,
                        hi,
                    });
                }
                Ok(ValueSpec::Range(lo, hi))
            }
            "matches" => {
                self.next();
                let src_at = self.peek().clone();
                let src = self.string()?;
                Pattern::new(&src)
                    .map(ValueSpec::Regex)
                    .map_err(|e| PolicyError::BadRegex {
                        line: src_at.line,
                        col: src_at.col,
                        message: e.to_string(),
                    })
            }
            "max" => {
                self.next();
                Ok(ValueSpec::Max(self.int()?))
            }
            "min" => {
                self.next();
                Ok(ValueSpec::Min(self.int()?))
            }
            _ => Err(self.error("value spec ('in', 'range', 'matches', 'max', 'min')")),
        }
    }
}
