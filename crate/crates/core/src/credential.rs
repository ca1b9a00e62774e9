//! Simulated grid identities and VO-signed capability tokens.
//!
//! Credentials are plain local files and carry no signature. Capability
//! tokens are the push-mode artifact: a VO issues claims that embed the
//! slice of its policy applicable to the holder, tagged with HMAC-SHA256
//! under a key the resource has registered for that VO.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::policy::{parse_policy, PolicyDocument, PolicySource};

type HmacSha256 = Hmac<Sha256>;

pub const POLICY_BEGIN: &str = "---BEGIN POLICY---";
pub const POLICY_END: &str = "---END POLICY---";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("format error: {0}")]
    Format(String),
    #[error("missing field '{0}'")]
    MissingField(String),
    #[error("invalid claims: {0}")]
    InvalidClaims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CapabilityError {
    #[error("unknown issuer")]
    UnknownIssuer,
    #[error("bad signature")]
    BadSignature,
    #[error("expired")]
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCredential {
    pub subject: String,
    pub vo: Option<String>,
    pub groups: BTreeSet<String>,
    /// Unix seconds.
    pub expiry: u64,
}

impl GridCredential {
    pub fn new<I, S>(
        subject: impl Into<String>,
        vo: Option<&str>,
        groups: I,
        expiry: u64,
    ) -> Result<Self, CredentialError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let cred = GridCredential {
            subject: subject.into(),
            vo: vo.map(str::to_string),
            groups: groups.into_iter().map(Into::into).collect(),
            expiry,
        };
        cred.check()?;
        Ok(cred)
    }

    fn check(&self) -> Result<(), CredentialError> {
        if self.subject.trim().is_empty() {
            return Err(CredentialError::Format("empty subject".into()));
        }
        if self.vo.is_none() && !self.groups.is_empty() {
            return Err(CredentialError::Format("groups require a vo".into()));
        }
        if matches!(&self.vo, Some(vo) if vo.trim().is_empty()) {
            return Err(CredentialError::Format("empty vo".into()));
        }
        if self.expiry == 0 {
            return Err(CredentialError::Format("expiry must be positive".into()));
        }
        Ok(())
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expiry
    }

    /// Renders the credential file format.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("subject: {}\n", self.subject);
        if let Some(vo) = &self.vo {
            writeln!(out, "vo: {vo}").unwrap();
            let groups: Vec<&str> = self.groups.iter().map(String::as_str).collect();
            writeln!(out, "groups: {}", groups.join(",")).unwrap();
        }
        writeln!(out, "expiry: {}", self.expiry).unwrap();
        out
    }
}

/// Parses a `.cred` file: `key: value` lines for `subject`, `vo`,
/// `groups` (comma-separated) and `expiry` (unix seconds). Blank lines and
/// `#` comments are ignored. An expiry in the past is accepted here.
pub fn load_credential(text: &str) -> Result<GridCredential, CredentialError> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| CredentialError::Format(format!("line {}: expected 'key: value'", n + 1)))?;
        let key = key.trim();
        if !matches!(key, "subject" | "vo" | "groups" | "expiry") {
            return Err(CredentialError::Format(format!("line {}: unknown field '{key}'", n + 1)));
        }
        if fields.insert(key, value.trim()).is_some() {
            return Err(CredentialError::Format(format!("line {}: duplicate field '{key}'", n + 1)));
        }
    }
    let subject = fields
        .get("subject")
        .ok_or_else(|| CredentialError::MissingField("subject".into()))?;
    let expiry = fields
        .get("expiry")
        .ok_or_else(|| CredentialError::MissingField("expiry".into()))?
        .parse::<u64>()
        .map_err(|_| CredentialError::Format("expiry must be unix seconds".into()))?;
    let vo = fields.get("vo").copied().filter(|v| !v.is_empty());
    let groups = parse_groups(fields.get("groups").copied().unwrap_or(""));
    GridCredential::new(*subject, vo, groups, expiry)
}

fn parse_groups(s: &str) -> BTreeSet<String> {
    s.split(',')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(str::to_string)
        .collect()
}

/// Grid identity to local account mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridMapFile {
    entries: BTreeMap<String, String>,
}

impl GridMapFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dn: impl Into<String>, account: impl Into<String>) -> Result<(), CredentialError> {
        let dn = dn.into();
        let account = account.into();
        if !valid_account_name(&account) {
            return Err(CredentialError::Format(format!("invalid account name '{account}'")));
        }
        if self.entries.contains_key(&dn) {
            return Err(CredentialError::Format(format!("duplicate DN \"{dn}\"")));
        }
        self.entries.insert(dn, account);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses `"<DN>" <account>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CredentialError> {
        let mut map = GridMapFile::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| CredentialError::Format(format!("grid-mapfile line {}: {msg}", n + 1));
            let rest = line.strip_prefix('"').ok_or_else(|| err("expected quoted DN"))?;
            let mut dn = String::new();
            let mut chars = rest.char_indices();
            let mut end = None;
            while let Some((i, c)) = chars.next() {
                match c {
                    '"' => {
                        end = Some(i + 1);
                        break;
                    }
                    '\\' => match chars.next() {
                        Some((_, e @ ('"' | '\\'))) => dn.push(e),
                        _ => return Err(err("bad escape in DN")),
                    },
                    c => dn.push(c),
                }
            }
            let end = end.ok_or_else(|| err("unterminated DN"))?;
            let account = rest[end..].split('#').next().unwrap_or("").trim();
            if account.is_empty() || account.contains(char::is_whitespace) {
                return Err(err("expected one account name"));
            }
            map.insert(dn, account).map_err(|e| err(&e.to_string()))?;
        }
        Ok(map)
    }
}

fn valid_account_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

/// Exact-match lookup; `None` means the subject has no static account.
pub fn map_identity<'a>(map: &'a GridMapFile, subject: &str) -> Option<&'a str> {
    map.entries.get(subject).map(String::as_str)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapabilityClaims {
    pub subject: String,
    pub vo: String,
    pub groups: BTreeSet<String>,
    pub expiry: u64,
    /// Pretty-printed VO policy restricted to the subject's blocks.
    pub policy_fragment: String,
}

impl CapabilityClaims {
    /// The bytes covered by the MAC. Groups are sorted, so insertion order
    /// never changes the output.
    pub fn canonical(&self) -> String {
        let groups: Vec<&str> = self.groups.iter().map(String::as_str).collect();
        let mut out = String::new();
        writeln!(out, "subject: {}", self.subject).unwrap();
        writeln!(out, "vo: {}", self.vo).unwrap();
        if groups.is_empty() {
            out.push_str("groups:\n");
        } else {
            writeln!(out, "groups: {}", groups.join(",")).unwrap();
        }
        writeln!(out, "expiry: {}", self.expiry).unwrap();
        writeln!(out, "{POLICY_BEGIN}").unwrap();
        out.push_str(&self.policy_fragment);
        if !self.policy_fragment.ends_with('\n') {
            out.push('\n');
        }
        writeln!(out, "{POLICY_END}").unwrap();
        out
    }

    pub fn fragment(&self) -> Result<PolicyDocument, CredentialError> {
        let doc = parse_policy(&self.policy_fragment)
            .map_err(|e| CredentialError::InvalidClaims(format!("policy fragment: {e}")))?;
        if doc.source != PolicySource::Vo {
            return Err(CredentialError::InvalidClaims("policy fragment is not a vo policy".into()));
        }
        Ok(doc)
    }

    fn check(&self) -> Result<(), CredentialError> {
        let bad = |m: &str| Err(CredentialError::InvalidClaims(m.into()));
        if self.subject.is_empty() || self.subject.contains('\n') {
            return bad("subject must be a non-empty single line");
        }
        if self.vo.is_empty() || self.vo.contains('\n') {
            return bad("vo must be a non-empty single line");
        }
        if self.groups.iter().any(|g| g.is_empty() || g.contains([',', '\n']) || g.trim() != g) {
            return bad("group names must be non-empty and free of commas");
        }
        if self.expiry == 0 {
            return bad("expiry must be positive");
        }
        if !self.policy_fragment.ends_with('\n')
            || self.policy_fragment.lines().any(|l| l == POLICY_BEGIN || l == POLICY_END)
        {
            return bad("policy fragment must be newline-terminated text without fence lines");
        }
        self.fragment().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapabilityToken {
    pub claims: CapabilityClaims,
    pub issuer_vo: String,
    pub mac: [u8; 32],
}

impl CapabilityToken {
    /// The `.cap` file: canonical claims followed by `mac: <64 hex>`.
    pub fn to_file_string(&self) -> String {
        format!("{}mac: {}\n", self.claims.canonical(), hex::encode(self.mac))
    }

    /// Parses a `.cap` file. Anything that is not byte-for-byte the
    /// canonical serialization is rejected.
    pub fn parse(text: &str) -> Result<Self, CredentialError> {
        let fmt = |m: &str| CredentialError::Format(format!("capability: {m}"));
        let body_end = text
            .strip_suffix('\n')
            .and_then(|t| t.rfind('\n'))
            .map(|i| i + 1)
            .ok_or_else(|| fmt("truncated token"))?;
        let (body, mac_line) = text.split_at(body_end);
        let mac_hex = mac_line
            .strip_prefix("mac: ")
            .and_then(|m| m.strip_suffix('\n'))
            .ok_or_else(|| fmt("missing mac line"))?;
        if mac_hex.len() != 64 || !mac_hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(fmt("mac must be 64 lowercase hex characters"));
        }
        let mut mac = [0u8; 32];
        hex::decode_to_slice(mac_hex, &mut mac).map_err(|_| fmt("bad mac"))?;

        let mut lines = body.split_inclusive('\n');
        let mut field = |key: &str| -> Result<String, CredentialError> {
            let line = lines.next().ok_or_else(|| CredentialError::MissingField(key.into()))?;
            let line = line.strip_suffix('\n').unwrap_or(line);
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(':'))
                .ok_or_else(|| CredentialError::MissingField(key.into()))?;
            Ok(value.strip_prefix(' ').unwrap_or(value).to_string())
        };
        let subject = field("subject")?;
        let vo = field("vo")?;
        let groups = field("groups")?;
        let expiry = field("expiry")?
            .parse::<u64>()
            .map_err(|_| fmt("expiry must be unix seconds"))?;
        let rest: String = lines.collect();
        let fragment = rest
            .strip_prefix(POLICY_BEGIN)
            .and_then(|r| r.strip_prefix('\n'))
            .and_then(|r| r.strip_suffix(POLICY_END).or_else(|| r.strip_suffix(&format!("{POLICY_END}\n"))))
            .ok_or_else(|| fmt("policy fragment must be fenced"))?;

        let claims = CapabilityClaims {
            subject,
            vo: vo.clone(),
            groups: groups.split(',').filter(|g| !g.is_empty()).map(str::to_string).collect(),
            expiry,
            policy_fragment: fragment.to_string(),
        };
        claims.check().map_err(|e| fmt(&e.to_string()))?;
        if claims.canonical() != body {
            return Err(fmt("not in canonical form"));
        }
        Ok(CapabilityToken {
            claims,
            issuer_vo: vo,
            mac,
        })
    }
}

fn compute_mac(key: &[u8; 32], claims: &CapabilityClaims) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(claims.canonical().as_bytes());
    mac
}

/// Tags `claims` with HMAC-SHA256 under the VO key. Signing is
/// deterministic: identical claims give identical tokens.
pub fn sign_capability(vo_key: &[u8; 32], claims: CapabilityClaims) -> Result<CapabilityToken, CredentialError> {
    claims.check()?;
    let tag = compute_mac(vo_key, &claims).finalize().into_bytes();
    Ok(CapabilityToken {
        issuer_vo: claims.vo.clone(),
        claims,
        mac: tag.into(),
    })
}

/// VO name to registered MAC key.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<String, [u8; 32]>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, vo: impl Into<String>, key: [u8; 32]) {
        self.keys.insert(vo.into(), key);
    }

    pub fn get(&self, vo: &str) -> Option<&[u8; 32]> {
        self.keys.get(vo)
    }

    /// Parses `<vo> <64 hex>` lines; `#` comments allowed.
    pub fn parse(text: &str) -> Result<Self, CredentialError> {
        let mut reg = KeyRegistry::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = || CredentialError::Format(format!("key file line {}: expected '<vo> <64 hex>'", n + 1));
            let (vo, hexkey) = line.split_once(char::is_whitespace).ok_or_else(err)?;
            let mut key = [0u8; 32];
            hex::decode_to_slice(hexkey.trim(), &mut key).map_err(|_| err())?;
            reg.insert(vo, key);
        }
        Ok(reg)
    }
}

/// Returns the claims iff the MAC verifies under the issuer's registered
/// key and `now` is before the expiry.
pub fn verify_capability(
    registry: &KeyRegistry,
    token: &CapabilityToken,
    now: u64,
) -> Result<CapabilityClaims, CapabilityError> {
    let key = registry.get(&token.issuer_vo).ok_or(CapabilityError::UnknownIssuer)?;
    if token.issuer_vo != token.claims.vo {
        return Err(CapabilityError::BadSignature);
    }
    compute_mac(key, &token.claims)
        .verify_slice(&token.mac)
        .map_err(|_| CapabilityError::BadSignature)?;
    if now >= token.claims.expiry {
        return Err(CapabilityError::Expired);
    }
    Ok(token.claims.clone())
}
