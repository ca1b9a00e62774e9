//! Enforcement: dynamic account leasing, sandbox limits and the VO
//! allocation ledger. All amounts are cpu-seconds; memory and disk are
//! limits only and are never charged.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rsl::RslRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuotaScope {
    Vo,
    Member,
}

impl fmt::Display for QuotaScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuotaScope::Vo => "vo",
            QuotaScope::Member => "member",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("quota exceeded ({0})")]
    QuotaExceeded(QuotaScope),
    #[error("unknown vo '{0}'")]
    UnknownVo(String),
    #[error("unknown member '{member}' of vo '{vo}'")]
    UnknownMember { vo: String, member: String },
    #[error("settlement exceeds reservation")]
    Underflow,
    #[error("limit {limit} is below current usage {used}")]
    BelowUsage { limit: u64, used: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberAccount {
    pub quota: u64,
    pub used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoAccount {
    pub allocation: u64,
    pub used: u64,
    pub members: BTreeMap<String, MemberAccount>,
}

/// Per-VO allocation and per-member quota bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationLedger {
    vos: BTreeMap<String, VoAccount>,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vo(&self, vo: &str) -> Option<&VoAccount> {
        self.vos.get(vo)
    }

    pub fn member(&self, vo: &str, member: &str) -> Option<&MemberAccount> {
        self.vos.get(vo)?.members.get(member)
    }

    /// Creates the VO or changes its allocation.
    pub fn configure_vo(&mut self, vo: &str, allocation: u64) -> Result<(), LedgerError> {
        let acct = self.vos.entry(vo.to_string()).or_insert(VoAccount {
            allocation,
            used: 0,
            members: BTreeMap::new(),
        });
        if allocation < acct.used {
            return Err(LedgerError::BelowUsage {
                limit: allocation,
                used: acct.used,
            });
        }
        acct.allocation = allocation;
        Ok(())
    }

    /// Creates the member or changes their quota.
    pub fn configure_member(&mut self, vo: &str, member: &str, quota: u64) -> Result<(), LedgerError> {
        let acct = self
            .vos
            .get_mut(vo)
            .ok_or_else(|| LedgerError::UnknownVo(vo.to_string()))?;
        let m = acct
            .members
            .entry(member.to_string())
            .or_insert(MemberAccount { quota, used: 0 });
        if quota < m.used {
            return Err(LedgerError::BelowUsage { limit: quota, used: m.used });
        }
        m.quota = quota;
        Ok(())
    }

    /// Charges `amount` to both the VO and the member, or to neither.
    pub fn reserve(&mut self, vo: &str, member: &str, amount: u64) -> Result<(), LedgerError> {
        let acct = self
            .vos
            .get_mut(vo)
            .ok_or_else(|| LedgerError::UnknownVo(vo.to_string()))?;
        let m = acct.members.get_mut(member).ok_or_else(|| LedgerError::UnknownMember {
            vo: vo.to_string(),
            member: member.to_string(),
        })?;
        if amount == 0 {
            return Ok(());
        }
        let member_used = m.used.checked_add(amount).filter(|u| *u <= m.quota);
        let vo_used = acct.used.checked_add(amount).filter(|u| *u <= acct.allocation);
        match (member_used, vo_used) {
            (None, _) => Err(LedgerError::QuotaExceeded(QuotaScope::Member)),
            (_, None) => Err(LedgerError::QuotaExceeded(QuotaScope::Vo)),
            (Some(mu), Some(vu)) => {
                m.used = mu;
                acct.used = vu;
                Ok(())
            }
        }
    }

    /// Refunds `reserved - consumed`.
    pub fn settle(&mut self, vo: &str, member: &str, reserved: u64, consumed: u64) -> Result<(), LedgerError> {
        let acct = self
            .vos
            .get_mut(vo)
            .ok_or_else(|| LedgerError::UnknownVo(vo.to_string()))?;
        let m = acct.members.get_mut(member).ok_or_else(|| LedgerError::UnknownMember {
            vo: vo.to_string(),
            member: member.to_string(),
        })?;
        let refund = reserved.checked_sub(consumed).ok_or(LedgerError::Underflow)?;
        if reserved > m.used || reserved > acct.used {
            return Err(LedgerError::Underflow);
        }
        m.used -= refund;
        acct.used -= refund;
        Ok(())
    }

    /// Checks the structural invariants, describing the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, acct) in &self.vos {
            if acct.used > acct.allocation {
                return Err(format!("vo {name}: used {} > allocation {}", acct.used, acct.allocation));
            }
            let mut sum = 0u64;
            for (dn, m) in &acct.members {
                if m.used > m.quota {
                    return Err(format!("member {dn}: used {} > quota {}", m.used, m.quota));
                }
                sum += m.used;
            }
            if sum > acct.used {
                return Err(format!("vo {name}: member usage {sum} > vo usage {}", acct.used));
            }
        }
        Ok(())
    }

    /// `vo=<name> used=<n>/<alloc>` lines, each followed by its members'
    /// `member=<dn> used=<n>/<quota>` lines sorted by DN.
    pub fn report(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, acct) in &self.vos {
            out.push(format!("vo={name} used={}/{}", acct.used, acct.allocation));
            for (dn, m) in &acct.members {
                out.push(format!("member={dn} used={}/{}", m.used, m.quota));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxSpec {
    pub max_memory: u64,
    pub max_disk: u64,
    pub max_cpu: u64,
    pub groups: BTreeSet<String>,
}

/// Fallback limits used when neither the request nor the policy bounds a
/// dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxDefaults {
    pub max_memory: u64,
    pub max_disk: u64,
    pub max_cpu: u64,
}

impl Default for SandboxDefaults {
    fn default() -> Self {
        SandboxDefaults {
            max_memory: 4096,
            max_disk: 10_240,
            max_cpu: 86_400,
        }
    }
}

/// Upper bounds the permitting policy places on per-process attributes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PolicyCaps {
    pub max_cpu_time: Option<u64>,
    pub max_memory: Option<u64>,
}

fn min_some(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

impl SandboxSpec {
    /// cpu is `count × maxcputime` and memory is `maxmemory`, each bounded
    /// by the policy cap when both exist and falling back to the default
    /// when neither does.
    pub fn derive(
        req: &RslRequest,
        caps: PolicyCaps,
        defaults: SandboxDefaults,
        groups: impl IntoIterator<Item = String>,
    ) -> SandboxSpec {
        let per_process = min_some(req.max_cpu_time(), caps.max_cpu_time);
        let max_cpu = per_process
            .map(|t| t.saturating_mul(req.count()))
            .unwrap_or(defaults.max_cpu);
        let max_memory = min_some(req.max_memory(), caps.max_memory).unwrap_or(defaults.max_memory);
        SandboxSpec {
            max_memory: max_memory.max(1),
            max_disk: defaults.max_disk.max(1),
            max_cpu: max_cpu.max(1),
            groups: groups.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSample {
    pub cpu: u64,
    pub memory: u64,
    pub disk: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitDimension {
    Cpu,
    Memory,
    Disk,
}

impl fmt::Display for LimitDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LimitDimension::Cpu => "cpu",
            LimitDimension::Memory => "memory",
            LimitDimension::Disk => "disk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("limit breached: {0}")]
pub struct LimitBreached(pub LimitDimension);

/// Compares cumulative usage against the limits, inclusive, in the order
/// cpu, memory, disk.
pub fn record_usage(spec: &SandboxSpec, cum: UsageSample) -> Result<(), LimitBreached> {
    if cum.cpu > spec.max_cpu {
        Err(LimitBreached(LimitDimension::Cpu))
    } else if cum.memory > spec.max_memory {
        Err(LimitBreached(LimitDimension::Memory))
    } else if cum.disk > spec.max_disk {
        Err(LimitBreached(LimitDimension::Disk))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("dynamic account pool exhausted")]
    PoolExhausted,
    #[error("unknown lease '{0}'")]
    UnknownLease(String),
    #[error("duplicate account '{0}'")]
    DuplicateAccount(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub subject: String,
    pub spec: SandboxSpec,
    pub expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalAccountLease {
    pub account: String,
    pub expiry: u64,
}

/// Accounts created on the fly for users without a static mapping.
/// Leasing is FIFO over the free list; released accounts rejoin at the back.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicAccountPool {
    free: VecDeque<String>,
    leased: BTreeMap<String, Lease>,
}

impl DynamicAccountPool {
    pub fn new<I, S>(accounts: I) -> Result<Self, PoolError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut pool = DynamicAccountPool::default();
        let mut seen = BTreeSet::new();
        for a in accounts {
            let a = a.into();
            if !seen.insert(a.clone()) {
                return Err(PoolError::DuplicateAccount(a));
            }
            pool.free.push_back(a);
        }
        Ok(pool)
    }

    pub fn free(&self) -> impl Iterator<Item = &str> {
        self.free.iter().map(String::as_str)
    }

    pub fn leased(&self) -> impl Iterator<Item = (&str, &Lease)> {
        self.leased.iter().map(|(a, l)| (a.as_str(), l))
    }

    pub fn lease(&self, account: &str) -> Option<&Lease> {
        self.leased.get(account)
    }

    /// Total number of accounts, free or leased.
    pub fn size(&self) -> usize {
        self.free.len() + self.leased.len()
    }

    pub fn lease_account(&mut self, subject: &str, spec: SandboxSpec, expiry: u64) -> Result<LocalAccountLease, PoolError> {
        let account = self.free.pop_front().ok_or(PoolError::PoolExhausted)?;
        self.leased.insert(
            account.clone(),
            Lease {
                subject: subject.to_string(),
                spec,
                expiry,
            },
        );
        Ok(LocalAccountLease { account, expiry })
    }

    /// Scrubs the account and returns it to the free list.
    pub fn release_account(&mut self, account: &str) -> Result<(), PoolError> {
        self.leased
            .remove(account)
            .ok_or_else(|| PoolError::UnknownLease(account.to_string()))?;
        self.free.push_back(account.to_string());
        Ok(())
    }

    pub fn renew(&mut self, account: &str, expiry: u64) -> Result<(), PoolError> {
        let lease = self
            .leased
            .get_mut(account)
            .ok_or_else(|| PoolError::UnknownLease(account.to_string()))?;
        lease.expiry = lease.expiry.max(expiry);
        Ok(())
    }

    /// Leased accounts whose lease ran out before `now`.
    pub fn expired(&self, now: u64) -> Vec<String> {
        self.leased
            .iter()
            .filter(|(_, l)| l.expiry < now)
            .map(|(a, _)| a.clone())
            .collect()
    }
}
