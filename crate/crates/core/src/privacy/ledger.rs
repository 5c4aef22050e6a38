//! Append-only record of noisy mechanism invocations, one ledger per
//! budget domain.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// The private dataset a ledger covers: one class of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainTag {
    pub task: usize,
    pub class: usize,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task {} class {}", self.task, self.class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub q: f64,
    pub sigma: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    domain: DomainTag,
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(domain: DomainTag) -> Self {
        Self {
            domain,
            entries: Vec::new(),
        }
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total mechanism invocations recorded.
    pub fn steps(&self) -> u64 {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn append(&mut self, q: f64, sigma: f64, count: u64) -> Result<()> {
        if count == 0 {
            return Err(Error::InvalidArgument("ledger entry count must be positive".into()));
        }
        if !(q > 0.0 && q <= 1.0) || !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid ledger entry q={q} sigma={sigma}")));
        }
        self.entries.push(LedgerEntry { q, sigma, count });
        Ok(())
    }
}

/// Ledgers of several domains. Entries of one domain are concatenated;
/// different domains are never summed (their data are disjoint).
#[derive(Debug, Clone, Default)]
pub struct LedgerBook {
    ledgers: BTreeMap<DomainTag, PrivacyLedger>,
}

impl LedgerBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, ledger: PrivacyLedger) {
        match self.ledgers.get_mut(&ledger.domain) {
            Some(existing) => existing.entries.extend(ledger.entries),
            None => {
                self.ledgers.insert(ledger.domain, ledger);
            }
        }
    }

    pub fn get(&self, domain: DomainTag) -> Option<&PrivacyLedger> {
        self.ledgers.get(&domain)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PrivacyLedger> {
        self.ledgers.values()
    }

    pub fn len(&self) -> usize {
        self.ledgers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ledgers.is_empty()
    }
}
