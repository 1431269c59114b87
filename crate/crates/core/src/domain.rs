//! Security domains and canonical domain sets.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("domain id must be non-empty ASCII without whitespace: {0:?}")]
    BadId(String),
    #[error("unknown domain: {0}")]
    Unknown(String),
}

/// Identifier of one security domain, e.g. `d0`. Ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(String);

impl DomainId {
    pub fn new(id: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        if id.is_empty() || !id.is_ascii() || id.chars().any(|c| c.is_whitespace()) {
            return Err(DomainError::BadId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A sorted, duplicate-free set of domain ids. Its canonical string form
/// (members joined by `+`) is the lookup key used everywhere a set of
/// domains maps to something.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<DomainId>", into = "Vec<DomainId>")]
pub struct DomainSet {
    members: Vec<DomainId>,
}

impl DomainSet {
    pub fn empty() -> Self {
        Self { members: Vec::new() }
    }

    pub fn new(mut members: Vec<DomainId>) -> Self {
        members.sort();
        members.dedup();
        Self { members }
    }

    pub fn singleton(d: DomainId) -> Self {
        Self { members: vec![d] }
    }

    pub fn members(&self) -> &[DomainId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, d: &DomainId) -> bool {
        self.members.binary_search(d).is_ok()
    }

    pub fn is_subset_of(&self, other: &[DomainId]) -> bool {
        self.members.iter().all(|d| other.contains(d))
    }

    pub fn is_disjoint(&self, other: &DomainSet) -> bool {
        self.members.iter().all(|d| !other.contains(d))
    }

    /// Canonical map key: sorted members joined by `+`.
    pub fn key(&self) -> String {
        let parts: Vec<&str> = self.members.iter().map(|d| d.as_str()).collect();
        parts.join("+")
    }
}

impl From<DomainSet> for Vec<DomainId> {
    fn from(s: DomainSet) -> Self {
        s.members
    }
}

impl TryFrom<Vec<DomainId>> for DomainSet {
    type Error = String;
    fn try_from(v: Vec<DomainId>) -> Result<Self, Self::Error> {
        Ok(DomainSet::new(v))
    }
}

impl fmt::Display for DomainSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.members.is_empty() {
            f.write_str("{}")
        } else {
            write!(f, "{{{}}}", self.key())
        }
    }
}
