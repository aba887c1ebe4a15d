use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// How far a store allows recorded events to be changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degree {
    /// Events are never modified or removed.
    Strict,
    /// Modification is allowed once a backup of the affected stream exists.
    CutOff,
    /// Modification is allowed; only the mutation journal keeps the history.
    Mutable,
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Degree::Strict => "strict",
            Degree::CutOff => "cut-off",
            Degree::Mutable => "mutable",
        })
    }
}

impl FromStr for Degree {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(Degree::Strict),
            "cut-off" | "cut_off" | "cutoff" => Ok(Degree::CutOff),
            "mutable" => Ok(Degree::Mutable),
            other => Err(format!("unknown immutability degree `{other}` (strict, cut-off, mutable)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "PolicyRepr", into = "PolicyRepr")]
pub struct ImmutabilityPolicy {
    degree: Degree,
    backup_required_on_mutation: bool,
    archival_exemption: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    degree: Degree,
    #[serde(default)]
    backup_required_on_mutation: bool,
    #[serde(default)]
    archival_exemption: bool,
}

impl From<PolicyRepr> for ImmutabilityPolicy {
    fn from(r: PolicyRepr) -> Self {
        ImmutabilityPolicy::new(r.degree)
            .with_backup_required(r.backup_required_on_mutation)
            .with_archival_exemption(r.archival_exemption)
    }
}

impl From<ImmutabilityPolicy> for PolicyRepr {
    fn from(p: ImmutabilityPolicy) -> Self {
        PolicyRepr {
            degree: p.degree,
            backup_required_on_mutation: p.backup_required_on_mutation,
            archival_exemption: p.archival_exemption,
        }
    }
}

impl ImmutabilityPolicy {
    pub fn new(degree: Degree) -> Self {
        Self {
            degree,
            backup_required_on_mutation: degree == Degree::CutOff,
            archival_exemption: false,
        }
    }

    pub fn strict() -> Self {
        Self::new(Degree::Strict)
    }

    pub fn cut_off() -> Self {
        Self::new(Degree::CutOff)
    }

    pub fn mutable() -> Self {
        Self::new(Degree::Mutable)
    }

    /// Backups are always required under `cut_off`; the flag only matters
    /// for `mutable` stores.
    pub fn with_backup_required(mut self, required: bool) -> Self {
        self.backup_required_on_mutation = required || self.degree == Degree::CutOff;
        self
    }

    /// Allows moving events to cold storage even on a strict store.
    pub fn with_archival_exemption(mut self, exempt: bool) -> Self {
        self.archival_exemption = exempt;
        self
    }

    pub fn degree(&self) -> Degree {
        self.degree
    }

    pub fn backup_required(&self) -> bool {
        self.backup_required_on_mutation
    }

    pub fn archival_exemption(&self) -> bool {
        self.archival_exemption
    }

    pub fn permits_mutation(&self) -> bool {
        self.degree != Degree::Strict
    }

    pub fn permits_archive(&self) -> bool {
        self.degree != Degree::Strict || self.archival_exemption
    }
}
