//! Subsets of the three heads, used both as training masks and score masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Heads {
    pub rec: bool,
    pub dev: bool,
    pub con: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { rec: true, dev: true, con: true };
    pub const REC: Heads = Heads { rec: true, dev: false, con: false };
    pub const DEV: Heads = Heads { rec: false, dev: true, con: false };
    pub const CON: Heads = Heads { rec: false, dev: false, con: true };
    pub const NONE: Heads = Heads { rec: false, dev: false, con: false };

    pub fn is_empty(&self) -> bool {
        !(self.rec || self.dev || self.con)
    }

    pub fn union(self, other: Heads) -> Heads {
        Heads { rec: self.rec || other.rec, dev: self.dev || other.dev, con: self.con || other.con }
    }

    pub fn is_subset(&self, other: &Heads) -> bool {
        (!self.rec || other.rec) && (!self.dev || other.dev) && (!self.con || other.con)
    }

    /// Heads needing labelled (real or synthetic) anomalies.
    pub fn needs_anomalies(&self) -> bool {
        self.dev || self.con
    }

    pub fn names(&self) -> Vec<&'static str> {
        [(self.rec, "rec"), (self.dev, "dev"), (self.con, "con")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect()
    }
}

impl fmt::Display for Heads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Heads::ALL {
            return f.write_str("all");
        }
        f.write_str(&self.names().join(","))
    }
}

impl FromStr for Heads {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Heads::ALL);
        }
        let mut h = Heads::NONE;
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "rec" => h.rec = true,
                "dev" => h.dev = true,
                "con" => h.con = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown head {other:?} (expected rec, dev, con or all)"
                    )))
                }
            }
        }
        if h.is_empty() {
            return Err(Error::InvalidArgument("head set must not be empty".into()));
        }
        Ok(h)
    }
}

impl TryFrom<String> for Heads {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Heads> for String {
    fn from(h: Heads) -> String {
        h.to_string()
    }
}
