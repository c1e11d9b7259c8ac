//! HER2 score labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

pub const NUM_CLASSES: usize = 4;

/// Ordinal HER2 IHC score: 0 < 1+ < 2+ < 3+.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Her2Score {
    Zero,
    One,
    Two,
    Three,
}

impl Her2Score {
    pub const ALL: [Her2Score; NUM_CLASSES] =
        [Her2Score::Zero, Her2Score::One, Her2Score::Two, Her2Score::Three];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Her2Score::Zero => "0",
            Her2Score::One => "1+",
            Her2Score::Two => "2+",
            Her2Score::Three => "3+",
        }
    }
}

impl fmt::Display for Her2Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Her2Score {
    type Err = Error;

    /// Accepts both `2` and `2+` style spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "0" | "0+" => Ok(Her2Score::Zero),
            "1" | "1+" => Ok(Her2Score::One),
            "2" | "2+" => Ok(Her2Score::Two),
            "3" | "3+" => Ok(Her2Score::Three),
            other => Err(Error::Domain(format!("unknown HER2 score {other:?}"))),
        }
    }
}

impl Serialize for Her2Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Her2Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A single pathologist's call. Non-diagnostic only exists in voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vote {
    Score(Her2Score),
    NonDiagnostic,
}

impl Vote {
    /// Votes-CSV spelling: `0..3` or `ND`.
    pub fn code(self) -> &'static str {
        match self {
            Vote::Score(s) => ["0", "1", "2", "3"][s.index()],
            Vote::NonDiagnostic => "ND",
        }
    }
}

impl FromStr for Vote {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("nd") {
            Ok(Vote::NonDiagnostic)
        } else {
            t.parse().map(Vote::Score)
        }
    }
}

impl From<Her2Score> for Vote {
    fn from(s: Her2Score) -> Self {
        Vote::Score(s)
    }
}
