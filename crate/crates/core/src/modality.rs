use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::NfsError;

/// Capture domain of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Ir];

    /// Slot used by per-modality pairs of parameters.
    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Ir => 1,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Ir => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Ir,
            Modality::Ir => Modality::Rgb,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = NfsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            other => Err(NfsError::Modality(format!("unknown modality tag {other:?}"))),
        }
    }
}
