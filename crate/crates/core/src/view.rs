use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which side of the head an image shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Profile,
}

impl View {
    pub const ALL: [View; 2] = [View::Frontal, View::Profile];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::Profile => "profile",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "frontal" => Ok(View::Frontal),
            "profile" => Ok(View::Profile),
            other => Err(Error::config(format!("unknown view {other:?}"))),
        }
    }
}
