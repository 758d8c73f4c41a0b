use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// Device lifecycle phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PhaseLabel {
    /// Network configuration and binding to the companion app.
    Setup,
    /// User-driven control.
    Interaction,
    /// Bound and powered, nobody touching it.
    Idle,
    /// Unbinding and factory reset.
    Deletion,
}

impl PhaseLabel {
    pub const ALL: [PhaseLabel; 4] = [
        PhaseLabel::Setup,
        PhaseLabel::Interaction,
        PhaseLabel::Idle,
        PhaseLabel::Deletion,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            PhaseLabel::Setup => "SETUP",
            PhaseLabel::Interaction => "INTERACTION",
            PhaseLabel::Idle => "IDLE",
            PhaseLabel::Deletion => "DELETION",
        }
    }

    /// Two-letter abbreviation used in compact tables.
    pub const fn short(self) -> &'static str {
        match self {
            PhaseLabel::Setup => "SU",
            PhaseLabel::Interaction => "IR",
            PhaseLabel::Idle => "ID",
            PhaseLabel::Deletion => "DE",
        }
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown lifecycle phase {0:?}")]
pub struct UnknownPhase(pub alloc::string::String);

impl FromStr for PhaseLabel {
    type Err = UnknownPhase;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let phase = if t.eq_ignore_ascii_case("setup") || t.eq_ignore_ascii_case("su") {
            PhaseLabel::Setup
        } else if t.eq_ignore_ascii_case("interaction") || t.eq_ignore_ascii_case("ir") {
            PhaseLabel::Interaction
        } else if t.eq_ignore_ascii_case("idle") || t.eq_ignore_ascii_case("id") {
            PhaseLabel::Idle
        } else if t.eq_ignore_ascii_case("deletion")
            || t.eq_ignore_ascii_case("delete")
            || t.eq_ignore_ascii_case("de")
        {
            PhaseLabel::Deletion
        } else {
            return Err(UnknownPhase(t.into()));
        };
        Ok(phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_long_and_short_forms() {
        for p in PhaseLabel::ALL {
            assert_eq!(p.as_str().parse::<PhaseLabel>().unwrap(), p);
            assert_eq!(p.short().parse::<PhaseLabel>().unwrap(), p);
        }
        assert_eq!("Delete".parse::<PhaseLabel>().unwrap(), PhaseLabel::Deletion);
        assert!("firmware".parse::<PhaseLabel>().is_err());
    }
}
