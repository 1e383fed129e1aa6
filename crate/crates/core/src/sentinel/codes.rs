//! Issue code registries for both profiles.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decision::ProfileKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Red,
    Yellow,
    Green,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Red => "RED",
            Severity::Yellow => "YELLOW",
            Severity::Green => "GREEN",
        }
    }

    /// Red and yellow issues alert; green ones are documentation only.
    pub fn alerts(self) -> bool {
        !matches!(self, Severity::Green)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "red" => Some(Severity::Red),
            "yellow" => Some(Severity::Yellow),
            "green" => Some(Severity::Green),
            _ => None,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stable issue identifier as it appears in logs and alerts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IssueCode(pub String);

impl IssueCode {
    pub fn new(code: &str) -> Self {
        IssueCode(code.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub struct CodeInfo {
    pub code: &'static str,
    pub severity: Severity,
    pub description: &'static str,
}

const fn c(code: &'static str, severity: Severity, description: &'static str) -> CodeInfo {
    CodeInfo {
        code,
        severity,
        description,
    }
}

use Severity::{Green, Red, Yellow};

/// Codes added by this implementation, shared by both profiles.
const EXTENSION: &[CodeInfo] = &[
    c("MEM", Red, "Decision-service host memory usage crossed the watchdog threshold"),
    c("RD", Yellow, "Controller and decision-service rosters disagree"),
    c("NUM", Yellow, "Advantage variance was negative and clamped to zero"),
    c("UNK", Yellow, "Unclassified event"),
    c("G-BLANK", Green, "Participant app received a blank schedule"),
    c("G-AUDIT", Green, "Cross-table consistency audit discrepancy"),
    c("G-CONTROL", Green, "Operator control command"),
    c("G-ALERTBUF", Green, "Alert sink unavailable; alert buffered for retry"),
    c("G-RESTART", Green, "Component restarted"),
    c("G-REGISTER", Green, "Participant registration or removal"),
];

const ORALYTICS: &[CodeInfo] = &[
    c("R1", Red, "No treatment assigned for every decision point in the last 7 days"),
    c("R2", Red, "Treatment assigned for every decision point in the last 7 days"),
    c("R3", Red, "Error in saving data"),
    // not in the trial's table; the bound check is shared with MiWaves
    c("R5", Red, "Action-selection probability outside [0.2, 0.8]"),
    c("Y1", Yellow, "Dependency endpoint call failed"),
    c("Y2", Yellow, "Endpoint response could not be parsed as JSON"),
    c("Y3", Yellow, "Endpoint call returned malformed data"),
    c("Y4", Yellow, "Endpoint call returned no data"),
    c("Y5", Yellow, "Treatment personalization failed and the fallback was executed"),
    c("Y6", Yellow, "Policy could not be updated with the batch data"),
];

const MIWAVES: &[CodeInfo] = &[
    c("R1", Red, "More than 80% of active participants received no message at a decision point"),
    c("R2", Red, "More than 80% of active participants received a message at a decision point"),
    c("R3", Red, "Participant was sent messages at more than 80% of the last 7 days' decision points"),
    c("R4", Red, "Participant was sent no message at more than 80% of the last 7 days' decision points"),
    c("R5", Red, "Action-selection probability outside [0.2, 0.8]"),
    c("0", Yellow, "Authorization token malformed"),
    c("1", Yellow, "Authorization token missing"),
    c("2", Yellow, "Authorization token invalid"),
    c("3", Yellow, "Authorization procedure failed"),
    c("4", Yellow, "No more clients may register"),
    c("5", Yellow, "Client registration failed"),
    c("6", Yellow, "Client already registered"),
    c("7", Yellow, "Invalid client credentials"),
    c("8", Yellow, "Client authentication failed"),
    c("9", Yellow, "Logout could not revoke token"),
    c("10", Yellow, "Malformed logout request"),
    c("11", Yellow, "Invalid token on logout"),
    c("100", Yellow, "User id invalid at registration"),
    c("101", Yellow, "RL start date invalid"),
    c("102", Yellow, "RL end date invalid"),
    c("103", Yellow, "Consent start date invalid"),
    c("104", Yellow, "Consent end date invalid"),
    c("105", Yellow, "Morning notification time invalid"),
    c("106", Yellow, "Evening notification time invalid"),
    c("107", Yellow, "Registration could not be written"),
    c("108", Yellow, "User already registered"),
    c("109", Yellow, "Registration failed"),
    c("200", Yellow, "User id invalid at action request"),
    c("201", Yellow, "Finished-EMA flag invalid"),
    c("202", Yellow, "App-use flag invalid"),
    c("203", Yellow, "User id not in the RL database"),
    c("204", Yellow, "Reward construction failed"),
    c("205", Yellow, "State construction failed"),
    c("206", Yellow, "Action computation failed"),
    c("207", Yellow, "Unknown error computing action"),
    c("208", Yellow, "Unknown error computing action"),
    c("209", Yellow, "Activity response missing for a completed EMA"),
    c("210", Yellow, "Cannabis use missing for a completed EMA"),
    c("211", Yellow, "Window label missing"),
    c("300", Yellow, "User id does not exist"),
    c("301", Yellow, "Trial has not started for the user"),
    c("302", Yellow, "Trial has ended for the user"),
    c("303", Yellow, "Unknown error ending the decision window"),
    c("304", Yellow, "Invalid action from caller"),
    c("305", Yellow, "Invalid seed from caller"),
    c("306", Yellow, "Invalid probability from caller"),
    c("307", Yellow, "Invalid policy id from caller"),
    c("308", Yellow, "Invalid decision index from caller"),
    c("309", Yellow, "Invalid action timestamp from caller"),
    c("310", Yellow, "Invalid action request id from caller"),
    c("311", Yellow, "Invalid EMA timestamp from caller"),
    c("312", Yellow, "Invalid push timestamp from caller"),
    c("313", Yellow, "Invalid click timestamp from caller"),
    c("314", Yellow, "Invalid morning notification time from caller"),
    c("315", Yellow, "Invalid evening notification time from caller"),
    c("316", Yellow, "Backend user-data query failed"),
    c("317", Yellow, "Backend returned no data for the closing window"),
    c("318", Yellow, "Backend returned more than one window of data"),
    c("319", Yellow, "No action found for the given request id"),
    c("320", Yellow, "Unknown error fetching data for the window"),
    c("321", Yellow, "Could not update data records for the decision point"),
    c("322", Yellow, "Decision index already exists"),
    c("323", Yellow, "Unknown error checking the decision index"),
    c("324", Yellow, "Invalid window label"),
    c("400", Yellow, "Database dump failed"),
    c("401", Yellow, "Could not store new weights"),
    c("402", Yellow, "Unknown error during update"),
    c("403", Yellow, "Hyperparameter update failed"),
    c("404", Yellow, "Posterior update failed"),
    c("405", Yellow, "Use-data flag not implemented"),
    c("406", Yellow, "Could not build update return parameters"),
];

pub fn registry(profile: ProfileKind) -> impl Iterator<Item = &'static CodeInfo> {
    let own = match profile {
        ProfileKind::Oralytics => ORALYTICS,
        ProfileKind::Miwaves => MIWAVES,
    };
    own.iter().chain(EXTENSION.iter())
}

pub fn lookup(profile: ProfileKind, code: &str) -> Option<&'static CodeInfo> {
    registry(profile).find(|info| info.code == code)
}

/// Severity is a pure function of (profile, code); codes outside the
/// registry are treated like the yellow catch-all.
pub fn severity_of(profile: ProfileKind, code: &str) -> Severity {
    lookup(profile, code).map_or(Severity::Yellow, |info| info.severity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registries_have_unique_codes() {
        for profile in [ProfileKind::Oralytics, ProfileKind::Miwaves] {
            let mut seen = HashSet::new();
            for info in registry(profile) {
                assert!(seen.insert(info.code), "{profile}: duplicate {}", info.code);
            }
        }
        assert_eq!(registry(ProfileKind::Miwaves).filter(|i| i.severity == Red).count(), 6);
    }

    #[test]
    fn severity_examples() {
        assert_eq!(severity_of(ProfileKind::Oralytics, "R3"), Red);
        assert_eq!(severity_of(ProfileKind::Oralytics, "Y1"), Yellow);
        assert_eq!(severity_of(ProfileKind::Miwaves, "1"), Yellow);
        assert_eq!(severity_of(ProfileKind::Miwaves, "R5"), Red);
        assert_eq!(severity_of(ProfileKind::Oralytics, "G-BLANK"), Green);
        assert_eq!(severity_of(ProfileKind::Oralytics, "R9"), Yellow);
    }
}
