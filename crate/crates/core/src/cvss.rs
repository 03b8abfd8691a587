//! CVSS v3.1 base-vector parsing and base-score computation.
//!
//! Parsing requires the `CVSS:3.1` prefix and each of the eight Base metrics
//! exactly once, in any order. Temporal and Environmental metrics are
//! accepted and ignored. Scoring follows the published v3.1 equations with
//! the Roundup step done in scale-by-100000 integer arithmetic so results
//! match the reference calculator bit for bit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CvssParseError {
    #[error("missing CVSS prefix")]
    MissingPrefix,
    #[error("unsupported CVSS version {0}")]
    WrongVersion(String),
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("invalid value {value} for metric {metric}")]
    InvalidValue { metric: String, value: String },
    #[error("duplicate metric {0}")]
    DuplicateMetric(String),
    #[error("missing metric {0}")]
    MissingMetric(String),
    #[error("malformed metric segment {0}")]
    MalformedSegment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackVector {
    Network,
    Adjacent,
    Local,
    Physical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackComplexity {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrivilegesRequired {
    None,
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserInteraction {
    None,
    Required,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Unchanged,
    Changed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Impact {
    High,
    Low,
    None,
}

/// A parsed base vector: all eight Base metrics, order-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvssVector {
    pub attack_vector: AttackVector,
    pub attack_complexity: AttackComplexity,
    pub privileges_required: PrivilegesRequired,
    pub user_interaction: UserInteraction,
    pub scope: Scope,
    pub confidentiality: Impact,
    pub integrity: Impact,
    pub availability: Impact,
}

impl AttackVector {
    fn weight(self) -> f64 {
        match self {
            AttackVector::Network => 0.85,
            AttackVector::Adjacent => 0.62,
            AttackVector::Local => 0.55,
            AttackVector::Physical => 0.2,
        }
    }
    fn letter(self) -> &'static str {
        match self {
            AttackVector::Network => "N",
            AttackVector::Adjacent => "A",
            AttackVector::Local => "L",
            AttackVector::Physical => "P",
        }
    }
}

impl AttackComplexity {
    fn weight(self) -> f64 {
        match self {
            AttackComplexity::Low => 0.77,
            AttackComplexity::High => 0.44,
        }
    }
    fn letter(self) -> &'static str {
        match self {
            AttackComplexity::Low => "L",
            AttackComplexity::High => "H",
        }
    }
}

impl PrivilegesRequired {
    /// PR weights depend on whether scope changes.
    fn weight(self, scope: Scope) -> f64 {
        match (self, scope) {
            (PrivilegesRequired::None, _) => 0.85,
            (PrivilegesRequired::Low, Scope::Unchanged) => 0.62,
            (PrivilegesRequired::Low, Scope::Changed) => 0.68,
            (PrivilegesRequired::High, Scope::Unchanged) => 0.27,
            (PrivilegesRequired::High, Scope::Changed) => 0.5,
        }
    }
    fn letter(self) -> &'static str {
        match self {
            PrivilegesRequired::None => "N",
            PrivilegesRequired::Low => "L",
            PrivilegesRequired::High => "H",
        }
    }
}

impl UserInteraction {
    fn weight(self) -> f64 {
        match self {
            UserInteraction::None => 0.85,
            UserInteraction::Required => 0.62,
        }
    }
    fn letter(self) -> &'static str {
        match self {
            UserInteraction::None => "N",
            UserInteraction::Required => "R",
        }
    }
}

impl Scope {
    fn letter(self) -> &'static str {
        match self {
            Scope::Unchanged => "U",
            Scope::Changed => "C",
        }
    }
}

impl Impact {
    fn weight(self) -> f64 {
        match self {
            Impact::High => 0.56,
            Impact::Low => 0.22,
            Impact::None => 0.0,
        }
    }
    fn letter(self) -> &'static str {
        match self {
            Impact::High => "H",
            Impact::Low => "L",
            Impact::None => "N",
        }
    }
}

impl CvssVector {
    /// Canonical vector string in the standard metric order.
    pub fn to_vector_string(&self) -> String {
        format!(
            "CVSS:3.1/AV:{}/AC:{}/PR:{}/UI:{}/S:{}/C:{}/I:{}/A:{}",
            self.attack_vector.letter(),
            self.attack_complexity.letter(),
            self.privileges_required.letter(),
            self.user_interaction.letter(),
            self.scope.letter(),
            self.confidentiality.letter(),
            self.integrity.letter(),
            self.availability.letter(),
        )
    }
}

// Temporal and Environmental metric keys: recognized, ignored.
const NON_BASE_METRICS: [&str; 14] = [
    "E", "RL", "RC", "CR", "IR", "AR", "MAV", "MAC", "MPR", "MUI", "MS", "MC", "MI", "MA",
];

/// Parses a CVSS v3.1 base vector from a text span.
///
/// The error carries the first violated rule.
pub fn parse_cvss(text: &str) -> Result<CvssVector, CvssParseError> {
    let text = text.trim().to_ascii_uppercase();
    let rest = match text.strip_prefix("CVSS:") {
        Some(rest) => rest,
        None => return Err(CvssParseError::MissingPrefix),
    };
    let mut segments = rest.split('/');
    let version = segments.next().unwrap_or_default();
    if version != "3.1" {
        return Err(CvssParseError::WrongVersion(version.to_string()));
    }

    let mut av = None;
    let mut ac = None;
    let mut pr = None;
    let mut ui = None;
    let mut s = None;
    let mut c = None;
    let mut i = None;
    let mut a = None;

    fn put<T>(
        slot: &mut Option<T>,
        metric: &str,
        value: T,
    ) -> Result<(), CvssParseError> {
        if slot.is_some() {
            return Err(CvssParseError::DuplicateMetric(metric.to_string()));
        }
        *slot = Some(value);
        Ok(())
    }

    for segment in segments {
        let (metric, value) = segment
            .split_once(':')
            .ok_or_else(|| CvssParseError::MalformedSegment(segment.to_string()))?;
        let invalid = || CvssParseError::InvalidValue {
            metric: metric.to_string(),
            value: value.to_string(),
        };
        match metric {
            "AV" => put(
                &mut av,
                metric,
                match value {
                    "N" => AttackVector::Network,
                    "A" => AttackVector::Adjacent,
                    "L" => AttackVector::Local,
                    "P" => AttackVector::Physical,
                    _ => return Err(invalid()),
                },
            )?,
            "AC" => put(
                &mut ac,
                metric,
                match value {
                    "L" => AttackComplexity::Low,
                    "H" => AttackComplexity::High,
                    _ => return Err(invalid()),
                },
            )?,
            "PR" => put(
                &mut pr,
                metric,
                match value {
                    "N" => PrivilegesRequired::None,
                    "L" => PrivilegesRequired::Low,
                    "H" => PrivilegesRequired::High,
                    _ => return Err(invalid()),
                },
            )?,
            "UI" => put(
                &mut ui,
                metric,
                match value {
                    "N" => UserInteraction::None,
                    "R" => UserInteraction::Required,
                    _ => return Err(invalid()),
                },
            )?,
            "S" => put(
                &mut s,
                metric,
                match value {
                    "U" => Scope::Unchanged,
                    "C" => Scope::Changed,
                    _ => return Err(invalid()),
                },
            )?,
            "C" => put(&mut c, metric, impact_value(metric, value)?)?,
            "I" => put(&mut i, metric, impact_value(metric, value)?)?,
            "A" => put(&mut a, metric, impact_value(metric, value)?)?,
            other if NON_BASE_METRICS.contains(&other) => {}
            other => return Err(CvssParseError::UnknownMetric(other.to_string())),
        }
    }

    Ok(CvssVector {
        attack_vector: av.ok_or(CvssParseError::MissingMetric("AV".into()))?,
        attack_complexity: ac.ok_or(CvssParseError::MissingMetric("AC".into()))?,
        privileges_required: pr.ok_or(CvssParseError::MissingMetric("PR".into()))?,
        user_interaction: ui.ok_or(CvssParseError::MissingMetric("UI".into()))?,
        scope: s.ok_or(CvssParseError::MissingMetric("S".into()))?,
        confidentiality: c.ok_or(CvssParseError::MissingMetric("C".into()))?,
        integrity: i.ok_or(CvssParseError::MissingMetric("I".into()))?,
        availability: a.ok_or(CvssParseError::MissingMetric("A".into()))?,
    })
}

fn impact_value(metric: &str, value: &str) -> Result<Impact, CvssParseError> {
    match value {
        "H" => Ok(Impact::High),
        "L" => Ok(Impact::Low),
        "N" => Ok(Impact::None),
        _ => Err(CvssParseError::InvalidValue {
            metric: metric.to_string(),
            value: value.to_string(),
        }),
    }
}

/// One-decimal ceiling in integer arithmetic, per the v3.1 pseudocode
/// (`Math.round` is floor(x + 0.5)).
fn roundup(x: f64) -> f64 {
    let int_input = (x * 100_000.0 + 0.5).floor() as i64;
    if int_input % 10_000 == 0 {
        int_input as f64 / 100_000.0
    } else {
        (int_input / 10_000 + 1) as f64 / 10.0
    }
}

/// The official v3.1 Base Score, in `[0, 10]` with one decimal digit.
pub fn cvss_base_score(v: &CvssVector) -> f64 {
    let iss = 1.0
        - (1.0 - v.confidentiality.weight())
            * (1.0 - v.integrity.weight())
            * (1.0 - v.availability.weight());
    let impact = match v.scope {
        Scope::Unchanged => 6.42 * iss,
        Scope::Changed => 7.52 * (iss - 0.029) - 3.25 * (iss - 0.02).powi(15),
    };
    let exploitability = 8.22
        * v.attack_vector.weight()
        * v.attack_complexity.weight()
        * v.privileges_required.weight(v.scope)
        * v.user_interaction.weight();
    if impact <= 0.0 {
        return 0.0;
    }
    match v.scope {
        Scope::Unchanged => roundup((impact + exploitability).min(10.0)),
        Scope::Changed => roundup((1.08 * (impact + exploitability)).min(10.0)),
    }
}
