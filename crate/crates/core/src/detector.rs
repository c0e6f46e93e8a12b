//! Decision logic: range check, then `R > t_Rx` (type 1), then `F > t_F`
//! (type 2), each verdict carrying the numbers that produced it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dissimilarity::{GroupMember, NeighborProfile};
use crate::error::{Error, Result};
use crate::ingest::HistoricalDb;
use crate::range::{check_range, Boundaries, RangeViolation};
use crate::record::{validate_record, TreatmentRecord, Violation};

/// Threshold multipliers `a`, `b` and group-size fractions `mu`, `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
    pub nu: f64,
}

impl ModelParams {
    pub fn new(a: f64, b: f64, mu: f64, nu: f64) -> Result<Self> {
        let p = Self { a, b, mu, nu };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("mu", self.mu), ("nu", self.nu)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// `m = max(1, round(mu S))`.
    pub fn m(&self, size: usize) -> usize {
        group_size(self.mu, size)
    }

    /// `n = max(1, round(nu S))`.
    pub fn n(&self, size: usize) -> usize {
        group_size(self.nu, size)
    }
}

fn group_size(fraction: f64, size: usize) -> usize {
    ((fraction * size as f64).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_rx: f64,
    pub t_f: f64,
}

/// `t_Rx = a theta`, `t_F = b tau`.
pub fn thresholds(params: &ModelParams, db: &HistoricalDb) -> Thresholds {
    Thresholds {
        t_rx: params.a * db.theta(),
        t_f: params.b * db.tau(),
    }
}

/// Range limits together with the alpha/beta used for BED.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeGate {
    pub boundaries: Boundaries,
    pub alpha_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Pass,
    RangeFlag,
    Type1Flag,
    Type2Flag,
}

impl Status {
    pub fn is_flag(self) -> bool {
        self != Status::Pass
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Warning {
    /// Fewer than `n` historical records share the exact prescription.
    InsufficientSameRx { same_rx_count: usize, n: usize },
    /// The prescription scales outside the database's observed range.
    RxScaledOutOfRange { fractions: f64, dose_per_fraction: f64 },
    ReplanSuspect { total: u32, accumulated: u32 },
    InconsistentRecord { detail: String },
    /// Database records sharing no feature with the query; counted as distance 1.
    IncomparableNeighbors { count: usize },
}

impl Warning {
    pub fn code(&self) -> &'static str {
        match self {
            Warning::InsufficientSameRx { .. } => "InsufficientSameRx",
            Warning::RxScaledOutOfRange { .. } => "RxScaledOutOfRange",
            Warning::ReplanSuspect { .. } => "ReplanSuspect",
            Warning::InconsistentRecord { .. } => "InconsistentRecord",
            Warning::IncomparableNeighbors { .. } => "IncomparableNeighbors",
        }
    }
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::InsufficientSameRx { same_rx_count, n } => write!(
                f,
                "Warning: only {same_rx_count} historical records share this prescription (n = {n})"
            ),
            Warning::RxScaledOutOfRange {
                fractions,
                dose_per_fraction,
            } => write!(
                f,
                "Warning: prescription outside the historical range (scaled fractions {fractions:.3}, dose/fx {dose_per_fraction:.3})"
            ),
            Warning::ReplanSuspect { total, accumulated } => write!(
                f,
                "Warning: accumulated dose {accumulated} differs from total {total}; possible re-plan or cone-down"
            ),
            Warning::InconsistentRecord { detail } => write!(f, "Warning: {detail}"),
            Warning::IncomparableNeighbors { count } => {
                write!(f, "Warning: {count} historical records share no feature with this record")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub r: f64,
    pub t_rx: f64,
    /// Absent when the type 1 comparison already flagged.
    pub f: Option<f64>,
    pub t_f: f64,
    pub m: usize,
    pub n: usize,
    pub same_rx_count: usize,
    pub prescription: String,
    pub range_violations: Vec<RangeViolation>,
    pub rx_neighbors: Vec<GroupMember>,
    pub feature_neighbors: Vec<GroupMember>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub record_id: String,
    pub status: Status,
    pub warnings: Vec<Warning>,
    pub diagnostics: Diagnostics,
}

/// The distance work for one record, independent of the model parameters.
/// Classifying under many parameter settings reuses it.
#[derive(Clone, Debug)]
pub struct PreparedQuery {
    pub record_id: String,
    pub prescription: String,
    pub profile: NeighborProfile,
    pub range_violations: Vec<RangeViolation>,
    warnings: Vec<Warning>,
}

impl PreparedQuery {
    pub fn new(record: &TreatmentRecord, db: &HistoricalDb, gate: Option<&RangeGate>) -> Result<Self> {
        if &record.technique != db.technique() {
            return Err(Error::UnsupportedTechnique {
                found: record.technique.clone(),
                expected: db.technique().to_string(),
            });
        }
        let range_violations = match gate {
            Some(g) => check_range(record, &g.boundaries, g.alpha_beta)?,
            None => Vec::new(),
        };
        let profile = NeighborProfile::build(record, db);
        let mut warnings = Vec::new();
        for v in validate_record(record).violations {
            warnings.push(match v {
                Violation::ReplanSuspect { total, accumulated } => {
                    Warning::ReplanSuspect { total, accumulated }
                }
                other => Warning::InconsistentRecord {
                    detail: other.to_string(),
                },
            });
        }
        if !profile.scaled.in_unit_square() {
            warnings.push(Warning::RxScaledOutOfRange {
                fractions: profile.scaled.fractions,
                dose_per_fraction: profile.scaled.dose_per_fraction,
            });
        }
        if profile.incomparable > 0 {
            warnings.push(Warning::IncomparableNeighbors {
                count: profile.incomparable,
            });
        }
        Ok(Self {
            record_id: record.record_id.clone(),
            prescription: record.rx_key().to_string(),
            profile,
            range_violations,
            warnings,
        })
    }

    /// Status only; no allocation.
    pub fn status(&self, params: &ModelParams, size: usize, t: &Thresholds) -> Result<Status> {
        let r = self.profile.rx_group_distance(params.m(size))?;
        let distance_status = if r > t.t_rx {
            Status::Type1Flag
        } else if self.profile.feature_group_distance(params.n(size))? > t.t_f {
            Status::Type2Flag
        } else {
            Status::Pass
        };
        Ok(if self.range_violations.is_empty() {
            distance_status
        } else {
            Status::RangeFlag
        })
    }

    pub fn verdict(&self, db: &HistoricalDb, params: &ModelParams) -> Result<Verdict> {
        let size = db.len();
        let t = thresholds(params, db);
        let (m, n) = (params.m(size), params.n(size));
        let r = self.profile.rx_group_distance(m)?;
        let mut warnings = self.warnings.clone();
        let (f, distance_status) = if r > t.t_rx {
            (None, Status::Type1Flag)
        } else {
            let f = self.profile.feature_group_distance(n)?;
            if self.profile.same_rx_count < n {
                warnings.push(Warning::InsufficientSameRx {
                    same_rx_count: self.profile.same_rx_count,
                    n,
                });
            }
            (Some(f), if f > t.t_f { Status::Type2Flag } else { Status::Pass })
        };
        let status = if self.range_violations.is_empty() {
            distance_status
        } else {
            Status::RangeFlag
        };
        Ok(Verdict {
            record_id: self.record_id.clone(),
            status,
            warnings,
            diagnostics: Diagnostics {
                r,
                t_rx: t.t_rx,
                f,
                t_f: t.t_f,
                m,
                n,
                same_rx_count: self.profile.same_rx_count,
                prescription: self.prescription.clone(),
                range_violations: self.range_violations.clone(),
                rx_neighbors: self.profile.members(db, m),
                feature_neighbors: if f.is_some() {
                    self.profile.members(db, n)
                } else {
                    Vec::new()
                },
            },
        })
    }
}

pub fn detect(
    record: &TreatmentRecord,
    db: &HistoricalDb,
    params: &ModelParams,
    gate: Option<&RangeGate>,
) -> Result<Verdict> {
    params.check()?;
    PreparedQuery::new(record, db, gate)?.verdict(db, params)
}

/// Human-readable reasons, most important first.
pub fn explain(verdict: &Verdict) -> Vec<String> {
    let d = &verdict.diagnostics;
    let mut lines = Vec::new();
    let rx_line = |lines: &mut Vec<String>| {
        let op = if d.r > d.t_rx { ">" } else { "<=" };
        lines.push(format!("R = {:.3} {op} t_Rx = {:.3}", d.r, d.t_rx));
    };
    let f_line = |lines: &mut Vec<String>, f: f64| {
        let op = if f > d.t_f { ">" } else { "<=" };
        lines.push(format!("F = {f:.3} {op} t_F = {:.3}", d.t_f));
    };
    match verdict.status {
        Status::RangeFlag => {
            lines.push("Range check anomaly.".to_string());
            for v in &d.range_violations {
                lines.push(format!("Range violation: {v}"));
            }
            rx_line(&mut lines);
            if let Some(f) = d.f {
                f_line(&mut lines, f);
            }
        }
        Status::Type1Flag => {
            lines.push(format!("Type 1 anomaly. R = {:.3}, t_Rx = {:.3}", d.r, d.t_rx));
        }
        Status::Type2Flag => {
            let f = d.f.unwrap_or(f64::NAN);
            lines.push(format!("Type 2 anomaly. F = {f:.3}, t_F = {:.3}", d.t_f));
            rx_line(&mut lines);
        }
        Status::Pass => {
            rx_line(&mut lines);
            if let Some(f) = d.f {
                f_line(&mut lines, f);
            }
        }
    }
    lines.push(format!(
        "Prescription {} seen {} times in the historical database.",
        d.prescription, d.same_rx_count
    ));
    lines.extend(verdict.warnings.iter().map(ToString::to_string));
    lines
}

/// Flat per-record JSON layout of a verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub record_id: String,
    pub status: Status,
    #[serde(rename = "R")]
    pub r: f64,
    pub t_rx: f64,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    pub t_f: f64,
    pub same_rx_count: usize,
    pub warnings: Vec<String>,
    pub range_violations: Vec<RangeViolation>,
    pub explanation: Vec<String>,
}

impl From<&Verdict> for VerdictRecord {
    fn from(v: &Verdict) -> Self {
        Self {
            record_id: v.record_id.clone(),
            status: v.status,
            r: v.diagnostics.r,
            t_rx: v.diagnostics.t_rx,
            f: v.diagnostics.f,
            t_f: v.diagnostics.t_f,
            same_rx_count: v.diagnostics.same_rx_count,
            warnings: v.warnings.iter().map(|w| w.code().to_string()).collect(),
            range_violations: v.diagnostics.range_violations.clone(),
            explanation: explain(v),
        }
    }
}
