//! Treatment records, the non-prescription feature schema, and record-level
//! consistency checks.
//!
//! Doses are integer centigray everywhere so that the `fractions x dose`
//! identity is checked exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the canonical record CSV.
pub const CSV_COLUMNS: [&str; 11] = [
    "record_id",
    "fractions",
    "dose_per_fraction",
    "total_dose",
    "accumulated_dose",
    "technique",
    "energy",
    "intent",
    "icd10",
    "morphology",
    "age_at_tx",
];

/// Fields that belong to the prescription (or partition key) and therefore
/// never take part in the feature distance.
pub const RX_FIELDS: [&str; 5] = [
    "fractions",
    "dose_per_fraction",
    "total_dose",
    "accumulated_dose",
    "technique",
];

pub const AGE_MIN: i32 = 0;
pub const AGE_MAX: i32 = 120;

/// The exact `(fractions, dose per fraction)` pair used for same-prescription
/// membership and the frequency index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RxKey {
    pub fractions: u32,
    pub dose_per_fraction: u32,
}

impl fmt::Display for RxKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} x {}", self.fractions, self.dose_per_fraction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prescription {
    pub fractions: u32,
    /// cGy
    pub dose_per_fraction: u32,
    /// cGy
    pub total_dose: u32,
    /// cGy
    pub accumulated_dose: u32,
}

impl Prescription {
    /// A single-course prescription whose total and accumulated doses agree
    /// with `fractions x dose_per_fraction`.
    pub fn new(fractions: u32, dose_per_fraction: u32) -> Self {
        let total = fractions.saturating_mul(dose_per_fraction);
        Self {
            fractions,
            dose_per_fraction,
            total_dose: total,
            accumulated_dose: total,
        }
    }

    pub fn key(&self) -> RxKey {
        RxKey {
            fractions: self.fractions,
            dose_per_fraction: self.dose_per_fraction,
        }
    }

    pub fn expected_total(&self) -> u64 {
        u64::from(self.fractions) * u64::from(self.dose_per_fraction)
    }
}

/// Treatment delivery modality. Only the first three are modeled; the rest
/// exist so raw exports can be represented until cohort filtering drops them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Technique {
    ThreeD,
    Imrt,
    Sbrt,
    Impt,
    TwoD,
    Brachy,
    Other(String),
}

impl Technique {
    pub const MODELED: [Technique; 3] = [Technique::ThreeD, Technique::Imrt, Technique::Sbrt];

    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_uppercase().as_str() {
            "3D" | "THREED" => Technique::ThreeD,
            "IMRT" => Technique::Imrt,
            "SBRT" => Technique::Sbrt,
            "IMPT" => Technique::Impt,
            "2D" | "TWOD" => Technique::TwoD,
            "BRACHY" => Technique::Brachy,
            _ => Technique::Other(label.trim().to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Technique::ThreeD => "3D",
            Technique::Imrt => "IMRT",
            Technique::Sbrt => "SBRT",
            Technique::Impt => "IMPT",
            Technique::TwoD => "2D",
            Technique::Brachy => "Brachy",
            Technique::Other(s) => s,
        }
    }

    pub fn is_modeled(&self) -> bool {
        matches!(self, Technique::ThreeD | Technique::Imrt | Technique::Sbrt)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for Technique {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Technique {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Technique::from_label(&s))
    }
}

/// One prescription event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRecord {
    pub record_id: String,
    pub prescription: Prescription,
    pub technique: Technique,
    pub energy: Option<String>,
    pub intent: Option<String>,
    pub icd10: Option<String>,
    pub morphology: Option<String>,
    pub age_at_tx: i32,
    /// Additional columns carried through from the input, usable as features
    /// by a custom schema.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

/// A feature value as seen by the distance computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureValue<'a> {
    Numeric(f64),
    Categorical(&'a str),
    Missing,
}

impl TreatmentRecord {
    pub fn rx_key(&self) -> RxKey {
        self.prescription.key()
    }

    /// Looks up a non-prescription feature by name. Unknown names fall back
    /// to the `extra` map; values there are read as numbers when `numeric`.
    pub fn feature(&self, name: &str, numeric: bool) -> FeatureValue<'_> {
        fn cat(v: &Option<String>) -> FeatureValue<'_> {
            match v {
                Some(s) => FeatureValue::Categorical(s.as_str()),
                None => FeatureValue::Missing,
            }
        }
        match name {
            "age_at_tx" => FeatureValue::Numeric(f64::from(self.age_at_tx)),
            "energy" => cat(&self.energy),
            "intent" => cat(&self.intent),
            "icd10" => cat(&self.icd10),
            "morphology" => cat(&self.morphology),
            other => match self.extra.get(other) {
                None => FeatureValue::Missing,
                Some(s) if numeric => s
                    .trim()
                    .parse::<f64>()
                    .map(FeatureValue::Numeric)
                    .unwrap_or(FeatureValue::Missing),
                Some(s) => FeatureValue::Categorical(s.as_str()),
            },
        }
    }

    /// Overwrites a non-prescription feature. `None` stores a missing value.
    pub fn set_feature(&mut self, name: &str, value: Option<String>) -> Result<()> {
        if RX_FIELDS.contains(&name) || name == "record_id" {
            return Err(Error::InvalidMutation(format!(
                "{name} is not a non-prescription feature"
            )));
        }
        match name {
            "age_at_tx" => {
                let v = value.ok_or_else(|| {
                    Error::InvalidMutation("age_at_tx cannot be missing".into())
                })?;
                self.age_at_tx = v
                    .trim()
                    .parse::<f64>()
                    .map(|x| x.round() as i32)
                    .map_err(|_| Error::InvalidMutation(format!("age {v:?} is not numeric")))?;
            }
            "energy" => self.energy = value,
            "intent" => self.intent = value,
            "icd10" => self.icd10 = value,
            "morphology" => self.morphology = value,
            other => match value {
                Some(v) => {
                    self.extra.insert(other.to_string(), v);
                }
                None => {
                    self.extra.remove(other);
                }
            },
        }
        Ok(())
    }

    /// Textual form of a feature, as written to CSV. `None` means missing.
    pub fn feature_text(&self, name: &str) -> Option<String> {
        match name {
            "age_at_tx" => Some(self.age_at_tx.to_string()),
            "energy" => self.energy.clone(),
            "intent" => self.intent.clone(),
            "icd10" => self.icd10.clone(),
            "morphology" => self.morphology.clone(),
            other => self.extra.get(other).cloned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric {
        /// Observed `[min, max]` over the historical database; unset until fitted.
        range: Option<(f64, f64)>,
    },
    Categorical {
        vocabulary: BTreeSet<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub kind: FeatureKind,
    pub weight: f64,
}

impl FeatureDescriptor {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric { range: None },
            weight: 1.0,
        }
    }

    pub fn categorical(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                vocabulary: BTreeSet::new(),
            },
            weight: 1.0,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric { .. })
    }

    pub fn value<'a>(&self, record: &'a TreatmentRecord) -> FeatureValue<'a> {
        record.feature(&self.name, self.is_numeric())
    }
}

/// Ordered list of the features entering the Gower distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureDescriptor>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::thoracic()
    }
}

impl FeatureSchema {
    /// Age (numeric) plus energy, intent, diagnosis and morphology codes
    /// (categorical), equally weighted.
    pub fn thoracic() -> Self {
        Self {
            features: vec![
                FeatureDescriptor::numeric("age_at_tx"),
                FeatureDescriptor::categorical("energy"),
                FeatureDescriptor::categorical("intent"),
                FeatureDescriptor::categorical("icd10"),
                FeatureDescriptor::categorical("morphology"),
            ],
        }
    }

    pub fn new(features: Vec<FeatureDescriptor>) -> Result<Self> {
        let schema = Self { features };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("feature schema is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !(f.weight.is_finite() && f.weight > 0.0) {
                return Err(Error::Schema(format!(
                    "feature {} has non-positive weight {}",
                    f.name, f.weight
                )));
            }
            if RX_FIELDS.contains(&f.name.as_str()) {
                return Err(Error::Schema(format!(
                    "{} is a prescription field, not a feature",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature {}", f.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureDescriptor> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Returns a copy with numeric ranges and categorical vocabularies fixed
    /// from `records`.
    pub fn fitted(&self, records: &[TreatmentRecord]) -> Self {
        let features = self
            .features
            .iter()
            .map(|desc| {
                let kind = match &desc.kind {
                    FeatureKind::Numeric { .. } => {
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for r in records {
                            if let FeatureValue::Numeric(v) = desc.value(r) {
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                        FeatureKind::Numeric {
                            range: (lo <= hi).then_some((lo, hi)),
                        }
                    }
                    FeatureKind::Categorical { .. } => FeatureKind::Categorical {
                        vocabulary: records
                            .iter()
                            .filter_map(|r| match desc.value(r) {
                                FeatureValue::Categorical(s) => Some(s.to_string()),
                                _ => None,
                            })
                            .collect(),
                    },
                };
                FeatureDescriptor {
                    name: desc.name.clone(),
                    kind,
                    weight: desc.weight,
                }
            })
            .collect();
        Self { features }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// `total_dose != fractions x dose_per_fraction`
    DoseMismatch { expected: u64, found: u32 },
    /// Accumulated dose differs from the course total: a re-plan or cone-down.
    ReplanSuspect { total: u32, accumulated: u32 },
    AgeOutOfRange { age: i32 },
    NonPositiveRx { fractions: u32, dose_per_fraction: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DoseMismatch { expected, found } => {
                write!(f, "total dose {found} differs from fractions x dose/fx = {expected}")
            }
            Violation::ReplanSuspect { total, accumulated } => write!(
                f,
                "accumulated dose {accumulated} differs from total dose {total} (re-plan or cone-down)"
            ),
            Violation::AgeOutOfRange { age } => {
                write!(f, "age {age} outside [{AGE_MIN}, {AGE_MAX}]")
            }
            Violation::NonPositiveRx {
                fractions,
                dose_per_fraction,
            } => write!(f, "non-positive prescription {fractions} x {dose_per_fraction}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_replan(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::ReplanSuspect { .. }))
    }
}

pub fn validate_record(record: &TreatmentRecord) -> ValidationResult {
    let rx = &record.prescription;
    let mut violations = Vec::new();
    if rx.fractions == 0 || rx.dose_per_fraction == 0 {
        violations.push(Violation::NonPositiveRx {
            fractions: rx.fractions,
            dose_per_fraction: rx.dose_per_fraction,
        });
    }
    if rx.expected_total() != u64::from(rx.total_dose) {
        violations.push(Violation::DoseMismatch {
            expected: rx.expected_total(),
            found: rx.total_dose,
        });
    }
    if rx.accumulated_dose != rx.total_dose {
        violations.push(Violation::ReplanSuspect {
            total: rx.total_dose,
            accumulated: rx.accumulated_dose,
        });
    }
    if !(AGE_MIN..=AGE_MAX).contains(&record.age_at_tx) {
        violations.push(Violation::AgeOutOfRange {
            age: record.age_at_tx,
        });
    }
    ValidationResult { violations }
}

/// Writes records in the canonical CSV layout. Extra columns (the union
/// over all records, sorted) follow the canonical ones.
pub fn write_records<W: Write>(out: W, records: &[TreatmentRecord]) -> Result<()> {
    let extra: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.extra.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    header.extend(extra.iter().copied());
    w.write_record(&header)?;
    for r in records {
        let rx = &r.prescription;
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        let mut row = vec![
            r.record_id.clone(),
            rx.fractions.to_string(),
            rx.dose_per_fraction.to_string(),
            rx.total_dose.to_string(),
            rx.accumulated_dose.to_string(),
            r.technique.label().to_string(),
            opt(&r.energy),
            opt(&r.intent),
            opt(&r.icd10),
            opt(&r.morphology),
            r.age_at_tx.to_string(),
        ];
        for k in &extra {
            row.push(r.extra.get(*k).cloned().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(fx: u32, dose: u32, total: u32, accum: u32) -> TreatmentRecord {
        TreatmentRecord {
            record_id: "r1".into(),
            prescription: Prescription {
                fractions: fx,
                dose_per_fraction: dose,
                total_dose: total,
                accumulated_dose: accum,
            },
            technique: Technique::Sbrt,
            energy: Some("x06FFF".into()),
            intent: Some("curative".into()),
            icd10: Some("C34.10".into()),
            morphology: None,
            age_at_tx: 63,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn consistent_record_is_ok() {
        assert!(validate_record(&record(4, 1200, 4800, 4800)).is_ok());
    }

    #[test]
    fn dose_mismatch_is_reported() {
        let v = validate_record(&record(5, 400, 2200, 2200));
        assert_eq!(
            v.violations,
            vec![Violation::DoseMismatch {
                expected: 2000,
                found: 2200
            }]
        );
    }

    #[test]
    fn accumulated_mismatch_is_replan_suspect() {
        let v = validate_record(&record(10, 300, 3000, 6000));
        assert_eq!(
            v.violations,
            vec![Violation::ReplanSuspect {
                total: 3000,
                accumulated: 6000
            }]
        );
        // regardless of other violations
        let mut r = record(10, 300, 2000, 6000);
        r.age_at_tx = 150;
        assert!(validate_record(&r).has_replan());
    }

    #[test]
    fn age_and_zero_rx() {
        let mut r = record(0, 300, 0, 0);
        r.age_at_tx = -1;
        let v = validate_record(&r);
        assert!(v.violations.contains(&Violation::AgeOutOfRange { age: -1 }));
        assert!(matches!(v.violations[0], Violation::NonPositiveRx { .. }));
    }

    #[test]
    fn technique_labels_round_trip() {
        for t in [
            Technique::ThreeD,
            Technique::Imrt,
            Technique::Sbrt,
            Technique::Impt,
            Technique::TwoD,
            Technique::Brachy,
        ] {
            assert_eq!(Technique::from_label(t.label()), t);
        }
        assert_eq!(Technique::from_label("brachy"), Technique::Brachy);
        assert!(!Technique::from_label("Gamma Knife").is_modeled());
    }

    #[test]
    fn set_feature_rejects_rx_fields() {
        let mut r = record(4, 1200, 4800, 4800);
        assert!(matches!(
            r.set_feature("fractions", Some("5".into())),
            Err(Error::InvalidMutation(_))
        ));
        r.set_feature("intent", None).unwrap();
        assert_eq!(r.feature("intent", false), FeatureValue::Missing);
    }

    #[test]
    fn schema_rejects_bad_weights() {
        let mut f = FeatureDescriptor::numeric("age_at_tx");
        f.weight = 0.0;
        assert!(FeatureSchema::new(vec![f]).is_err());
        assert!(FeatureSchema::new(vec![FeatureDescriptor::categorical("technique")]).is_err());
        assert_eq!(FeatureSchema::thoracic().len(), 5);
    }

    #[test]
    fn fitted_schema_collects_range_and_vocabulary() {
        let mut a = record(4, 1200, 4800, 4800);
        let mut b = a.clone();
        a.age_at_tx = 40;
        b.age_at_tx = 80;
        b.energy = Some("x06".into());
        let s = FeatureSchema::thoracic().fitted(&[a, b]);
        assert_eq!(
            s.get("age_at_tx").unwrap().kind,
            FeatureKind::Numeric {
                range: Some((40.0, 80.0))
            }
        );
        match &s.get("energy").unwrap().kind {
            FeatureKind::Categorical { vocabulary } => assert_eq!(vocabulary.len(), 2),
            _ => unreachable!(),
        }
        match &s.get("morphology").unwrap().kind {
            FeatureKind::Categorical { vocabulary } => assert!(vocabulary.is_empty()),
            _ => unreachable!(),
        }
    }
}
