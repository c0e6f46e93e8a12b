//! Cohort filters: technique exclusion, per-technique energy whitelist,
//! diagnosis whitelist, dose consistency, and re-plan elimination.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::parse::LabelMappings;
use crate::record::{validate_record, Technique, TreatmentRecord, Violation};

/// Diagnosis codes of the thoracic model.
pub const THORACIC_ICD10: [&str; 36] = [
    "C15.3", "C15.4", "C15.5", "C15.9", "C33", "C34.00", "C34.01", "C34.02", "C34.10", "C34.12",
    "C34.2", "C34.30", "C34.31", "C34.32", "C34.80", "C34.81", "C34.82", "C34.90", "C34.91",
    "C34.92", "C37", "C38.1", "C38.2", "C38.3", "C38.4", "C38.8", "C45.0", "C77.1", "C78.00",
    "C78.01", "C78.02", "C78.1", "C78.2", "D15.0", "E85.8", "R91.1",
];

/// How records of the same patient are linked when eliminating the initial
/// plan of a re-plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubjectKey {
    /// Subject is the part of `record_id` before the first separator.
    RecordIdPrefix { separator: String },
    /// Subject is read from an extra input column.
    Column { name: String },
}

impl Default for SubjectKey {
    fn default() -> Self {
        SubjectKey::RecordIdPrefix {
            separator: "-".into(),
        }
    }
}

impl SubjectKey {
    pub fn subject<'a>(&self, record: &'a TreatmentRecord) -> Option<&'a str> {
        match self {
            SubjectKey::RecordIdPrefix { separator } => Some(
                record
                    .record_id
                    .split_once(separator.as_str())
                    .map_or(record.record_id.as_str(), |(head, _)| head),
            ),
            SubjectKey::Column { name } => record.extra.get(name).map(String::as_str),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplanPolicy {
    /// Drop re-plans and cone-downs together with the initial plan they follow.
    #[default]
    DropReplanAndInitial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub excluded_techniques: BTreeSet<String>,
    /// Technique label to allowed canonical energies.
    pub energy_whitelist: BTreeMap<String, BTreeSet<String>>,
    pub icd10_whitelist: BTreeSet<String>,
    pub label_mappings: LabelMappings,
    pub subject_key: SubjectKey,
    pub replan_policy: ReplanPolicy,
}

impl Default for CohortConfig {
    /// The thoracic defaults: energies observed per technique in the
    /// reference cohort, the thoracic diagnosis list, and a few label aliases.
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let mut energy_whitelist = BTreeMap::new();
        energy_whitelist.insert(
            "3D".to_string(),
            set(&["x06", "x10", "x15", "mixed photon", "mixed mode"]),
        );
        energy_whitelist.insert(
            "IMRT".to_string(),
            set(&["x06", "x06FFF", "x10", "x10FFF", "x15", "mixed photon"]),
        );
        energy_whitelist.insert(
            "SBRT".to_string(),
            set(&["x06", "x06FFF", "x10", "x15", "mixed photon"]),
        );

        let mut label_mappings = LabelMappings::new();
        let energy = label_mappings.entry("energy".into()).or_default();
        for (raw, canonical) in [
            ("6X", "x06"),
            ("x6", "x06"),
            ("10X", "x10"),
            ("15X", "x15"),
            ("6XFFF", "x06FFF"),
            ("x6fff", "x06FFF"),
            ("x06fff", "x06FFF"),
            ("10XFFF", "x10FFF"),
            ("x10fff", "x10FFF"),
            ("Mix Photon", "mixed photon"),
            ("Mixed Photon", "mixed photon"),
            ("Mix Mode", "mixed mode"),
            ("Mixed Mode", "mixed mode"),
        ] {
            energy.insert(raw.into(), canonical.into());
        }
        let intent = label_mappings.entry("intent".into()).or_default();
        for (raw, canonical) in [
            ("Curative", "curative"),
            ("CURATIVE", "curative"),
            ("Palliative", "palliative"),
            ("PALLIATIVE", "palliative"),
        ] {
            intent.insert(raw.into(), canonical.into());
        }
        let technique = label_mappings.entry("technique".into()).or_default();
        for (raw, canonical) in [("3DCRT", "3D"), ("3D-CRT", "3D"), ("SABR", "SBRT")] {
            technique.insert(raw.into(), canonical.into());
        }

        Self {
            excluded_techniques: set(&["IMPT", "2D", "Brachy"]),
            energy_whitelist,
            icd10_whitelist: set(&THORACIC_ICD10),
            label_mappings,
            subject_key: SubjectKey::default(),
            replan_policy: ReplanPolicy::default(),
        }
    }
}

impl CohortConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<()> {
        for t in Technique::MODELED {
            if self.excluded_techniques.contains(t.label()) {
                continue;
            }
            match self.energy_whitelist.get(t.label()) {
                Some(w) if !w.is_empty() => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "energy whitelist for {t} is empty"
                    )))
                }
            }
        }
        if self.icd10_whitelist.is_empty() {
            return Err(Error::Schema("icd10 whitelist is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExclusionRule {
    TechniqueExcluded,
    InvalidRecord,
    ReplanOrConeDown,
    DoseMismatch,
    EnergyRareForTechnique,
    DiagnosisNotWhitelisted,
    InitialOfReplan,
}

impl fmt::Display for ExclusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub record_id: String,
    pub rule: ExclusionRule,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionLog {
    pub entries: Vec<Exclusion>,
}

impl ExclusionLog {
    pub fn count(&self, rule: ExclusionRule) -> usize {
        self.entries.iter().filter(|e| e.rule == rule).count()
    }

    /// Share of the input removed as re-plans, cone-downs, or their initials.
    pub fn replan_share(&self, input_len: usize) -> f64 {
        if input_len == 0 {
            return 0.0;
        }
        let n = self.count(ExclusionRule::ReplanOrConeDown) + self.count(ExclusionRule::InitialOfReplan);
        n as f64 / input_len as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["record_id", "rule", "detail"])?;
        for e in &self.entries {
            w.write_record([e.record_id.as_str(), &e.rule.to_string(), e.detail.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Records kept by the cohort filter, per modeled technique, in input order.
pub type CohortSplit = BTreeMap<Technique, Vec<TreatmentRecord>>;

fn own_rule(record: &TreatmentRecord, config: &CohortConfig) -> Option<(ExclusionRule, String)> {
    let tech = &record.technique;
    if !tech.is_modeled() || config.excluded_techniques.contains(tech.label()) {
        return Some((
            ExclusionRule::TechniqueExcluded,
            format!("technique {tech}"),
        ));
    }
    let validation = validate_record(record);
    if let Some(v) = validation
        .violations
        .iter()
        .find(|v| matches!(v, Violation::ReplanSuspect { .. }))
    {
        return Some((ExclusionRule::ReplanOrConeDown, v.to_string()));
    }
    for v in &validation.violations {
        match v {
            Violation::DoseMismatch { .. } => {
                return Some((ExclusionRule::DoseMismatch, v.to_string()))
            }
            Violation::AgeOutOfRange { .. } | Violation::NonPositiveRx { .. } => {
                return Some((ExclusionRule::InvalidRecord, v.to_string()))
            }
            Violation::ReplanSuspect { .. } => {}
        }
    }
    let allowed = config.energy_whitelist.get(tech.label());
    match (&record.energy, allowed) {
        (Some(e), Some(w)) if w.contains(e) => {}
        (e, _) => {
            return Some((
                ExclusionRule::EnergyRareForTechnique,
                format!("energy {} not allowed for {tech}", e.as_deref().unwrap_or("<missing>")),
            ))
        }
    }
    match &record.icd10 {
        Some(code) if config.icd10_whitelist.contains(code) => None,
        code => Some((
            ExclusionRule::DiagnosisNotWhitelisted,
            format!("diagnosis {}", code.as_deref().unwrap_or("<missing>")),
        )),
    }
}

/// Splits normalized records into per-technique cohorts. Every input record
/// ends up either in the output or in the exclusion log, exactly once.
pub fn filter_cohort(records: &[TreatmentRecord], config: &CohortConfig) -> (CohortSplit, ExclusionLog) {
    // Re-plans (accumulated != total) keyed by subject, for matching initials.
    let mut replans: HashMap<&str, Vec<&TreatmentRecord>> = HashMap::new();
    for r in records {
        let rx = &r.prescription;
        if rx.accumulated_dose != rx.total_dose {
            if let Some(subject) = config.subject_key.subject(r) {
                replans.entry(subject).or_default().push(r);
            }
        }
    }

    let mut split = CohortSplit::new();
    let mut log = ExclusionLog::default();
    for r in records {
        if let Some((rule, detail)) = own_rule(r, config) {
            log.entries.push(Exclusion {
                record_id: r.record_id.clone(),
                rule,
                detail,
            });
            continue;
        }
        // An initial plan is a same-subject course whose accumulated dose plus
        // the re-plan's own total gives the re-plan's accumulated dose.
        let initial_of = config.subject_key.subject(r).and_then(|s| {
            replans.get(s)?.iter().find(|rp| {
                rp.record_id != r.record_id
                    && u64::from(r.prescription.accumulated_dose) + u64::from(rp.prescription.total_dose)
                        == u64::from(rp.prescription.accumulated_dose)
            })
        });
        if let Some(rp) = initial_of {
            log.entries.push(Exclusion {
                record_id: r.record_id.clone(),
                rule: ExclusionRule::InitialOfReplan,
                detail: format!("initial plan of {}", rp.record_id),
            });
            continue;
        }
        split.entry(r.technique.clone()).or_default().push(r.clone());
    }
    (split, log)
}
