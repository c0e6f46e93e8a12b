//! Simulated anomalies: prescription digit swaps, non-prescription feature
//! mutations, and technique relabels, each kept only if the resulting
//! pattern is rare in the historical conditional counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::HistoricalDb;
use crate::record::{
    write_records, FeatureKind, FeatureSchema, Prescription, Technique, TreatmentRecord, AGE_MAX,
    AGE_MIN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MutationKind {
    RxDigitSwap,
    FeatureMutation,
    TechniqueRelabel,
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    pub old: Option<String>,
    pub new: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutation {
    pub kind: MutationKind,
    pub changes: Vec<FieldChange>,
}

impl Mutation {
    pub fn fields(&self) -> BTreeSet<&str> {
        self.changes.iter().map(|c| c.field.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RarityEvidence {
    pub condition: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAnomaly {
    pub id: String,
    pub base_record_id: String,
    /// The mutated record; its `record_id` is `id`.
    pub mutated: TreatmentRecord,
    pub mutation: Mutation,
    pub rarity_evidence: Vec<RarityEvidence>,
}

/// Every field of `a` and `b` that differs, `record_id` excluded.
pub fn diff_fields(a: &TreatmentRecord, b: &TreatmentRecord) -> Vec<FieldChange> {
    let pa = &a.prescription;
    let pb = &b.prescription;
    let mut out = Vec::new();
    let mut push = |field: &str, old: Option<String>, new: Option<String>| {
        if old != new {
            out.push(FieldChange {
                field: field.to_string(),
                old,
                new,
            });
        }
    };
    let s = |v: u32| Some(v.to_string());
    push("fractions", s(pa.fractions), s(pb.fractions));
    push("dose_per_fraction", s(pa.dose_per_fraction), s(pb.dose_per_fraction));
    push("total_dose", s(pa.total_dose), s(pb.total_dose));
    push("accumulated_dose", s(pa.accumulated_dose), s(pb.accumulated_dose));
    push(
        "technique",
        Some(a.technique.label().to_string()),
        Some(b.technique.label().to_string()),
    );
    for f in ["energy", "intent", "icd10", "morphology", "age_at_tx"] {
        push(f, a.feature_text(f), b.feature_text(f));
    }
    let keys: BTreeSet<&String> = a.extra.keys().chain(b.extra.keys()).collect();
    for k in keys {
        push(k, a.extra.get(k).cloned(), b.extra.get(k).cloned());
    }
    out
}

fn swap_first_digit(value: u32, digit: char) -> u32 {
    let mut s = value.to_string();
    s.replace_range(0..1, &digit.to_string());
    s.parse().expect("digit replacement keeps a valid integer")
}

/// Exchanges the leading decimal digits of fractions and dose per fraction
/// (5 x 400 becomes 4 x 500); total and accumulated dose follow.
pub fn swap_leading_digits(record: &TreatmentRecord) -> Result<TreatmentRecord> {
    let p = &record.prescription;
    let f = p.fractions.to_string().chars().next().unwrap_or('0');
    let d = p.dose_per_fraction.to_string().chars().next().unwrap_or('0');
    if f == d || p.fractions == 0 || p.dose_per_fraction == 0 {
        return Err(Error::DegenerateSwap(format!(
            "{} x {} has equal leading digits",
            p.fractions, p.dose_per_fraction
        )));
    }
    let mut out = record.clone();
    out.prescription = Prescription::new(swap_first_digit(p.fractions, d), swap_first_digit(p.dose_per_fraction, f));
    Ok(out)
}

/// How a single feature is to change.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureChangeSpec {
    /// Replace with this value (`None` = missing).
    Set(Option<String>),
    /// Draw from the schema: another vocabulary label for categorical
    /// features, an extreme value for numeric ones.
    Sample,
}

fn sample_value<R: Rng + ?Sized>(
    record: &TreatmentRecord,
    field: &str,
    schema: &FeatureSchema,
    rng: &mut R,
) -> Result<Option<String>> {
    let desc = schema
        .get(field)
        .ok_or_else(|| Error::InvalidMutation(format!("{field} is not in the feature schema")))?;
    let current = record.feature_text(field);
    match &desc.kind {
        FeatureKind::Categorical { vocabulary } => {
            let options: Vec<&String> = vocabulary
                .iter()
                .filter(|v| Some(v.as_str()) != current.as_deref())
                .collect();
            options
                .choose(rng)
                .map(|v| Some((*v).clone()))
                .ok_or_else(|| Error::InvalidMutation(format!("{field} has no alternative label")))
        }
        FeatureKind::Numeric { range } => {
            let (lo, hi) = range.unwrap_or((f64::from(AGE_MIN), f64::from(AGE_MAX)));
            let candidates: Vec<i64> = if field == "age_at_tx" {
                // Extremes of the plausible age span beyond the observed range.
                (i64::from(AGE_MIN)..=lo.floor() as i64)
                    .chain(hi.ceil() as i64..=i64::from(AGE_MAX))
                    .collect()
            } else {
                vec![lo.round() as i64, hi.round() as i64]
            };
            let cur = current.as_deref().and_then(|c| c.parse::<f64>().ok());
            let options: Vec<i64> = candidates
                .into_iter()
                .filter(|c| Some(*c as f64) != cur)
                .collect();
            options
                .choose(rng)
                .map(|v| Some(v.to_string()))
                .ok_or_else(|| Error::InvalidMutation(format!("{field} has no alternative value")))
        }
    }
}

/// Replaces the listed non-prescription features; all other fields are kept.
pub fn mutate_features<R: Rng + ?Sized>(
    record: &TreatmentRecord,
    spec: &BTreeMap<String, FeatureChangeSpec>,
    schema: &FeatureSchema,
    rng: &mut R,
) -> Result<TreatmentRecord> {
    let mut out = record.clone();
    for (field, change) in spec {
        let value = match change {
            FeatureChangeSpec::Set(v) => v.clone(),
            FeatureChangeSpec::Sample => sample_value(record, field, schema, rng)?,
        };
        if value == record.feature_text(field) {
            return Err(Error::InvalidMutation(format!(
                "{field} already has value {value:?}"
            )));
        }
        out.set_feature(field, value)?;
    }
    Ok(out)
}

pub fn relabel_technique(record: &TreatmentRecord, target: &Technique) -> Result<TreatmentRecord> {
    if !target.is_modeled() {
        return Err(Error::InvalidMutation(format!("{target} is not a modeled technique")));
    }
    if &record.technique == target {
        return Err(Error::DegenerateSwap(format!("record is already {target}")));
    }
    let mut out = record.clone();
    out.technique = target.clone();
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RarityMode {
    /// Each mutated field must be rare given the prescription.
    #[default]
    PerField,
    /// The mutated fields must be rare jointly given the prescription.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RarityOutcome {
    pub accepted: bool,
    pub evidence: Vec<RarityEvidence>,
}

fn condition_text(rx: &str, fields: &[(&str, Option<String>)]) -> String {
    let mut s = format!("rx={rx}");
    for (f, v) in fields {
        s.push_str(&format!(", {f}={}", v.as_deref().unwrap_or("-")));
    }
    s
}

fn conditional_count(db: &HistoricalDb, candidate: &TreatmentRecord, fields: &[&str]) -> usize {
    let key = candidate.rx_key();
    db.records()
        .iter()
        .filter(|r| r.rx_key() == key && fields.iter().all(|f| r.feature_text(f) == candidate.feature_text(f)))
        .count()
}

/// Counts how often the candidate's pattern occurs in `db`. Prescription
/// mutations are checked on the exact prescription; feature mutations on
/// the prescription together with each mutated value (or all of them in
/// [`RarityMode::Joint`]); relabels on the prescription with the full
/// categorical profile.
pub fn verify_rarity(
    candidate: &TreatmentRecord,
    mutation: &Mutation,
    db: &HistoricalDb,
    threshold: usize,
    mode: RarityMode,
) -> Result<RarityOutcome> {
    if &candidate.technique != db.technique() {
        return Err(Error::UnsupportedTechnique {
            found: candidate.technique.clone(),
            expected: db.technique().to_string(),
        });
    }
    let rx = candidate.rx_key().to_string();
    let feature_fields: Vec<&str> = mutation
        .changes
        .iter()
        .map(|c| c.field.as_str())
        .filter(|f| db.schema().get(f).is_some())
        .collect();
    let evidence = match mutation.kind {
        MutationKind::RxDigitSwap => vec![RarityEvidence {
            condition: condition_text(&rx, &[]),
            count: db.rx_count(&candidate.rx_key()),
        }],
        MutationKind::FeatureMutation if mode == RarityMode::PerField => feature_fields
            .iter()
            .map(|f| RarityEvidence {
                condition: condition_text(&rx, &[(f, candidate.feature_text(f))]),
                count: conditional_count(db, candidate, &[f]),
            })
            .collect(),
        MutationKind::FeatureMutation => vec![joint_evidence(db, candidate, &rx, &feature_fields)],
        MutationKind::TechniqueRelabel => {
            let cats: Vec<&str> = db
                .schema()
                .features
                .iter()
                .filter(|d| !d.is_numeric())
                .map(|d| d.name.as_str())
                .collect();
            vec![joint_evidence(db, candidate, &rx, &cats)]
        }
    };
    let accepted = !evidence.is_empty() && evidence.iter().all(|e| e.count <= threshold);
    Ok(RarityOutcome { accepted, evidence })
}

fn joint_evidence(db: &HistoricalDb, candidate: &TreatmentRecord, rx: &str, fields: &[&str]) -> RarityEvidence {
    let shown: Vec<(&str, Option<String>)> = fields.iter().map(|f| (*f, candidate.feature_text(f))).collect();
    RarityEvidence {
        condition: condition_text(rx, &shown),
        count: conditional_count(db, candidate, fields),
    }
}

/// Number of anomalies requested per mutation family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaCounts {
    pub rx_digit_swap: usize,
    pub feature_mutation: usize,
    pub technique_relabel: usize,
}

impl SaCounts {
    pub fn total(&self) -> usize {
        self.rx_digit_swap + self.feature_mutation + self.technique_relabel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeConfig {
    /// Highest conditional count still considered rare.
    pub rarity_threshold: usize,
    pub mode: RarityMode,
    /// Features changed per feature mutation.
    pub fields_per_mutation: usize,
    /// Attempts allowed per requested anomaly.
    pub attempts_per_anomaly: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            rarity_threshold: 1,
            mode: RarityMode::PerField,
            fields_per_mutation: 2,
            attempts_per_anomaly: 200,
        }
    }
}

fn signature(r: &TreatmentRecord) -> String {
    let mut copy = r.clone();
    copy.record_id.clear();
    serde_json::to_string(&copy).expect("records serialize")
}

/// Draws bases from `db` (and from `donors` for relabels, which are then
/// judged against `db`) until each family has its requested count. Output
/// order: swaps, feature mutations, relabels. Deterministic for a given rng
/// state.
pub fn generate_sa_set<R: Rng + ?Sized>(
    db: &HistoricalDb,
    donors: &[&HistoricalDb],
    counts: SaCounts,
    config: &ForgeConfig,
    rng: &mut R,
) -> Result<Vec<SimulatedAnomaly>> {
    generate_excluding(db, donors, counts, config, &BTreeSet::new(), rng)
}

/// As [`generate_sa_set`], additionally skipping candidates whose content
/// equals one of `exclude` (signatures from [`sa_signature`]).
pub fn generate_excluding<R: Rng + ?Sized>(
    db: &HistoricalDb,
    donors: &[&HistoricalDb],
    counts: SaCounts,
    config: &ForgeConfig,
    exclude: &BTreeSet<String>,
    rng: &mut R,
) -> Result<Vec<SimulatedAnomaly>> {
    if counts.technique_relabel > 0 && donors.iter().all(|d| d.technique() == db.technique()) {
        return Err(Error::InvalidParameter(
            "technique relabels need a donor database of another technique".into(),
        ));
    }
    let mutable: Vec<&str> = db
        .schema()
        .features
        .iter()
        .filter(|d| match &d.kind {
            FeatureKind::Categorical { vocabulary } => vocabulary.len() >= 2,
            FeatureKind::Numeric { .. } => false,
        })
        .map(|d| d.name.as_str())
        .collect();
    let mut seen = exclude.clone();
    let mut out: Vec<SimulatedAnomaly> = Vec::with_capacity(counts.total());
    let plan = [
        (MutationKind::RxDigitSwap, counts.rx_digit_swap),
        (MutationKind::FeatureMutation, counts.feature_mutation),
        (MutationKind::TechniqueRelabel, counts.technique_relabel),
    ];
    for (kind, wanted) in plan {
        let budget = wanted * config.attempts_per_anomaly.max(1);
        let mut made = 0;
        let mut attempts = 0;
        while made < wanted {
            if attempts == budget {
                return Err(Error::GenerationExhausted {
                    partial: out,
                    requested: counts.total(),
                });
            }
            attempts += 1;
            let (base, mutated) = match kind {
                MutationKind::RxDigitSwap => {
                    let base = db.records().choose(rng).expect("db is non-empty");
                    match swap_leading_digits(base) {
                        Ok(m) => (base, m),
                        Err(_) => continue,
                    }
                }
                MutationKind::FeatureMutation => {
                    let base = db.records().choose(rng).expect("db is non-empty");
                    let k = config.fields_per_mutation.clamp(1, mutable.len().max(1));
                    let fields: Vec<&&str> = mutable.choose_multiple(rng, k).collect();
                    if fields.is_empty() {
                        continue;
                    }
                    let spec = fields
                        .into_iter()
                        .map(|f| (f.to_string(), FeatureChangeSpec::Sample))
                        .collect();
                    match mutate_features(base, &spec, db.schema(), rng) {
                        Ok(m) => (base, m),
                        Err(_) => continue,
                    }
                }
                MutationKind::TechniqueRelabel => {
                    let donor_pool: Vec<&&HistoricalDb> =
                        donors.iter().filter(|d| d.technique() != db.technique()).collect();
                    let donor = donor_pool.choose(rng).expect("checked above");
                    let base = donor.records().choose(rng).expect("db is non-empty");
                    (base, relabel_technique(base, db.technique())?)
                }
            };
            let sig = signature(&mutated);
            if seen.contains(&sig) {
                continue;
            }
            let mutation = Mutation {
                kind,
                changes: diff_fields(base, &mutated),
            };
            let rarity = verify_rarity(&mutated, &mutation, db, config.rarity_threshold, config.mode)?;
            if !rarity.accepted {
                continue;
            }
            seen.insert(sig);
            let id = format!("SA{:03}.{}", out.len() + 1, base.record_id);
            let mut mutated = mutated;
            mutated.record_id = id.clone();
            out.push(SimulatedAnomaly {
                id,
                base_record_id: base.record_id.clone(),
                mutated,
                mutation,
                rarity_evidence: rarity.evidence,
            });
            made += 1;
        }
    }
    Ok(out)
}

/// Content signature of an anomaly's mutated record, ignoring its id.
pub fn sa_signature(sa: &SimulatedAnomaly) -> String {
    signature(&sa.mutated)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaDescriptor {
    pub id: String,
    pub base_record_id: String,
    pub mutation: Mutation,
    pub rarity_evidence: Vec<RarityEvidence>,
}

/// Mutated records as canonical CSV plus a JSON list of descriptors.
pub fn write_sa_set<W1: Write, W2: Write>(sas: &[SimulatedAnomaly], csv_out: W1, json_out: W2) -> Result<()> {
    let records: Vec<TreatmentRecord> = sas.iter().map(|s| s.mutated.clone()).collect();
    write_records(csv_out, &records)?;
    let descriptors: Vec<SaDescriptor> = sas
        .iter()
        .map(|s| SaDescriptor {
            id: s.id.clone(),
            base_record_id: s.base_record_id.clone(),
            mutation: s.mutation.clone(),
            rarity_evidence: s.rarity_evidence.clone(),
        })
        .collect();
    serde_json::to_writer_pretty(json_out, &descriptors)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, fx: u32, d: u32, tech: Technique) -> TreatmentRecord {
        TreatmentRecord {
            record_id: id.into(),
            prescription: Prescription::new(fx, d),
            technique: tech,
            energy: Some("x06".into()),
            intent: Some("curative".into()),
            icd10: Some("C34.30".into()),
            morphology: Some("87203".into()),
            age_at_tx: 49,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn digit_swap_examples() {
        let a = swap_leading_digits(&rec("a", 5, 400, Technique::ThreeD)).unwrap();
        assert_eq!(a.rx_key().to_string(), "4 x 500");
        assert_eq!(a.prescription.total_dose, 2000);
        let b = swap_leading_digits(&rec("b", 10, 300, Technique::ThreeD)).unwrap();
        assert_eq!(b.rx_key().to_string(), "30 x 100");
        assert_eq!(b.prescription.total_dose, 3000);
        assert!(matches!(
            swap_leading_digits(&rec("c", 3, 300, Technique::ThreeD)),
            Err(Error::DegenerateSwap(_))
        ));
        let back = swap_leading_digits(&b).unwrap();
        assert_eq!(back.prescription, Prescription::new(10, 300));
        let fields: Vec<_> = diff_fields(&rec("b", 10, 300, Technique::ThreeD), &b)
            .into_iter()
            .map(|c| c.field)
            .collect();
        assert_eq!(fields, ["fractions", "dose_per_fraction"]);
    }

    fn schema_with(values: &[(&str, &[&str])]) -> FeatureSchema {
        let mut s = FeatureSchema::thoracic();
        for d in &mut s.features {
            if let Some((_, vs)) = values.iter().find(|(n, _)| *n == d.name) {
                d.kind = FeatureKind::Categorical {
                    vocabulary: vs.iter().map(|v| v.to_string()).collect(),
                };
            }
            if d.name == "age_at_tx" {
                d.kind = FeatureKind::Numeric {
                    range: Some((40.0, 85.0)),
                };
            }
        }
        s
    }

    #[test]
    fn explicit_feature_mutation() {
        let mut base = rec("b", 5, 1000, Technique::Sbrt);
        base.age_at_tx = 91;
        let schema = FeatureSchema::thoracic();
        let mut spec = BTreeMap::new();
        spec.insert("intent".to_string(), FeatureChangeSpec::Set(Some("palliative".into())));
        spec.insert("age_at_tx".to_string(), FeatureChangeSpec::Set(Some("10".into())));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mutate_features(&base, &spec, &schema, &mut rng).unwrap();
        assert_eq!(m.intent.as_deref(), Some("palliative"));
        assert_eq!(m.age_at_tx, 10);
        let fields: BTreeSet<_> = diff_fields(&base, &m).into_iter().map(|c| c.field).collect();
        assert_eq!(fields, ["age_at_tx", "intent"].map(String::from).into());

        assert_eq!(mutate_features(&base, &BTreeMap::new(), &schema, &mut rng).unwrap(), base);
        let mut bad = BTreeMap::new();
        bad.insert("fractions".to_string(), FeatureChangeSpec::Set(Some("4".into())));
        assert!(matches!(
            mutate_features(&base, &bad, &schema, &mut rng),
            Err(Error::InvalidMutation(_))
        ));
    }

    #[test]
    fn sampled_mutation_changes_value() {
        let base = rec("c", 4, 1200, Technique::Sbrt);
        let schema = schema_with(&[("icd10", &["C34.30", "C15.9", "C34.10"]), ("energy", &["x06", "x10"])]);
        let mut spec = BTreeMap::new();
        spec.insert("icd10".to_string(), FeatureChangeSpec::Sample);
        spec.insert("energy".to_string(), FeatureChangeSpec::Sample);
        spec.insert("age_at_tx".to_string(), FeatureChangeSpec::Sample);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mutate_features(&base, &spec, &schema, &mut rng).unwrap();
            assert_eq!(m.energy.as_deref(), Some("x10"));
            assert_ne!(m.icd10, base.icd10);
            assert!(m.age_at_tx <= 40 || m.age_at_tx >= 85);
            assert_eq!(diff_fields(&base, &m).len(), 3);
        }
    }

    #[test]
    fn relabel() {
        let base = rec("d", 10, 300, Technique::ThreeD);
        let m = relabel_technique(&base, &Technique::Imrt).unwrap();
        let fields: Vec<_> = diff_fields(&base, &m).into_iter().map(|c| c.field).collect();
        assert_eq!(fields, ["technique"]);
        let s = relabel_technique(&rec("e", 5, 1000, Technique::Sbrt), &Technique::ThreeD).unwrap();
        assert_eq!(s.technique, Technique::ThreeD);
        assert!(matches!(
            relabel_technique(&base, &Technique::ThreeD),
            Err(Error::DegenerateSwap(_))
        ));
    }

    fn three_d_db() -> HistoricalDb {
        let mut recs: Vec<_> = (0..50).map(|i| rec(&format!("a{i}"), 5, 400, Technique::ThreeD)).collect();
        recs.push(rec("once", 4, 500, Technique::ThreeD));
        recs.push(rec("z", 10, 300, Technique::ThreeD));
        HistoricalDb::build(recs, &FeatureSchema::thoracic()).unwrap()
    }

    #[test]
    fn rarity_of_swapped_and_common_prescriptions() {
        let db = three_d_db();
        let base = rec("x", 5, 400, Technique::ThreeD);
        let swapped = swap_leading_digits(&base).unwrap();
        let mutation = Mutation {
            kind: MutationKind::RxDigitSwap,
            changes: diff_fields(&base, &swapped),
        };
        let out = verify_rarity(&swapped, &mutation, &db, 1, RarityMode::PerField).unwrap();
        assert!(out.accepted);
        assert_eq!(out.evidence[0].count, 1);

        let out = verify_rarity(&base, &mutation, &db, 1, RarityMode::PerField).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.evidence[0].count, 50);
    }

    #[test]
    fn rarity_of_feature_mutation() {
        let mut recs: Vec<_> = (0..185)
            .map(|i| {
                let mut r = rec(&format!("s{i}"), 5, 1000, Technique::Sbrt);
                r.age_at_tx = 60 + (i % 25);
                r
            })
            .collect();
        recs.push(rec("other", 3, 1800, Technique::Sbrt));
        let db = HistoricalDb::build(recs, &FeatureSchema::thoracic()).unwrap();
        let base = db.records()[0].clone();
        let mut cand = base.clone();
        cand.intent = Some("palliative".into());
        cand.age_at_tx = 10;
        let mutation = Mutation {
            kind: MutationKind::FeatureMutation,
            changes: diff_fields(&base, &cand),
        };
        let out = verify_rarity(&cand, &mutation, &db, 1, RarityMode::PerField).unwrap();
        assert!(out.accepted);
        assert_eq!(out.evidence.len(), 2);
        assert!(out.evidence.iter().all(|e| e.count == 0));
        assert_eq!(db.rx_count(&cand.rx_key()), 185);
        let joint = verify_rarity(&cand, &mutation, &db, 1, RarityMode::Joint).unwrap();
        assert_eq!(joint.evidence.len(), 1);
    }

    #[test]
    fn generation_is_deterministic_and_rare() {
        let db = three_d_db();
        let counts = SaCounts {
            rx_digit_swap: 1,
            ..Default::default()
        };
        let cfg = ForgeConfig::default();
        let a = generate_sa_set(&db, &[], counts, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_sa_set(&db, &[], counts, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert!(a[0].rarity_evidence.iter().all(|e| e.count <= 1));

        let none = generate_sa_set(&db, &[], SaCounts::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn generation_exhausts_with_partial() {
        let db = three_d_db();
        // 5x400 -> 4x500 (count 1), 4x500 -> 5x400 (50), 10x300 -> 30x100 (0):
        // only two distinct rare swaps exist
        let counts = SaCounts {
            rx_digit_swap: 3,
            ..Default::default()
        };
        let cfg = ForgeConfig {
            attempts_per_anomaly: 50,
            ..Default::default()
        };
        match generate_sa_set(&db, &[], counts, &cfg, &mut ChaCha8Rng::seed_from_u64(9)) {
            Err(Error::GenerationExhausted { partial, requested }) => {
                assert_eq!(requested, 3);
                assert_eq!(partial.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sa_set_serialization() {
        let db = three_d_db();
        let counts = SaCounts {
            rx_digit_swap: 1,
            ..Default::default()
        };
        let sas = generate_sa_set(&db, &[], counts, &ForgeConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut csv_buf = Vec::new();
        let mut json_buf = Vec::new();
        write_sa_set(&sas, &mut csv_buf, &mut json_buf).unwrap();
        let text = String::from_utf8(csv_buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("SA001."));
        let back: Vec<SaDescriptor> = serde_json::from_slice(&json_buf).unwrap();
        assert_eq!(back[0].mutation.kind, MutationKind::RxDigitSwap);
    }
}
