use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dissimilarity::{
    characteristic_from_parts, scale_rx, CharacteristicDistances, Code, FeatureEncoder, RxScaler,
    ScaledRx,
};
use crate::error::{Error, Result};
use crate::record::{FeatureSchema, RxKey, Technique, TreatmentRecord};

/// Immutable reference set for one technique.
#[derive(Clone, Debug)]
pub struct HistoricalDb {
    technique: Technique,
    records: Vec<TreatmentRecord>,
    rx_scaler: RxScaler,
    schema: FeatureSchema,
    rx_index: BTreeMap<RxKey, usize>,
    characteristic: CharacteristicDistances,
    warnings: Vec<String>,
    scaled: Vec<ScaledRx>,
    encoder: FeatureEncoder,
    encoded: Vec<Vec<Code>>,
}

/// Serializable overview of a built database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbSummary {
    pub technique: Technique,
    pub size: usize,
    pub theta: f64,
    pub tau: f64,
    pub incomparable_pairs: usize,
    pub rx_scaler: RxScaler,
    pub schema: FeatureSchema,
    pub distinct_prescriptions: usize,
    pub warnings: Vec<String>,
}

pub fn build_historical_db(records: Vec<TreatmentRecord>, schema: &FeatureSchema) -> Result<HistoricalDb> {
    HistoricalDb::build(records, schema)
}

impl HistoricalDb {
    /// Fits scaler, feature ranges and prescription index, and computes the
    /// characteristic distances. All records must share one technique.
    pub fn build(records: Vec<TreatmentRecord>, schema: &FeatureSchema) -> Result<Self> {
        schema.check()?;
        if records.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                available: records.len(),
            });
        }
        let technique = records[0].technique.clone();
        if let Some(other) = records.iter().find(|r| r.technique != technique) {
            return Err(Error::UnsupportedTechnique {
                found: other.technique.clone(),
                expected: technique.to_string(),
            });
        }
        let rx_scaler = RxScaler::fit(&records).expect("non-empty");
        let mut warnings = Vec::new();
        if rx_scaler.fractions_degenerate() {
            warnings.push(format!(
                "fractions are constant ({}); that dimension contributes 0 to rx distance",
                rx_scaler.fractions.0
            ));
        }
        if rx_scaler.dose_degenerate() {
            warnings.push(format!(
                "dose per fraction is constant ({}); that dimension contributes 0 to rx distance",
                rx_scaler.dose_per_fraction.0
            ));
        }
        let schema = schema.fitted(&records);
        let mut rx_index = BTreeMap::new();
        for r in &records {
            *rx_index.entry(r.rx_key()).or_insert(0) += 1;
        }
        let scaled: Vec<ScaledRx> = records
            .iter()
            .map(|r| scale_rx(&r.prescription, &rx_scaler))
            .collect();
        let encoder = FeatureEncoder::new(&schema);
        let encoded: Vec<Vec<Code>> = records.iter().map(|r| encoder.encode(r, &schema)).collect();
        let characteristic = characteristic_from_parts(&scaled, &encoded, &encoder)?;
        if characteristic.incomparable_pairs > 0 {
            warnings.push(format!(
                "{} ordered pairs share no feature and were skipped in tau",
                characteristic.incomparable_pairs
            ));
        }
        Ok(Self {
            technique,
            records,
            rx_scaler,
            schema,
            rx_index,
            characteristic,
            warnings,
            scaled,
            encoder,
            encoded,
        })
    }

    pub fn technique(&self) -> &Technique {
        &self.technique
    }

    pub fn records(&self) -> &[TreatmentRecord] {
        &self.records
    }

    /// `S`, the number of records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rx_scaler(&self) -> &RxScaler {
        &self.rx_scaler
    }

    /// The schema with ranges and vocabularies fixed from this database.
    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rx_index(&self) -> &BTreeMap<RxKey, usize> {
        &self.rx_index
    }

    pub fn rx_count(&self, key: &RxKey) -> usize {
        self.rx_index.get(key).copied().unwrap_or(0)
    }

    pub fn theta(&self) -> f64 {
        self.characteristic.theta
    }

    pub fn tau(&self) -> f64 {
        self.characteristic.tau
    }

    pub fn characteristic(&self) -> CharacteristicDistances {
        self.characteristic
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn scaled(&self) -> &[ScaledRx] {
        &self.scaled
    }

    pub(crate) fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub(crate) fn encoded(&self) -> &[Vec<Code>] {
        &self.encoded
    }

    pub fn summary(&self) -> DbSummary {
        DbSummary {
            technique: self.technique.clone(),
            size: self.len(),
            theta: self.theta(),
            tau: self.tau(),
            incomparable_pairs: self.characteristic.incomparable_pairs,
            rx_scaler: self.rx_scaler,
            schema: self.schema.clone(),
            distinct_prescriptions: self.rx_index.len(),
            warnings: self.warnings.clone(),
        }
    }
}
