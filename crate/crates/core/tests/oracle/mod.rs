//! Brute-force reference implementations, written from the definitions and
//! sharing no code with the library beyond the record type.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rxpeer::{Prescription, Technique, TreatmentRecord};

pub const CATEGORICAL: [&str; 4] = ["energy", "intent", "icd10", "morphology"];

fn cat(r: &TreatmentRecord, k: usize) -> Option<&str> {
    match k {
        0 => r.energy.as_deref(),
        1 => r.intent.as_deref(),
        2 => r.icd10.as_deref(),
        _ => r.morphology.as_deref(),
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn scaled(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Distances of one database, straight from the definitions.
pub struct Oracle<'a> {
    pub db: &'a [TreatmentRecord],
    fx: (f64, f64),
    dose: (f64, f64),
    age: (f64, f64),
}

impl<'a> Oracle<'a> {
    pub fn new(db: &'a [TreatmentRecord]) -> Self {
        Self {
            db,
            fx: bounds(db.iter().map(|r| f64::from(r.prescription.fractions))),
            dose: bounds(db.iter().map(|r| f64::from(r.prescription.dose_per_fraction))),
            age: bounds(db.iter().map(|r| f64::from(r.age_at_tx))),
        }
    }

    pub fn rho(&self, a: &TreatmentRecord, b: &TreatmentRecord) -> f64 {
        let df = scaled(f64::from(a.prescription.fractions), self.fx) - scaled(f64::from(b.prescription.fractions), self.fx);
        let dd = scaled(f64::from(a.prescription.dose_per_fraction), self.dose)
            - scaled(f64::from(b.prescription.dose_per_fraction), self.dose);
        (df * df + dd * dd).sqrt()
    }

    /// `None` when no feature is present on both sides.
    pub fn gower(&self, a: &TreatmentRecord, b: &TreatmentRecord) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        let diff = (f64::from(a.age_at_tx) - f64::from(b.age_at_tx)).abs();
        let span = self.age.1 - self.age.0;
        num += if span > 0.0 {
            (diff / span).min(1.0)
        } else if diff == 0.0 {
            0.0
        } else {
            1.0
        };
        den += 1.0;
        for k in 0..CATEGORICAL.len() {
            if let (Some(x), Some(y)) = (cat(a, k), cat(b, k)) {
                num += if x == y { 0.0 } else { 1.0 };
                den += 1.0;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Database records ordered by (rho, gower, position).
    pub fn ranking(&self, q: &TreatmentRecord) -> Vec<(usize, f64, f64)> {
        let mut v: Vec<(usize, f64, f64)> = self
            .db
            .iter()
            .enumerate()
            .map(|(i, r)| (i, self.rho(q, r), self.gower(q, r).unwrap_or(1.0)))
            .collect();
        v.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.2.total_cmp(&y.2)).then(x.0.cmp(&y.0)));
        v
    }

    pub fn r(&self, q: &TreatmentRecord, m: usize) -> f64 {
        self.ranking(q).iter().take(m).map(|x| x.1).sum::<f64>() / m as f64
    }

    pub fn f(&self, q: &TreatmentRecord, n: usize) -> f64 {
        self.ranking(q).iter().take(n).map(|x| x.2).sum::<f64>() / n as f64
    }

    pub fn theta(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, a) in self.db.iter().enumerate() {
            for (k, b) in self.db.iter().enumerate() {
                if j != k {
                    sum += self.rho(a, b);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    pub fn tau(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, a) in self.db.iter().enumerate() {
            for (k, b) in self.db.iter().enumerate() {
                if j != k {
                    if let Some(g) = self.gower(a, b) {
                        sum += g;
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

pub fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn pick<R: Rng>(rng: &mut R, options: &[&str], missing: f64) -> Option<String> {
    if rng.random::<f64>() < missing {
        None
    } else {
        Some(options[rng.random_range(0..options.len())].to_string())
    }
}

/// A small random 3D record; prescriptions come from a short list so that
/// exact matches and ties are common.
pub fn random_record<R: Rng>(rng: &mut R, id: &str, missing: f64) -> TreatmentRecord {
    const RX: [(u32, u32); 6] = [(5, 400), (10, 300), (15, 250), (30, 200), (25, 300), (1, 800)];
    let (fx, d) = if rng.random::<f64>() < 0.15 {
        (rng.random_range(1..40), rng.random_range(150..900))
    } else {
        RX[rng.random_range(0..RX.len())]
    };
    TreatmentRecord {
        record_id: id.to_string(),
        prescription: Prescription::new(fx, d),
        technique: Technique::ThreeD,
        energy: pick(rng, &["x06", "x10", "x15"], missing),
        intent: pick(rng, &["curative", "palliative"], missing),
        icd10: pick(rng, &["C34.10", "C34.30", "C15.5", "C78.00"], missing),
        morphology: pick(rng, &["80703", "81403"], missing),
        age_at_tx: rng.random_range(30..95),
        extra: BTreeMap::new(),
    }
}

pub fn random_db<R: Rng>(rng: &mut R, size: usize, missing: f64) -> Vec<TreatmentRecord> {
    (0..size).map(|i| random_record(rng, &format!("r{i}"), missing)).collect()
}
