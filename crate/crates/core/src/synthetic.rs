//! Synthetic thoracic cohorts with planted (prescription, feature profile)
//! clusters, for tests, benchmarks and demonstrations.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::record::{Prescription, Technique, TreatmentRecord};
use crate::seed::SeedStreams;

/// One planted cluster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub fractions: u32,
    pub dose_per_fraction: u32,
    pub energy: &'static str,
    pub intent: &'static str,
    pub icd10: &'static str,
    pub morphology: &'static str,
    pub mean_age: i32,
}

const fn c(
    fractions: u32,
    dose_per_fraction: u32,
    energy: &'static str,
    intent: &'static str,
    icd10: &'static str,
    morphology: &'static str,
    mean_age: i32,
) -> ClusterSpec {
    ClusterSpec {
        fractions,
        dose_per_fraction,
        energy,
        intent,
        icd10,
        morphology,
        mean_age,
    }
}

// Prescriptions are picked so that swapping their leading digits never
// lands on another cluster, and lands either far from its own cluster or
// nearer to a cluster with a different patient profile.
const THREE_D: [ClusterSpec; 6] = [
    c(5, 400, "x06", "palliative", "C78.00", "81403", 72),
    c(10, 300, "x15", "palliative", "C34.90", "80703", 68),
    c(15, 250, "x10", "palliative", "C34.10", "81403", 75),
    c(30, 200, "x15", "curative", "C34.30", "80703", 64),
    c(25, 300, "mixed photon", "curative", "C15.5", "80703", 61),
    c(13, 350, "x06", "palliative", "C77.1", "80003", 70),
];

const IMRT: [ClusterSpec; 6] = [
    c(30, 200, "x06", "curative", "C34.90", "81403", 66),
    c(25, 180, "x06", "curative", "C15.5", "80703", 63),
    c(33, 180, "x10", "curative", "C34.10", "80703", 67),
    c(35, 200, "x06FFF", "curative", "C34.30", "81403", 62),
    c(15, 400, "x10", "palliative", "C78.00", "80003", 71),
    c(37, 170, "mixed photon", "curative", "C45.0", "90503", 69),
];

const SBRT: [ClusterSpec; 6] = [
    c(5, 1000, "x06FFF", "curative", "C34.10", "81403", 74),
    c(3, 1800, "x10", "curative", "C34.30", "80703", 76),
    c(4, 1200, "x06FFF", "curative", "C34.90", "81403", 72),
    c(5, 1200, "x06", "curative", "C34.10", "80703", 79),
    c(3, 2000, "x10", "curative", "C78.00", "80003", 70),
    c(1, 3400, "x06", "curative", "R91.1", "80003", 77),
];

pub fn clusters(technique: &Technique) -> &'static [ClusterSpec] {
    match technique {
        Technique::ThreeD => &THREE_D,
        Technique::Imrt => &IMRT,
        Technique::Sbrt => &SBRT,
        _ => &[],
    }
}

/// Records per modeled technique, clusters in round-robin order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    by_technique: BTreeMap<Technique, Vec<TreatmentRecord>>,
}

/// Share of records with one categorical feature taken from another cluster.
pub const NOISE_RATE: f64 = 0.05;
const AGE_SPREAD: i32 = 8;

impl SyntheticCohort {
    /// `per_technique` records for each of 3D, IMRT and SBRT.
    pub fn thoracic(per_technique: usize, seed: u64) -> Self {
        let streams = SeedStreams::new(seed);
        let by_technique = [Technique::ThreeD, Technique::Imrt, Technique::Sbrt]
            .into_iter()
            .map(|t| {
                let mut rng = streams.rng(&format!("synthetic-{}", t.label()), 0);
                let recs = generate(&t, per_technique, &mut rng);
                (t, recs)
            })
            .collect();
        Self { by_technique }
    }

    pub fn records(&self, technique: &Technique) -> &[TreatmentRecord] {
        self.by_technique.get(technique).map_or(&[], Vec::as_slice)
    }

    pub fn techniques(&self) -> impl Iterator<Item = &Technique> {
        self.by_technique.keys()
    }

    /// All techniques concatenated in technique order.
    pub fn all_records(&self) -> Vec<TreatmentRecord> {
        self.by_technique.values().flatten().cloned().collect()
    }
}

fn generate<R: Rng + ?Sized>(technique: &Technique, count: usize, rng: &mut R) -> Vec<TreatmentRecord> {
    let specs = clusters(technique);
    let spread = Uniform::new_inclusive(-AGE_SPREAD, AGE_SPREAD).expect("valid range");
    (0..count)
        .map(|i| {
            let spec = specs[i % specs.len()];
            let mut fields = [spec.energy, spec.intent, spec.icd10, spec.morphology];
            if rng.random::<f64>() < NOISE_RATE {
                let other = specs[rng.random_range(0..specs.len())];
                let k = rng.random_range(0..fields.len());
                fields[k] = [other.energy, other.intent, other.icd10, other.morphology][k];
            }
            TreatmentRecord {
                record_id: format!("SYN{}{:04}", technique.label(), i + 1),
                prescription: Prescription::new(spec.fractions, spec.dose_per_fraction),
                technique: technique.clone(),
                energy: Some(fields[0].to_string()),
                intent: Some(fields[1].to_string()),
                icd10: Some(fields[2].to_string()),
                morphology: Some(fields[3].to_string()),
                age_at_tx: (spec.mean_age + spread.sample(rng)).clamp(18, 95),
                extra: BTreeMap::new(),
            }
        })
        .collect()
}
