//! Prescription and feature dissimilarities.
//!
//! * `rho`: Euclidean distance between min-max scaled `(fractions, dose/fx)`
//!   pairs.
//! * `g`: Gower distance over the non-prescription features: numeric
//!   features contribute `|a - b| / range`, categorical ones 0 or 1, and
//!   the contributions are averaged with the schema weights over the
//!   features both records have.
//!
//! Group distances rank every database record by `rho`, then `g`, then
//! database order. `R(m)` averages `rho` over the first `m`, `F(n)` averages
//! `g` over the first `n`; because same-prescription records have
//! `rho = 0` they always come first, which gives the "same Rx first, then
//! nearest Rx" fill rule.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::HistoricalDb;
use crate::record::{FeatureKind, FeatureSchema, FeatureValue, Prescription, TreatmentRecord};

/// Per-dimension min/max of the prescription pairs in a database.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RxScaler {
    pub fractions: (f64, f64),
    pub dose_per_fraction: (f64, f64),
}

impl RxScaler {
    pub fn fit(records: &[TreatmentRecord]) -> Option<Self> {
        let first = records.first()?;
        let f0 = f64::from(first.prescription.fractions);
        let d0 = f64::from(first.prescription.dose_per_fraction);
        let mut s = Self {
            fractions: (f0, f0),
            dose_per_fraction: (d0, d0),
        };
        for r in records {
            let f = f64::from(r.prescription.fractions);
            let d = f64::from(r.prescription.dose_per_fraction);
            s.fractions = (s.fractions.0.min(f), s.fractions.1.max(f));
            s.dose_per_fraction = (s.dose_per_fraction.0.min(d), s.dose_per_fraction.1.max(d));
        }
        Some(s)
    }

    pub fn fractions_degenerate(&self) -> bool {
        self.fractions.1 <= self.fractions.0
    }

    pub fn dose_degenerate(&self) -> bool {
        self.dose_per_fraction.1 <= self.dose_per_fraction.0
    }
}

fn min_max(value: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (value - lo) / (hi - lo)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledRx {
    pub fractions: f64,
    pub dose_per_fraction: f64,
}

impl ScaledRx {
    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.fractions) && (0.0..=1.0).contains(&self.dose_per_fraction)
    }
}

/// Degenerate dimensions (min == max) scale to 0.
pub fn scale_rx(p: &Prescription, scaler: &RxScaler) -> ScaledRx {
    ScaledRx {
        fractions: min_max(f64::from(p.fractions), scaler.fractions),
        dose_per_fraction: min_max(f64::from(p.dose_per_fraction), scaler.dose_per_fraction),
    }
}

pub fn rx_distance(i: &ScaledRx, j: &ScaledRx) -> f64 {
    let df = i.fractions - j.fractions;
    let dd = i.dose_per_fraction - j.dose_per_fraction;
    (df * df + dd * dd).sqrt()
}

fn numeric_term(a: f64, b: f64, range: Option<(f64, f64)>) -> f64 {
    let diff = (a - b).abs();
    match range {
        Some((lo, hi)) if hi > lo => (diff / (hi - lo)).min(1.0),
        _ if diff == 0.0 => 0.0,
        _ => 1.0,
    }
}

/// Gower distance between two feature vectors laid out in schema order.
pub fn gower_values(a: &[FeatureValue<'_>], b: &[FeatureValue<'_>], schema: &FeatureSchema) -> Result<f64> {
    debug_assert_eq!(a.len(), schema.len());
    debug_assert_eq!(b.len(), schema.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for ((x, y), desc) in a.iter().zip(b).zip(&schema.features) {
        let term = match (x, y, &desc.kind) {
            (FeatureValue::Missing, _, _) | (_, FeatureValue::Missing, _) => continue,
            (FeatureValue::Numeric(x), FeatureValue::Numeric(y), FeatureKind::Numeric { range }) => {
                numeric_term(*x, *y, *range)
            }
            (FeatureValue::Categorical(x), FeatureValue::Categorical(y), _) => {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            }
            _ => {
                return Err(Error::Schema(format!(
                    "feature {} has mixed kinds",
                    desc.name
                )))
            }
        };
        num += desc.weight * term;
        den += desc.weight;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::IncomparablePair)
    }
}

pub fn gower_distance(i: &TreatmentRecord, j: &TreatmentRecord, schema: &FeatureSchema) -> Result<f64> {
    let a: Vec<_> = schema.features.iter().map(|d| d.value(i)).collect();
    let b: Vec<_> = schema.features.iter().map(|d| d.value(j)).collect();
    gower_values(&a, &b, schema)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Code {
    Num(f64),
    Cat(u32),
    Missing,
}

/// Categorical labels not present in the database never match any code.
const UNSEEN: u32 = u32::MAX;

#[derive(Clone, Debug)]
enum Slot {
    Numeric(Option<(f64, f64)>),
    Categorical(HashMap<String, u32>),
}

/// Interns a fitted schema's features so database scans compare integers
/// instead of strings. Produces exactly the same values as [`gower_values`].
#[derive(Clone, Debug)]
pub(crate) struct FeatureEncoder {
    slots: Vec<Slot>,
    weights: Vec<f64>,
}

impl FeatureEncoder {
    pub(crate) fn new(schema: &FeatureSchema) -> Self {
        let slots = schema
            .features
            .iter()
            .map(|d| match &d.kind {
                FeatureKind::Numeric { range } => Slot::Numeric(*range),
                FeatureKind::Categorical { vocabulary } => Slot::Categorical(
                    vocabulary
                        .iter()
                        .enumerate()
                        .map(|(i, v)| (v.clone(), i as u32))
                        .collect(),
                ),
            })
            .collect();
        Self {
            slots,
            weights: schema.features.iter().map(|d| d.weight).collect(),
        }
    }

    pub(crate) fn encode(&self, record: &TreatmentRecord, schema: &FeatureSchema) -> Vec<Code> {
        schema
            .features
            .iter()
            .zip(&self.slots)
            .map(|(desc, slot)| match (desc.value(record), slot) {
                (FeatureValue::Missing, _) => Code::Missing,
                (FeatureValue::Numeric(v), _) => Code::Num(v),
                (FeatureValue::Categorical(s), Slot::Categorical(codes)) => {
                    Code::Cat(codes.get(s).copied().unwrap_or(UNSEEN))
                }
                (FeatureValue::Categorical(_), Slot::Numeric(_)) => Code::Missing,
            })
            .collect()
    }

    /// `None` when the pair shares no comparable feature.
    pub(crate) fn gower(&self, a: &[Code], b: &[Code]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (((x, y), slot), w) in a.iter().zip(b).zip(&self.slots).zip(&self.weights) {
            let term = match (x, y) {
                (Code::Num(x), Code::Num(y)) => match slot {
                    Slot::Numeric(range) => numeric_term(*x, *y, *range),
                    Slot::Categorical(_) => continue,
                },
                (Code::Cat(x), Code::Cat(y)) => {
                    if x == y && *x != UNSEEN {
                        0.0
                    } else {
                        1.0
                    }
                }
                _ => continue,
            };
            num += w * term;
            den += w;
        }
        (den > 0.0).then(|| num / den)
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicDistances {
    /// Mean pairwise prescription distance.
    pub theta: f64,
    /// Mean pairwise feature distance over comparable pairs.
    pub tau: f64,
    /// Ordered pairs skipped in `tau` because they share no feature.
    pub incomparable_pairs: usize,
}

pub(crate) fn characteristic_from_parts(
    scaled: &[ScaledRx],
    encoded: &[Vec<Code>],
    encoder: &FeatureEncoder,
) -> Result<CharacteristicDistances> {
    let s = scaled.len();
    if s < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: s,
        });
    }
    // Row j covers the unordered pairs (j, k > j); each contributes twice
    // to the ordered-pair sums.
    let rows: Vec<(f64, f64, usize)> = (0..s)
        .into_par_iter()
        .map(|j| {
            let mut rho = CompensatedSum::default();
            let mut g = CompensatedSum::default();
            let mut skipped = 0;
            for k in j + 1..s {
                rho.add(rx_distance(&scaled[j], &scaled[k]));
                match encoder.gower(&encoded[j], &encoded[k]) {
                    Some(v) => g.add(v),
                    None => skipped += 1,
                }
            }
            (rho.value(), g.value(), skipped)
        })
        .collect();
    let mut rho = CompensatedSum::default();
    let mut g = CompensatedSum::default();
    let mut skipped = 0;
    for (r, gv, k) in rows {
        rho.add(r);
        g.add(gv);
        skipped += k;
    }
    let ordered = s * (s - 1);
    let comparable = ordered - 2 * skipped;
    Ok(CharacteristicDistances {
        theta: 2.0 * rho.value() / ordered as f64,
        tau: if comparable > 0 {
            2.0 * g.value() / comparable as f64
        } else {
            0.0
        },
        incomparable_pairs: 2 * skipped,
    })
}

/// Mean pairwise distances over all ordered pairs `j != k` of the database.
pub fn characteristic_distances(db: &HistoricalDb) -> Result<CharacteristicDistances> {
    characteristic_from_parts(db.scaled(), db.encoded(), db.encoder())
}

/// One database record as seen from a query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position in the database.
    pub index: usize,
    pub rho: f64,
    /// Feature distance; an incomparable pair counts as 1.
    pub gower: f64,
}

/// All database records ordered by `(rho, gower, index)` with running means,
/// so `R(m)` and `F(n)` for any `m`, `n` are O(1).
#[derive(Clone, Debug)]
pub struct NeighborProfile {
    pub scaled: ScaledRx,
    pub same_rx_count: usize,
    pub incomparable: usize,
    neighbors: Vec<Neighbor>,
    rho_mean: Vec<f64>,
    gower_mean: Vec<f64>,
}

impl NeighborProfile {
    pub fn build(query: &TreatmentRecord, db: &HistoricalDb) -> Self {
        let scaled = scale_rx(&query.prescription, db.rx_scaler());
        let code = db.encoder().encode(query, db.schema());
        let mut incomparable = 0;
        let mut neighbors: Vec<Neighbor> = db
            .scaled()
            .iter()
            .zip(db.encoded())
            .enumerate()
            .map(|(index, (s, e))| {
                let gower = db.encoder().gower(&code, e).unwrap_or_else(|| {
                    incomparable += 1;
                    1.0
                });
                Neighbor {
                    index,
                    rho: rx_distance(&scaled, s),
                    gower,
                }
            })
            .collect();
        neighbors.sort_by(|a, b| {
            a.rho
                .total_cmp(&b.rho)
                .then(a.gower.total_cmp(&b.gower))
                .then(a.index.cmp(&b.index))
        });
        // Running means rather than prefix sums: for an ascending run of
        // values the update never decreases, so R(m) is monotone in m
        // exactly, not just up to rounding.
        let mut rho_mean = Vec::with_capacity(neighbors.len() + 1);
        let mut gower_mean = Vec::with_capacity(neighbors.len() + 1);
        let (mut r, mut g) = (0.0, 0.0);
        rho_mean.push(0.0);
        gower_mean.push(0.0);
        for (k, n) in neighbors.iter().enumerate() {
            let count = (k + 1) as f64;
            r += (n.rho - r) / count;
            g += (n.gower - g) / count;
            rho_mean.push(r);
            gower_mean.push(g);
        }
        Self {
            scaled,
            same_rx_count: db.rx_count(&query.rx_key()),
            incomparable,
            neighbors,
            rho_mean,
            gower_mean,
        }
    }

    pub fn neighbors(&self) -> &[Neighbor] {
        &self.neighbors
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.neighbors.len() {
            return Err(if k == 0 {
                Error::InvalidParameter("group size must be at least 1".into())
            } else {
                Error::InsufficientNeighbors {
                    requested: k,
                    available: self.neighbors.len(),
                }
            });
        }
        Ok(())
    }

    /// `R(m)`: mean prescription distance of the `m` closest records.
    pub fn rx_group_distance(&self, m: usize) -> Result<f64> {
        self.check(m)?;
        Ok(self.rho_mean[m])
    }

    /// `F(n)`: mean feature distance of the first `n` records.
    pub fn feature_group_distance(&self, n: usize) -> Result<f64> {
        self.check(n)?;
        Ok(self.gower_mean[n])
    }

    pub fn members(&self, db: &HistoricalDb, k: usize) -> Vec<GroupMember> {
        self.neighbors
            .iter()
            .take(k)
            .map(|n| GroupMember {
                record_id: db.records()[n.index].record_id.clone(),
                rho: n.rho,
                gower: n.gower,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub record_id: String,
    pub rho: f64,
    pub gower: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDistanceResult {
    pub value: f64,
    pub members: Vec<GroupMember>,
    pub same_rx_count: usize,
    /// Fewer same-prescription records than the group size.
    pub warning: bool,
}

pub fn closest_m_rx_distance(i: &TreatmentRecord, db: &HistoricalDb, m: usize) -> Result<GroupDistanceResult> {
    let profile = NeighborProfile::build(i, db);
    Ok(GroupDistanceResult {
        value: profile.rx_group_distance(m)?,
        members: profile.members(db, m),
        same_rx_count: profile.same_rx_count,
        warning: profile.same_rx_count < m,
    })
}

pub fn closest_n_feature_distance(i: &TreatmentRecord, db: &HistoricalDb, n: usize) -> Result<GroupDistanceResult> {
    let profile = NeighborProfile::build(i, db);
    Ok(GroupDistanceResult {
        value: profile.feature_group_distance(n)?,
        members: profile.members(db, n),
        same_rx_count: profile.same_rx_count,
        warning: profile.same_rx_count < n,
    })
}

/// Normalized histogram over `[0, upper]` with equal-width bins; the last
/// bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub upper: f64,
    pub bin_width: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    fn from_values(values: &[f64], upper: f64, bin_width: f64) -> Self {
        let bins = ((upper / bin_width) - 1e-9).ceil().max(1.0) as usize;
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = ((v / bin_width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = values.len().max(1) as f64;
        Self {
            upper,
            bin_width,
            mass: counts.into_iter().map(|c| c as f64 / total).collect(),
        }
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let lo = i as f64 * self.bin_width;
        let hi = if i + 1 == self.mass.len() {
            self.upper
        } else {
            (i + 1) as f64 * self.bin_width
        };
        (lo, hi)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "mass"])?;
        for (i, m) in self.mass.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            w.write_record([lo.to_string(), hi.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseHistograms {
    pub rx: Histogram,
    pub feature: Histogram,
}

/// Histograms of the pairwise prescription distances (over `[0, sqrt 2]`)
/// and feature distances (over `[0, 1]`) of the database.
pub fn pairwise_histograms(db: &HistoricalDb, bin_width: f64) -> Result<PairwiseHistograms> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let s = db.len();
    let mut rho = Vec::with_capacity(s * s.saturating_sub(1) / 2);
    let mut g = Vec::with_capacity(rho.capacity());
    for j in 0..s {
        for k in j + 1..s {
            rho.push(rx_distance(&db.scaled()[j], &db.scaled()[k]));
            if let Some(v) = db.encoder().gower(&db.encoded()[j], &db.encoded()[k]) {
                g.push(v);
            }
        }
    }
    Ok(PairwiseHistograms {
        rx: Histogram::from_values(&rho, std::f64::consts::SQRT_2, bin_width),
        feature: Histogram::from_values(&g, 1.0, bin_width),
    })
}
