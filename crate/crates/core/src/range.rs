//! First-layer range checks on fractions, dose per fraction and BED.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::HistoricalDb;
use crate::record::TreatmentRecord;

/// Default alpha/beta in cGy.
pub const DEFAULT_ALPHA_BETA: f64 = 1000.0;

/// Linear-quadratic BED in cGy: `n d (1 + d / (alpha/beta))`.
pub fn compute_bed(fractions: u32, dose_per_fraction: u32, alpha_beta: f64) -> Result<f64> {
    if !(alpha_beta.is_finite() && alpha_beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha/beta must be positive, got {alpha_beta}"
        )));
    }
    let n = f64::from(fractions);
    let d = f64::from(dose_per_fraction);
    Ok(n * d * (1.0 + d / alpha_beta))
}

/// Inclusive limits for one technique.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueBounds {
    pub min_bed: f64,
    pub max_bed: f64,
    pub min_fractions: f64,
    pub max_fractions: f64,
    pub min_dose_per_fraction: f64,
    pub max_dose_per_fraction: f64,
}

impl TechniqueBounds {
    fn check(&self) -> Result<()> {
        for (name, lo, hi) in [
            ("bed", self.min_bed, self.max_bed),
            ("fractions", self.min_fractions, self.max_fractions),
            ("dose_per_fraction", self.min_dose_per_fraction, self.max_dose_per_fraction),
        ] {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Schema(format!("{name}: min {lo} exceeds max {hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundaries {
    /// The BED column is only enforced when the operator has confirmed that
    /// its units match [`compute_bed`].
    #[serde(default)]
    pub check_bed: bool,
    pub techniques: BTreeMap<String, TechniqueBounds>,
}

impl Boundaries {
    /// Thoracic limits shipped as a preset. The BED column's formula and units are
    /// unknown, so the BED check is off.
    pub fn thoracic_preset() -> Self {
        let mut techniques = BTreeMap::new();
        let row = |bed: (f64, f64), fx: (f64, f64), dose: (f64, f64)| TechniqueBounds {
            min_bed: bed.0,
            max_bed: bed.1,
            min_fractions: fx.0,
            max_fractions: fx.1,
            min_dose_per_fraction: dose.0,
            max_dose_per_fraction: dose.1,
        };
        techniques.insert("3D".into(), row((16400.0, 292800.0), (1.0, 35.0), (150.0, 850.0)));
        techniques.insert("IMRT".into(), row((24000.0, 497000.0), (7.0, 47.0), (150.0, 700.0)));
        techniques.insert("SBRT".into(), row((82000.0, 903000.0), (1.0, 5.0), (400.0, 3000.0)));
        Self {
            check_bed: false,
            techniques,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text)?;
        for t in b.techniques.values() {
            t.check()?;
        }
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundaryMethod {
    Explicit,
    /// Empirical quantiles `(low, high)` of the database.
    Quantile(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Fractions,
    DosePerFraction,
    Bed,
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quantity::Fractions => "fractions",
            Quantity::DosePerFraction => "dose per fraction",
            Quantity::Bed => "BED",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeViolation {
    pub quantity: Quantity,
    pub value: f64,
    pub bound: (f64, f64),
}

impl fmt::Display for RangeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} = {} outside [{}, {}]",
            self.quantity, self.value, self.bound.0, self.bound.1
        )
    }
}

/// Linear-interpolation empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `Explicit` returns `explicit` unchanged (it is required in that mode);
/// `Quantile` computes limits for the database's technique from its data,
/// with the BED check enabled since the limits share the BED formula.
pub fn derive_boundaries(
    db: &HistoricalDb,
    method: BoundaryMethod,
    explicit: Option<&Boundaries>,
    alpha_beta: f64,
) -> Result<Boundaries> {
    match method {
        BoundaryMethod::Explicit => explicit
            .cloned()
            .ok_or_else(|| Error::InvalidParameter("explicit boundaries not supplied".into())),
        BoundaryMethod::Quantile(low, high) => {
            if !(0.0 <= low && low <= high && high <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "quantiles must satisfy 0 <= low <= high <= 1, got ({low}, {high})"
                )));
            }
            let mut fx = Vec::with_capacity(db.len());
            let mut dose = Vec::with_capacity(db.len());
            let mut bed = Vec::with_capacity(db.len());
            for r in db.records() {
                let p = &r.prescription;
                fx.push(f64::from(p.fractions));
                dose.push(f64::from(p.dose_per_fraction));
                bed.push(compute_bed(p.fractions, p.dose_per_fraction, alpha_beta)?);
            }
            for v in [&mut fx, &mut dose, &mut bed] {
                v.sort_by(f64::total_cmp);
            }
            let bounds = TechniqueBounds {
                min_bed: quantile(&bed, low),
                max_bed: quantile(&bed, high),
                min_fractions: quantile(&fx, low),
                max_fractions: quantile(&fx, high),
                min_dose_per_fraction: quantile(&dose, low),
                max_dose_per_fraction: quantile(&dose, high),
            };
            let mut techniques = BTreeMap::new();
            techniques.insert(db.technique().label().to_string(), bounds);
            Ok(Boundaries {
                check_bed: true,
                techniques,
            })
        }
    }
}

/// Empty iff every checked quantity lies inside its inclusive limits.
pub fn check_range(record: &TreatmentRecord, boundaries: &Boundaries, alpha_beta: f64) -> Result<Vec<RangeViolation>> {
    let b = boundaries
        .techniques
        .get(record.technique.label())
        .ok_or_else(|| Error::UnsupportedTechnique {
            found: record.technique.clone(),
            expected: boundaries
                .techniques
                .keys()
                .cloned()
                .collect::<Vec<_>>()
                .join("|"),
        })?;
    let p = &record.prescription;
    let mut checks = vec![
        (Quantity::Fractions, f64::from(p.fractions), (b.min_fractions, b.max_fractions)),
        (
            Quantity::DosePerFraction,
            f64::from(p.dose_per_fraction),
            (b.min_dose_per_fraction, b.max_dose_per_fraction),
        ),
    ];
    if boundaries.check_bed {
        checks.push((
            Quantity::Bed,
            compute_bed(p.fractions, p.dose_per_fraction, alpha_beta)?,
            (b.min_bed, b.max_bed),
        ));
    }
    Ok(checks
        .into_iter()
        .filter(|(_, v, (lo, hi))| v < lo || v > hi)
        .map(|(quantity, value, bound)| RangeViolation {
            quantity,
            value,
            bound,
        })
        .collect())
}
