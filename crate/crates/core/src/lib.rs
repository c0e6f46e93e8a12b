//! Prescription anomaly detection for radiotherapy.
//!
//! A prescription (fractions x dose per fraction) is compared with the
//! historical records of its treatment technique. It is flagged when it falls
//! outside the technique's dose limits, when it sits far from every common
//! prescription (type 1), or when the prescription is common but the
//! patients who usually receive it look different (type 2).
//!
//! ```
//! use rxpeer::{detect, FeatureSchema, HistoricalDb, ModelParams, Status, SyntheticCohort, Technique};
//!
//! let cohort = SyntheticCohort::thoracic(120, 7);
//! let db = HistoricalDb::build(cohort.records(&Technique::ThreeD).to_vec(), &FeatureSchema::thoracic())?;
//! let params = ModelParams::new(0.5, 0.5, 0.05, 0.05)?;
//! let verdict = detect(&db.records()[0], &db, &params, None)?;
//! assert_eq!(verdict.status, Status::Pass);
//! # Ok::<(), rxpeer::Error>(())
//! ```

pub mod detector;
pub mod dissimilarity;
pub mod error;
pub mod forge;
pub mod ingest;
pub mod range;
pub mod record;
pub mod report;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use detector::{
    detect, explain, thresholds, Diagnostics, ModelParams, PreparedQuery, RangeGate, Status, Thresholds,
    Verdict, VerdictRecord, Warning,
};
pub use dissimilarity::{
    characteristic_distances, closest_m_rx_distance, closest_n_feature_distance, gower_distance,
    gower_values, pairwise_histograms, rx_distance, scale_rx, CharacteristicDistances, Histogram,
    NeighborProfile, RxScaler, ScaledRx,
};
pub use error::{Error, Result};
pub use forge::{
    generate_sa_set, mutate_features, relabel_technique, swap_leading_digits, verify_rarity, ForgeConfig,
    Mutation, MutationKind, RarityMode, SaCounts, SimulatedAnomaly,
};
pub use ingest::{
    filter_cohort, read_records, CohortConfig, ExclusionLog, HistoricalDb, LabelMappings,
};
pub use range::{check_range, compute_bed, derive_boundaries, Boundaries, BoundaryMethod, RangeViolation};
pub use record::{
    validate_record, FeatureDescriptor, FeatureKind, FeatureSchema, Prescription, RxKey, Technique,
    TreatmentRecord,
};
pub use report::{
    confusion, consensus_analysis, emit_report, macro_metrics, ConfusionMatrix, ConsensusMode,
    LabeledPrediction, MacroMetrics, ReportBundle,
};
pub use seed::SeedStreams;
pub use synthetic::SyntheticCohort;
pub use trainer::{
    f1_metric, f1_objective, search_parameters, split_holdout, train, SearchSpace, SearchStrategy,
    TrainConfig, TrainingData, TrainingOutcome,
};
