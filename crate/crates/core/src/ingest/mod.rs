//! Raw export parsing, label normalization, cohort filtering and
//! historical database construction.

mod cohort;
mod db;
mod parse;

pub use cohort::{
    filter_cohort, CohortConfig, CohortSplit, Exclusion, ExclusionLog, ExclusionRule, ReplanPolicy,
    SubjectKey, THORACIC_ICD10,
};
pub use db::{build_historical_db, DbSummary, HistoricalDb};
pub use parse::{
    normalize_labels, parse_dataset, read_records, CsvFormat, LabelMappings, NormalizationReport,
    ParseDiagnostic, RawRecord,
};
