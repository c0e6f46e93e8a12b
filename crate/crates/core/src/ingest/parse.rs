use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Prescription, Technique, TreatmentRecord, CSV_COLUMNS};

/// Delimiter and quoting of a record export.
#[derive(Clone, Copy, Debug)]
pub struct CsvFormat {
    pub delimiter: u8,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

/// A row whose numeric columns parsed; categorical labels are still raw text.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub record_id: String,
    pub prescription: Prescription,
    pub technique: String,
    pub energy: String,
    pub intent: String,
    pub icd10: String,
    pub morphology: String,
    pub age_at_tx: i32,
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub row: usize,
    pub reason: String,
}

/// Reads a canonical record CSV. Every data row yields either a record or a
/// diagnostic; row order is preserved.
pub fn parse_dataset<R: Read>(
    source: R,
    format: CsvFormat,
) -> Result<(Vec<RawRecord>, Vec<ParseDiagnostic>)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .flexible(true)
        .from_reader(source);
    let header = reader.headers().map_err(header_error)?.clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, h) in header.iter().enumerate() {
        if index.insert(h.trim(), i).is_some() {
            return Err(Error::Schema(format!("duplicate column {h:?}")));
        }
    }
    let missing: Vec<&str> = CSV_COLUMNS
        .iter()
        .copied()
        .filter(|c| !index.contains_key(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "header lacks required columns: {}",
            missing.join(", ")
        )));
    }
    let extras: Vec<(String, usize)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| !CSV_COLUMNS.contains(&h.trim()))
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();

    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                if let csv::ErrorKind::Io(_) = e.kind() {
                    return Err(e.into());
                }
                diagnostics.push(ParseDiagnostic {
                    row: row_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if row.len() != header.len() {
            diagnostics.push(ParseDiagnostic {
                row: row_no,
                reason: format!("expected {} fields, found {}", header.len(), row.len()),
            });
            continue;
        }
        let cell = |name: &str| row.get(index[name]).unwrap_or("").trim();
        match parse_row(row_no, &cell) {
            Ok(mut rec) => {
                for (name, i) in &extras {
                    let v = row.get(*i).unwrap_or("").trim();
                    if !v.is_empty() {
                        rec.extra.insert(name.clone(), v.to_string());
                    }
                }
                records.push(rec)
            }
            Err(reason) => diagnostics.push(ParseDiagnostic {
                row: row_no,
                reason,
            }),
        }
    }
    Ok((records, diagnostics))
}

fn header_error(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Csv(e),
        _ => Error::Schema(format!("malformed header: {e}")),
    }
}

fn parse_row<'a>(row: usize, cell: &dyn Fn(&str) -> &'a str) -> std::result::Result<RawRecord, String> {
    let uint = |name: &str| -> std::result::Result<u32, String> {
        let v = cell(name);
        v.parse::<u32>()
            .map_err(|_| format!("{name}: {v:?} is not a non-negative integer"))
    };
    let record_id = cell("record_id");
    if record_id.is_empty() {
        return Err("record_id is empty".into());
    }
    let age_text = cell("age_at_tx");
    let age_at_tx = age_text
        .parse::<i32>()
        .map_err(|_| format!("age_at_tx: {age_text:?} is not an integer"))?;
    Ok(RawRecord {
        row,
        record_id: record_id.to_string(),
        prescription: Prescription {
            fractions: uint("fractions")?,
            dose_per_fraction: uint("dose_per_fraction")?,
            total_dose: uint("total_dose")?,
            accumulated_dose: uint("accumulated_dose")?,
        },
        technique: cell("technique").to_string(),
        energy: cell("energy").to_string(),
        intent: cell("intent").to_string(),
        icd10: cell("icd10").to_string(),
        morphology: cell("morphology").to_string(),
        age_at_tx,
        extra: BTreeMap::new(),
    })
}

/// Raw label to canonical label, per field.
pub type LabelMappings = BTreeMap<String, BTreeMap<String, String>>;

/// Labels that had no mapping entry and passed through unchanged.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub unmapped: BTreeMap<String, BTreeMap<String, usize>>,
}

fn normalize_field(
    field: &str,
    raw: &str,
    mappings: &LabelMappings,
    report: &mut NormalizationReport,
) -> Option<String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    match mappings.get(field).and_then(|m| m.get(raw)) {
        Some(canonical) if canonical.trim().is_empty() => None,
        Some(canonical) => Some(canonical.clone()),
        None => {
            *report
                .unmapped
                .entry(field.to_string())
                .or_default()
                .entry(raw.to_string())
                .or_default() += 1;
            Some(raw.to_string())
        }
    }
}

/// Maps every categorical field through `mappings`; empty cells become missing.
pub fn normalize_labels(
    raw: &RawRecord,
    mappings: &LabelMappings,
    report: &mut NormalizationReport,
) -> TreatmentRecord {
    let technique = normalize_field("technique", &raw.technique, mappings, report)
        .map(|t| Technique::from_label(&t))
        .unwrap_or_else(|| Technique::Other(String::new()));
    let extra = raw
        .extra
        .iter()
        .filter_map(|(k, v)| normalize_field(k, v, mappings, report).map(|v| (k.clone(), v)))
        .collect();
    TreatmentRecord {
        record_id: raw.record_id.clone(),
        prescription: raw.prescription,
        technique,
        energy: normalize_field("energy", &raw.energy, mappings, report),
        intent: normalize_field("intent", &raw.intent, mappings, report),
        icd10: normalize_field("icd10", &raw.icd10, mappings, report),
        morphology: normalize_field("morphology", &raw.morphology, mappings, report),
        age_at_tx: raw.age_at_tx,
        extra,
    }
}

/// Parses canonical CSV and normalizes with `mappings` in one step.
pub fn read_records<R: Read>(
    source: R,
    mappings: &LabelMappings,
) -> Result<(Vec<TreatmentRecord>, Vec<ParseDiagnostic>, NormalizationReport)> {
    let (raw, diagnostics) = parse_dataset(source, CsvFormat::default())?;
    let mut report = NormalizationReport::default();
    let records = raw
        .iter()
        .map(|r| normalize_labels(r, mappings, &mut report))
        .collect();
    Ok((records, diagnostics, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "record_id,fractions,dose_per_fraction,total_dose,accumulated_dose,technique,energy,intent,icd10,morphology,age_at_tx\n";

    #[test]
    fn well_formed_rows_parse() {
        let data = format!(
            "{HEADER}a,4,1200,4800,4800,SBRT,x06FFF,curative,C34.10,,61\n\
             b,5,400,2000,2000,3D,x15,,C34.90,80463,76\n\
             c,10,300,3000,3000,IMRT,x06,palliative,C78.1,,74\n"
        );
        let (recs, diags) = parse_dataset(data.as_bytes(), CsvFormat::default()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(diags.is_empty());
        assert_eq!(recs[1].record_id, "b");
        assert_eq!(recs[2].row, 3);
    }

    #[test]
    fn non_numeric_fractions_is_diagnosed() {
        let data = format!("{HEADER}a,four,1200,4800,4800,SBRT,x06,curative,C34.10,,61\n");
        let (recs, diags) = parse_dataset(data.as_bytes(), CsvFormat::default()).unwrap();
        assert!(recs.is_empty());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].row, 1);
        assert!(diags[0].reason.contains("fractions"));
    }

    #[test]
    fn empty_body_and_bad_header() {
        let (recs, diags) = parse_dataset(HEADER.as_bytes(), CsvFormat::default()).unwrap();
        assert!(recs.is_empty() && diags.is_empty());
        let err = parse_dataset("record_id,fractions\n".as_bytes(), CsvFormat::default());
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn short_row_is_diagnosed() {
        let data = format!("{HEADER}a,4,1200\n");
        let (recs, diags) = parse_dataset(data.as_bytes(), CsvFormat::default()).unwrap();
        assert!(recs.is_empty());
        assert_eq!(diags.len(), 1);
    }

    fn raw() -> RawRecord {
        RawRecord {
            row: 1,
            record_id: "a".into(),
            prescription: Prescription::new(4, 1200),
            technique: "SBRT".into(),
            energy: "6X".into(),
            intent: "".into(),
            icd10: "C34.10".into(),
            morphology: "".into(),
            age_at_tx: 61,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn labels_are_mapped_or_passed_through() {
        let mut mappings = LabelMappings::new();
        mappings
            .entry("energy".into())
            .or_default()
            .insert("6X".into(), "x06".into());
        let mut report = NormalizationReport::default();
        let rec = normalize_labels(&raw(), &mappings, &mut report);
        assert_eq!(rec.energy.as_deref(), Some("x06"));
        assert_eq!(rec.intent, None);
        assert_eq!(rec.technique, Technique::Sbrt);

        let mut r2 = raw();
        r2.energy = "x06".into();
        let mut report = NormalizationReport::default();
        let rec = normalize_labels(&r2, &LabelMappings::new(), &mut report);
        assert_eq!(rec.energy.as_deref(), Some("x06"));
        assert_eq!(report.unmapped["energy"]["x06"], 1);
    }
}
