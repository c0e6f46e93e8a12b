//! Scoring of binary predictions, rater consensus, and plot-ready report
//! bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dissimilarity::Histogram;
use crate::error::{Error, Result};
use crate::trainer::TrainingOutcome;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub record_id: String,
    /// `true` for an anomaly.
    pub truth: bool,
    pub prediction: bool,
    pub source: String,
}

impl LabeledPrediction {
    pub fn is_correct(&self) -> bool {
        self.truth == self.prediction
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Anomaly is the positive class.
pub fn confusion(predictions: &[LabeledPrediction]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in predictions {
        match (p.truth, p.prediction) {
            (true, true) => cm.tp += 1,
            (false, true) => cm.fp += 1,
            (true, false) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    cm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and f1 averaged over both classes; a zero
/// denominator gives 0 for that class.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    if cm.tp + cm.fn_ == 0 || cm.tn + cm.fp == 0 {
        return Err(Error::UndefinedMetric(
            "macro metrics need both classes in the truth labels".into(),
        ));
    }
    // (tp, fp, fn) with anomaly positive, then with normal positive
    let classes = [(cm.tp, cm.fp, cm.fn_), (cm.tn, cm.fn_, cm.fp)];
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for (tp, fp, fn_) in classes {
        p_sum += ratio(tp, tp + fp);
        r_sum += ratio(tp, tp + fn_);
        f_sum += ratio(2 * tp, 2 * tp + fp + fn_);
    }
    Ok(MacroMetrics {
        precision: p_sum / 2.0,
        recall: r_sum / 2.0,
        f1: f_sum / 2.0,
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsensusMode {
    /// Correct if any rater was correct.
    BestCase,
    /// Wrong if any rater was wrong.
    WorstCase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub predictions: Vec<LabeledPrediction>,
    /// Records keyed by the set of raters that got them wrong, names joined
    /// with `+`; `"none"` holds the records every rater got right.
    pub error_regions: BTreeMap<String, usize>,
}

impl ConsensusResult {
    pub fn misses(&self) -> usize {
        self.predictions.iter().filter(|p| !p.is_correct()).count()
    }
}

/// Combines per-rater predictions over one record set. The output follows
/// the first rater's record order.
pub fn consensus_analysis(raters: &[Vec<LabeledPrediction>], mode: ConsensusMode) -> Result<ConsensusResult> {
    if raters.len() < 2 {
        return Err(Error::InvalidParameter("consensus needs at least two raters".into()));
    }
    let indexed: Vec<BTreeMap<&str, &LabeledPrediction>> = raters
        .iter()
        .map(|r| r.iter().map(|p| (p.record_id.as_str(), p)).collect())
        .collect();
    let ids: BTreeSet<&str> = indexed[0].keys().copied().collect();
    for (k, (rater, index)) in raters.iter().zip(&indexed).enumerate() {
        if index.len() != rater.len() {
            return Err(Error::MismatchedRecords(format!("rater {k} repeats a record id")));
        }
        if index.keys().copied().collect::<BTreeSet<_>>() != ids {
            return Err(Error::MismatchedRecords(format!("rater {k} covers a different record set")));
        }
    }
    let names: Vec<String> = raters
        .iter()
        .enumerate()
        .map(|(k, r)| r.first().map_or_else(|| format!("rater{k}"), |p| p.source.clone()))
        .collect();
    let label = match mode {
        ConsensusMode::BestCase => "consensus-best",
        ConsensusMode::WorstCase => "consensus-worst",
    };
    let mut predictions = Vec::with_capacity(ids.len());
    let mut error_regions = BTreeMap::new();
    for first in &raters[0] {
        let id = first.record_id.as_str();
        let votes: Vec<&LabeledPrediction> = indexed.iter().map(|ix| ix[id]).collect();
        let truth = first.truth;
        if votes.iter().any(|v| v.truth != truth) {
            return Err(Error::MismatchedRecords(format!("raters disagree on the truth of {id}")));
        }
        let wrong: Vec<&str> = votes
            .iter()
            .zip(&names)
            .filter(|(v, _)| !v.is_correct())
            .map(|(_, n)| n.as_str())
            .collect();
        let correct = match mode {
            ConsensusMode::BestCase => wrong.len() < votes.len(),
            ConsensusMode::WorstCase => wrong.is_empty(),
        };
        let region = if wrong.is_empty() { "none".to_string() } else { wrong.join("+") };
        *error_regions.entry(region).or_insert(0) += 1;
        predictions.push(LabeledPrediction {
            record_id: id.to_string(),
            truth,
            prediction: if correct { truth } else { !truth },
            source: label.to_string(),
        });
    }
    Ok(ConsensusResult {
        predictions,
        error_regions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub source: String,
    pub confusion: ConfusionMatrix,
    pub metrics: MacroMetrics,
}

/// One metric row per source, in first-seen order.
pub fn score_by_source(predictions: &[LabeledPrediction]) -> Result<Vec<MetricRow>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<LabeledPrediction>> = BTreeMap::new();
    for p in predictions {
        if !groups.contains_key(p.source.as_str()) {
            order.push(&p.source);
        }
        groups.entry(&p.source).or_default().push(p.clone());
    }
    order
        .into_iter()
        .map(|s| {
            let cm = confusion(&groups[s]);
            Ok(MetricRow {
                source: s.to_string(),
                confusion: cm,
                metrics: macro_metrics(&cm)?,
            })
        })
        .collect()
}

/// Everything a report bundle may contain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metrics: Vec<MetricRow>,
    /// Error regions per consensus analysis label.
    pub venn: BTreeMap<String, BTreeMap<String, usize>>,
    #[serde(skip)]
    pub traces: Vec<(String, TrainingOutcome)>,
    #[serde(skip)]
    pub histograms: Vec<(String, Histogram)>,
}

/// Writes `summary.json`, `confusion.csv`, `metrics.csv`, `venn.csv`, one
/// `trace_<name>.csv` per trace and one `hist_<name>.csv` per histogram.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut summary = serde_json::to_vec_pretty(bundle)?;
    summary.push(b'\n');
    fs::write(dir.join("summary.json"), summary)?;

    let mut cw = csv::Writer::from_path(dir.join("confusion.csv"))?;
    cw.write_record(["source", "tp", "fp", "fn", "tn"])?;
    for row in &bundle.metrics {
        let c = row.confusion;
        cw.write_record([row.source.clone(), c.tp.to_string(), c.fp.to_string(), c.fn_.to_string(), c.tn.to_string()])?;
    }
    cw.flush()?;

    let mut mw = csv::Writer::from_path(dir.join("metrics.csv"))?;
    mw.write_record(["source", "precision", "recall", "f1", "accuracy"])?;
    for row in &bundle.metrics {
        let m = row.metrics;
        mw.write_record([
            row.source.clone(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.accuracy.to_string(),
        ])?;
    }
    mw.flush()?;

    let mut vw = csv::Writer::from_path(dir.join("venn.csv"))?;
    vw.write_record(["analysis", "region", "count"])?;
    for (analysis, regions) in &bundle.venn {
        for (region, count) in regions {
            vw.write_record([analysis.as_str(), region.as_str(), &count.to_string()])?;
        }
    }
    vw.flush()?;

    for (name, outcome) in &bundle.traces {
        outcome.write_trace_csv(fs::File::create(dir.join(format!("trace_{name}.csv")))?)?;
    }
    for (name, hist) in &bundle.histograms {
        hist.write_csv(fs::File::create(dir.join(format!("hist_{name}.csv")))?)?;
    }
    Ok(())
}

fn parse_label(text: &str, row: usize) -> Result<bool> {
    match text.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Schema(format!("row {row}: expected 0 or 1, found {other:?}"))),
    }
}

/// Reads `record_id,truth,prediction,source` rows.
pub fn read_predictions<R: Read>(input: R) -> Result<Vec<LabeledPrediction>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))
    };
    let (id, truth, pred, source) = (col("record_id")?, col("truth")?, col("prediction")?, col("source")?);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let get = |k: usize| row.get(k).unwrap_or("").to_string();
        out.push(LabeledPrediction {
            record_id: get(id),
            truth: parse_label(&get(truth), i + 1)?,
            prediction: parse_label(&get(pred), i + 1)?,
            source: get(source).trim().to_string(),
        });
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(out: W, predictions: &[LabeledPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["record_id", "truth", "prediction", "source"])?;
    for p in predictions {
        w.write_record([
            p.record_id.as_str(),
            if p.truth { "1" } else { "0" },
            if p.prediction { "1" } else { "0" },
            p.source.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(source: &str, truth: &[bool], pred: &[bool]) -> Vec<LabeledPrediction> {
        truth
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(i, (&t, &p))| LabeledPrediction {
                record_id: format!("r{i:02}"),
                truth: t,
                prediction: p,
                source: source.into(),
            })
            .collect()
    }

    fn mock_truth() -> Vec<bool> {
        (0..47).map(|i| i < 17).collect()
    }

    #[test]
    fn confusion_examples() {
        let truth: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let cm = confusion(&preds("m", &truth, &truth));
        assert_eq!(cm, ConfusionMatrix { tp: 5, fp: 0, fn_: 0, tn: 5 });

        let t = mock_truth();
        let cm = confusion(&preds("m", &t, &[false; 47]));
        assert_eq!(cm, ConfusionMatrix { tp: 0, fp: 0, fn_: 17, tn: 30 });

        let cm = confusion(&preds("m", &[true], &[false]));
        assert_eq!(cm, ConfusionMatrix { tp: 0, fp: 0, fn_: 1, tn: 0 });
    }

    #[test]
    fn macro_examples() {
        let m = macro_metrics(&ConfusionMatrix { tp: 5, fp: 0, fn_: 0, tn: 5 }).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));

        let m = macro_metrics(&ConfusionMatrix { tp: 0, fp: 0, fn_: 17, tn: 30 }).unwrap();
        assert!((m.accuracy - 30.0 / 47.0).abs() < 1e-15);
        // normal class: precision 30/47, recall 1, f1 60/77; anomaly class all 0
        assert!((m.f1 - 30.0 / 77.0).abs() < 1e-15);
        assert!((m.precision - 15.0 / 47.0).abs() < 1e-15);
        assert_eq!(m.recall, 0.5);

        let m = macro_metrics(&ConfusionMatrix { tp: 7, fp: 3, fn_: 3, tn: 7 }).unwrap();
        assert!((m.precision - m.recall).abs() < 1e-15);

        assert!(matches!(
            macro_metrics(&ConfusionMatrix { tp: 3, fp: 0, fn_: 1, tn: 0 }),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn consensus_dominance_and_unanimity() {
        let t = mock_truth();
        let perfect = preds("A", &t, &t);
        let noisy: Vec<bool> = t.iter().enumerate().map(|(i, &x)| if i % 3 == 0 { !x } else { x }).collect();
        let b = preds("B", &t, &noisy);
        let best = consensus_analysis(&[perfect.clone(), b.clone()], ConsensusMode::BestCase).unwrap();
        assert_eq!(best.misses(), 0);
        let worst = consensus_analysis(&[perfect, b.clone()], ConsensusMode::WorstCase).unwrap();
        assert_eq!(worst.misses(), 16);
        assert_eq!(worst.error_regions["B"], 16);

        let b2 = preds("C", &t, &noisy);
        for mode in [ConsensusMode::BestCase, ConsensusMode::WorstCase] {
            let c = consensus_analysis(&[b.clone(), b2.clone()], mode).unwrap();
            let got: Vec<bool> = c.predictions.iter().map(|p| p.prediction).collect();
            assert_eq!(got, noisy);
        }
    }

    #[test]
    fn consensus_misses_five_and_twenty_four() {
        // 5 records missed by all three raters, 19 missed by only some.
        let t = mock_truth();
        let mut raters = vec![t.clone(), t.clone(), t.clone()];
        for i in 0..5 {
            for r in &mut raters {
                r[i] = !r[i];
            }
        }
        for i in 5..24 {
            raters[i % 3][i] = !raters[i % 3][i];
            if i % 2 == 0 {
                raters[(i + 1) % 3][i] = !raters[(i + 1) % 3][i];
            }
        }
        let lists: Vec<_> = ["MD1", "MD2", "MD3"]
            .iter()
            .zip(&raters)
            .map(|(n, p)| preds(n, &t, p))
            .collect();
        let best = consensus_analysis(&lists, ConsensusMode::BestCase).unwrap();
        let worst = consensus_analysis(&lists, ConsensusMode::WorstCase).unwrap();
        assert_eq!(best.misses(), 5);
        assert_eq!(worst.misses(), 24);
        assert_eq!(best.error_regions["MD1+MD2+MD3"], 5);
        assert_eq!(best.error_regions["none"], 23);
    }

    #[test]
    fn mismatched_records() {
        let t = mock_truth();
        let a = preds("A", &t, &t);
        let mut b = preds("B", &t, &t);
        b.pop();
        assert!(matches!(
            consensus_analysis(&[a, b], ConsensusMode::BestCase),
            Err(Error::MismatchedRecords(_))
        ));
    }

    #[test]
    fn bundle_is_byte_stable() {
        let t = mock_truth();
        let mut all = preds("model", &t, &t);
        all.extend(preds("MD1", &t, &[false; 47]));
        let bundle = ReportBundle {
            metrics: score_by_source(&all).unwrap(),
            ..Default::default()
        };
        assert_eq!(bundle.metrics.len(), 2);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&bundle, d1.path()).unwrap();
        emit_report(&bundle, d2.path()).unwrap();
        for f in ["summary.json", "confusion.csv", "metrics.csv", "venn.csv"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        let empty = tempfile::tempdir().unwrap();
        emit_report(&ReportBundle::default(), empty.path()).unwrap();
        let metrics = fs::read_to_string(empty.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.trim(), "source,precision,recall,f1,accuracy");
    }

    #[test]
    fn predictions_round_trip() {
        let t = mock_truth();
        let p = preds("A", &t, &t);
        let mut buf = Vec::new();
        write_predictions(&mut buf, &p).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), p);
    }
}
