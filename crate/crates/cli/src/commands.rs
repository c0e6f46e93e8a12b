use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rxpeer::forge::{generate_sa_set, write_sa_set};
use rxpeer::ingest::NormalizationReport;
use rxpeer::range::derive_boundaries;
use rxpeer::report::{consensus_analysis, emit_report, read_predictions, score_by_source, ReportBundle};
use rxpeer::trainer::train;
use rxpeer::{
    detect, filter_cohort, pairwise_histograms, read_records, Boundaries, BoundaryMethod, CohortConfig,
    ConsensusMode, FeatureSchema, ForgeConfig, HistoricalDb, ModelParams, RangeGate, SaCounts, SeedStreams,
    Status, Technique, TrainConfig, TreatmentRecord, VerdictRecord,
};
use serde::Serialize;

use crate::args::{CheckArgs, Cli, Command, EvaluateArgs, ForgeArgs, GateArgs, HistArgs, IngestArgs,
    SimulateArgs, TrainArgs};
use crate::{CliError, EXIT_FAILURE, EXIT_FLAGGED, EXIT_OK};

type Outcome = Result<i32, CliError>;

pub(crate) fn dispatch(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Outcome {
    let mut log = Log {
        verbose: cli.verbose,
        out: stderr,
    };
    match &cli.command {
        Command::Ingest(a) => ingest(a, &mut log),
        Command::Train(a) => train_cmd(a, &mut log),
        Command::Check(a) => check(a, stdout, &mut log),
        Command::Simulate(a) => simulate(a, &mut log),
        Command::Evaluate(a) => evaluate(a, &mut log),
        Command::Hist(a) => hist(a, &mut log),
    }
}

struct Log<'a> {
    verbose: bool,
    out: &'a mut dyn Write,
}

impl Log<'_> {
    fn info(&mut self, msg: impl std::fmt::Display) {
        if self.verbose {
            let _ = writeln!(self.out, "{msg}");
        }
    }

    fn warn(&mut self, msg: impl std::fmt::Display) {
        let _ = writeln!(self.out, "warning: {msg}");
    }
}

fn not_found(path: &Path, e: io::Error) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::MissingFile(path.to_path_buf())
    } else {
        CliError::Failed(anyhow::Error::new(e).context(format!("reading {}", path.display())))
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| not_found(path, e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| not_found(path, e))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<CohortConfig, CliError> {
    match path {
        None => Ok(CohortConfig::default()),
        Some(p) => CohortConfig::from_json(&read_text(p)?)
            .with_context(|| format!("cohort configuration {}", p.display()))
            .map_err(CliError::from),
    }
}

fn technique_filter(label: Option<&String>) -> Result<Option<Technique>, CliError> {
    match label {
        None => Ok(None),
        Some(l) => {
            let t = Technique::from_label(l);
            if t.is_modeled() {
                Ok(Some(t))
            } else {
                Err(CliError::Usage(format!("--technique {l}: expected 3D, IMRT or SBRT")))
            }
        }
    }
}

/// Parsed and normalized records plus the number of rows that failed to parse.
struct Loaded {
    records: Vec<TreatmentRecord>,
    rejected: usize,
    normalization: NormalizationReport,
}

fn load_records(path: &Path, config: &CohortConfig, log: &mut Log) -> Result<Loaded, CliError> {
    let (records, diagnostics, normalization) = read_records(open(path)?, &config.label_mappings)
        .with_context(|| format!("reading records from {}", path.display()))?;
    for d in &diagnostics {
        log.warn(format_args!("{}: row {}: {}", path.display(), d.row, d.reason));
    }
    Ok(Loaded {
        records,
        rejected: diagnostics.len(),
        normalization,
    })
}

/// Modeled-technique groups in input order, optionally restricted to one.
fn group(records: &[TreatmentRecord], only: Option<&Technique>) -> BTreeMap<Technique, Vec<TreatmentRecord>> {
    let mut groups: BTreeMap<Technique, Vec<TreatmentRecord>> = BTreeMap::new();
    for r in records {
        if r.technique.is_modeled() && only.is_none_or(|t| *t == r.technique) {
            groups.entry(r.technique.clone()).or_default().push(r.clone());
        }
    }
    groups
}

fn build_dbs(
    groups: &BTreeMap<Technique, Vec<TreatmentRecord>>,
    schema: &FeatureSchema,
) -> Result<BTreeMap<Technique, HistoricalDb>, CliError> {
    groups
        .iter()
        .map(|(t, recs)| {
            let db = HistoricalDb::build(recs.clone(), schema).with_context(|| format!("building the {t} database"))?;
            Ok((t.clone(), db))
        })
        .collect()
}

enum GateSpec {
    Off,
    Fixed(Boundaries),
    Quantile(f64, f64),
}

impl GateSpec {
    fn parse(args: &GateArgs) -> Result<Self, CliError> {
        if !(args.alpha_beta.is_finite() && args.alpha_beta > 0.0) {
            return Err(CliError::Usage(format!("--alpha-beta must be positive, got {}", args.alpha_beta)));
        }
        let spec = args.boundaries.trim();
        if spec == "none" {
            return Ok(GateSpec::Off);
        }
        if spec == "preset" {
            return Ok(GateSpec::Fixed(Boundaries::thoracic_preset()));
        }
        if let Some(rest) = spec.strip_prefix("quantile:") {
            let parsed: Option<(f64, f64)> = rest
                .split_once(',')
                .and_then(|(lo, hi)| Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?)));
            return match parsed {
                Some((lo, hi)) if (0.0..=1.0).contains(&lo) && lo <= hi && hi <= 1.0 => Ok(GateSpec::Quantile(lo, hi)),
                _ => Err(CliError::Usage(format!(
                    "--boundaries {spec}: expected quantile:LO,HI with 0 <= LO <= HI <= 1"
                ))),
            };
        }
        let path = Path::new(spec);
        let b = Boundaries::from_json(&read_text(path)?).with_context(|| format!("boundaries {}", path.display()))?;
        Ok(GateSpec::Fixed(b))
    }

    fn resolve(&self, db: &HistoricalDb, alpha_beta: f64) -> Result<Option<RangeGate>, CliError> {
        let boundaries = match self {
            GateSpec::Off => return Ok(None),
            GateSpec::Fixed(b) => b.clone(),
            GateSpec::Quantile(lo, hi) => derive_boundaries(db, BoundaryMethod::Quantile(*lo, *hi), None, alpha_beta)?,
        };
        Ok(Some(RangeGate {
            boundaries,
            alpha_beta,
        }))
    }
}

fn counts(f: &ForgeArgs) -> SaCounts {
    SaCounts {
        rx_digit_swap: f.swaps,
        feature_mutation: f.mutations,
        technique_relabel: f.relabels,
    }
}

fn forge_config(f: &ForgeArgs) -> ForgeConfig {
    ForgeConfig {
        rarity_threshold: f.rarity_threshold,
        ..ForgeConfig::default()
    }
}

fn donors<'a>(dbs: &'a BTreeMap<Technique, HistoricalDb>, own: &Technique) -> Vec<&'a HistoricalDb> {
    dbs.iter().filter(|(t, _)| *t != own).map(|(_, db)| db).collect()
}

#[derive(Serialize)]
struct IngestSummary {
    input_rows: usize,
    rejected_rows: usize,
    kept: BTreeMap<String, usize>,
    excluded: BTreeMap<String, usize>,
    replan_share: f64,
    normalization: NormalizationReport,
    databases: BTreeMap<String, rxpeer::ingest::DbSummary>,
}

fn ingest(a: &IngestArgs, log: &mut Log) -> Outcome {
    let config = load_config(a.common.config.as_ref())?;
    let only = technique_filter(a.common.technique.as_ref())?;
    let loaded = load_records(&a.common.input, &config, log)?;
    let (mut split, exclusions) = filter_cohort(&loaded.records, &config);
    if let Some(t) = &only {
        split.retain(|k, _| k == t);
    }
    out_dir(&a.out)?;

    let schema = FeatureSchema::thoracic();
    let mut databases = BTreeMap::new();
    for (t, recs) in &split {
        let mut w = create(&a.out, &format!("{}.csv", t.label()))?;
        rxpeer::record::write_records(&mut w, recs)?;
        w.flush()?;
        match HistoricalDb::build(recs.clone(), &schema) {
            Ok(db) => {
                for msg in db.warnings() {
                    log.warn(format_args!("{t}: {msg}"));
                }
                databases.insert(t.label().to_string(), db.summary());
            }
            Err(e) => log.warn(format_args!("{t}: no database summary: {e}")),
        }
        log.info(format_args!("{t}: {} records kept", recs.len()));
    }
    let mut ew = create(&a.out, "exclusions.csv")?;
    exclusions.write_csv(&mut ew)?;
    ew.flush()?;

    let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
    for e in &exclusions.entries {
        *excluded.entry(e.rule.to_string()).or_default() += 1;
    }
    let summary = IngestSummary {
        input_rows: loaded.records.len() + loaded.rejected,
        rejected_rows: loaded.rejected,
        kept: split.iter().map(|(t, r)| (t.label().to_string(), r.len())).collect(),
        excluded,
        replan_share: exclusions.replan_share(loaded.records.len()),
        normalization: loaded.normalization,
        databases,
    };
    write_json(&a.out, "summary.json", &summary)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TrainingSummary {
    seed: u64,
    strategy: String,
    budget: usize,
    runs: usize,
    s_n: usize,
    pool_size: usize,
    reference_size: usize,
    sa_count: usize,
    theta: f64,
    tau: f64,
    t_rx: f64,
    t_f: f64,
    f1_mean: f64,
    f1_std: f64,
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut config = TrainConfig::new(a.sn, counts(&a.forge));
    config.space.budget = a.budget;
    config.space.runs_per_point = a.runs;
    config.space.strategy = a.strategy.into();
    if let Some(pool) = a.pool {
        config.pool_size = pool;
    }
    config.forge = forge_config(&a.forge);
    config
}

fn train_cmd(a: &TrainArgs, log: &mut Log) -> Outcome {
    let config = load_config(a.common.config.as_ref())?;
    let only = technique_filter(a.common.technique.as_ref())?;
    let gate = GateSpec::parse(&a.gate)?;
    if a.budget == 0 || a.runs == 0 || a.sn == 0 {
        return Err(CliError::Usage("--budget, --runs and --sn must be positive".into()));
    }
    let loaded = load_records(&a.common.input, &config, log)?;
    let schema = FeatureSchema::thoracic();
    let groups = group(&loaded.records, None);
    let dbs = build_dbs(&groups, &schema)?;
    if let Some(t) = &only {
        if !groups.contains_key(t) {
            return Err(anyhow!("no {t} records in {}", a.common.input.display()).into());
        }
    }
    if groups.is_empty() {
        return Err(anyhow!("no 3D, IMRT or SBRT records in {}", a.common.input.display()).into());
    }
    out_dir(&a.out)?;

    let train_config = train_config(a);
    let master = SeedStreams::new(a.forge.seed);
    let mut params = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for (t, recs) in groups.iter().filter(|(t, _)| only.as_ref().is_none_or(|o| o == *t)) {
        let label = t.label();
        let gate = gate.resolve(&dbs[t], a.gate.alpha_beta)?;
        let run = train(recs, &schema, &donors(&dbs, t), &train_config, gate.as_ref(), &master.child(label))
            .with_context(|| format!("training {t}"))?;
        let o = &run.outcome;
        let th = rxpeer::thresholds(&o.best_params, &run.reference);
        log.info(format_args!(
            "{t}: a={:.4} b={:.4} mu={:.4} nu={:.4} f1={:.3}+-{:.3}",
            o.best_params.a, o.best_params.b, o.best_params.mu, o.best_params.nu, o.best_f1_mean, o.best_f1_std
        ));
        let mut tw = create(&a.out, &format!("trace_{label}.csv"))?;
        o.write_trace_csv(&mut tw)?;
        tw.flush()?;
        write_sa_set(
            &run.sa_set,
            create(&a.out, &format!("sa_{label}.csv"))?,
            create(&a.out, &format!("sa_{label}.json"))?,
        )?;
        params.insert(label.to_string(), o.best_params);
        summaries.insert(
            label.to_string(),
            TrainingSummary {
                seed: a.forge.seed,
                strategy: format!("{:?}", train_config.space.strategy).to_lowercase(),
                budget: train_config.space.budget,
                runs: train_config.space.runs_per_point,
                s_n: train_config.s_n,
                pool_size: run.pool.len(),
                reference_size: run.reference.len(),
                sa_count: run.sa_set.len(),
                theta: run.reference.theta(),
                tau: run.reference.tau(),
                t_rx: th.t_rx,
                t_f: th.t_f,
                f1_mean: o.best_f1_mean,
                f1_std: o.best_f1_std,
            },
        );
    }
    write_json(&a.out, "params.json", &params)?;
    write_json(&a.out, "training.json", &summaries)?;
    Ok(EXIT_OK)
}

fn check(a: &CheckArgs, stdout: &mut dyn Write, log: &mut Log) -> Outcome {
    let config = load_config(a.common.config.as_ref())?;
    let only = technique_filter(a.common.technique.as_ref())?;
    let gate = GateSpec::parse(&a.gate)?;
    let params: BTreeMap<String, ModelParams> = serde_json::from_str(&read_text(&a.params)?)
        .with_context(|| format!("parameters {}", a.params.display()))?;
    for (t, p) in &params {
        p.check().with_context(|| format!("parameters for {t}"))?;
    }
    let history = load_records(&a.db, &config, log)?;
    let queries = load_records(&a.common.input, &config, log)?;
    let schema = FeatureSchema::thoracic();
    let dbs = build_dbs(&group(&history.records, only.as_ref()), &schema)?;
    let mut gates = BTreeMap::new();
    for (t, db) in &dbs {
        gates.insert(t.clone(), gate.resolve(db, a.gate.alpha_beta)?);
    }

    let mut file;
    let mut lock;
    let sink: &mut dyn Write = match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                out_dir(dir)?;
            }
            file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            &mut file
        }
        None => {
            lock = BufWriter::new(stdout);
            &mut lock
        }
    };

    let mut failures = queries.rejected;
    let mut flagged = 0usize;
    for q in &queries.records {
        if only.as_ref().is_some_and(|t| *t != q.technique) {
            continue;
        }
        let label = q.technique.label();
        let (Some(db), Some(p)) = (dbs.get(&q.technique), params.get(label)) else {
            log.warn(format_args!("{}: no model for technique {:?}", q.record_id, label));
            failures += 1;
            continue;
        };
        match detect(q, db, p, gates[&q.technique].as_ref()) {
            Ok(v) => {
                if v.status != Status::Pass {
                    flagged += 1;
                }
                serde_json::to_writer(&mut *sink, &VerdictRecord::from(&v))?;
                writeln!(sink)?;
            }
            Err(e) => {
                log.warn(format_args!("{}: {e}", q.record_id));
                failures += 1;
            }
        }
    }
    sink.flush()?;
    log.info(format_args!(
        "{} checked, {flagged} flagged, {failures} failed",
        queries.records.len() + queries.rejected
    ));
    Ok(if failures > 0 {
        EXIT_FAILURE
    } else if flagged > 0 {
        EXIT_FLAGGED
    } else {
        EXIT_OK
    })
}

fn simulate(a: &SimulateArgs, log: &mut Log) -> Outcome {
    let config = load_config(a.common.config.as_ref())?;
    let only = technique_filter(a.common.technique.as_ref())?;
    let loaded = load_records(&a.common.input, &config, log)?;
    let schema = FeatureSchema::thoracic();
    let groups = group(&loaded.records, None);
    let dbs = build_dbs(&groups, &schema)?;
    if dbs.is_empty() || only.as_ref().is_some_and(|t| !dbs.contains_key(t)) {
        return Err(anyhow!("no usable records in {}", a.common.input.display()).into());
    }
    out_dir(&a.out)?;
    let master = SeedStreams::new(a.forge.seed);
    for (t, db) in dbs.iter().filter(|(t, _)| only.as_ref().is_none_or(|o| o == *t)) {
        let label = t.label();
        let mut rng = master.child(label).rng("sampler", 0);
        let sas = generate_sa_set(db, &donors(&dbs, t), counts(&a.forge), &forge_config(&a.forge), &mut rng)
            .with_context(|| format!("forging {t} anomalies"))?;
        write_sa_set(
            &sas,
            create(&a.out, &format!("sa_{label}.csv"))?,
            create(&a.out, &format!("sa_{label}.json"))?,
        )?;
        log.info(format_args!("{t}: {} simulated anomalies", sas.len()));
    }
    Ok(EXIT_OK)
}

fn evaluate(a: &EvaluateArgs, log: &mut Log) -> Outcome {
    let predictions = read_predictions(open(&a.input)?).with_context(|| format!("reading {}", a.input.display()))?;
    let mut bundle = ReportBundle {
        metrics: score_by_source(&predictions)?,
        ..ReportBundle::default()
    };
    let raters: Vec<String> = if a.raters.is_empty() {
        let mut seen = BTreeSet::new();
        predictions
            .iter()
            .map(|p| p.source.clone())
            .filter(|s| s != "model" && seen.insert(s.clone()))
            .collect()
    } else {
        a.raters.clone()
    };
    if raters.len() >= 2 {
        let sets: Vec<_> = raters
            .iter()
            .map(|r| {
                let set: Vec<_> = predictions.iter().filter(|p| &p.source == r).cloned().collect();
                if set.is_empty() {
                    Err(CliError::Usage(format!("--raters: no predictions from {r}")))
                } else {
                    Ok(set)
                }
            })
            .collect::<Result<_, _>>()?;
        for mode in [ConsensusMode::BestCase, ConsensusMode::WorstCase] {
            let result = consensus_analysis(&sets, mode)?;
            bundle.metrics.extend(score_by_source(&result.predictions)?);
            if mode == ConsensusMode::BestCase {
                bundle.venn.insert(raters.join("+"), result.error_regions);
            }
        }
    } else {
        log.info("fewer than two raters; no consensus analysis");
    }
    emit_report(&bundle, &a.out)?;
    Ok(EXIT_OK)
}

fn hist(a: &HistArgs, log: &mut Log) -> Outcome {
    if !(a.bin_width.is_finite() && a.bin_width > 0.0) {
        return Err(CliError::Usage(format!("--bin-width must be positive, got {}", a.bin_width)));
    }
    let config = load_config(a.common.config.as_ref())?;
    let only = technique_filter(a.common.technique.as_ref())?;
    let loaded = load_records(&a.common.input, &config, log)?;
    let dbs = build_dbs(&group(&loaded.records, only.as_ref()), &FeatureSchema::thoracic())?;
    if dbs.is_empty() {
        return Err(anyhow!("no usable records in {}", a.common.input.display()).into());
    }
    out_dir(&a.out)?;
    for (t, db) in &dbs {
        let h = pairwise_histograms(db, a.bin_width)?;
        let label = t.label();
        h.rx.write_csv(create(&a.out, &format!("hist_rx_{label}.csv"))?)?;
        h.feature.write_csv(create(&a.out, &format!("hist_feature_{label}.csv"))?)?;
        log.info(format_args!("{t}: theta={:.4} tau={:.4}", db.theta(), db.tau()));
    }
    Ok(EXIT_OK)
}
