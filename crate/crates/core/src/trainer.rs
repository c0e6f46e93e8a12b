//! Parameter search for `(a, b, mu, nu)`: maximize the mean f1 over
//! repeated draws of holdout normals against a fixed set of simulated
//! anomalies.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{thresholds, ModelParams, PreparedQuery, RangeGate, Status};
use crate::error::{Error, Result};
use crate::forge::SimulatedAnomaly;
use crate::ingest::HistoricalDb;
use crate::record::TreatmentRecord;
use crate::seed::SeedStreams;

/// Half-open interval `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// Maps `u` in `(0, 1]` onto the interval.
    pub fn at(&self, u: f64) -> f64 {
        self.lo + (self.hi - self.lo) * u
    }

    pub fn unit(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchStrategy {
    Grid,
    Random,
    #[default]
    Adaptive,
}

impl std::str::FromStr for SearchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grid" => Ok(Self::Grid),
            "random" => Ok(Self::Random),
            "adaptive" | "tpe" => Ok(Self::Adaptive),
            _ => Err(Error::InvalidParameter(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub a_range: Interval,
    pub b_range: Interval,
    pub mu_range: Interval,
    pub nu_range: Interval,
    pub budget: usize,
    pub runs_per_point: usize,
    pub strategy: SearchStrategy,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            a_range: Interval::new(0.0, 2.0),
            b_range: Interval::new(0.0, 2.0),
            mu_range: Interval::new(0.0, 0.1),
            nu_range: Interval::new(0.0, 0.1),
            budget: 100,
            runs_per_point: 50,
            strategy: SearchStrategy::Adaptive,
        }
    }
}

impl SearchSpace {
    pub fn check(&self) -> Result<()> {
        for (name, r) in self.ranges_named() {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                return Err(Error::InvalidParameter(format!("{name} range ({}, {}] is empty", r.lo, r.hi)));
            }
        }
        if self.a_range.lo < 0.0 || self.b_range.lo < 0.0 {
            return Err(Error::InvalidParameter("a and b must stay positive".into()));
        }
        if self.mu_range.lo < 0.0 || self.mu_range.hi > 1.0 || self.nu_range.lo < 0.0 || self.nu_range.hi > 1.0 {
            return Err(Error::InvalidParameter("mu and nu ranges must lie within (0, 1]".into()));
        }
        if self.budget == 0 || self.runs_per_point == 0 {
            return Err(Error::InvalidParameter("budget and runs_per_point must be at least 1".into()));
        }
        Ok(())
    }

    fn ranges_named(&self) -> [(&'static str, Interval); 4] {
        [
            ("a", self.a_range),
            ("b", self.b_range),
            ("mu", self.mu_range),
            ("nu", self.nu_range),
        ]
    }

    fn ranges(&self) -> [Interval; 4] {
        [self.a_range, self.b_range, self.mu_range, self.nu_range]
    }

    fn point(&self, u: [f64; 4]) -> ModelParams {
        let r = self.ranges();
        ModelParams {
            a: r[0].at(u[0]),
            b: r[1].at(u[1]),
            mu: r[2].at(u[2]),
            nu: r[3].at(u[3]),
        }
    }
}

/// Moves `holdout_size` randomly chosen records into a pool; the rest, in
/// their original order, form the reference set.
pub fn split_holdout<R: Rng + ?Sized>(
    records: &[TreatmentRecord],
    holdout_size: usize,
    rng: &mut R,
) -> Result<(Vec<TreatmentRecord>, Vec<TreatmentRecord>)> {
    if holdout_size >= records.len() && holdout_size > 0 {
        return Err(Error::InsufficientData {
            needed: holdout_size + 1,
            available: records.len(),
        });
    }
    let mut picked = sample(rng, records.len(), holdout_size).into_vec();
    picked.sort_unstable();
    let mut in_pool = vec![false; records.len()];
    for &i in &picked {
        in_pool[i] = true;
    }
    let reference = records
        .iter()
        .zip(&in_pool)
        .filter(|(_, p)| !**p)
        .map(|(r, _)| r.clone())
        .collect();
    let pool = picked.iter().map(|&i| records[i].clone()).collect();
    Ok((reference, pool))
}

/// `2 tp / (2 tp + fp + fn)`.
pub fn f1_metric(tp: usize, fp: usize, fn_: usize) -> Result<f64> {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Err(Error::UndefinedMetric("f1 with no positives and no predictions".into()));
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything the objective needs, computed once: the prepared distance
/// profiles of every pool record and anomaly, and the per-run samples of
/// pool indices.
#[derive(Clone, Debug)]
pub struct TrainingData {
    size: usize,
    theta: f64,
    tau: f64,
    normals: Vec<PreparedQuery>,
    anomalies: Vec<PreparedQuery>,
    samples: Vec<Vec<usize>>,
}

impl TrainingData {
    /// Run `r` draws `s_n` pool records from stream `("holdout-run", r)`,
    /// so every parameter point sees the same normals.
    pub fn new(
        reference: &HistoricalDb,
        holdout_pool: &[TreatmentRecord],
        sa_set: &[SimulatedAnomaly],
        runs: usize,
        s_n: usize,
        seed: u64,
        gate: Option<&RangeGate>,
    ) -> Result<Self> {
        if sa_set.is_empty() {
            return Err(Error::InvalidTrainingSet("no simulated anomalies".into()));
        }
        if runs == 0 {
            return Err(Error::InvalidParameter("runs must be at least 1".into()));
        }
        if s_n > holdout_pool.len() {
            return Err(Error::InvalidTrainingSet(format!(
                "s_n = {s_n} exceeds holdout pool of {}",
                holdout_pool.len()
            )));
        }
        let prepare = |r: &TreatmentRecord| PreparedQuery::new(r, reference, gate);
        let normals = holdout_pool.par_iter().map(prepare).collect::<Result<Vec<_>>>()?;
        let anomalies = sa_set
            .par_iter()
            .map(|sa| prepare(&sa.mutated))
            .collect::<Result<Vec<_>>>()?;
        let streams = SeedStreams::new(seed);
        let samples = (0..runs)
            .map(|r| {
                let mut rng = streams.rng("holdout-run", r as u64);
                sample(&mut rng, holdout_pool.len(), s_n).into_vec()
            })
            .collect();
        Ok(Self {
            size: reference.len(),
            theta: reference.theta(),
            tau: reference.tau(),
            normals,
            anomalies,
            samples,
        })
    }

    pub fn runs(&self) -> usize {
        self.samples.len()
    }

    /// Mean and population standard deviation of f1 over the runs. Any
    /// non-pass status counts as a positive prediction.
    pub fn evaluate(&self, params: &ModelParams) -> Result<(f64, f64)> {
        params.check()?;
        let t = crate::detector::Thresholds {
            t_rx: params.a * self.theta,
            t_f: params.b * self.tau,
        };
        let flagged = |q: &PreparedQuery| -> Result<bool> { Ok(q.status(params, self.size, &t)? != Status::Pass) };
        let normal_flags = self.normals.iter().map(flagged).collect::<Result<Vec<_>>>()?;
        let tp = self
            .anomalies
            .iter()
            .map(flagged)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|f| *f)
            .count();
        let fn_ = self.anomalies.len() - tp;
        let scores = self
            .samples
            .iter()
            .map(|idx| {
                let fp = idx.iter().filter(|&&i| normal_flags[i]).count();
                f1_metric(tp, fp, fn_)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_std(&scores))
    }
}

/// Mean and standard deviation of f1 for one parameter point.
#[allow(clippy::too_many_arguments)]
pub fn f1_objective(
    params: &ModelParams,
    reference: &HistoricalDb,
    holdout_pool: &[TreatmentRecord],
    sa_set: &[SimulatedAnomaly],
    runs: usize,
    s_n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    TrainingData::new(reference, holdout_pool, sa_set, runs, s_n, seed, None)?.evaluate(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub eval_index: usize,
    pub params: ModelParams,
    pub f1_mean: f64,
    pub f1_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub best_params: ModelParams,
    pub best_f1_mean: f64,
    pub best_f1_std: f64,
    pub trace: Vec<TraceEntry>,
    pub seed: u64,
}

impl TrainingOutcome {
    fn from_trace(trace: Vec<TraceEntry>, seed: u64) -> Self {
        let best = trace
            .iter()
            .fold(&trace[0], |b, e| if e.f1_mean > b.f1_mean { e } else { b });
        Self {
            best_params: best.params,
            best_f1_mean: best.f1_mean,
            best_f1_std: best.f1_std,
            trace: trace.clone(),
            seed,
        }
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["eval_index", "a", "b", "mu", "nu", "f1_mean", "f1_std"])?;
        for e in &self.trace {
            w.write_record([
                e.eval_index.to_string(),
                e.params.a.to_string(),
                e.params.b.to_string(),
                e.params.mu.to_string(),
                e.params.nu.to_string(),
                e.f1_mean.to_string(),
                e.f1_std.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Levels per axis for a near-uniform lattice of at most `budget` points.
pub fn grid_levels(budget: usize) -> [usize; 4] {
    let mut levels = [1usize; 4];
    loop {
        let axis = (0..4).min_by_key(|&k| (levels[k], k)).unwrap();
        let product: usize = levels.iter().product::<usize>() / levels[axis] * (levels[axis] + 1);
        if product > budget {
            return levels;
        }
        levels[axis] += 1;
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Cell-centred lattice, topped up to `budget` with Halton points.
fn grid_points(budget: usize) -> Vec<[f64; 4]> {
    let levels = grid_levels(budget);
    let total: usize = levels.iter().product();
    let mut pts = Vec::with_capacity(budget);
    for mut idx in 0..total {
        let mut u = [0.0; 4];
        for k in 0..4 {
            let i = idx % levels[k];
            idx /= levels[k];
            u[k] = (i as f64 + 0.5) / levels[k] as f64;
        }
        pts.push(u);
    }
    let mut h = 1u64;
    while pts.len() < budget {
        pts.push([2, 3, 5, 7].map(|b| radical_inverse(h, b)));
        h += 1;
    }
    pts
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    [(); 4].map(|_| 1.0 - rng.random::<f64>())
}

const GAMMA: f64 = 0.25;
const CANDIDATES: usize = 24;
const MIN_BANDWIDTH: f64 = 0.03;
/// Every this-many proposals is a uniform draw, so a plateau found early
/// cannot absorb the whole budget.
const EXPLORE_EVERY: usize = 3;

/// One-dimensional Parzen mixture on the unit interval with a uniform prior
/// component.
struct Parzen {
    centres: Vec<f64>,
    bandwidth: f64,
}

impl Parzen {
    fn new(centres: Vec<f64>) -> Self {
        let n = centres.len() as f64;
        let mean = centres.iter().sum::<f64>() / n;
        let sd = (centres.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
        let bandwidth = (1.06 * sd.max(0.1) * n.powf(-0.2)).clamp(MIN_BANDWIDTH, 1.0);
        Self { centres, bandwidth }
    }

    fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
        let kernels: f64 = self
            .centres
            .iter()
            .map(|c| norm * (-0.5 * ((x - c) / h).powi(2)).exp())
            .sum();
        (kernels + 1.0) / (self.centres.len() as f64 + 1.0)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = rng.random_range(0..=self.centres.len());
        if k == self.centres.len() {
            return 1.0 - rng.random::<f64>();
        }
        let x = Normal::new(self.centres[k], self.bandwidth)
            .expect("positive bandwidth")
            .sample(rng);
        x.clamp(1e-9, 1.0)
    }
}

fn adaptive_next<R: Rng + ?Sized>(history: &[([f64; 4], f64)], rng: &mut R) -> [f64; 4] {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&i, &j| history[j].1.total_cmp(&history[i].1).then(i.cmp(&j)));
    let n_good = ((GAMMA * history.len() as f64).ceil() as usize).clamp(1, history.len() - 1);
    let (good, bad) = order.split_at(n_good);
    let models: Vec<(Parzen, Parzen)> = (0..4)
        .map(|k| {
            (
                Parzen::new(good.iter().map(|&i| history[i].0[k]).collect()),
                Parzen::new(bad.iter().map(|&i| history[i].0[k]).collect()),
            )
        })
        .collect();
    let mut best = None;
    let mut best_score = f64::NEG_INFINITY;
    for _ in 0..CANDIDATES {
        let cand = [0, 1, 2, 3].map(|k| models[k].0.draw(rng));
        let score: f64 = (0..4)
            .map(|k| models[k].0.density(cand[k]).ln() - models[k].1.density(cand[k]).ln())
            .sum();
        if score > best_score {
            best_score = score;
            best = Some(cand);
        }
    }
    best.expect("at least one candidate")
}

/// Evaluates exactly `space.budget` points and returns the best with the
/// full trace. Ties go to the earliest evaluation.
pub fn search_parameters(space: &SearchSpace, data: &TrainingData, seed: u64) -> Result<TrainingOutcome> {
    space.check()?;
    let mut rng = SeedStreams::new(seed).rng("search", 0);
    let eval = |u: &[f64; 4]| -> Result<(ModelParams, f64, f64)> {
        let p = space.point(*u);
        let (m, s) = data.evaluate(&p)?;
        Ok((p, m, s))
    };
    let results: Vec<([f64; 4], ModelParams, f64, f64)> = match space.strategy {
        SearchStrategy::Grid | SearchStrategy::Random => {
            let units = if space.strategy == SearchStrategy::Grid {
                grid_points(space.budget)
            } else {
                (0..space.budget).map(|_| random_unit(&mut rng)).collect()
            };
            units
                .par_iter()
                .map(|u| eval(u).map(|(p, m, s)| (*u, p, m, s)))
                .collect::<Result<Vec<_>>>()?
        }
        SearchStrategy::Adaptive => {
            let startup = space.budget.min((space.budget / 4).max(10));
            let initial: Vec<[f64; 4]> = (0..startup).map(|_| random_unit(&mut rng)).collect();
            let mut out = initial
                .par_iter()
                .map(|u| eval(u).map(|(p, m, s)| (*u, p, m, s)))
                .collect::<Result<Vec<_>>>()?;
            while out.len() < space.budget {
                let history: Vec<([f64; 4], f64)> = out.iter().map(|r| (r.0, r.2)).collect();
                let u = if out.len() % EXPLORE_EVERY == 0 {
                    random_unit(&mut rng)
                } else {
                    adaptive_next(&history, &mut rng)
                };
                let (p, m, s) = eval(&u)?;
                out.push((u, p, m, s));
            }
            out
        }
    };
    let trace = results
        .into_iter()
        .enumerate()
        .map(|(i, (_, params, f1_mean, f1_std))| TraceEntry {
            eval_index: i,
            params,
            f1_mean,
            f1_std,
        })
        .collect();
    Ok(TrainingOutcome::from_trace(trace, seed))
}

/// Settings of the end-to-end training pipeline for one technique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub space: SearchSpace,
    /// Normals drawn per run.
    pub s_n: usize,
    /// Records withheld from the reference set; runs draw from these.
    pub pool_size: usize,
    pub counts: crate::forge::SaCounts,
    pub forge: crate::forge::ForgeConfig,
}

impl TrainConfig {
    pub fn new(s_n: usize, counts: crate::forge::SaCounts) -> Self {
        Self {
            space: SearchSpace::default(),
            s_n,
            pool_size: 4 * s_n,
            counts,
            forge: crate::forge::ForgeConfig::default(),
        }
    }
}

/// Artefacts of [`train`].
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub reference: HistoricalDb,
    pub pool: Vec<TreatmentRecord>,
    pub sa_set: Vec<SimulatedAnomaly>,
    pub outcome: TrainingOutcome,
}

/// Split, forge, search. Streams: `holdout` for the split, `sampler` for
/// the forge, `search` and `holdout-run` beneath the search seed.
pub fn train(
    records: &[TreatmentRecord],
    schema: &crate::record::FeatureSchema,
    donors: &[&HistoricalDb],
    config: &TrainConfig,
    gate: Option<&RangeGate>,
    streams: &SeedStreams,
) -> Result<TrainingRun> {
    let (reference, pool) = split_holdout(records, config.pool_size.max(config.s_n), &mut streams.rng("holdout", 0))?;
    let reference = HistoricalDb::build(reference, schema)?;
    let sa_set = crate::forge::generate_sa_set(
        &reference,
        donors,
        config.counts,
        &config.forge,
        &mut streams.rng("sampler", 0),
    )?;
    let search_seed = streams.seed("search", 0);
    let data = TrainingData::new(
        &reference,
        &pool,
        &sa_set,
        config.space.runs_per_point,
        config.s_n,
        search_seed,
        gate,
    )?;
    let outcome = search_parameters(&config.space, &data, search_seed)?;
    Ok(TrainingRun {
        reference,
        pool,
        sa_set,
        outcome,
    })
}

/// Thresholds the reference database implies for the chosen parameters.
pub fn trained_thresholds(run: &TrainingRun) -> crate::detector::Thresholds {
    thresholds(&run.outcome.best_params, &run.reference)
}
