mod oracle;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rxpeer::dissimilarity::NeighborProfile;
use rxpeer::forge::{diff_fields, generate_sa_set, ForgeConfig, MutationKind, RarityMode, SaCounts};
use rxpeer::range::{check_range, compute_bed, derive_boundaries, BoundaryMethod, DEFAULT_ALPHA_BETA};
use rxpeer::record::{validate_record, write_records, Violation};
use rxpeer::report::{confusion, macro_metrics, LabeledPrediction};
use rxpeer::trainer::{search_parameters, split_holdout, SearchSpace, SearchStrategy, TrainingData};
use rxpeer::{
    detect, filter_cohort, read_records, swap_leading_digits, CohortConfig, FeatureSchema, HistoricalDb, ModelParams,
    Status, Technique,
};

use oracle::{random_db, random_record};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn db_from(seed: u64, size: usize, missing: f64) -> HistoricalDb {
    HistoricalDb::build(random_db(&mut rng(seed), size, missing), &FeatureSchema::thoracic()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replan_always_reported(seed: u64, extra in 1u32..5000) {
        let mut r = random_record(&mut rng(seed), "x", 0.2);
        r.prescription.accumulated_dose = r.prescription.total_dose + extra;
        let v = validate_record(&r);
        prop_assert!(v.has_replan());
        prop_assert_eq!(&v, &validate_record(&r));
        let flagged = v.violations.iter().any(|x| matches!(x, Violation::ReplanSuspect { .. }));
        prop_assert!(flagged);
    }

    #[test]
    fn csv_round_trip_validates_identically(seed: u64, size in 1usize..30) {
        let recs = random_db(&mut rng(seed), size, 0.2);
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let (back, diags, _) = read_records(buf.as_slice(), &Default::default()).unwrap();
        prop_assert!(diags.is_empty());
        prop_assert_eq!(&back, &recs);
        for (a, b) in recs.iter().zip(&back) {
            prop_assert_eq!(validate_record(a), validate_record(b));
        }
    }

    #[test]
    fn cohort_filter_accounts_for_every_record(seed: u64, size in 1usize..80) {
        let mut r = rng(seed);
        let mut recs = random_db(&mut r, size, 0.1);
        for (i, rec) in recs.iter_mut().enumerate() {
            match i % 7 {
                0 => rec.technique = Technique::Imrt,
                1 => rec.technique = Technique::Brachy,
                2 => rec.prescription.accumulated_dose += 200,
                3 => rec.energy = Some("x18".into()),
                _ => {}
            }
        }
        let config = CohortConfig::default();
        let (split, log) = filter_cohort(&recs, &config);
        let kept: Vec<&str> = split.values().flatten().map(|r| r.record_id.as_str()).collect();
        let dropped: Vec<&str> = log.entries.iter().map(|e| e.record_id.as_str()).collect();
        prop_assert_eq!(kept.len() + dropped.len(), recs.len());
        let all: BTreeSet<&str> = kept.iter().chain(&dropped).copied().collect();
        prop_assert_eq!(all, recs.iter().map(|r| r.record_id.as_str()).collect::<BTreeSet<_>>());

        recs.shuffle(&mut r);
        let (split2, _) = filter_cohort(&recs, &config);
        for (t, a) in &split {
            let ids = |v: &Vec<rxpeer::TreatmentRecord>| v.iter().map(|r| r.record_id.clone()).collect::<BTreeSet<_>>();
            prop_assert_eq!(ids(a), ids(&split2[t]));
        }
    }

    #[test]
    fn full_quantile_range_admits_every_record(seed: u64, size in 2usize..60) {
        let db = db_from(seed, size, 0.1);
        let b = derive_boundaries(&db, BoundaryMethod::Quantile(0.0, 1.0), None, DEFAULT_ALPHA_BETA).unwrap();
        for r in db.records() {
            prop_assert!(check_range(r, &b, DEFAULT_ALPHA_BETA).unwrap().is_empty());
        }
    }

    #[test]
    fn widening_never_adds_violations(seed: u64, size in 2usize..60, lo in 0.0f64..0.5, hi in 0.5f64..1.0, widen in 0.0f64..100.0) {
        let db = db_from(seed, size, 0.1);
        let narrow = derive_boundaries(&db, BoundaryMethod::Quantile(lo, hi), None, DEFAULT_ALPHA_BETA).unwrap();
        let mut wide = narrow.clone();
        for t in wide.techniques.values_mut() {
            t.min_fractions -= widen;
            t.max_fractions += widen;
            t.min_dose_per_fraction -= widen;
            t.max_dose_per_fraction += widen;
            t.min_bed -= widen;
            t.max_bed += widen;
        }
        let queries = random_db(&mut rng(seed ^ 1), 20, 0.1);
        for q in &queries {
            let n = check_range(q, &narrow, DEFAULT_ALPHA_BETA).unwrap();
            let w = check_range(q, &wide, DEFAULT_ALPHA_BETA).unwrap();
            prop_assert!(w.iter().all(|v| n.iter().any(|x| x.quantity == v.quantity)));
        }
    }

    #[test]
    fn bed_strictly_increasing(fx in 1u32..60, d in 1u32..4000, ab in 100.0f64..2000.0) {
        let base = compute_bed(fx, d, ab).unwrap();
        prop_assert!(compute_bed(fx + 1, d, ab).unwrap() > base);
        prop_assert!(compute_bed(fx, d + 1, ab).unwrap() > base);
    }

    #[test]
    fn rx_distance_triangle_and_gower_bounds(seed: u64) {
        let recs = random_db(&mut rng(seed), 30, 0.3);
        let db = HistoricalDb::build(recs.clone(), &FeatureSchema::thoracic()).unwrap();
        let s: Vec<_> = recs.iter().map(|r| rxpeer::scale_rx(&r.prescription, db.rx_scaler())).collect();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let d = |x: usize, y: usize| rxpeer::rx_distance(&s[x], &s[y]);
                    prop_assert!(d(i, k) <= d(i, j) + d(j, k) + 1e-12);
                }
                let g = rxpeer::gower_distance(&recs[i], &recs[j], db.schema()).unwrap();
                prop_assert!((0.0..=1.0).contains(&g));
                prop_assert_eq!(g, rxpeer::gower_distance(&recs[j], &recs[i], db.schema()).unwrap());
            }
            prop_assert_eq!(rxpeer::gower_distance(&recs[i], &recs[i], db.schema()).unwrap(), 0.0);
        }
    }

    #[test]
    fn raising_thresholds_never_creates_flags(seed: u64, a in 0.01f64..2.0, b in 0.01f64..2.0, factor in 1.0f64..4.0) {
        let db = db_from(seed, 40, 0.1);
        let queries = random_db(&mut rng(seed ^ 7), 15, 0.1);
        let p = ModelParams::new(a, b, 0.05, 0.05).unwrap();
        let pa = ModelParams { a: a * factor, ..p };
        let pb = ModelParams { b: b * factor, ..p };
        for q in &queries {
            let base = detect(q, &db, &p, None).unwrap().status;
            if base == Status::Pass {
                prop_assert_ne!(detect(q, &db, &pa, None).unwrap().status, Status::Type1Flag);
                prop_assert_ne!(detect(q, &db, &pb, None).unwrap().status, Status::Type2Flag);
            }
        }
    }

    #[test]
    fn verdicts_are_complete_and_deterministic(seed: u64, a in 0.01f64..2.0, b in 0.01f64..2.0) {
        let db = db_from(seed, 30, 0.1);
        let p = ModelParams::new(a, b, 0.1, 0.1).unwrap();
        let q = random_record(&mut rng(seed ^ 3), "q", 0.1);
        let v = detect(&q, &db, &p, None).unwrap();
        prop_assert_eq!(&v, &detect(&q, &db, &p, None).unwrap());
        prop_assert_eq!(v.diagnostics.f.is_some(), v.status != Status::Type1Flag);
        prop_assert_eq!(v.diagnostics.rx_neighbors.len(), v.diagnostics.m);
    }

    #[test]
    fn record_repeated_in_db_passes(seed: u64, copies in 3usize..20) {
        let mut recs = random_db(&mut rng(seed), 30, 0.0);
        let q = recs[0].clone();
        recs.extend((0..copies).map(|i| {
            let mut c = q.clone();
            c.record_id = format!("copy{i}");
            c
        }));
        let db = HistoricalDb::build(recs, &FeatureSchema::thoracic()).unwrap();
        let p = ModelParams::new(0.01, 0.01, 0.05, 0.05).unwrap();
        prop_assume!(p.m(db.len()).max(p.n(db.len())) <= copies);
        let v = detect(&q, &db, &p, None).unwrap();
        prop_assert_eq!(v.diagnostics.r, 0.0);
        prop_assert_eq!(v.diagnostics.f, Some(0.0));
        prop_assert_eq!(v.status, Status::Pass);
    }

    #[test]
    fn f_non_decreasing_within_same_rx(seed: u64) {
        let db = db_from(seed, 50, 0.2);
        let q = db.records()[0].clone();
        let p = NeighborProfile::build(&q, &db);
        for k in 1..p.same_rx_count {
            prop_assert!(p.feature_group_distance(k + 1).unwrap() >= p.feature_group_distance(k).unwrap());
        }
    }

    #[test]
    fn swap_is_an_involution(fx in 1u32..100, d in 1u32..5000) {
        let mut r = random_record(&mut rng(0), "x", 0.0);
        r.prescription = rxpeer::Prescription::new(fx, d);
        if let Ok(s) = swap_leading_digits(&r) {
            prop_assert_eq!(swap_leading_digits(&s).unwrap().prescription, r.prescription);
        }
    }

    #[test]
    fn confusion_matches_per_record_loop(truth in prop::collection::vec(any::<bool>(), 1..100), flips in prop::collection::vec(any::<bool>(), 100)) {
        let preds: Vec<LabeledPrediction> = truth.iter().zip(&flips).enumerate().map(|(i, (&t, &f))| LabeledPrediction {
            record_id: i.to_string(),
            truth: t,
            prediction: t ^ f,
            source: "m".into(),
        }).collect();
        let cm = confusion(&preds);
        let mut cells = [0usize; 4];
        for p in &preds {
            cells[usize::from(p.truth) * 2 + usize::from(p.prediction)] += 1;
        }
        prop_assert_eq!([cm.tn, cm.fp, cm.fn_, cm.tp], cells);
        if let Ok(m) = macro_metrics(&cm) {
            for v in [m.precision, m.recall, m.f1, m.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forged_anomalies_match_their_descriptors(seed: u64, joint: bool) {
        let cohort = rxpeer::SyntheticCohort::thoracic(120, seed);
        let db = HistoricalDb::build(cohort.records(&Technique::Imrt).to_vec(), &FeatureSchema::thoracic()).unwrap();
        let donor = HistoricalDb::build(cohort.records(&Technique::Sbrt).to_vec(), &FeatureSchema::thoracic()).unwrap();
        let config = ForgeConfig {
            mode: if joint { RarityMode::Joint } else { RarityMode::PerField },
            ..Default::default()
        };
        let counts = SaCounts { rx_digit_swap: 3, feature_mutation: 3, technique_relabel: 2 };
        let sas = generate_sa_set(&db, &[&donor], counts, &config, &mut rng(seed)).unwrap();
        prop_assert_eq!(sas.len(), 8);
        for sa in &sas {
            let pool = if sa.mutation.kind == MutationKind::TechniqueRelabel { &donor } else { &db };
            let base = pool.records().iter().find(|r| r.record_id == sa.base_record_id).unwrap();
            prop_assert_eq!(&diff_fields(base, &sa.mutated), &sa.mutation.changes);
            // recount every stored condition by scanning the database
            for e in &sa.rarity_evidence {
                let mut parts = e.condition.split(", ");
                let rx = parts.next().unwrap().trim_start_matches("rx=");
                let conds: Vec<(&str, &str)> = parts.map(|p| p.split_once('=').unwrap()).collect();
                let count = db.records().iter().filter(|r| {
                    r.rx_key().to_string() == rx
                        && conds.iter().all(|(f, v)| r.feature_text(f).as_deref().unwrap_or("-") == *v)
                }).count();
                prop_assert_eq!(count, e.count, "{}", e.condition);
            }
        }
    }

    #[test]
    fn search_is_reproducible_and_best_dominates(seed: u64, strategy in 0usize..3) {
        let cohort = rxpeer::SyntheticCohort::thoracic(150, seed);
        let (reference, pool) = split_holdout(cohort.records(&Technique::ThreeD), 30, &mut rng(seed)).unwrap();
        let db = HistoricalDb::build(reference, &FeatureSchema::thoracic()).unwrap();
        let counts = SaCounts { rx_digit_swap: 3, feature_mutation: 3, technique_relabel: 0 };
        let sas = generate_sa_set(&db, &[], counts, &Default::default(), &mut rng(seed)).unwrap();
        let data = TrainingData::new(&db, &pool, &sas, 5, 10, seed, None).unwrap();
        let space = SearchSpace {
            budget: 20,
            runs_per_point: 5,
            strategy: [SearchStrategy::Grid, SearchStrategy::Random, SearchStrategy::Adaptive][strategy],
            ..Default::default()
        };
        let a = search_parameters(&space, &data, seed).unwrap();
        let b = search_parameters(&space, &data, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.trace.iter().all(|e| e.f1_mean <= a.best_f1_mean));
        // one run with a fixed sample: the objective is a function of params
        let single = TrainingData::new(&db, &pool, &sas, 1, 10, seed, None).unwrap();
        let p = a.best_params;
        prop_assert_eq!(single.evaluate(&p).unwrap(), single.evaluate(&p).unwrap());
        prop_assert_eq!(single.evaluate(&p).unwrap().1, 0.0);
    }
}
