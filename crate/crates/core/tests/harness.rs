use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveTime};
use surconfort::bench::report::*;
use surconfort::bench::*;
use surconfort::data::*;
use surconfort::nn::{train_supervised, TrainConfig};
use surconfort::synthgen::SynthWorldConfig;

fn tiny_world() -> SynthWorldConfig {
    SynthWorldConfig {
        n_stations: 6,
        n_days: 7,
        report_rate: 0.3,
        ..Default::default()
    }
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(tiny_world()),
        methods: vec![Method::Random, Method::Mode, Method::Snn],
        ratios: vec![0.5, 1.0],
        folds: 3,
        seeds: vec![0, 1],
        train: TrainConfig {
            max_epochs: 4,
            hidden: [16, 16, 8],
            ..Default::default()
        },
        ..Default::default()
    }
}

fn ctx(dow: u8) -> DateContext {
    DateContext { day_of_week: dow, is_holiday: dow >= 5 }
}

fn sample(id: usize, station: usize, dow: u8, slot: usize, label: Option<u8>) -> Sample {
    Sample {
        cell_id: id,
        station,
        date: NaiveDate::from_ymd_opt(2024, 1, 1 + dow as u32).unwrap(),
        context: ctx(dow),
        slot,
        label,
    }
}

#[test]
fn random_baseline_hits_a_quarter() {
    let samples: Vec<Sample> = (0..4000).map(|i| sample(i, 0, 0, 0, Some((i % 4) as u8))).collect();
    for seed in 0..5 {
        let pred = RandomBaseline { seed }.predict(&samples);
        let acc = pred.iter().zip(&samples).filter(|(p, s)| Some(**p) == s.label).count() as f64 / 4000.0;
        assert!((acc - 0.25).abs() <= 0.03, "seed {seed}: {acc}");
    }
}

#[test]
fn mode_baseline_recovers_a_lookup_table() {
    let mut train = Vec::new();
    let mut id = 0;
    for dow in 0..7u8 {
        for slot in 0..20 {
            let class = ((dow as usize * 3 + slot) % 4) as u8;
            for rep in 0..3 {
                train.push(sample(id, rep, dow, slot, Some(class)));
                id += 1;
            }
        }
    }
    let mode = ModeBaseline::fit(&train, 0);
    let pred = mode.predict(&train);
    assert!(pred.iter().zip(&train).all(|(p, s)| Some(*p) == s.label));
    assert_eq!(mode.lookup(2, 5), Some(((2 * 3 + 5) % 4) as u8));
    assert_eq!(mode.lookup(2, 99), None);
}

#[test]
fn mode_ties_go_to_the_lower_class() {
    let train = vec![sample(0, 0, 1, 4, Some(3)), sample(1, 1, 1, 4, Some(2))];
    assert_eq!(ModeBaseline::fit(&train, 0).lookup(1, 4), Some(2));
}

#[test]
fn sweep_emits_one_record_per_job() {
    let cfg = tiny_config();
    let records = run_sweep(&cfg).unwrap();
    assert_eq!(records.len(), 3 * 2 * 3 * 2);
    for r in &records {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(r.fold < 3);
        let pooled: usize = r.per_station.values().map(|t| t.correct).sum();
        let total: usize = r.per_station.values().map(|t| t.total).sum();
        assert_eq!((pooled, total), (r.correct, r.total));
        assert_eq!(r.accuracy, r.correct as f64 / r.total as f64);
    }
}

#[test]
fn serial_runs_are_byte_identical_and_match_parallel() {
    let cfg = tiny_config();
    let a = results_csv(&run_sweep(&cfg).unwrap()).unwrap();
    let b = results_csv(&run_sweep(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let par = ExperimentConfig { jobs: 3, ..cfg };
    assert_eq!(results_csv(&run_sweep(&par).unwrap()).unwrap(), a);
}

#[test]
fn records_round_trip_through_csv() {
    let records = run_sweep(&tiny_config()).unwrap();
    let back = parse_records(&results_csv(&records).unwrap(), Some(&timings_csv(&records).unwrap())).unwrap();
    assert_eq!(back, records);
}

#[test]
fn report_files_and_formats() {
    let cfg = tiny_config();
    let records = run_sweep(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&records, dir.path(), &cfg, ReportFormat::Markdown).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for want in ["results.csv", "summary.csv", "per_station.csv", "table1.md", "run.json"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    assert_eq!(read_records(dir.path()).unwrap(), records);
    let table = std::fs::read_to_string(dir.path().join("table1.md")).unwrap();
    assert!(table.contains("| SNN | SL | - |"));
    let cell = regex_free_cell(&table);
    assert!(cell, "no `MM.MM ± SS.SS` cell in\n{table}");
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["records"], records.len());
}

/// Finds a cell shaped like `12.34 ± 5.67`.
fn regex_free_cell(table: &str) -> bool {
    table.split('|').map(str::trim).any(|c| {
        let Some((m, s)) = c.split_once(" ± ") else { return false };
        let two = |x: &str| x.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 2 && x.parse::<f64>().is_ok());
        two(m) && two(s)
    })
}

#[test]
fn empty_report_is_refused_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(emit_report(&[], &out, &tiny_config(), ReportFormat::Csv).is_err());
    assert!(!out.exists());
}

#[test]
fn cell_format_matches_table_style() {
    assert_eq!(format_cell(0.5676, 0.0193), "56.76 ± 1.93");
}

#[test]
fn ablation_table_has_three_rows_per_ratio_set() {
    let cfg = ExperimentConfig {
        ngm: surconfort::graphssl::NgmConfig { edges_per_batch: 4, natural_pool: 50, ..Default::default() },
        seeds: vec![0],
        max_folds: Some(1),
        ..tiny_config()
    };
    let records = run_ablation(&cfg).unwrap();
    assert_eq!(records.len(), 3 * 2);
    let table = table2(&summarize(&records));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2 + 3);
    for line in &lines[2..] {
        assert_eq!(line.matches('|').count(), 3 + 2 + 1);
    }
    for r in summarize(&records) {
        assert!((0.0..=1.0).contains(&r.acc_macro) && r.acc_std >= 0.0);
    }
}

#[test]
fn zero_zeta_sensitivity_point_is_the_supervised_result() {
    let cfg = ExperimentConfig {
        zeta_grid: vec![0.0, 0.35, 0.7, 1.0, 2.0],
        sensitivity_ratio: 0.5,
        ngm: surconfort::graphssl::NgmConfig { edges_per_batch: 4, ..Default::default() },
        seeds: vec![0, 1],
        max_folds: Some(2),
        ..tiny_config()
    };
    let sens = run_sensitivity(&cfg).unwrap();
    let curve = sensitivity_curve(&sens, 0.5);
    assert_eq!(curve.len(), 5);
    let snn = run_sweep(&ExperimentConfig { methods: vec![Method::Snn], ratios: vec![0.5], ..cfg.clone() }).unwrap();
    let zero: Vec<&ResultRecord> = sens.iter().filter(|r| r.zeta == Some(0.0)).collect();
    assert_eq!(zero.len(), snn.len());
    for (a, b) in zero.iter().zip(&snn) {
        assert_eq!((a.seed, a.fold), (b.seed, b.fold));
        assert_eq!(a.correct, b.correct);
        assert_eq!(a.per_station, b.per_station);
    }
}

#[test]
fn evaluation_identities() {
    let cfg = tiny_config();
    let ds = load_dataset(&cfg).unwrap();
    let split = mask_labels(&ds.full, 1.0, 0).unwrap();
    let (model, _) = train_supervised(&split, &cfg.train).unwrap();
    let test = &ds.full.labeled;
    let eval = evaluate(&model, ds.full.encoder, test).unwrap();
    let weighted: f64 = eval
        .per_station
        .values()
        .map(|t| t.accuracy() * t.total as f64)
        .sum::<f64>()
        / eval.total as f64;
    assert!((weighted - eval.accuracy).abs() < 1e-12);
    assert!(evaluate(&model, ds.full.encoder, &[]).is_err());

    // relabel the test set with the model's own predictions
    let pred = TrainedModel::Network(model.clone()).predict(ds.full.encoder, test).unwrap();
    let relabeled: Vec<Sample> = test.iter().zip(&pred).map(|(s, &p)| Sample { label: Some(p), ..*s }).collect();
    assert_eq!(evaluate(&model, ds.full.encoder, &relabeled).unwrap().accuracy, 1.0);

    let window = ServiceWindow::default();
    let grid = SlotGrid::new(ds.full.encoder.n_slots).unwrap();
    for (s, &p) in test.iter().zip(&pred).take(50) {
        let time = NaiveTime::from_num_seconds_from_midnight_opt(grid.start_minute(s.slot) * 60 + 120, 0).unwrap();
        let f = forecast(&model, ds.full.encoder, &ds.calendar, &window, s.station, s.date, time).unwrap();
        assert_eq!(f.class, p);
        assert!((f.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let night = NaiveTime::from_hms_opt(3, 0, 0).unwrap();
    let err = forecast(&model, ds.full.encoder, &ds.calendar, &window, 0, test[0].date, night).unwrap_err();
    assert!(err.to_string().contains("01:20-04:30"), "{err}");
}

#[test]
fn shape_mismatch_names_the_dimension() {
    let cfg = tiny_config();
    let ds = load_dataset(&cfg).unwrap();
    let (model, _) = train_supervised(&ds.full, &cfg.train).unwrap();
    let wrong = FeatureEncoder::new(ds.full.encoder.n_stations + 1, ds.full.encoder.n_slots);
    let err = evaluate(&model, wrong, &ds.full.labeled[..5]).unwrap_err();
    assert!(err.to_string().contains("S + 9 + T"), "{err}");
}

#[test]
fn config_rejects_unknown_methods_and_bad_ratios() {
    assert!(ExperimentConfig::from_json(r#"{"methods": ["snn", "magic"]}"#).is_err());
    assert!("magic".parse::<Method>().is_err());
    let bad = ExperimentConfig { ratios: vec![0.0], ..Default::default() };
    assert!(bad.validate().is_err());
    let cfg = ExperimentConfig::from_json(r#"{"methods": ["surconfort"], "seeds": [3, 4]}"#).unwrap();
    assert_eq!(cfg.methods, vec![Method::Surconfort]);
    assert_eq!(cfg.seeds, vec![3, 4]);
    assert_eq!(cfg.folds, 5);
}

#[test]
fn truth_mode_scores_against_the_field() {
    let cfg = ExperimentConfig { methods: vec![Method::Mode], truth: true, ratios: vec![1.0], ..tiny_config() };
    let truth = run_sweep(&cfg).unwrap();
    let plain = run_sweep(&ExperimentConfig { truth: false, ..cfg }).unwrap();
    assert_eq!(truth.len(), plain.len());
    let per_fold: BTreeMap<(u64, usize), usize> = plain.iter().map(|r| ((r.seed, r.fold), r.total)).collect();
    for r in &truth {
        assert_eq!(per_fold[&(r.seed, r.fold)], r.total);
    }
    assert_ne!(
        truth.iter().map(|r| r.correct).collect::<Vec<_>>(),
        plain.iter().map(|r| r.correct).collect::<Vec<_>>()
    );
}
