use csi_bench::config::ExperimentConfig;
use csi_bench::report::{from_csv, from_json, summarize, to_csv, to_json, ReportRecord, COLUMNS};
use csi_bench::runner::{run_experiment, write_outputs};
use csi_bench::BenchError;
use std::path::Path;

const SMALL: &str = "
[dataset]
antennas = 1
subcarriers = 4
packets = 16
classes = 3
per_class = 10
split = 0.6,0.2,0.2

[model]
name = lin
family = linear
max_epochs = 5
min_epochs = 5
patience = 5
batch_size = 6

[model]
name = gru
family = large-gru
hidden = 4
max_epochs = 3
min_epochs = 3
patience = 3
batch_size = 6

[attack]
name = pgd
method = pgd
steps = 3
restarts = 2

[attack]
name = df
method = deepfool
max_iter = 5

[run]
seeds = 7
";

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(SMALL, "small").unwrap()
}

#[test]
fn out_of_range_budget_names_its_line() {
    let text = SMALL.replace("steps = 3", "steps = 3\nbudgets = 10,99");
    let e = ExperimentConfig::parse(&text, "small").unwrap_err();
    match &e {
        BenchError::Config { line, key, detail, .. } => {
            assert_eq!(key, "budgets");
            assert_eq!(text.lines().nth(line - 1).unwrap(), "budgets = 10,99");
            assert!(detail.contains("99"), "{detail}");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn references_and_method_keys_are_checked() {
    let bad_ref = SMALL.replace("max_iter = 5", "max_iter = 5\nmodels = missing");
    assert!(ExperimentConfig::parse(&bad_ref, "t").unwrap_err().to_string().contains("missing"));
    let wrong_key = SMALL.replace("max_iter = 5", "max_iter = 5\nrestarts = 2");
    let e = ExperimentConfig::parse(&wrong_key, "t").unwrap_err();
    assert!(matches!(&e, BenchError::Config { key, .. } if key == "restarts"), "{e}");
    let tiny_key = SMALL.replace("hidden = 4", "hidden = 4\nlatent_dim = 2");
    assert!(ExperimentConfig::parse(&tiny_key, "t").is_err());
}

#[test]
fn echo_round_trips_every_shipped_config() {
    for path in ["configs/desk.cfg", "configs/full.cfg"] {
        let cfg = ExperimentConfig::from_path(Path::new(env!("CARGO_MANIFEST_DIR")).join(path).as_path()).unwrap();
        let echo = cfg.echo();
        assert_eq!(ExperimentConfig::parse(&echo, "echo").unwrap(), cfg, "{path}");
        assert_eq!(ExperimentConfig::parse(&echo, "echo").unwrap().echo(), echo);
    }
}

#[test]
fn grid_has_one_record_per_cell() {
    let out = run_experiment(&small(), None).unwrap();
    // 2 models x (1 clean row + 2 attacks x 3 budgets)
    assert_eq!(out.records.len(), 2 * (1 + 2 * 3));
    assert!(out.records.iter().all(|r| r.is_ok()), "{:?}", out.records);
    let attacked: Vec<&ReportRecord> = out.records.iter().filter(|r| r.budget_db.is_some()).collect();
    assert_eq!(attacked.len(), 12);
    for r in attacked {
        assert!(r.asr.is_some() && r.clean_acc.is_some() && r.capacity.is_some());
        assert_eq!(r.seed, 7);
    }
}

#[test]
fn reports_are_deterministic_across_runs_and_workers() {
    let cfg = small();
    let a = to_csv(&run_experiment(&cfg, None).unwrap().records).unwrap();
    let mut parallel = cfg.clone();
    parallel.run.jobs = 3;
    let b = to_csv(&run_experiment(&parallel, None).unwrap().records).unwrap();
    assert_eq!(a, b);
}

#[test]
fn written_reports_round_trip() {
    let cfg = small();
    let out = run_experiment(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_outputs(&cfg, &out, dir.path(), csi_bench::report::Format::Both).unwrap();

    let csv_path = paths.csv.unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# schema_version=1");
    assert_eq!(lines.next().unwrap().split(',').collect::<Vec<_>>(), COLUMNS);
    for line in lines {
        assert_eq!(line.split(',').count(), COLUMNS.len(), "{line}");
    }
    assert_eq!(from_csv(&text, &csv_path).unwrap(), out.records);

    let json_path = paths.json.unwrap();
    let (records, echo) = from_json(&std::fs::read_to_string(&json_path).unwrap(), &json_path).unwrap();
    assert_eq!(records, out.records);
    assert_eq!(ExperimentConfig::parse(&echo, "json").unwrap(), cfg);
    assert_eq!(std::fs::read_to_string(paths.config).unwrap(), echo);
    assert!(std::fs::read_to_string(paths.timings).unwrap().lines().count() > 1);
}

#[test]
fn failures_become_records() {
    // a learning rate this large overflows the recurrent weights
    let cfg = ExperimentConfig::parse(&SMALL.replace("hidden = 4", "hidden = 4\nlr = 1e300"), "t").unwrap();
    let out = run_experiment(&cfg, None).unwrap();
    let gru: Vec<&ReportRecord> = out.records.iter().filter(|r| r.model == "gru").collect();
    assert_eq!(gru.len(), 7);
    assert!(gru.iter().all(|r| r.status.starts_with("failed:train")), "{:?}", gru[0].status);
    assert!(out.records.iter().filter(|r| r.model == "lin").all(|r| r.is_ok()));
}

fn record(model: &str, seed: u64, asr: Option<f64>, status: &str) -> ReportRecord {
    ReportRecord {
        dataset: "d".into(),
        model: model.into(),
        family: "linear".into(),
        defense: "none".into(),
        attack: "pgd".into(),
        method: "pgd".into(),
        source: String::new(),
        mode: "untargeted".into(),
        budget_db: Some(20.0),
        seed,
        clean_acc: Some(1.0),
        clean_f1: Some(1.0),
        asr,
        racc: asr.map(|a| 1.0 - a),
        adv_f1: None,
        mean_psr_db: Some(-20.0),
        capacity: Some(10),
        asr_all: asr,
        fooling_rate: None,
        status: status.into(),
    }
}

#[test]
fn summary_uses_sample_statistics_over_ok_seeds() {
    let records = vec![
        record("a", 1, Some(0.2), "ok"),
        record("a", 2, Some(0.4), "ok"),
        record("a", 3, Some(0.9), "ok"),
        record("a", 4, None, "failed:attack: boom"),
        record("b", 1, Some(0.5), "ok"),
    ];
    let rows = summarize(&records);
    assert_eq!(rows.len(), 2);
    let a = &rows[0];
    assert_eq!((a.model.as_str(), a.n, a.failed), ("a", 3, 1));
    assert!((a.asr_mean.unwrap() - 0.5).abs() < 1e-12);
    // deviations -0.3, -0.1, 0.4: sum of squares 0.26 over n - 1 = 2
    assert!((a.asr_std.unwrap() - 0.13f64.sqrt()).abs() < 1e-12);
    assert_eq!(rows[1].asr_std, Some(0.0));

    let json = to_json(&records, "").unwrap();
    assert_eq!(from_json(&json, Path::new("x.json")).unwrap().0, records);
}
