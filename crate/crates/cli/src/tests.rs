use super::*;

const SMALL: [&str; 8] = ["--stations", "6", "--days", "7", "--report-rate", "0.3", "--epochs", "3"];

fn parse(args: &[&str]) -> Cli {
    let mut v = vec!["surconfort"];
    v.extend_from_slice(args);
    Cli::try_parse_from(v).unwrap()
}

fn exec(args: &[&str]) -> Result<()> {
    run(&parse(args))
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn unknown_method_is_a_usage_error() {
    let err = Cli::try_parse_from(["surconfort", "sweep", "--methods", "snn,magic"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("magic"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"folds": 3, "seeds": [7], "ngm": {"zeta": 1.5}}"#).unwrap();
    let p = path.to_str().unwrap();
    let Command::Sweep(a) = parse(&["sweep", "--config", p, "--folds", "4"]).command else { unreachable!() };
    let cfg = a.config().unwrap();
    assert_eq!(cfg.folds, 4);
    assert_eq!(cfg.seeds, vec![7]);
    assert_eq!(cfg.ngm.zeta, 1.5);
    assert_eq!(cfg.ngm.edges_per_batch, surconfort::graphssl::NgmConfig::default().edges_per_batch);
}

#[test]
fn bad_config_maps_to_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"ratios": [0.0]}"#).unwrap();
    let err = exec(&["sweep", "--config", path.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    std::fs::write(&path, "{not json").unwrap();
    assert_eq!(exec(&["sweep", "--config", path.to_str().unwrap()]).unwrap_err().exit_code(), 2);
}

#[test]
fn missing_data_maps_to_exit_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let err = exec(&["sweep", "--methods", "mode", "--data-dir", missing.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn generated_world_feeds_a_csv_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    exec(&with_small(&["gen", "--out", world.to_str().unwrap()])[..9]).unwrap();
    for f in ["stations.csv", "edges.csv", "reports.csv", "holidays.csv", "truth.csv"] {
        assert!(world.join(f).exists(), "{f}");
    }
    let out = dir.path().join("report");
    exec(&[
        "sweep",
        "--data-dir",
        world.to_str().unwrap(),
        "--methods",
        "random,mode",
        "--ratios",
        "0.5,1",
        "--folds",
        "3",
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();
    let results = std::fs::read(out.join("results.csv")).unwrap();
    assert_eq!(surconfort::bench::report::read_records(&out).unwrap().len(), 2 * 2 * 3);
    assert!(out.join("table1.md").exists());

    // the same world generated in memory gives the same records
    let synth = dir.path().join("synth");
    exec(&with_small(&[
        "sweep",
        "--methods",
        "random,mode",
        "--ratios",
        "0.5,1",
        "--folds",
        "3",
        "--out",
        synth.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(std::fs::read(synth.join("results.csv")).unwrap(), results);
}

#[test]
fn sweep_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = dir.path().join(name);
        exec(&with_small(&[
            "sweep", "--methods", "mode,snn", "--ratios", "0.5", "--folds", "3", "--jobs", jobs, "--format", "csv",
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        outs.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn train_eval_forecast_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("snn.ckpt");
    let c = ckpt.to_str().unwrap();
    exec(&with_small(&["train", "--method", "snn", "--label-ratio", "0.5", "--out", c])).unwrap();
    let text = std::fs::read_to_string(&ckpt).unwrap();
    assert!(text.starts_with("mlp-v1 S=6 T=144"));

    let per_station = dir.path().join("stations.csv");
    exec(&with_small(&["eval", "--checkpoint", c, "--per-station", per_station.to_str().unwrap()])).unwrap();
    let rows = std::fs::read_to_string(&per_station).unwrap();
    assert_eq!(rows.lines().next(), Some("station,correct,total,accuracy"));
    assert!(rows.lines().count() > 1);

    exec(&with_small(&["forecast", "--checkpoint", c, "--station", "2", "--date", "2024-01-03", "--time", "08:15"]))
        .unwrap();
    let night = exec(&with_small(&["forecast", "--checkpoint", c, "--station", "2", "--date", "2024-01-03", "--time", "03:00"]))
        .unwrap_err();
    assert_eq!(night.exit_code(), 2);
    assert!(night.to_string().contains("01:20-04:30"), "{night}");
    let far = exec(&with_small(&["forecast", "--checkpoint", c, "--station", "6", "--date", "2024-01-03", "--time", "08:15"]))
        .unwrap_err();
    assert_eq!(far.exit_code(), 2);

    // a checkpoint for 6 stations does not fit a 7-station world
    let mut wrong = with_small(&["eval", "--checkpoint", c]);
    wrong[4] = "7";
    let err = exec(&wrong).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("S = 6 stations"), "{err}");
}

#[test]
fn diffusion_methods_train_but_do_not_checkpoint() {
    exec(&with_small(&["train", "--method", "lp", "--label-ratio", "0.5"])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lp.ckpt");
    let err = exec(&with_small(&["train", "--method", "ls", "--out", out.to_str().unwrap()])).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn graph_export_lists_both_directions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("edges.csv");
    exec(&["graph-export", "--out", out.to_str().unwrap()]).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,weight"));
    let rows: Vec<(usize, usize, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    // ring of 30: first and second neighbours in both directions
    assert_eq!(rows.len(), 30 * 4);
    assert!(rows.contains(&(0, 1, 1.0)) && rows.contains(&(1, 0, 1.0)));
    exec(&["graph-export", "--graph", "cosine", "--out", out.to_str().unwrap()]).unwrap();
}

#[test]
fn ablation_and_sensitivity_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    exec(&with_small(&[
        "ablate", "--ratios", "0.5", "--folds", "3", "--max-folds", "1", "--edges-per-batch", "4", "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    assert!(out.join("table2.md").exists());
    let sens = dir.path().join("sens");
    exec(&with_small(&[
        "sensitivity", "--zetas", "0,0.7", "--label-ratio", "0.5", "--folds", "3", "--max-folds", "1",
        "--edges-per-batch", "4", "--out", sens.to_str().unwrap(),
    ]))
    .unwrap();
    let csv = std::fs::read_to_string(sens.join("sensitivity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}
