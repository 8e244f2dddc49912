// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rftlab::harness::{
    config_hash, run_experiment, validate_config, ExperimentConfig, ModelSource, Severity, TaskSpec,
};
use rftlab::model::checkpoint;
use rftlab::model::task::KvTask;
use rftlab::model::train::{train_on_task, TrainConfig};
use rftlab::{Error, Model, ModelConfig, Site};

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

fn quick(id: &str, dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::quick(id);
    c.output_dir = dir.join(id);
    c
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new("green");
    c.seed = 17;
    c.grids.green_pairs = Some(vec![(Site::new(0, 1), Site::new(2, 3))]);
    c.grids.amplitudes = vec![-0.3, 0.1 + 0.2, 1e-17];
    c.thresholds.fd_step = 1e-6;
    let path = dir.path().join("c.json");
    std::fs::write(&path, c.to_json().unwrap()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(config_hash(&back).unwrap(), config_hash(&c).unwrap());
}

#[test]
fn validate_reports_locations() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let ok = write("ok.json", "{\"experiment\": \"predict\"}\n");
    assert!(validate_config(&ok).unwrap().is_empty());

    let one_sided = write(
        "one.json",
        "{\n  \"experiment\": \"linearity\",\n  \"grids\": {\n    \"amplitudes\": [0.001, 0.005, 0.01, 0.05]\n  }\n}\n",
    );
    let d = validate_config(&one_sided).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].severity, Severity::Warning);
    assert_eq!(d[0].line, 4);

    let unknown = write("unknown.json", "{\n  \"experiment\": \"sites\",\n  \"grids\": {\"top_kk\": 3}\n}\n");
    let d = validate_config(&unknown).unwrap();
    assert_eq!(d[0].severity, Severity::Error);
    assert!(d[0].message.contains("top_kk"));
    assert_eq!(d[0].line, 3);

    let broken = write("broken.json", "{\"experiment\": \"sites\"\n  \"seed\": 1}");
    let d = validate_config(&broken).unwrap();
    assert_eq!((d[0].severity, d[0].line), (Severity::Error, 2));

    assert!(validate_config(dir.path().join("missing.json")).is_err());
}

#[test]
fn csv_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let expect: [(&str, &[&str]); 4] = [
        ("linearity", &["epsilon", "dy_meas", "dy_pred_slope", "eta_nl", "eta_sup", "in_band"]),
        ("field", &["d_layer", "d_token", "mean_response_norm", "count"]),
        ("predict", &["prompt", "site_layer", "site_token", "epsilon", "dy_meas", "dy_pred"]),
        ("compose", &["site_layer", "site_token", "mid_layer", "mode", "epsilon", "eta_comp"]),
    ];
    for (id, cols) in expect {
        let cfg = quick(id, dir.path());
        let rep = run_experiment(&cfg).unwrap();
        let h = header(&cfg.output_dir.join(format!("{id}.csv")));
        assert_eq!(&h[..cols.len()], cols, "{id}");
        assert!(rep.files.iter().any(|f| f.ends_with("summary.json")));
    }
    // Field bins never have a negative token offset and all counts are positive.
    let mut r = csv::Reader::from_path(dir.path().join("field/field.csv")).unwrap();
    for row in r.records() {
        let row = row.unwrap();
        assert!(row[1].parse::<usize>().is_ok());
        assert!(row[3].parse::<usize>().unwrap() > 0);
    }
}

#[test]
fn metadata_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick("sites", dir.path());
    cfg.seed = 5;
    run_experiment(&cfg).unwrap();
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["master_seed"], 5);
    assert_eq!(meta["config_sha256"], config_hash(&cfg).unwrap());
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    let echoed: ExperimentConfig = serde_json::from_value(meta["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);

    // Rerunning the echoed config reproduces the CSV; another seed does not.
    let first = std::fs::read(cfg.output_dir.join("sites.csv")).unwrap();
    let mut again = echoed.clone();
    again.output_dir = dir.path().join("again");
    run_experiment(&again).unwrap();
    assert_eq!(std::fs::read(again.output_dir.join("sites.csv")).unwrap(), first);
    again.seed = 6;
    run_experiment(&again).unwrap();
    assert_ne!(std::fs::read(again.output_dir.join("sites.csv")).unwrap(), first);
}

#[test]
fn errors_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let e = run_experiment(&quick("nonsense", dir.path())).unwrap_err();
    assert!(matches!(e, Error::UnknownExperiment(_)));
    assert_eq!(e.exit_code(), 1);

    let mut bad = quick("linearity", dir.path());
    bad.grids.amplitudes = vec![0.05, -0.05];
    assert_eq!(run_experiment(&bad).unwrap_err().exit_code(), 1);

    // Gate mode with an unattainable threshold writes outputs, then fails with status 3.
    let mut gated = quick("linearity", dir.path());
    gated.thresholds.tau = 1e-15;
    gated.gate = true;
    let e = run_experiment(&gated).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(gated.output_dir.join("summary.json").exists());
    gated.gate = false;
    let rep = run_experiment(&gated).unwrap();
    assert!(rep.failed_gates.contains(&"eta_nl".to_string()));

    let mut missing = quick("sites", dir.path());
    missing.model = ModelSource::Checkpoint(dir.path().join("none.rftc"));
    assert!(run_experiment(&missing).is_err());
}

/// A repeated fact block should leave a peak at the block period in the
/// detrended token-offset profile of the response field. On the key→value
/// model this holds for only about half of the seeds, so it is not asserted
/// by default.
#[test]
#[ignore]
fn repetitive_prompt_period_peak() {
    let dir = tempfile::tempdir().unwrap();
    let task = KvTask::new(0, 16, 16).unwrap();
    let model = Model::init(ModelConfig::small(0)).unwrap();
    let (trained, _) = train_on_task(&model, &task, &TrainConfig::default()).unwrap();
    let ckpt = dir.path().join("kv.rftc");
    checkpoint::save(&trained, &ckpt).unwrap();
    let mut hits = 0;
    for seed in 0..8 {
        let mut cfg = ExperimentConfig::new("field");
        cfg.seed = seed;
        cfg.model = ModelSource::Checkpoint(ckpt.clone());
        cfg.task = Some(TaskSpec {
            seed: 0,
            n_keys: 16,
            n_vals: 16,
            n_facts: 3,
            train: TrainConfig::default(),
        });
        cfg.prompt.period = Some(3);
        cfg.output_dir = dir.path().join(seed.to_string());
        let rep = run_experiment(&cfg).unwrap();
        hits += usize::from(rep.summary["metrics"]["period_peak"] == true);
    }
    assert!(hits >= 7, "period peak in {hits}/8 seeds");
}
