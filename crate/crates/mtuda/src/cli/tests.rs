use super::*;
use crate::metrics::machine_report;

fn tiny_config_text() -> String {
    "\
[experiment]
seed = 5
checkpoint_every = 3

[train]
method = multidis
iters = 4
batch_size = 2

[data]
source = synth
targets = euro, india
train_scenes = 3
val_scenes = 2
height = 32
width = 32
"
    .to_string()
}

#[test]
fn datasets_are_deterministic_and_split_correctly() {
    let cfg = ExperimentConfig::parse(&tiny_config_text()).unwrap();
    let a = build_datasets(&cfg).unwrap();
    let b = build_datasets(&cfg).unwrap();
    assert_eq!(a.source_train.len(), cfg.train_scenes);
    assert_eq!(a.source_val.len(), cfg.val_scenes);
    assert!(a.source_train.labeled);
    assert_eq!(a.target_train.len(), 2);
    assert!(!a.target_train[0].labeled);
    assert!(a.target_val[1].labeled);
    for (x, y) in a.target_val[0].scenes.iter().zip(&b.target_val[0].scenes) {
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.image.values_vec(), y.image.values_vec());
    }
}

#[test]
fn transfer_sets_are_stable_per_name() {
    let cfg = ExperimentConfig::parse(&tiny_config_text()).unwrap();
    let a = build_transfer(&cfg, "world").unwrap();
    let b = build_transfer(&cfg, "world").unwrap();
    assert_eq!(a.len(), cfg.val_scenes);
    assert!(a.labeled);
    assert_eq!(a.scenes[0].labels, b.scenes[0].labels);
    // A different name draws from a different stream.
    let c = build_transfer(&cfg, "euro").unwrap();
    assert_ne!(a.scenes[0].image.values_vec(), c.scenes[0].image.values_vec());
}

#[test]
fn machine_report_round_trips_through_parser() {
    let mut per_domain = BTreeMap::new();
    per_domain.insert(
        "euro".to_string(),
        IouSummary { per_class: vec![Some(0.5), None, Some(0.25), Some(1.0), Some(0.0), Some(0.125), Some(0.75)], miou: 0.4375 },
    );
    per_domain.insert(
        "india".to_string(),
        IouSummary { per_class: vec![Some(0.1); 7], miou: 0.1 },
    );
    let report = EvalReport { per_domain, miou_avg: 0.26875 };
    let text = format!("# config_hash = 00deadbeef00\n{}", machine_report(&report));
    let parsed = parse_machine_report(&text).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn parser_rejects_malformed_reports() {
    assert!(parse_machine_report("").is_err());
    assert!(parse_machine_report("euro\tmiou\n").is_err());
    assert!(parse_machine_report("euro\tbogus_class\t0.5\nall\tmiou_avg\t0.5\n").is_err());
    assert!(parse_machine_report("euro\tmiou\tword\nall\tmiou_avg\t0.5\n").is_err());
    // Missing the final average row.
    assert!(parse_machine_report("euro\tmiou\t0.5\n").is_err());
}

#[test]
fn output_dir_env_overrides_config() {
    let cfg = ExperimentConfig::parse(&tiny_config_text()).unwrap();
    // Serial with itself only; no other test touches this variable.
    std::env::set_var(OUTPUT_DIR_ENV, "/tmp/elsewhere");
    assert_eq!(output_dir(&cfg), PathBuf::from("/tmp/elsewhere"));
    std::env::remove_var(OUTPUT_DIR_ENV);
    assert_eq!(output_dir(&cfg), cfg.output_dir);
}
