use super::*;
use crate::labels::NUM_CLASSES;
use crate::losses::AdvWeights;
use crate::synth::{generate_dataset, preset};
use crate::trainers::{train, TrainConfig};

fn probs_2class(p_class0: &[f64], h: usize, w: usize) -> Tensor {
    assert_eq!(p_class0.len(), h * w);
    let mut v = Vec::with_capacity(2 * h * w);
    v.extend_from_slice(p_class0);
    v.extend(p_class0.iter().map(|p| 1.0 - p));
    Tensor::from_values(&[2, h, w], v)
}

#[test]
fn rejects_bad_fraction_and_shape() {
    let t = probs_2class(&[0.9, 0.8, 0.7, 0.6], 2, 2);
    assert!(extract_pseudo_labels(&t, 0.0, "main").is_err());
    assert!(extract_pseudo_labels(&t, 1.1, "main").is_err());
    assert!(extract_pseudo_labels(&t, -0.5, "main").is_err());
    let bad = Tensor::from_values(&[1, 2, 2, 2], vec![0.5; 8]);
    assert!(extract_pseudo_labels(&bad, 0.5, "main").is_err());
}

#[test]
fn keeps_lowest_entropy_half_per_class() {
    // Four pixels, all argmax class 0, entropies strictly increasing with
    // index; keep 0.5 must retain exactly pixels 0 and 1.
    let t = probs_2class(&[0.99, 0.95, 0.90, 0.85], 2, 2);
    let pl = extract_pseudo_labels(&t, 0.5, "main").unwrap();
    assert_eq!(pl.labels.data, vec![0, 0, IGNORE, IGNORE]);
    assert_eq!(pl.source_head, "main");
    assert_eq!(pl.selection_fraction, 0.5);
}

#[test]
fn selection_is_per_class() {
    // Two pixels argmax class 0, two argmax class 1. Class 0's confident
    // pixel is index 1; class 1's confident pixel is index 2.
    let t = probs_2class(&[0.6, 0.99, 0.01, 0.4], 2, 2);
    let pl = extract_pseudo_labels(&t, 0.5, "main").unwrap();
    assert_eq!(pl.labels.data, vec![IGNORE, 0, 1, IGNORE]);
}

#[test]
fn ties_break_to_lowest_pixel_index() {
    // One-hot everywhere: entropy 0 at every pixel, so selection must fall
    // back to pixel order.
    let t = probs_2class(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 2, 3);
    let pl = extract_pseudo_labels(&t, 0.5, "main").unwrap();
    assert_eq!(pl.labels.data, vec![0, 0, 0, IGNORE, IGNORE, IGNORE]);
}

#[test]
fn keep_count_is_floored() {
    // Five same-class pixels at keep 0.5 -> floor(2.5) = 2 survivors.
    let t = probs_2class(&[0.9, 0.8, 0.7, 0.95, 0.85, 0.2], 2, 3);
    let pl = extract_pseudo_labels(&t, 0.5, "main").unwrap();
    let kept0 = pl.labels.data.iter().filter(|&&l| l == 0).count();
    assert_eq!(kept0, 2);
    // The two lowest-entropy class-0 pixels are 3 (0.95) and 0 (0.9).
    assert_eq!(pl.labels.data[3], 0);
    assert_eq!(pl.labels.data[0], 0);
    // Lone class-1 pixel: floor(0.5) = 0 kept.
    assert_eq!(pl.labels.data[5], IGNORE);
}

#[test]
fn keep_fraction_one_keeps_everything() {
    let t = probs_2class(&[0.9, 0.2, 0.5 + 1e-9, 0.4], 2, 2);
    let pl = extract_pseudo_labels(&t, 1.0, "main").unwrap();
    assert!(pl.labels.data.iter().all(|&l| l != IGNORE));
}

#[test]
fn uniform_probs_have_normalized_entropy_one() {
    // Indirect check through selection: uniform pixels tie at entropy 1, a
    // confident pixel must always outrank them.
    let c = NUM_CLASSES as usize;
    let hw = 4;
    let mut v = vec![1.0 / c as f64; c * hw];
    // Pixel 3 strongly class 0.
    for k in 0..c {
        v[k * hw + 3] = if k == 0 { 0.94 } else { 0.01 };
    }
    let t = Tensor::from_values(&[c, 2, 2], v);
    let pl = extract_pseudo_labels(&t, 0.25, "main").unwrap();
    assert_eq!(pl.labels.data, vec![IGNORE, IGNORE, IGNORE, 0]);
}

fn tiny_datasets(method: &str) -> (TrainConfig, DomainDataset, Vec<DomainDataset>) {
    let method = match method {
        "mtkt" => Method::Mtkt,
        "multidis" => Method::MultiDis,
        "baseline" => Method::MultiTargetBaseline,
        _ => Method::SingleTarget,
    };
    let config = TrainConfig {
        method,
        iters: 4,
        warmup_iters: 2,
        batch_size: 2,
        num_targets: 2,
        weights: AdvWeights {
            lambda_adv: 0.001,
            lambda_s: 0.001,
            lambda_t: 0.001,
        },
        ..TrainConfig::default()
    };
    let source = generate_dataset(&preset("synth").unwrap(), 4, 11, 32, 32, true).unwrap();
    let targets = vec![
        generate_dataset(&preset("euro").unwrap(), 4, 12, 32, 32, false).unwrap(),
        generate_dataset(&preset("india").unwrap(), 4, 13, 32, 32, false).unwrap(),
    ];
    (config, source, targets)
}

#[test]
fn refine_mtkt_rejects_non_mtkt_state() {
    let (config, source, targets) = tiny_datasets("baseline");
    let state = train(&config, &source, &targets).unwrap();
    let err = match refine_mtkt(state, &source, &targets, PlStrategy::TeacherOnly, 2, 0.5) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("expected contract error"),
    };
    assert!(err.contains("MTKT"));
}

#[test]
fn refine_baseline_rejects_mtkt_state() {
    let (config, source, targets) = tiny_datasets("mtkt");
    let state = train(&config, &source, &targets).unwrap();
    let err = match refine_baseline(state, &source, &targets, 2, 0.5) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("expected contract error"),
    };
    assert!(err.contains("MTKT"));
}

fn params_bits(state: &TrainState) -> Vec<(String, Vec<u64>)> {
    let mut out: Vec<(String, Vec<u64>)> = state
        .segmenter
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.values().iter().map(|v| v.to_bits()).collect()))
        .collect();
    out.sort();
    out
}

#[test]
fn vanishing_keep_fraction_matches_continued_training() {
    // With keep_fraction so small every per-class quota floors to zero, the
    // pseudo-label maps are all IGNORE and refinement must be bitwise the
    // same as simply training more iterations.
    let (config, source, targets) = tiny_datasets("mtkt");

    let state_a = train(&config, &source, &targets).unwrap();
    let state_a =
        refine_mtkt(state_a, &source, &targets, PlStrategy::TeacherPlusKlMask, 3, 1e-9).unwrap();

    let mut state_b = train(&config, &source, &targets).unwrap();
    run_until(&mut state_b, &source, &targets, config.iters + 3, None).unwrap();

    assert_eq!(params_bits(&state_a), params_bits(&state_b));
    assert_eq!(state_a.iteration, state_b.iteration);
}

#[test]
fn vanishing_keep_fraction_matches_for_baseline_too() {
    let (config, source, targets) = tiny_datasets("baseline");

    let state_a = train(&config, &source, &targets).unwrap();
    let state_a = refine_baseline(state_a, &source, &targets, 3, 1e-9).unwrap();

    let mut state_b = train(&config, &source, &targets).unwrap();
    run_until(&mut state_b, &source, &targets, config.iters + 3, None).unwrap();

    assert_eq!(params_bits(&state_a), params_bits(&state_b));
}

#[test]
fn refinement_logs_pl_series_and_advances() {
    let (config, source, targets) = tiny_datasets("mtkt");
    let state = train(&config, &source, &targets).unwrap();
    let state =
        refine_mtkt(state, &source, &targets, PlStrategy::TeacherOnly, 3, 0.5).unwrap();
    assert_eq!(state.iteration, config.iters + 3);
    let pl_series = state.loss_history.get("pl_ce").unwrap();
    assert_eq!(pl_series.len(), 3);
    assert!(pl_series.iter().all(|&(i, _)| i >= config.iters));
}

#[test]
fn strategies_touch_distinct_parameter_sets() {
    // TeacherPlusAgnostic must move the agnostic head differently from
    // TeacherOnly on the same refinement run (the agn CE term is real), and
    // TeacherPlusKlMask must differ from TeacherOnly through the KL mask.
    let (config, source, targets) = tiny_datasets("mtkt");
    let run = |strategy| {
        let state = train(&config, &source, &targets).unwrap();
        let state = refine_mtkt(state, &source, &targets, strategy, 3, 0.9).unwrap();
        params_bits(&state)
    };
    let teacher_only = run(PlStrategy::TeacherOnly);
    let kl_mask = run(PlStrategy::TeacherPlusKlMask);
    let agn = run(PlStrategy::TeacherPlusAgnostic);
    assert_ne!(teacher_only, kl_mask);
    assert_ne!(teacher_only, agn);
    // Shared feature extractor: all strategies still supervise it.
    assert!(!teacher_only.is_empty());
}

#[test]
fn export_writes_label_file_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let t = probs_2class(&[0.99, 0.95, 0.90, 0.85], 2, 2);
    let pl = extract_pseudo_labels(&t, 0.5, "spec_2").unwrap();
    export_pseudo_labels(&pl, dir.path(), "scene_00000").unwrap();

    let bytes = fs::read(dir.path().join("scene_00000.lbl")).unwrap();
    let decoded = crate::synth::decode_labels(&bytes).unwrap();
    assert_eq!(decoded, pl.labels);

    let meta = fs::read_to_string(dir.path().join("scene_00000.meta")).unwrap();
    assert!(meta.contains("source_head = spec_2"));
    assert!(meta.contains("keep_fraction = 0.5"));
}

#[test]
fn default_refine_budget_is_a_quarter() {
    assert_eq!(default_refine_iters(1000), 250);
    assert_eq!(default_refine_iters(3), 0);
}
