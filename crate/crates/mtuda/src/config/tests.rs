use super::*;

const FULL: &str = "\
# end-to-end experiment
[experiment]
output_dir = runs/demo
seed = 7
checkpoint_every = 100

[train]
method = mtkt
representation = self_information
lambda_adv = 0.001
lambda_s = 0.002
lambda_t = 0.003
iters = 120
warmup_iters = 60
batch_size = 2
seg_lr = 0.00025
seg_momentum = 0.9
seg_weight_decay = 0.0001
disc_lr = 0.0001
agn_adversarial = false
agn_source_ce = true

[data]
source = synth
targets = euro, india
transfer = world
train_scenes = 8
val_scenes = 4
height = 32
width = 32

[pseudo_label]
strategy = teacher_kl_mask
keep_fraction = 0.5
refine_iters = 30

[domain.india]
noise_sigma = 0.01
class_frequency_bias = 0.28, 0.22, 0.06, 0.14, 0.16, 0.05, 0.09
";

#[test]
fn parses_full_config() {
    let cfg = ExperimentConfig::parse(FULL).unwrap();
    assert_eq!(cfg.train.method, Method::Mtkt);
    assert_eq!(cfg.train.seed, 7);
    assert_eq!(cfg.train.weights.lambda_t, 0.003);
    assert_eq!(cfg.train.num_targets, 2);
    assert!(cfg.train.agn_source_ce);
    assert_eq!(cfg.targets, vec!["euro", "india"]);
    assert_eq!(cfg.transfer, vec!["world"]);
    assert_eq!(cfg.checkpoint_every, 100);
    let pl = cfg.pseudo_label.as_ref().unwrap();
    assert_eq!(pl.strategy, PlStrategy::TeacherPlusKlMask);
    assert_eq!(pl.refine_iters, Some(30));
    let dom = cfg.domains.get("india").unwrap();
    assert_eq!(dom.noise_sigma, Some(0.01));
    assert_eq!(dom.class_frequency_bias.unwrap()[0], 0.28);
}

#[test]
fn round_trips_through_serialization() {
    let cfg = ExperimentConfig::parse(FULL).unwrap();
    let text = cfg.to_text();
    let again = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(cfg, again);
    // And the canonical form is a fixed point.
    assert_eq!(text, again.to_text());
}

#[test]
fn default_round_trips_too() {
    let cfg = ExperimentConfig::default();
    let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn errors_carry_line_numbers() {
    let bad = "[train]\nmethod = mtkt\nbogus_key = 1\n";
    let err = ExperimentConfig::parse(bad).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("bogus_key"), "{err}");

    let bad = "[nonsense]\n";
    let err = ExperimentConfig::parse(bad).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");

    let bad = "[train]\niters = soon\n";
    let err = ExperimentConfig::parse(bad).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("soon"), "{err}");

    let bad = "[data]\ntargets =\n";
    assert!(ExperimentConfig::parse(bad).is_err());
}

#[test]
fn rejects_malformed_lines() {
    assert!(ExperimentConfig::parse("[train\n").is_err());
    assert!(ExperimentConfig::parse("just words\n").is_err());
    assert!(ExperimentConfig::parse("= value\n").is_err());
    assert!(ExperimentConfig::parse("[domain.]\n").is_err());
}

#[test]
fn comments_and_blanks_are_ignored() {
    let text = "\n# header\n[data]\nsource = synth # trailing\n\ntargets = euro\n";
    let cfg = ExperimentConfig::parse(text).unwrap();
    assert_eq!(cfg.source, "synth");
    assert_eq!(cfg.targets, vec!["euro"]);
}

#[test]
fn resolve_domain_applies_overrides_on_base_preset() {
    let cfg = ExperimentConfig::parse(FULL).unwrap();
    let spec = cfg.resolve_domain("india").unwrap();
    let base = preset("india").unwrap();
    assert_eq!(spec.noise_sigma, 0.01);
    assert_eq!(spec.class_frequency_bias, preset("synth").unwrap().class_frequency_bias);
    // Untouched fields come from the base preset.
    assert_eq!(spec.hue_shift, base.hue_shift);
    assert_eq!(spec.domain_id, "india");
    // Plain names fall through to presets.
    assert_eq!(cfg.resolve_domain("euro").unwrap(), preset("euro").unwrap());
    assert!(cfg.resolve_domain("mars").is_err());
}

#[test]
fn resolve_domain_supports_renamed_base() {
    let text = "\
[data]
source = synth
targets = shifted

[domain.shifted]
base = euro
hue_shift = 90
";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let spec = cfg.resolve_domain("shifted").unwrap();
    assert_eq!(spec.domain_id, "shifted");
    assert_eq!(spec.hue_shift, 90.0);
    assert_eq!(spec.brightness, preset("euro").unwrap().brightness);
}

#[test]
fn validates_semantic_constraints() {
    // keep_fraction outside (0,1]
    let bad = format!("{FULL}\n[pseudo_label]\nkeep_fraction = 1.5\n");
    assert!(ExperimentConfig::parse(&bad).is_err());
    // zero scenes
    let bad = "[data]\nsource = synth\ntargets = euro\ntrain_scenes = 0\n";
    assert!(ExperimentConfig::parse(bad).is_err());
    // override producing an invalid spec
    let bad = "\
[data]
source = synth
targets = euro

[domain.euro]
brightness = -1
";
    let cfg = ExperimentConfig::parse(bad).unwrap();
    assert!(cfg.resolve_domain("euro").is_err());
}
