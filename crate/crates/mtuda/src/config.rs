//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers. Designed to be diff-friendly and parseable from any
//! language; parsing errors carry the offending line number, and
//! parse -> serialize -> parse is the identity.
//!
//! Grammar:
//! ```text
//! file     := line*
//! line     := blank | comment | section | entry
//! comment  := '#' .*
//! section  := '[' name ']'            // experiment | train | data |
//!                                     // pseudo_label | domain.<name>
//! entry    := key '=' value           // whitespace around both is ignored
//! ```
//! Lists are comma-separated. Booleans are `true`/`false`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::losses::Representation;
use crate::pseudo_label::PlStrategy;
use crate::synth::{preset, DomainSpec};
use crate::trainers::{Method, TrainConfig};

/// Inline domain definition: a named preset plus optional field overrides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DomainOverride {
    /// Preset the overrides apply on top of; defaults to the domain's name.
    pub base: Option<String>,
    pub hue_shift: Option<f64>,
    pub brightness: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub texture_grain: Option<u32>,
    pub class_frequency_bias: Option<[f64; NUM_CLASSES as usize]>,
}

/// Pseudo-label refinement block.
#[derive(Debug, Clone, PartialEq)]
pub struct PlConfig {
    pub strategy: PlStrategy,
    pub keep_fraction: f64,
    /// Defaults to a quarter of the training budget when absent.
    pub refine_iters: Option<usize>,
}

/// One experiment, end to end: method hyperparameters, domains, dataset
/// sizes, and output plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub source: String,
    pub targets: Vec<String>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Extra domains to evaluate by direct transfer.
    pub transfer: Vec<String>,
    pub checkpoint_every: usize,
    pub pseudo_label: Option<PlConfig>,
    pub domains: BTreeMap<String, DomainOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let targets = vec!["euro".to_string(), "india".to_string()];
        ExperimentConfig {
            train: TrainConfig {
                num_targets: targets.len(),
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("out"),
            source: "synth".into(),
            targets,
            train_scenes: 200,
            val_scenes: 50,
            height: 64,
            width: 64,
            transfer: Vec::new(),
            checkpoint_every: 500,
            pseudo_label: None,
            domains: BTreeMap::new(),
        }
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::SingleTarget => "single_target",
        Method::MultiTargetBaseline => "multi_target_baseline",
        Method::MultiDis => "multidis",
        Method::Mtkt => "mtkt",
    }
}

fn representation_name(r: Representation) -> &'static str {
    match r {
        Representation::SoftMap => "soft_map",
        Representation::SelfInformation => "self_information",
    }
}

fn strategy_name(s: PlStrategy) -> &'static str {
    match s {
        PlStrategy::TeacherOnly => "teacher_only",
        PlStrategy::TeacherPlusKlMask => "teacher_kl_mask",
        PlStrategy::TeacherPlusAgnostic => "teacher_agnostic",
    }
}

fn invalid(line: usize, msg: impl Into<String>) -> Error {
    Error::Validation {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(line, format!("invalid value '{value}' for {key}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(line, format!("{key} must be true or false, got '{value}'"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_bias(line: usize, value: &str) -> Result<[f64; NUM_CLASSES as usize]> {
    let parts = parse_list(value);
    if parts.len() != NUM_CLASSES as usize {
        return Err(invalid(
            line,
            format!("class_frequency_bias needs {NUM_CLASSES} values, got {}", parts.len()),
        ));
    }
    let mut out = [0.0; NUM_CLASSES as usize];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = parse_num(line, "class_frequency_bias", part)?;
    }
    Ok(out)
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut targets_seen = false;
        let mut section = String::from("experiment");
        let mut pl: Option<PlConfig> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| invalid(line_no, "unterminated section header"))?
                    .trim();
                match name {
                    "experiment" | "train" | "data" => section = name.to_string(),
                    "pseudo_label" => {
                        pl.get_or_insert(PlConfig {
                            strategy: PlStrategy::TeacherOnly,
                            keep_fraction: 0.5,
                            refine_iters: None,
                        });
                        section = name.to_string();
                    }
                    _ if name.starts_with("domain.") => {
                        let domain = name["domain.".len()..].trim();
                        if domain.is_empty() {
                            return Err(invalid(line_no, "empty domain name"));
                        }
                        cfg.domains.entry(domain.to_string()).or_default();
                        section = name.to_string();
                    }
                    _ => return Err(invalid(line_no, format!("unknown section [{name}]"))),
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(invalid(line_no, format!("expected 'key = value', got '{line}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(invalid(line_no, "empty key"));
            }

            match section.as_str() {
                "experiment" => match key {
                    "output_dir" => cfg.output_dir = PathBuf::from(value),
                    "seed" => cfg.train.seed = parse_num(line_no, key, value)?,
                    "checkpoint_every" => {
                        cfg.checkpoint_every = parse_num(line_no, key, value)?;
                        if cfg.checkpoint_every == 0 {
                            return Err(invalid(line_no, "checkpoint_every must be positive"));
                        }
                    }
                    _ => return Err(invalid(line_no, format!("unknown key '{key}' in [experiment]"))),
                },
                "train" => match key {
                    "method" => {
                        cfg.train.method = match value {
                            "single_target" => Method::SingleTarget,
                            "multi_target_baseline" => Method::MultiTargetBaseline,
                            "multidis" => Method::MultiDis,
                            "mtkt" => Method::Mtkt,
                            _ => return Err(invalid(line_no, format!("unknown method '{value}'"))),
                        }
                    }
                    "representation" => {
                        cfg.train.representation = match value {
                            "soft_map" => Representation::SoftMap,
                            "self_information" => Representation::SelfInformation,
                            _ => {
                                return Err(invalid(
                                    line_no,
                                    format!("unknown representation '{value}'"),
                                ))
                            }
                        }
                    }
                    "lambda_adv" => cfg.train.weights.lambda_adv = parse_num(line_no, key, value)?,
                    "lambda_s" => cfg.train.weights.lambda_s = parse_num(line_no, key, value)?,
                    "lambda_t" => cfg.train.weights.lambda_t = parse_num(line_no, key, value)?,
                    "iters" => cfg.train.iters = parse_num(line_no, key, value)?,
                    "warmup_iters" => cfg.train.warmup_iters = parse_num(line_no, key, value)?,
                    "batch_size" => cfg.train.batch_size = parse_num(line_no, key, value)?,
                    "seg_lr" => cfg.train.seg_lr = parse_num(line_no, key, value)?,
                    "seg_momentum" => cfg.train.seg_momentum = parse_num(line_no, key, value)?,
                    "seg_weight_decay" => {
                        cfg.train.seg_weight_decay = parse_num(line_no, key, value)?
                    }
                    "disc_lr" => cfg.train.disc_lr = parse_num(line_no, key, value)?,
                    "agn_adversarial" => cfg.train.agn_adversarial = parse_bool(line_no, key, value)?,
                    "agn_source_ce" => cfg.train.agn_source_ce = parse_bool(line_no, key, value)?,
                    _ => return Err(invalid(line_no, format!("unknown key '{key}' in [train]"))),
                },
                "data" => match key {
                    "source" => cfg.source = value.to_string(),
                    "targets" => {
                        cfg.targets = parse_list(value);
                        targets_seen = true;
                    }
                    "transfer" => cfg.transfer = parse_list(value),
                    "train_scenes" => cfg.train_scenes = parse_num(line_no, key, value)?,
                    "val_scenes" => cfg.val_scenes = parse_num(line_no, key, value)?,
                    "height" => cfg.height = parse_num(line_no, key, value)?,
                    "width" => cfg.width = parse_num(line_no, key, value)?,
                    _ => return Err(invalid(line_no, format!("unknown key '{key}' in [data]"))),
                },
                "pseudo_label" => {
                    let block = pl.as_mut().expect("section sets the block");
                    match key {
                        "strategy" => {
                            block.strategy = match value {
                                "teacher_only" => PlStrategy::TeacherOnly,
                                "teacher_kl_mask" => PlStrategy::TeacherPlusKlMask,
                                "teacher_agnostic" => PlStrategy::TeacherPlusAgnostic,
                                _ => {
                                    return Err(invalid(
                                        line_no,
                                        format!("unknown strategy '{value}'"),
                                    ))
                                }
                            }
                        }
                        "keep_fraction" => block.keep_fraction = parse_num(line_no, key, value)?,
                        "refine_iters" => {
                            block.refine_iters = Some(parse_num(line_no, key, value)?)
                        }
                        _ => {
                            return Err(invalid(
                                line_no,
                                format!("unknown key '{key}' in [pseudo_label]"),
                            ))
                        }
                    }
                }
                domain_section => {
                    let name = &domain_section["domain.".len()..];
                    let entry = cfg.domains.get_mut(name).expect("section inserts the entry");
                    match key {
                        "base" => entry.base = Some(value.to_string()),
                        "hue_shift" => entry.hue_shift = Some(parse_num(line_no, key, value)?),
                        "brightness" => entry.brightness = Some(parse_num(line_no, key, value)?),
                        "noise_sigma" => entry.noise_sigma = Some(parse_num(line_no, key, value)?),
                        "texture_grain" => {
                            entry.texture_grain = Some(parse_num(line_no, key, value)?)
                        }
                        "class_frequency_bias" => {
                            entry.class_frequency_bias = Some(parse_bias(line_no, value)?)
                        }
                        _ => {
                            return Err(invalid(
                                line_no,
                                format!("unknown key '{key}' in [{domain_section}]"),
                            ))
                        }
                    }
                }
            }
        }

        cfg.pseudo_label = pl;
        if cfg.targets.is_empty() {
            let hint = if targets_seen { "targets list is empty" } else { "missing targets" };
            return Err(Error::Config(hint.into()));
        }
        cfg.train.num_targets = cfg.targets.len();
        if cfg.train_scenes == 0 || cfg.val_scenes == 0 {
            return Err(Error::Config("train_scenes and val_scenes must be positive".into()));
        }
        if let Some(block) = &cfg.pseudo_label {
            if !(block.keep_fraction > 0.0 && block.keep_fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "keep_fraction must be in (0,1], got {}",
                    block.keep_fraction
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Canonical serialization; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("[experiment]\n");
        out.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        out.push_str(&format!("seed = {}\n", self.train.seed));
        out.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));

        out.push_str("\n[train]\n");
        out.push_str(&format!("method = {}\n", method_name(self.train.method)));
        out.push_str(&format!(
            "representation = {}\n",
            representation_name(self.train.representation)
        ));
        out.push_str(&format!("lambda_adv = {}\n", fmt_f64(self.train.weights.lambda_adv)));
        out.push_str(&format!("lambda_s = {}\n", fmt_f64(self.train.weights.lambda_s)));
        out.push_str(&format!("lambda_t = {}\n", fmt_f64(self.train.weights.lambda_t)));
        out.push_str(&format!("iters = {}\n", self.train.iters));
        out.push_str(&format!("warmup_iters = {}\n", self.train.warmup_iters));
        out.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        out.push_str(&format!("seg_lr = {}\n", fmt_f64(self.train.seg_lr)));
        out.push_str(&format!("seg_momentum = {}\n", fmt_f64(self.train.seg_momentum)));
        out.push_str(&format!(
            "seg_weight_decay = {}\n",
            fmt_f64(self.train.seg_weight_decay)
        ));
        out.push_str(&format!("disc_lr = {}\n", fmt_f64(self.train.disc_lr)));
        out.push_str(&format!("agn_adversarial = {}\n", self.train.agn_adversarial));
        out.push_str(&format!("agn_source_ce = {}\n", self.train.agn_source_ce));

        out.push_str("\n[data]\n");
        out.push_str(&format!("source = {}\n", self.source));
        out.push_str(&format!("targets = {}\n", self.targets.join(", ")));
        if !self.transfer.is_empty() {
            out.push_str(&format!("transfer = {}\n", self.transfer.join(", ")));
        }
        out.push_str(&format!("train_scenes = {}\n", self.train_scenes));
        out.push_str(&format!("val_scenes = {}\n", self.val_scenes));
        out.push_str(&format!("height = {}\n", self.height));
        out.push_str(&format!("width = {}\n", self.width));

        if let Some(block) = &self.pseudo_label {
            out.push_str("\n[pseudo_label]\n");
            out.push_str(&format!("strategy = {}\n", strategy_name(block.strategy)));
            out.push_str(&format!("keep_fraction = {}\n", fmt_f64(block.keep_fraction)));
            if let Some(iters) = block.refine_iters {
                out.push_str(&format!("refine_iters = {iters}\n"));
            }
        }

        for (name, dom) in &self.domains {
            out.push_str(&format!("\n[domain.{name}]\n"));
            if let Some(base) = &dom.base {
                out.push_str(&format!("base = {base}\n"));
            }
            if let Some(v) = dom.hue_shift {
                out.push_str(&format!("hue_shift = {}\n", fmt_f64(v)));
            }
            if let Some(v) = dom.brightness {
                out.push_str(&format!("brightness = {}\n", fmt_f64(v)));
            }
            if let Some(v) = dom.noise_sigma {
                out.push_str(&format!("noise_sigma = {}\n", fmt_f64(v)));
            }
            if let Some(v) = dom.texture_grain {
                out.push_str(&format!("texture_grain = {v}\n"));
            }
            if let Some(bias) = &dom.class_frequency_bias {
                let items: Vec<String> = bias.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&format!("class_frequency_bias = {}\n", items.join(", ")));
            }
        }
        out
    }

    /// Resolves a domain name to a concrete spec: a plain preset, or a
    /// `[domain.<name>]` override applied on top of its base preset.
    pub fn resolve_domain(&self, name: &str) -> Result<DomainSpec> {
        let Some(dom) = self.domains.get(name) else {
            return preset(name);
        };
        let base = dom.base.as_deref().unwrap_or(name);
        let mut spec = preset(base)?;
        spec.domain_id = name.to_string();
        if let Some(v) = dom.hue_shift {
            spec.hue_shift = v;
        }
        if let Some(v) = dom.brightness {
            spec.brightness = v;
        }
        if let Some(v) = dom.noise_sigma {
            spec.noise_sigma = v;
        }
        if let Some(v) = dom.texture_grain {
            spec.texture_grain = v;
        }
        if let Some(v) = dom.class_frequency_bias {
            spec.class_frequency_bias = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests;
