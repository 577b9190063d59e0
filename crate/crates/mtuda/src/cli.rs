//! Subcommand implementations behind the `mtuda` binary: dataset
//! generation, training with periodic checkpoints, evaluation, pseudo-label
//! refinement, and report rendering. Every subcommand is deterministic
//! given its config file; the config hash is embedded in all outputs.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::labels::CLASS_NAMES;
use crate::metrics::{machine_report, render_report, EvalReport, IouSummary};
use crate::pseudo_label::{default_refine_iters, refine_baseline, refine_mtkt, PlStrategy};
use crate::rng::derive_seed;
use crate::synth::{export_dataset, generate_dataset, DomainDataset};
use crate::trainers::{
    config_hash, evaluate, metrics_log, resume_from_checkpoint, run_until, to_checkpoint, Method,
    TrainState,
};

/// Overrides the config's output directory when set.
pub const OUTPUT_DIR_ENV: &str = "MTUDA_OUTPUT_DIR";

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

/// All datasets one experiment touches, generated from the single seed.
pub struct ExperimentData {
    pub source_train: DomainDataset,
    pub source_val: DomainDataset,
    /// Training views of the targets; unlabeled by contract.
    pub target_train: Vec<DomainDataset>,
    /// Held-out labeled validation splits of the same targets.
    pub target_val: Vec<DomainDataset>,
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const STREAM_SOURCE_DATA: u64 = 40;
const STREAM_TARGET_DATA: u64 = 41;
const STREAM_EVAL_ONLY_DATA: u64 = 42;

fn generate_domain(
    cfg: &ExperimentConfig,
    name: &str,
    seed: u64,
    n: usize,
) -> Result<DomainDataset> {
    let spec = cfg.resolve_domain(name)?;
    generate_dataset(&spec, n, seed, cfg.height, cfg.width, true)
}

/// Builds the train/val splits for source and targets. The same config
/// always yields the same scenes, bit for bit.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let total = cfg.train_scenes + cfg.val_scenes;
    let seed = cfg.train.seed;
    let source = generate_domain(cfg, &cfg.source, derive_seed(seed, STREAM_SOURCE_DATA, 0), total)?;
    let (source_train, source_val) = source.split(cfg.val_scenes)?;
    let mut target_train = Vec::new();
    let mut target_val = Vec::new();
    for (n, name) in cfg.targets.iter().enumerate() {
        let ds = generate_domain(cfg, name, derive_seed(seed, STREAM_TARGET_DATA, n as u64), total)?;
        let (mut train, val) = ds.split(cfg.val_scenes)?;
        // Target ground truth exists only for evaluation.
        train.labeled = false;
        target_train.push(train);
        target_val.push(val);
    }
    Ok(ExperimentData { source_train, source_val, target_train, target_val })
}

/// A labeled evaluation-only dataset for a domain outside the training
/// setup (direct transfer). Seeded by domain name so the set is stable
/// regardless of how it is requested.
pub fn build_transfer(cfg: &ExperimentConfig, name: &str) -> Result<DomainDataset> {
    let seed = derive_seed(cfg.train.seed, STREAM_EVAL_ONLY_DATA, fnv64(name));
    generate_domain(cfg, name, seed, cfg.val_scenes)
}

fn hash_header(cfg: &ExperimentConfig) -> String {
    format!("# config_hash = {:016x}\n", config_hash(&cfg.train))
}

fn write_report(cfg: &ExperimentConfig, dir: &Path, name: &str, report: &EvalReport) -> Result<PathBuf> {
    let reports = dir.join("reports");
    fs::create_dir_all(&reports)?;
    let path = reports.join(name);
    fs::write(&path, format!("{}{}", hash_header(cfg), machine_report(report)))?;
    Ok(path)
}

fn load_state(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<TrainState> {
    let cp = checkpoint::load(checkpoint_path)?;
    resume_from_checkpoint(&cp, &cfg.train)
}

fn val_refs<'a>(
    data: &'a ExperimentData,
    extra: &'a [DomainDataset],
) -> Vec<&'a DomainDataset> {
    data.target_val.iter().chain(extra).collect()
}

/// `generate`: writes every configured domain (source, targets, transfer)
/// to `<out>/data/<domain>/` in the dataset export format.
pub fn cmd_generate(config_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = output_dir(&cfg);
    let total = cfg.train_scenes + cfg.val_scenes;
    let seed = cfg.train.seed;
    let mut jobs: Vec<(String, u64, usize)> =
        vec![(cfg.source.clone(), derive_seed(seed, STREAM_SOURCE_DATA, 0), total)];
    for (n, name) in cfg.targets.iter().enumerate() {
        jobs.push((name.clone(), derive_seed(seed, STREAM_TARGET_DATA, n as u64), total));
    }
    for name in &cfg.transfer {
        jobs.push((
            name.clone(),
            derive_seed(seed, STREAM_EVAL_ONLY_DATA, fnv64(name)),
            cfg.val_scenes,
        ));
    }
    for (name, seed, n) in jobs {
        let ds = generate_domain(&cfg, &name, seed, n)?;
        let dir = out.join("data").join(&name);
        export_dataset(&ds, &dir)?;
        println!("wrote {} scenes to {}", ds.len(), dir.display());
    }
    Ok(())
}

/// `train`: runs the configured method, checkpointing every
/// `checkpoint_every` iterations and at the end, and writes the loss log.
pub fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = build_datasets(&cfg)?;
    let mut state = match resume {
        Some(path) => load_state(&cfg, path)?,
        None => TrainState::init(&cfg.train)?,
    };
    let out = output_dir(&cfg);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    while state.iteration < cfg.train.iters {
        let upto = (state.iteration + cfg.checkpoint_every).min(cfg.train.iters);
        run_until(&mut state, &data.source_train, &data.target_train, upto, None)?;
        let path = ckpt_dir.join(format!("ckpt_{:06}.bin", state.iteration));
        checkpoint::save(&to_checkpoint(&state), &path)?;
        println!("iteration {}: checkpoint {}", state.iteration, path.display());
    }
    let final_path = ckpt_dir.join("ckpt_final.bin");
    checkpoint::save(&to_checkpoint(&state), &final_path)?;
    fs::write(
        out.join("metrics.log"),
        format!("{}{}", hash_header(&cfg), metrics_log(&state)),
    )?;
    println!(
        "trained {} to iteration {}; final checkpoint {}",
        match cfg.train.method {
            Method::SingleTarget => "single-target",
            Method::MultiTargetBaseline => "multi-target baseline",
            Method::MultiDis => "multi-discriminator",
            Method::Mtkt => "knowledge-transfer",
        },
        state.iteration,
        final_path.display()
    );
    Ok(())
}

/// `eval`: scores a checkpoint on the target validation splits (plus any
/// direct-transfer domains), prints the table, writes the machine report.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    transfer: &[String],
    baseline: Option<&Path>,
    assert_miou: Option<f64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let state = load_state(&cfg, checkpoint_path)?;
    let data = build_datasets(&cfg)?;
    let mut extra = Vec::new();
    for name in cfg.transfer.iter().chain(transfer) {
        extra.push(build_transfer(&cfg, name)?);
    }
    let report = evaluate(&state, &val_refs(&data, &extra))?;
    let baseline = match baseline {
        Some(path) => Some(parse_machine_report(&fs::read_to_string(path)?)?),
        None => None,
    };
    print!("{}", render_report(&report, baseline.as_ref()));
    let out = output_dir(&cfg);
    let path = write_report(&cfg, &out, "eval.tsv", &report)?;
    println!("report: {}", path.display());
    if let Some(threshold) = assert_miou {
        if report.miou_avg < threshold {
            return Err(Error::Validation {
                line: 0,
                msg: format!("miou_avg {:.4} below threshold {threshold}", report.miou_avg),
            });
        }
    }
    Ok(())
}

/// `refine`: one pseudo-label refinement round per the `[pseudo_label]`
/// block; writes the refined checkpoint plus before/after reports.
pub fn cmd_refine(config_path: &Path, checkpoint_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let block = cfg
        .pseudo_label
        .clone()
        .ok_or_else(|| Error::Config("refine needs a [pseudo_label] section".into()))?;
    let state = load_state(&cfg, checkpoint_path)?;
    let data = build_datasets(&cfg)?;
    let refs = val_refs(&data, &[]);
    let before = evaluate(&state, &refs)?;
    let refine_iters = block.refine_iters.unwrap_or_else(|| default_refine_iters(cfg.train.iters));
    let state = match cfg.train.method {
        Method::Mtkt => refine_mtkt(
            state,
            &data.source_train,
            &data.target_train,
            block.strategy,
            refine_iters,
            block.keep_fraction,
        )?,
        _ => {
            if block.strategy != PlStrategy::TeacherOnly {
                return Err(Error::Config(
                    "KL-mask and agnostic-head strategies need method = mtkt".into(),
                ));
            }
            refine_baseline(
                state,
                &data.source_train,
                &data.target_train,
                refine_iters,
                block.keep_fraction,
            )?
        }
    };
    let after = evaluate(&state, &refs)?;
    println!("before refinement:");
    print!("{}", render_report(&before, None));
    println!("\nafter {refine_iters} refinement iterations:");
    print!("{}", render_report(&after, Some(&before)));
    let out = output_dir(&cfg);
    let ckpt = out.join("checkpoints").join("ckpt_refined.bin");
    fs::create_dir_all(ckpt.parent().unwrap())?;
    checkpoint::save(&to_checkpoint(&state), &ckpt)?;
    write_report(&cfg, &out, "refine_before.tsv", &before)?;
    let path = write_report(&cfg, &out, "refine_after.tsv", &after)?;
    println!("refined checkpoint: {}", ckpt.display());
    println!("reports: {}", path.display());
    Ok(())
}

/// `report`: renders a saved machine-readable report (optionally with
/// deltas against another) as the fixed-width table.
pub fn cmd_report(input: &Path, baseline: Option<&Path>) -> Result<()> {
    let report = parse_machine_report(&fs::read_to_string(input)?)?;
    let baseline = match baseline {
        Some(path) => Some(parse_machine_report(&fs::read_to_string(path)?)?),
        None => None,
    };
    print!("{}", render_report(&report, baseline.as_ref()));
    Ok(())
}

/// Inverse of `machine_report` (values at its 6-decimal precision).
pub fn parse_machine_report(text: &str) -> Result<EvalReport> {
    let mut per_domain: BTreeMap<String, IouSummary> = BTreeMap::new();
    let mut miou_avg = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [domain, key, value] = fields[..] else {
            return Err(Error::Validation {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        };
        let parse_value = || -> Result<f64> {
            value.parse().map_err(|_| Error::Validation {
                line: line_no,
                msg: format!("invalid value '{value}'"),
            })
        };
        if domain == "all" && key == "miou_avg" {
            miou_avg = Some(parse_value()?);
            continue;
        }
        let entry = per_domain.entry(domain.to_string()).or_insert_with(|| IouSummary {
            per_class: vec![None; CLASS_NAMES.len()],
            miou: 0.0,
        });
        if key == "miou" {
            entry.miou = parse_value()?;
        } else if let Some(c) = CLASS_NAMES.iter().position(|&n| n == key) {
            entry.per_class[c] = if value == "nan" { None } else { Some(parse_value()?) };
        } else {
            return Err(Error::Validation {
                line: line_no,
                msg: format!("unknown class '{key}'"),
            });
        }
    }
    let miou_avg = miou_avg.ok_or_else(|| Error::Format("report missing miou_avg row".into()))?;
    if per_domain.is_empty() {
        return Err(Error::Format("report has no domain rows".into()));
    }
    Ok(EvalReport { per_domain, miou_avg })
}

#[cfg(test)]
mod tests;
