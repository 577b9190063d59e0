//! Training procedures: the single-target adversarial baseline, the merged
//! multi-target baseline, the multi-discriminator framework and the
//! multi-teacher knowledge-transfer (MTKT) setup, with SGD/Adam optimizers
//! and alternating segmenter/discriminator scheduling.
//!
//! Determinism contract: every random draw flows from `TrainConfig::seed`
//! through per-(iteration, stream) derived seeds, so a checkpoint taken at
//! iteration k and resumed to m is bitwise-identical to an uninterrupted run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE, NUM_CLASSES};
use crate::losses::{
    adv_fool_loss, disc_loss_single, kl_distill_loss_masked, mtkt_agnostic_loss,
    multidis_disc_losses, multidis_total_segmenter_loss, seg_loss, AdvWeights, Representation,
};
use crate::metrics::{evaluate_with, EvalReport};
use crate::nets::{
    head_spec, DiscriminatorArch, DiscriminatorBank, SegmenterArch, SegmenterParams, HEAD_AGN,
    HEAD_MAIN,
};
use crate::rng::{derive_seed, Rng};
use crate::synth::{merge_datasets, DomainDataset};
use crate::tensor::{add, backward, scale, Tensor};

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    SingleTarget,
    MultiTargetBaseline,
    MultiDis,
    Mtkt,
}

/// Everything a training run depends on besides the datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub representation: Representation,
    pub weights: AdvWeights,
    pub iters: usize,
    /// MTKT only: iterations before the agnostic head starts learning.
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub seg_weight_decay: f64,
    pub disc_lr: f64,
    pub seed: u64,
    pub num_targets: usize,
    pub num_classes: usize,
    /// Off by default: adversarial loss on the agnostic head hurts alignment.
    pub agn_adversarial: bool,
    /// Off by default: the agnostic head learns from teachers only.
    pub agn_source_ce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::SingleTarget,
            representation: Representation::SelfInformation,
            weights: AdvWeights::default(),
            iters: 1000,
            warmup_iters: 500,
            batch_size: 4,
            seg_lr: 2.5e-4,
            seg_momentum: 0.9,
            seg_weight_decay: 1e-4,
            disc_lr: 1e-4,
            seed: 1,
            num_targets: 1,
            num_classes: NUM_CLASSES,
            agn_adversarial: false,
            agn_source_ce: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch_size == 0 || self.num_classes == 0 {
            return Err(Error::Config("iters, batch_size and num_classes must be positive".into()));
        }
        if self.num_targets == 0 {
            return Err(Error::Config("at least one target domain is required".into()));
        }
        match self.method {
            Method::SingleTarget if self.num_targets != 1 => Err(Error::Config(format!(
                "single-target training takes exactly 1 target, got {}",
                self.num_targets
            ))),
            Method::MultiDis if self.num_targets < 2 => Err(Error::Config(
                "the multi-discriminator framework needs at least 2 targets".into(),
            )),
            Method::Mtkt if self.warmup_iters >= self.iters => Err(Error::Config(format!(
                "warmup_iters ({}) must be below iters ({})",
                self.warmup_iters, self.iters
            ))),
            _ => Ok(()),
        }
    }
}

/// FNV-1a hash of the serialized config; embedded in checkpoints and outputs
/// so resumes against a different config are refused.
pub fn config_hash(config: &TrainConfig) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// v <- momentum*v + (grad + wd*param); param <- param - lr*v.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

pub fn sgd_step(
    params: &[(String, Tensor)],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params {
        let Some(grad) = p.grad() else { continue };
        if grad.len() != p.numel() {
            return Err(Error::Dimension(format!("gradient shape mismatch on {name}")));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.numel()]);
        if v.len() != p.numel() {
            return Err(Error::Dimension(format!("velocity shape mismatch on {name}")));
        }
        let mut values = p.values_vec();
        for i in 0..values.len() {
            v[i] = momentum * v[i] + (grad[i] + weight_decay * values[i]);
            values[i] -= lr * v[i];
        }
        p.set_values(&values);
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Standard bias-corrected Adam with the fixed (0.9, 0.999, 1e-8) constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

pub fn adam_step(params: &[(String, Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params {
        let Some(grad) = p.grad() else { continue };
        if grad.len() != p.numel() {
            return Err(Error::Dimension(format!("gradient shape mismatch on {name}")));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
        let mut values = p.values_vec();
        for i in 0..values.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p.set_values(&values);
    }
    Ok(())
}

/// Batch-index stream ids. Separate streams per purpose keep the source
/// sampling untouched when adversarial branches are disabled.
pub const STREAM_SOURCE: u64 = 1;

pub fn target_stream(n: usize) -> u64 {
    2 + n as u64
}

/// Deterministic with-replacement batch sampling from (seed, iter, stream).
pub fn batch_indices(seed: u64, iter: usize, stream: u64, len: usize, k: usize) -> Vec<usize> {
    let mut rng = Rng::new(derive_seed(seed, iter as u64, stream));
    (0..k).map(|_| rng.below(len)).collect()
}

fn stack_images(ds: &DomainDataset, indices: &[usize]) -> Result<Tensor> {
    let shape = ds.scenes[indices[0]].image.shape().to_vec();
    let mut values = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
    for &i in indices {
        let img = &ds.scenes[i].image;
        if img.shape() != shape.as_slice() {
            return Err(Error::Dimension("mixed image sizes in one batch".into()));
        }
        values.extend_from_slice(&img.values());
    }
    Ok(Tensor::from_values(&[indices.len(), shape[0], shape[1], shape[2]], values))
}

fn stack_train_labels(ds: &DomainDataset, indices: &[usize]) -> Result<LabelMap> {
    let maps: Vec<&LabelMap> = indices
        .iter()
        .map(|&i| ds.train_labels(i))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::stack(&maps)
}

fn stack_maps(maps: &[LabelMap], indices: &[usize]) -> Result<LabelMap> {
    let picked: Vec<&LabelMap> = indices.iter().map(|&i| &maps[i]).collect();
    LabelMap::stack(&picked)
}

/// Pseudo-label inputs threaded into the training loop during refinement.
pub struct PlTerms {
    /// Per (normalized) target domain, one pseudo-label map per scene index.
    pub per_target: Vec<Vec<LabelMap>>,
    /// Zero the per-pixel KL terms where the student contradicts a
    /// pseudo-label (MTKT refinement variant 2).
    pub apply_kl_mask: bool,
    /// Also supervise the agnostic head with pseudo-labels (variant 3).
    pub apply_agn_ce: bool,
}

/// Full mutable state of one training run.
pub struct TrainState {
    pub config: TrainConfig,
    pub segmenter: SegmenterParams,
    pub bank: DiscriminatorBank,
    pub seg_opt: SgdState,
    pub disc_opt: AdamState,
    pub iteration: usize,
    /// Loss series: name -> (iteration, value) pairs.
    pub loss_history: BTreeMap<String, Vec<(usize, f64)>>,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let arch = match config.method {
            Method::Mtkt => SegmenterArch::mtkt(config.num_classes, config.num_targets),
            _ => SegmenterArch::baseline(config.num_classes),
        };
        let segmenter = SegmenterParams::init(&arch, derive_seed(config.seed, 20, 0))?;
        let bank_seed = derive_seed(config.seed, 21, 0);
        let bank = match config.method {
            Method::SingleTarget | Method::MultiTargetBaseline => {
                DiscriminatorBank::single(config.num_classes, bank_seed)?
            }
            Method::MultiDis => {
                DiscriminatorBank::multidis(config.num_classes, config.num_targets, bank_seed)?
            }
            Method::Mtkt => {
                DiscriminatorBank::mtkt(config.num_classes, config.num_targets, bank_seed)?
            }
        };
        Ok(TrainState {
            config: config.clone(),
            segmenter,
            bank,
            seg_opt: SgdState::default(),
            disc_opt: AdamState::default(),
            iteration: 0,
            loss_history: BTreeMap::new(),
        })
    }

    fn log(&mut self, iter: usize, name: &str, value: f64) {
        self.loss_history.entry(name.to_string()).or_default().push((iter, value));
    }

    /// The deployment head: agnostic for MTKT, main otherwise.
    pub fn deploy_head(&self) -> &'static str {
        match self.config.method {
            Method::Mtkt => HEAD_AGN,
            _ => HEAD_MAIN,
        }
    }
}

/// Argmax prediction of the deployment head for one [3,H,W] image.
pub fn predict(state: &TrainState, image: &Tensor) -> Result<LabelMap> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("predict expects [C,H,W], got {s:?}")));
    }
    let batch = Tensor::from_values(&[1, s[0], s[1], s[2]], image.values_vec());
    let sm = state.segmenter.forward(&batch, state.deploy_head())?;
    LabelMap::new(1, s[1], s[2], sm.probs.argmax_channel())
}

/// Per-domain evaluation of a trained state; also serves direct transfer to
/// domains the run never saw.
pub fn evaluate(state: &TrainState, datasets: &[&DomainDataset]) -> Result<EvalReport> {
    evaluate_with(|scene| predict(state, &scene.image), datasets)
}

/// The line-oriented metrics log: `iter<TAB>loss_name<TAB>value`.
pub fn metrics_log(state: &TrainState) -> String {
    let mut rows: Vec<(usize, &str, f64)> = Vec::new();
    for (name, series) in &state.loss_history {
        for &(iter, value) in series {
            rows.push((iter, name, value));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut out = String::new();
    for (iter, name, value) in rows {
        out.push_str(&format!("{iter}\t{name}\t{value}\n"));
    }
    out
}

fn seg_params_for_step(state: &TrainState, include_agn: bool) -> Vec<(String, Tensor)> {
    let mut params = state.segmenter.feat_named_params();
    for id in state.segmenter.heads.keys() {
        if id == HEAD_AGN && !include_agn {
            continue;
        }
        params.extend(state.segmenter.head_named_params(id));
    }
    params
}

fn single_target_iteration(
    state: &mut TrainState,
    source: &DomainDataset,
    target: &DomainDataset,
    iter: usize,
    pl: Option<&PlTerms>,
) -> Result<()> {
    let cfg = state.config.clone();
    let lambda = cfg.weights.lambda_adv;
    let src_idx = batch_indices(cfg.seed, iter, STREAM_SOURCE, source.len(), cfg.batch_size);
    let x_s = stack_images(source, &src_idx)?;
    let y_s = stack_train_labels(source, &src_idx)?;
    let sm_s = state.segmenter.forward(&x_s, HEAD_MAIN)?;
    let sl = seg_loss(&sm_s.probs, &y_s);
    let mut total = sl.value.clone();
    let mut adv_value = 0.0;
    let mut pl_value = 0.0;

    let needs_target = lambda > 0.0 || pl.is_some();
    let mut target_q = None;
    if needs_target {
        let t_idx = batch_indices(cfg.seed, iter, target_stream(0), target.len(), cfg.batch_size);
        let x_t = stack_images(target, &t_idx)?;
        let sm_t = state.segmenter.forward(&x_t, HEAD_MAIN)?;
        if lambda > 0.0 {
            let q_t = cfg.representation.apply(&sm_t.probs);
            let d = &state.bank.source_target[&0];
            let l_adv = adv_fool_loss(d, &q_t)?;
            adv_value = l_adv.item();
            total = add(&total, &scale(&l_adv, lambda));
            target_q = Some(q_t.detach());
        }
        if let Some(pl) = pl {
            let pl_batch = stack_maps(&pl.per_target[0], &t_idx)?;
            let pl_ce = seg_loss(&sm_t.probs, &pl_batch);
            pl_value = pl_ce.value.item();
            total = add(&total, &pl_ce.value);
        }
    }

    state.segmenter.zero_grads();
    backward(&total)?;
    let params = seg_params_for_step(state, true);
    sgd_step(&params, &mut state.seg_opt, cfg.seg_lr, cfg.seg_momentum, cfg.seg_weight_decay)?;

    let mut disc_value = 0.0;
    if let Some(q_t) = target_q {
        let q_s = cfg.representation.apply(&sm_s.probs.detach());
        let d = &state.bank.source_target[&0];
        let l_d = disc_loss_single(d, &q_s, &q_t)?;
        disc_value = l_d.item();
        state.bank.zero_grads();
        backward(&l_d)?;
        let disc_params = state.bank.named_params();
        adam_step(&disc_params, &mut state.disc_opt, cfg.disc_lr)?;
    }

    state.log(iter, "seg", sl.value.item());
    state.log(iter, "adv", adv_value);
    state.log(iter, "disc", disc_value);
    if pl.is_some() {
        state.log(iter, "pl_ce", pl_value);
    }
    Ok(())
}

fn multidis_iteration(
    state: &mut TrainState,
    source: &DomainDataset,
    targets: &[DomainDataset],
    iter: usize,
) -> Result<()> {
    let cfg = state.config.clone();
    let w = cfg.weights;
    let adv_on = w.lambda_s > 0.0 || w.lambda_t > 0.0;
    let src_idx = batch_indices(cfg.seed, iter, STREAM_SOURCE, source.len(), cfg.batch_size);
    let x_s = stack_images(source, &src_idx)?;
    let y_s = stack_train_labels(source, &src_idx)?;
    let sm_s = state.segmenter.forward(&x_s, HEAD_MAIN)?;
    let sl = seg_loss(&sm_s.probs, &y_s);

    let mut q_targets = Vec::new();
    if adv_on {
        for (n, target) in targets.iter().enumerate() {
            let idx =
                batch_indices(cfg.seed, iter, target_stream(n), target.len(), cfg.batch_size);
            let x_t = stack_images(target, &idx)?;
            let sm_t = state.segmenter.forward(&x_t, HEAD_MAIN)?;
            q_targets.push(cfg.representation.apply(&sm_t.probs));
        }
    }
    let total = multidis_total_segmenter_loss(&sm_s.probs, &y_s, &q_targets, &state.bank, &w)?;
    state.segmenter.zero_grads();
    backward(&total)?;
    let params = seg_params_for_step(state, true);
    sgd_step(&params, &mut state.seg_opt, cfg.seg_lr, cfg.seg_momentum, cfg.seg_weight_decay)?;

    let (mut dst_value, mut dt_value) = (0.0, 0.0);
    if adv_on {
        let q_s = cfg.representation.apply(&sm_s.probs.detach());
        let q_det: Vec<Tensor> = q_targets.iter().map(Tensor::detach).collect();
        let losses = multidis_disc_losses(&state.bank, &q_s, &q_det)?;
        dst_value = losses.l_dst.item();
        dt_value = losses.l_dt.item();
        state.bank.zero_grads();
        backward(&losses.l_dst)?;
        backward(&losses.l_dt)?;
        let disc_params = state.bank.named_params();
        adam_step(&disc_params, &mut state.disc_opt, cfg.disc_lr)?;
    }

    state.log(iter, "seg", sl.value.item());
    state.log(iter, "total", total.item());
    state.log(iter, "disc_st", dst_value);
    state.log(iter, "disc_tt", dt_value);
    Ok(())
}

/// KL mask: 1 everywhere except pixels that carry a pseudo-label the student
/// currently contradicts. Pixels without a pseudo-label stay unmasked, so an
/// empty extraction reduces refinement to plain continued training.
fn kl_mask(student_probs: &Tensor, pseudo: &LabelMap) -> Vec<f64> {
    let argmax = student_probs.argmax_channel();
    argmax
        .iter()
        .zip(&pseudo.data)
        .map(|(&pred, &pl)| if pl != IGNORE && pred != pl { 0.0 } else { 1.0 })
        .collect()
}

fn mtkt_iteration(
    state: &mut TrainState,
    source: &DomainDataset,
    targets: &[DomainDataset],
    iter: usize,
    pl: Option<&PlTerms>,
) -> Result<()> {
    let cfg = state.config.clone();
    let lambda = cfg.weights.lambda_adv;
    let phase2 = iter >= cfg.warmup_iters;
    let t = targets.len();

    let src_idx = batch_indices(cfg.seed, iter, STREAM_SOURCE, source.len(), cfg.batch_size);
    let x_s = stack_images(source, &src_idx)?;
    let y_s = stack_train_labels(source, &src_idx)?;
    let (h, w_px) = (x_s.shape()[2], x_s.shape()[3]);
    let feats_s = state.segmenter.features(&x_s)?;

    let mut total: Option<Tensor> = None;
    let acc = |tot: &mut Option<Tensor>, term: &Tensor| {
        *tot = Some(match tot.take() {
            Some(v) => add(&v, term),
            None => term.clone(),
        });
    };

    let mut seg_sum = 0.0;
    let mut adv_terms = Vec::new();
    let mut kl_pairs: Vec<(Tensor, Tensor, Option<Vec<f64>>)> = Vec::new();
    let mut source_spec_probs = Vec::new();
    let mut pl_sum = 0.0;

    for n in 0..t {
        let head = head_spec(n);
        // Source CE supervision on every target-specific head.
        let sm_sn = state.segmenter.head_soft_maps(&feats_s, &head, h, w_px)?;
        let ce = seg_loss(&sm_sn.probs, &y_s);
        seg_sum += ce.value.item();
        acc(&mut total, &ce.value);
        source_spec_probs.push(sm_sn.probs);

        let needs_target = lambda > 0.0 || phase2 || pl.is_some() || cfg.agn_adversarial;
        if !needs_target {
            continue;
        }
        let idx =
            batch_indices(cfg.seed, iter, target_stream(n), targets[n].len(), cfg.batch_size);
        let x_t = stack_images(&targets[n], &idx)?;
        let feats_t = state.segmenter.features(&x_t)?;
        let sm_tn = state.segmenter.head_soft_maps(&feats_t, &head, h, w_px)?;

        if lambda > 0.0 {
            let q = cfg.representation.apply(&sm_tn.probs);
            adv_terms.push(adv_fool_loss(&state.bank.source_target[&n], &q)?);
        }
        if cfg.agn_adversarial && lambda > 0.0 {
            let agn = state.segmenter.head_soft_maps(&feats_t, HEAD_AGN, h, w_px)?;
            let q = cfg.representation.apply(&agn.probs);
            adv_terms.push(adv_fool_loss(&state.bank.source_target[&n], &q)?);
        }
        if let Some(pl) = pl {
            let pl_batch = stack_maps(&pl.per_target[n], &idx)?;
            let pl_ce = seg_loss(&sm_tn.probs, &pl_batch);
            pl_sum += pl_ce.value.item();
            acc(&mut total, &pl_ce.value);
            if pl.apply_agn_ce {
                let agn = state.segmenter.head_soft_maps(&feats_t, HEAD_AGN, h, w_px)?;
                let agn_ce = seg_loss(&agn.probs, &pl_batch);
                pl_sum += agn_ce.value.item();
                acc(&mut total, &agn_ce.value);
            }
            if phase2 {
                let student = state.segmenter.head_soft_maps(&feats_t, HEAD_AGN, h, w_px)?;
                let mask = if pl.apply_kl_mask {
                    Some(kl_mask(&student.probs, &pl_batch))
                } else {
                    None
                };
                kl_pairs.push((sm_tn.probs.detach(), student.probs, mask));
            }
        } else if phase2 {
            let student = state.segmenter.head_soft_maps(&feats_t, HEAD_AGN, h, w_px)?;
            kl_pairs.push((sm_tn.probs.detach(), student.probs, None));
        }
    }

    if cfg.agn_source_ce {
        let sm_agn = state.segmenter.head_soft_maps(&feats_s, HEAD_AGN, h, w_px)?;
        acc(&mut total, &seg_loss(&sm_agn.probs, &y_s).value);
    }

    let mut adv_value = 0.0;
    if !adv_terms.is_empty() {
        let sum = adv_terms.iter().skip(1).fold(adv_terms[0].clone(), |a, b| add(&a, b));
        let mean = scale(&sum, 1.0 / adv_terms.len() as f64);
        adv_value = mean.item();
        acc(&mut total, &scale(&mean, lambda));
    }

    let mut kl_value = 0.0;
    if !kl_pairs.is_empty() {
        let kl = if kl_pairs.iter().any(|(_, _, m)| m.is_some()) {
            let terms: Vec<Tensor> = kl_pairs
                .iter()
                .map(|(teacher, student, mask)| {
                    let pixels = student.numel() / student.shape()[1];
                    let ones = vec![1.0; pixels];
                    kl_distill_loss_masked(teacher, student, mask.as_deref().unwrap_or(&ones))
                })
                .collect();
            // Mean over domains, mirroring the unmasked combination.
            scale(
                &terms.iter().skip(1).fold(terms[0].clone(), |a, b| add(&a, b)),
                1.0 / kl_pairs.len() as f64,
            )
        } else {
            let pairs: Vec<(Tensor, Tensor)> = kl_pairs
                .iter()
                .map(|(te, st, _)| (te.clone(), st.clone()))
                .collect();
            mtkt_agnostic_loss(&pairs)
        };
        // The distillation KL is summed over pixels per image; normalize it
        // to a per-pixel mean so its gradient scale matches the CE terms.
        let kl = scale(&kl, 1.0 / (h * w_px) as f64);
        kl_value = kl.item();
        acc(&mut total, &kl);
    }

    let total = total.expect("MTKT objective has at least the source CE terms");
    state.segmenter.zero_grads();
    backward(&total)?;
    let touch_agn = phase2
        || cfg.agn_source_ce
        || (cfg.agn_adversarial && lambda > 0.0)
        || pl.map(|p| p.apply_agn_ce).unwrap_or(false);
    let params = seg_params_for_step(state, touch_agn);
    sgd_step(&params, &mut state.seg_opt, cfg.seg_lr, cfg.seg_momentum, cfg.seg_weight_decay)?;

    let mut disc_value = 0.0;
    if lambda > 0.0 {
        state.bank.zero_grads();
        for n in 0..t {
            let idx =
                batch_indices(cfg.seed, iter, target_stream(n), targets[n].len(), cfg.batch_size);
            let x_t = stack_images(&targets[n], &idx)?;
            let sm_tn = state.segmenter.head_soft_maps(
                &state.segmenter.features(&x_t)?,
                &head_spec(n),
                h,
                w_px,
            )?;
            let q_s = cfg.representation.apply(&source_spec_probs[n].detach());
            let q_t = cfg.representation.apply(&sm_tn.probs.detach());
            let l_d = disc_loss_single(&state.bank.source_target[&n], &q_s, &q_t)?;
            disc_value += l_d.item() / t as f64;
            backward(&l_d)?;
        }
        let disc_params = state.bank.named_params();
        adam_step(&disc_params, &mut state.disc_opt, cfg.disc_lr)?;
    }

    state.log(iter, "seg", seg_sum / t as f64);
    state.log(iter, "adv", adv_value);
    state.log(iter, "disc", disc_value);
    state.log(iter, "kl", kl_value);
    if pl.is_some() {
        state.log(iter, "pl_ce", pl_sum / t as f64);
    }
    Ok(())
}

/// Advances training to iteration `upto` (exclusive). `targets` is the raw
/// per-domain list; the merged-baseline method merges it internally.
pub fn run_until(
    state: &mut TrainState,
    source: &DomainDataset,
    targets: &[DomainDataset],
    upto: usize,
    pl: Option<&PlTerms>,
) -> Result<()> {
    if !source.labeled {
        return Err(Error::Contract("source dataset must be labeled".into()));
    }
    if source.is_empty() || targets.iter().any(DomainDataset::is_empty) {
        return Err(Error::Contract("empty dataset".into()));
    }
    let method = state.config.method;
    if method != Method::MultiTargetBaseline && targets.len() != state.config.num_targets {
        return Err(Error::Config(format!(
            "config expects {} targets, got {}",
            state.config.num_targets,
            targets.len()
        )));
    }
    if let Some(pl) = pl {
        let expected = match method {
            Method::Mtkt => state.config.num_targets,
            _ => 1,
        };
        if pl.per_target.len() != expected {
            return Err(Error::Contract(format!(
                "pseudo-label terms cover {} domains, expected {expected}",
                pl.per_target.len()
            )));
        }
    }
    let merged;
    let effective: &[DomainDataset] = match method {
        Method::MultiTargetBaseline => {
            merged = [merge_datasets(targets)?];
            &merged
        }
        _ => targets,
    };
    while state.iteration < upto {
        let iter = state.iteration;
        match method {
            Method::SingleTarget | Method::MultiTargetBaseline => {
                single_target_iteration(state, source, &effective[0], iter, pl)?
            }
            Method::MultiDis => multidis_iteration(state, source, effective, iter)?,
            Method::Mtkt => mtkt_iteration(state, source, effective, iter, pl)?,
        }
        state.iteration = iter + 1;
    }
    Ok(())
}

fn train_with(
    config: &TrainConfig,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<TrainState> {
    let mut state = TrainState::init(config)?;
    run_until(&mut state, source, targets, config.iters, None)?;
    Ok(state)
}

pub fn train_single_target(
    config: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<TrainState> {
    if config.method != Method::SingleTarget {
        return Err(Error::Config("config method is not SingleTarget".into()));
    }
    train_with(config, source, std::slice::from_ref(target))
}

pub fn train_multi_target_baseline(
    config: &TrainConfig,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<TrainState> {
    if config.method != Method::MultiTargetBaseline {
        return Err(Error::Config("config method is not MultiTargetBaseline".into()));
    }
    train_with(config, source, targets)
}

pub fn train_multidis(
    config: &TrainConfig,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<TrainState> {
    if config.method != Method::MultiDis {
        return Err(Error::Config("config method is not MultiDis".into()));
    }
    train_with(config, source, targets)
}

pub fn train_mtkt(
    config: &TrainConfig,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<TrainState> {
    if config.method != Method::Mtkt {
        return Err(Error::Config("config method is not Mtkt".into()));
    }
    train_with(config, source, targets)
}

/// Dispatch on the configured method.
pub fn train(
    config: &TrainConfig,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<TrainState> {
    train_with(config, source, targets)
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: u64,
    iteration: usize,
    seg_opt_keys: Vec<String>,
    adam_step: u64,
    loss_history: BTreeMap<String, Vec<(usize, f64)>>,
    arch: SegmenterArch,
    disc_arch: DiscriminatorArch,
    st_indices: Vec<usize>,
    tt_indices: Vec<usize>,
}

/// Serializes the complete training state (parameters, optimizer buffers,
/// loss history) into the checkpoint container.
pub fn to_checkpoint(state: &TrainState) -> Checkpoint {
    let disc_arch = state
        .bank
        .source_target
        .values()
        .next()
        .map(|d| d.arch.clone())
        .unwrap_or_else(|| DiscriminatorArch::default_for(state.config.num_classes));
    let header = Header {
        config: state.config.clone(),
        config_hash: config_hash(&state.config),
        iteration: state.iteration,
        seg_opt_keys: state.seg_opt.velocity.keys().cloned().collect(),
        adam_step: state.disc_opt.step,
        loss_history: state.loss_history.clone(),
        arch: state.segmenter.arch.clone(),
        disc_arch,
        st_indices: state.bank.source_target.keys().copied().collect(),
        tt_indices: state.bank.target_target.keys().copied().collect(),
    };
    let mut records = Vec::new();
    for (name, t) in state.segmenter.named_params() {
        records.push(TensorRecord { name, dims: t.shape().to_vec(), values: t.values_vec() });
    }
    for (name, t) in state.bank.named_params() {
        records.push(TensorRecord { name, dims: t.shape().to_vec(), values: t.values_vec() });
    }
    for (name, v) in &state.seg_opt.velocity {
        records.push(TensorRecord {
            name: format!("opt.seg.v.{name}"),
            dims: vec![v.len()],
            values: v.clone(),
        });
    }
    for (name, m) in &state.disc_opt.m {
        records.push(TensorRecord {
            name: format!("opt.disc.m.{name}"),
            dims: vec![m.len()],
            values: m.clone(),
        });
    }
    for (name, v) in &state.disc_opt.v {
        records.push(TensorRecord {
            name: format!("opt.disc.v.{name}"),
            dims: vec![v.len()],
            values: v.clone(),
        });
    }
    Checkpoint { header: serde_json::to_string(&header).expect("header serializes"), records }
}

/// Rebuilds a training state from a checkpoint.
pub fn from_checkpoint(cp: &Checkpoint) -> Result<TrainState> {
    let header: Header = serde_json::from_str(&cp.header)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let mut state = TrainState::init(&header.config)?;
    if state.segmenter.arch != header.arch {
        return Err(Error::Format("checkpoint architecture mismatch".into()));
    }
    let st: Vec<usize> = state.bank.source_target.keys().copied().collect();
    let tt: Vec<usize> = state.bank.target_target.keys().copied().collect();
    if st != header.st_indices || tt != header.tt_indices {
        return Err(Error::Format("checkpoint discriminator bank mismatch".into()));
    }
    for (name, t) in state.segmenter.named_params() {
        let r = cp.record(&name)?;
        if r.dims != t.shape() {
            return Err(Error::Format(format!("shape mismatch on {name}")));
        }
        t.set_values(&r.values);
    }
    for (name, t) in state.bank.named_params() {
        let r = cp.record(&name)?;
        if r.dims != t.shape() {
            return Err(Error::Format(format!("shape mismatch on {name}")));
        }
        t.set_values(&r.values);
    }
    for key in &header.seg_opt_keys {
        let r = cp.record(&format!("opt.seg.v.{key}"))?;
        state.seg_opt.velocity.insert(key.clone(), r.values.clone());
    }
    for r in &cp.records {
        if let Some(key) = r.name.strip_prefix("opt.disc.m.") {
            state.disc_opt.m.insert(key.to_string(), r.values.clone());
        } else if let Some(key) = r.name.strip_prefix("opt.disc.v.") {
            state.disc_opt.v.insert(key.to_string(), r.values.clone());
        }
    }
    state.disc_opt.step = header.adam_step;
    state.iteration = header.iteration;
    state.loss_history = header.loss_history;
    Ok(state)
}

/// Like [`from_checkpoint`], but refuses to resume under a different config.
pub fn resume_from_checkpoint(cp: &Checkpoint, expected: &TrainConfig) -> Result<TrainState> {
    let header: Header = serde_json::from_str(&cp.header)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.config_hash != config_hash(expected) {
        return Err(Error::Contract(format!(
            "checkpoint was trained under config hash {:016x}, current config hashes to {:016x}; \
             refusing to resume",
            header.config_hash,
            config_hash(expected)
        )));
    }
    from_checkpoint(cp)
}
