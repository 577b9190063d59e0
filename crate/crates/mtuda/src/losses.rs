//! Training objectives: supervised cross-entropy, adversarial BCE terms for
//! single-target, multi-discriminator and MTKT setups, and the KL
//! distillation losses. All functions are pure maps from tensors to a scalar
//! loss tensor on the autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nets::{DiscriminatorBank, DiscriminatorParams};
use crate::tensor::{
    add, bce_logits_elem, cross_entropy_masked, kl_div_const_teacher, mean, neg_p_log_p, scale,
    sum, Tensor,
};

/// Prediction-space representation fed to discriminators: the soft map P_x
/// itself or its weighted self-information map I_x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    SoftMap,
    SelfInformation,
}

impl Representation {
    pub fn apply(&self, probs: &Tensor) -> Tensor {
        match self {
            Representation::SoftMap => probs.clone(),
            Representation::SelfInformation => self_information_map(probs),
        }
    }
}

/// Adversarial loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvWeights {
    /// Single-target weight (lambda_adv).
    pub lambda_adv: f64,
    /// Source-target weight (lambda^s_adv).
    pub lambda_s: f64,
    /// Target-target weight (lambda^t_adv).
    pub lambda_t: f64,
}

impl Default for AdvWeights {
    fn default() -> Self {
        AdvWeights { lambda_adv: 0.001, lambda_s: 0.001, lambda_t: 0.001 }
    }
}

/// Entry-wise weighted self-information -p*log(p), natural log, 0*log 0 := 0.
pub fn self_information_map(probs: &Tensor) -> Tensor {
    neg_p_log_p(probs)
}

/// Supervised segmentation loss with its all-ignored warning flag.
pub struct SegLoss {
    pub value: Tensor,
    /// True when every pixel carried IGNORE and the loss is a constant 0.
    pub all_ignored: bool,
}

/// Mean over non-ignored pixels of -log p(true class).
pub fn seg_loss(probs: &Tensor, labels: &LabelMap) -> SegLoss {
    let (value, count) = cross_entropy_masked(probs, labels);
    SegLoss { value, all_ignored: count == 0 }
}

/// Mean over all logit-map entries of stabilized BCE against a constant label.
pub fn bce_logits(logit_map: &Tensor, target_label: f64) -> Tensor {
    mean(&bce_logits_elem(logit_map, target_label))
}

/// Mean BCE over several logit maps pooled with equal per-entry weight.
fn bce_logits_pooled(logit_maps: &[Tensor], target_label: f64) -> Tensor {
    let total: usize = logit_maps.iter().map(Tensor::numel).sum();
    let mut acc: Option<Tensor> = None;
    for m in logit_maps {
        let s = sum(&bce_logits_elem(m, target_label));
        acc = Some(match acc {
            Some(a) => add(&a, &s),
            None => s,
        });
    }
    scale(&acc.expect("bce_logits_pooled on empty set"), 1.0 / total as f64)
}

fn require_detached(q: &Tensor, what: &str) -> Result<()> {
    if q.requires_grad() {
        return Err(Error::Contract(format!(
            "{what} must receive detached representations (discriminator steps never touch the segmenter)"
        )));
    }
    Ok(())
}

/// Single discriminator objective: BCE(D(q),1) on source plus BCE(D(q),0) on
/// target. Both q batches must be detached from the segmenter graph.
pub fn disc_loss_single(
    d: &DiscriminatorParams,
    q_source: &Tensor,
    q_target: &Tensor,
) -> Result<Tensor> {
    require_detached(q_source, "disc_loss_single")?;
    require_detached(q_target, "disc_loss_single")?;
    let ls = bce_logits(&d.forward(q_source)?, 1.0);
    let lt = bce_logits(&d.forward(q_target)?, 0.0);
    Ok(add(&ls, &lt))
}

/// Segmenter-side fooling term: BCE(D(q),1) on a target batch with the
/// discriminator parameters frozen; backward touches segmenter parameters
/// only.
pub fn adv_fool_loss(d: &DiscriminatorParams, q_target: &Tensor) -> Result<Tensor> {
    Ok(bce_logits(&d.forward_frozen(q_target)?, 1.0))
}

/// Multi-Dis. discriminator objectives.
pub struct MultiDisDiscLosses {
    /// Mean over n of the source-vs-target-n discriminator losses.
    pub l_dst: Tensor,
    /// Mean over n of the 1-vs-all target-target discriminator losses.
    pub l_dt: Tensor,
    /// True when T = 1 and the target-target term is undefined (returned 0).
    pub single_target: bool,
    /// For each n, the (0-based) domain indices pooled as class 0 of D^t_n.
    pub class0_domains: Vec<Vec<usize>>,
}

/// Discriminator-side objectives of the multi-discriminator framework.
/// `q_targets[n]` is the detached representation batch of target domain n.
pub fn multidis_disc_losses(
    bank: &DiscriminatorBank,
    q_source: &Tensor,
    q_targets: &[Tensor],
) -> Result<MultiDisDiscLosses> {
    let t = q_targets.len();
    if t == 0 {
        return Err(Error::Contract("multidis_disc_losses needs at least one target".into()));
    }
    require_detached(q_source, "multidis_disc_losses")?;
    for q in q_targets {
        require_detached(q, "multidis_disc_losses")?;
    }
    let mut st_terms = Vec::with_capacity(t);
    for (n, q) in q_targets.iter().enumerate() {
        let d = bank
            .source_target
            .get(&n)
            .ok_or_else(|| Error::Config(format!("missing source-target discriminator {n}")))?;
        st_terms.push(disc_loss_single(d, q_source, q)?);
    }
    let l_dst = scale(&st_terms.iter().skip(1).fold(st_terms[0].clone(), |a, b| add(&a, b)), 1.0 / t as f64);

    if t == 1 {
        return Ok(MultiDisDiscLosses {
            l_dst,
            l_dt: Tensor::scalar(0.0),
            single_target: true,
            class0_domains: vec![Vec::new()],
        });
    }

    let mut tt_terms = Vec::with_capacity(t);
    let mut class0_domains = Vec::with_capacity(t);
    for n in 0..t {
        let d = bank
            .target_target
            .get(&n)
            .ok_or_else(|| Error::Config(format!("missing target-target discriminator {n}")))?;
        let own = bce_logits(&d.forward(&q_targets[n])?, 1.0);
        let mut others = Vec::new();
        let mut pooled = Vec::new();
        for (k, q) in q_targets.iter().enumerate() {
            if k != n {
                others.push(d.forward(q)?);
                pooled.push(k);
            }
        }
        let rest = bce_logits_pooled(&others, 0.0);
        tt_terms.push(add(&own, &rest));
        class0_domains.push(pooled);
    }
    let l_dt = scale(&tt_terms.iter().skip(1).fold(tt_terms[0].clone(), |a, b| add(&a, b)), 1.0 / t as f64);

    Ok(MultiDisDiscLosses { l_dst, l_dt, single_target: false, class0_domains })
}

/// Full Multi-Dis. segmenter objective:
/// L_seg + lambda_s * L^s_adv + lambda_t * L^t_adv, all discriminators frozen.
/// `q_targets[n]` must carry segmenter gradients.
pub fn multidis_total_segmenter_loss(
    probs_source: &Tensor,
    labels_source: &LabelMap,
    q_targets: &[Tensor],
    bank: &DiscriminatorBank,
    w: &AdvWeights,
) -> Result<Tensor> {
    let t = q_targets.len();
    let mut total = seg_loss(probs_source, labels_source).value;
    if w.lambda_s > 0.0 {
        let mut terms = Vec::with_capacity(t);
        for (n, q) in q_targets.iter().enumerate() {
            let d = bank
                .source_target
                .get(&n)
                .ok_or_else(|| Error::Config(format!("missing source-target discriminator {n}")))?;
            terms.push(adv_fool_loss(d, q)?);
        }
        let l_s = scale(&terms.iter().skip(1).fold(terms[0].clone(), |a, b| add(&a, b)), 1.0 / t as f64);
        total = add(&total, &scale(&l_s, w.lambda_s));
    }
    if w.lambda_t > 0.0 && t > 1 {
        let mut terms = Vec::with_capacity(t);
        for n in 0..t {
            let d = bank
                .target_target
                .get(&n)
                .ok_or_else(|| Error::Config(format!("missing target-target discriminator {n}")))?;
            let mut others = Vec::new();
            for (k, q) in q_targets.iter().enumerate() {
                if k != n {
                    others.push(d.forward_frozen(q)?);
                }
            }
            terms.push(bce_logits_pooled(&others, 1.0));
        }
        let l_t = scale(&terms.iter().skip(1).fold(terms[0].clone(), |a, b| add(&a, b)), 1.0 / t as f64);
        total = add(&total, &scale(&l_t, w.lambda_t));
    }
    Ok(total)
}

/// Teacher-to-student KL divergence, summed over pixels and channels per
/// image and averaged over the batch. The teacher is detached.
pub fn kl_distill_loss(teacher_probs: &Tensor, student_probs: &Tensor) -> Tensor {
    kl_div_const_teacher(teacher_probs, student_probs, None)
}

/// KL distillation with a per-pixel {0,1} mask of shape [N,H,W].
pub fn kl_distill_loss_masked(
    teacher_probs: &Tensor,
    student_probs: &Tensor,
    mask: &[f64],
) -> Tensor {
    kl_div_const_teacher(teacher_probs, student_probs, Some(mask))
}

/// Target-agnostic distillation objective: mean over domains of the
/// per-domain KL loss, each teacher evaluated on its own domain's batch.
pub fn mtkt_agnostic_loss(pairs: &[(Tensor, Tensor)]) -> Tensor {
    assert!(!pairs.is_empty(), "mtkt_agnostic_loss needs at least one domain");
    let terms: Vec<Tensor> = pairs
        .iter()
        .map(|(teacher, student)| kl_distill_loss(teacher, student))
        .collect();
    scale(&terms.iter().skip(1).fold(terms[0].clone(), |a, b| add(&a, b)), 1.0 / pairs.len() as f64)
}

#[cfg(test)]
mod tests;
