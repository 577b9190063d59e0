//! Entropy-based pseudo-label extraction and the refinement strategies that
//! consume them: per-class quantile selection on normalized predictive
//! entropy, one extraction round per refinement pass.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::nets::{head_spec, HEAD_MAIN};
use crate::synth::{encode_labels, merge_datasets, DomainDataset};
use crate::tensor::Tensor;
use crate::trainers::{run_until, Method, PlTerms, TrainState};

/// Pseudo-labels for one scene plus their extraction provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    /// [1,H,W]; unselected pixels carry IGNORE.
    pub labels: LabelMap,
    pub source_head: String,
    pub selection_fraction: f64,
}

/// The three refinement strategies for MTKT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlStrategy {
    /// Pseudo-label CE on each teacher head only.
    TeacherOnly,
    /// Additionally restrict KL back-propagation to pixels the student
    /// classifies in agreement with the pseudo-labels.
    TeacherPlusKlMask,
    /// Additionally supervise the agnostic head with the pseudo-labels.
    TeacherPlusAgnostic,
}

/// Per-pixel argmax labels, kept only where the normalized entropy
/// H(p)/log C falls within the keep_fraction quantile among pixels sharing
/// the same argmax class. Ties resolve toward lower entropy, then lower
/// pixel index; exactly floor(keep_fraction * count) pixels survive per
/// class.
pub fn extract_pseudo_labels(
    probs: &Tensor,
    keep_fraction: f64,
    source_head: &str,
) -> Result<PseudoLabelMap> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction must be in (0,1], got {keep_fraction}"
        )));
    }
    let s = probs.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "extract_pseudo_labels expects [C,H,W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let v = probs.values();
    let log_c = (c as f64).ln();

    let mut argmax = vec![0u8; hw];
    let mut entropy = vec![0.0f64; hw];
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = v[p];
        let mut ent = 0.0;
        for k in 0..c {
            let x = v[k * hw + p];
            if x > 0.0 {
                ent -= x * x.ln();
            }
            if k > 0 && x > best_v {
                best_v = x;
                best = k;
            }
        }
        argmax[p] = best as u8;
        entropy[p] = ent / log_c;
    }

    let mut labels = vec![IGNORE; hw];
    for class in 0..c as u8 {
        let mut pixels: Vec<usize> = (0..hw).filter(|&p| argmax[p] == class).collect();
        let keep = (keep_fraction * pixels.len() as f64).floor() as usize;
        pixels.sort_by(|&a, &b| {
            entropy[a].partial_cmp(&entropy[b]).unwrap().then(a.cmp(&b))
        });
        for &p in pixels.iter().take(keep) {
            labels[p] = class;
        }
    }
    Ok(PseudoLabelMap {
        labels: LabelMap::new(1, h, w, labels)?,
        source_head: source_head.to_string(),
        selection_fraction: keep_fraction,
    })
}

/// Squeezes the head output of one scene to [C,H,W] and extracts.
fn extract_for_scene(
    state: &TrainState,
    image: &Tensor,
    head: &str,
    keep_fraction: f64,
) -> Result<PseudoLabelMap> {
    let s = image.shape();
    let batch = Tensor::from_values(&[1, s[0], s[1], s[2]], image.values_vec());
    let sm = state.segmenter.forward(&batch, head)?;
    let ps = sm.probs.shape().to_vec();
    let squeezed = Tensor::from_values(&[ps[1], ps[2], ps[3]], sm.probs.values_vec());
    extract_pseudo_labels(&squeezed, keep_fraction, head)
}

fn extract_dataset(
    state: &TrainState,
    ds: &DomainDataset,
    head: &str,
    keep_fraction: f64,
) -> Result<Vec<PseudoLabelMap>> {
    ds.scenes
        .iter()
        .map(|scene| extract_for_scene(state, &scene.image, head, keep_fraction))
        .collect()
}

/// One MTKT refinement round: extracts pseudo-labels from each teacher head
/// (never the agnostic one), then trains `refine_iters` further iterations
/// with the strategy's extra losses.
pub fn refine_mtkt(
    mut state: TrainState,
    source: &DomainDataset,
    targets: &[DomainDataset],
    strategy: PlStrategy,
    refine_iters: usize,
    keep_fraction: f64,
) -> Result<TrainState> {
    if state.config.method != Method::Mtkt {
        return Err(Error::Contract(
            "MTKT refinement strategies require an MTKT-trained state".into(),
        ));
    }
    let mut per_target = Vec::with_capacity(targets.len());
    for (n, target) in targets.iter().enumerate() {
        let maps = extract_dataset(&state, target, &head_spec(n), keep_fraction)?;
        per_target.push(maps.into_iter().map(|m| m.labels).collect());
    }
    let pl = PlTerms {
        per_target,
        apply_kl_mask: strategy == PlStrategy::TeacherPlusKlMask,
        apply_agn_ce: strategy == PlStrategy::TeacherPlusAgnostic,
    };
    let upto = state.iteration + refine_iters;
    run_until(&mut state, source, targets, upto, Some(&pl))?;
    Ok(state)
}

/// One baseline refinement round: pseudo-labels from the single head, CE on
/// target batches added to the segmenter loss (series "pl_ce").
pub fn refine_baseline(
    mut state: TrainState,
    source: &DomainDataset,
    targets: &[DomainDataset],
    refine_iters: usize,
    keep_fraction: f64,
) -> Result<TrainState> {
    if state.config.method == Method::Mtkt {
        return Err(Error::Contract(
            "baseline refinement does not apply to MTKT states".into(),
        ));
    }
    // Extraction runs over the same merged view the trainer iterates.
    let merged;
    let effective = if state.config.method == Method::MultiTargetBaseline {
        merged = merge_datasets(targets)?;
        &merged
    } else {
        &targets[0]
    };
    let maps = extract_dataset(&state, effective, HEAD_MAIN, keep_fraction)?;
    let pl = PlTerms {
        per_target: vec![maps.into_iter().map(|m| m.labels).collect()],
        apply_kl_mask: false,
        apply_agn_ce: false,
    };
    let upto = state.iteration + refine_iters;
    run_until(&mut state, source, targets, upto, Some(&pl))?;
    Ok(state)
}

/// Declared default: one quarter of the main training budget.
pub fn default_refine_iters(train_iters: usize) -> usize {
    train_iters / 4
}

/// Writes `<stem>.lbl` in the label-map format plus a `<stem>.meta` sidecar
/// recording the extraction head and fraction.
pub fn export_pseudo_labels(map: &PseudoLabelMap, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.lbl")), encode_labels(&map.labels))?;
    let meta = format!(
        "source_head = {}\nkeep_fraction = {}\n",
        map.source_head, map.selection_fraction
    );
    fs::write(dir.join(format!("{stem}.meta")), meta)?;
    Ok(())
}

#[cfg(test)]
mod tests;
