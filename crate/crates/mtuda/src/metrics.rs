//! Confusion matrices, per-class IoU, per-domain mIoU and the averaged
//! multi-target score, plus text report rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, CLASS_NAMES, IGNORE, NUM_CLASSES};
use crate::synth::{DomainDataset, Scene};

/// Row = ground truth, column = prediction. IGNORE pixels are counted apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<u64>,
    pub ignored_pixels: u64,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfusionMatrix {
    pub fn new() -> ConfusionMatrix {
        ConfusionMatrix { counts: vec![0; NUM_CLASSES * NUM_CLASSES], ignored_pixels: 0 }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * NUM_CLASSES + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix into this one (exact integer addition).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored_pixels += other.ignored_pixels;
    }
}

/// Tallies one prediction/truth pair into the matrix.
pub fn accumulate(cm: &mut ConfusionMatrix, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
        return Err(Error::Dimension(format!(
            "accumulate: prediction {}x{}x{} vs truth {}x{}x{}",
            pred.n, pred.h, pred.w, truth.n, truth.h, truth.w
        )));
    }
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        if t == IGNORE {
            cm.ignored_pixels += 1;
            continue;
        }
        if t as usize >= NUM_CLASSES || p as usize >= NUM_CLASSES {
            return Err(Error::Contract(format!(
                "accumulate: class id out of range (pred {p}, truth {t})"
            )));
        }
        cm.counts[t as usize * NUM_CLASSES + p as usize] += 1;
    }
    Ok(())
}

/// Per-class IoU; classes with an empty union (TP+FP+FN = 0) carry `None`
/// and are excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_from_cm(cm: &ConfusionMatrix) -> IouSummary {
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..NUM_CLASSES {
        let tp = cm.at(c, c);
        let fp: u64 = (0..NUM_CLASSES).filter(|&t| t != c).map(|t| cm.at(t, c)).sum();
        let fn_: u64 = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| cm.at(c, p)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    let miou = if counted == 0 { 0.0 } else { sum / counted as f64 };
    IouSummary { per_class, miou }
}

/// Per-domain scores plus the unweighted cross-domain average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by domain id; BTreeMap for stable rendering order.
    pub per_domain: BTreeMap<String, IouSummary>,
    pub miou_avg: f64,
}

/// Evaluates a predictor over labeled datasets, one confusion matrix per
/// domain. Works for domains absent from training (direct transfer).
pub fn evaluate_with<F>(predict: F, datasets: &[&DomainDataset]) -> Result<EvalReport>
where
    F: Fn(&Scene) -> Result<LabelMap>,
{
    let mut per_domain = BTreeMap::new();
    for ds in datasets {
        let mut cm = ConfusionMatrix::new();
        for scene in &ds.scenes {
            let pred = predict(scene)?;
            accumulate(&mut cm, &pred, &scene.labels)?;
        }
        per_domain.insert(ds.domain_id.clone(), iou_from_cm(&cm));
    }
    if per_domain.is_empty() {
        return Err(Error::Contract("evaluate over zero datasets".into()));
    }
    let miou_avg =
        per_domain.values().map(|s| s.miou).sum::<f64>() / per_domain.len() as f64;
    Ok(EvalReport { per_domain, miou_avg })
}

fn pct(v: f64) -> String {
    format!("{:5.1}", v * 100.0)
}

/// Fixed-width text table: one row per domain with per-class IoU columns in
/// the canonical order, a mIoU column, and a final averaged row. With a
/// baseline report, signed deltas are appended to mIoU cells.
pub fn render_report(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let name_w = report
        .per_domain
        .keys()
        .map(String::len)
        .chain(std::iter::once("mIoU Avg.".len()))
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    out.push_str(&format!("{:name_w$}", "domain"));
    for c in CLASS_NAMES {
        out.push_str(&format!(" {:>6}", &c[..c.len().min(6)]));
    }
    out.push_str("   mIoU\n");
    for (domain, summary) in &report.per_domain {
        out.push_str(&format!("{domain:name_w$}"));
        for iou in &summary.per_class {
            match iou {
                Some(v) => out.push_str(&format!("  {}", pct(*v))),
                // Empty-union class, excluded from the mean.
                None => out.push_str("      -"),
            }
        }
        out.push_str(&format!("  {}", pct(summary.miou)));
        if let Some(base) = baseline.and_then(|b| b.per_domain.get(domain)) {
            out.push_str(&format!(" ({:+.1})", (summary.miou - base.miou) * 100.0));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:name_w$}", "mIoU Avg."));
    for _ in CLASS_NAMES {
        out.push_str("       ");
    }
    out.push_str(&format!("  {}", pct(report.miou_avg)));
    if let Some(base) = baseline {
        out.push_str(&format!(" ({:+.1})", (report.miou_avg - base.miou_avg) * 100.0));
    }
    out.push('\n');
    out
}

/// Machine-readable form: `domain<TAB>class<TAB>iou` lines, then per-domain
/// `miou` rows and a final `all<TAB>miou_avg` row.
pub fn machine_report(report: &EvalReport) -> String {
    let mut out = String::new();
    for (domain, summary) in &report.per_domain {
        for (c, iou) in summary.per_class.iter().enumerate() {
            let value = iou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
            out.push_str(&format!("{domain}\t{}\t{value}\n", CLASS_NAMES[c]));
        }
        out.push_str(&format!("{domain}\tmiou\t{:.6}\n", summary.miou));
    }
    out.push_str(&format!("all\tmiou_avg\t{:.6}\n", report.miou_avg));
    out
}
