//! Network definitions: the decomposed segmenter (shared feature extractor
//! plus one or more 1x1-conv classifier heads) and the fully-convolutional
//! discriminator, with deterministic fan-in-scaled uniform initialization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{bilinear_upsample, conv2d, leaky_relu, softmax_channel, Tensor};

/// Head id of the single classifier in baseline / Multi-Dis. configurations.
pub const HEAD_MAIN: &str = "main";
/// Head id of the MTKT target-agnostic classifier.
pub const HEAD_AGN: &str = "agn";

/// Head id of the n-th (0-based) MTKT target-specific classifier.
pub fn head_spec(n: usize) -> String {
    format!("spec_{}", n + 1)
}

/// One convolution layer with its hyperparameters.
#[derive(Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// Weights from U(-sqrt(3/fan_in), sqrt(3/fan_in)) so the standard
    /// deviation is sqrt(1/fan_in); biases zero.
    fn init(cout: usize, cin: usize, k: usize, stride: usize, padding: usize, seed: u64) -> ConvLayer {
        let mut rng = Rng::new(seed);
        let fan_in = cin * k * k;
        let bound = (3.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        ConvLayer {
            weight: Tensor::param(&[cout, cin, k, k], w),
            bias: Tensor::param(&[cout], vec![0.0; cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    /// Forward treating this layer's parameters as constants.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight.detach(), &self.bias.detach(), self.stride, self.padding)
    }
}

/// Segmenter architecture description. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub num_classes: usize,
    pub head_ids: Vec<String>,
    pub leaky_slope: f64,
}

impl SegmenterArch {
    /// Desk-scale default extractor: 4 conv blocks, widths 16-32-32-64,
    /// strides 2-1-2-1 (overall stride 4).
    fn default_body(num_classes: usize, head_ids: Vec<String>) -> SegmenterArch {
        SegmenterArch {
            in_channels: 3,
            widths: vec![16, 32, 32, 64],
            strides: vec![2, 1, 2, 1],
            num_classes,
            head_ids,
            leaky_slope: 0.1,
        }
    }

    /// Single-head configuration for baseline and Multi-Dis. training.
    pub fn baseline(num_classes: usize) -> SegmenterArch {
        Self::default_body(num_classes, vec![HEAD_MAIN.to_string()])
    }

    /// MTKT configuration: T target-specific heads plus the agnostic head.
    pub fn mtkt(num_classes: usize, num_targets: usize) -> SegmenterArch {
        let mut heads: Vec<String> = (0..num_targets).map(head_spec).collect();
        heads.push(HEAD_AGN.to_string());
        Self::default_body(num_classes, heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config("segmenter widths/strides length mismatch".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("segmenter channel widths must be positive".into()));
        }
        if self.head_ids.is_empty() {
            return Err(Error::Config("segmenter needs at least one head".into()));
        }
        Ok(())
    }
}

/// Soft-segmentation output of one head: per-pixel class probabilities and
/// the (upsampled) logits they came from.
pub struct SoftMaps {
    pub probs: Tensor,
    pub logits: Tensor,
}

/// Feature extractor F_feat plus classifier heads, all trainable.
pub struct SegmenterParams {
    pub arch: SegmenterArch,
    pub feat: Vec<ConvLayer>,
    pub heads: BTreeMap<String, ConvLayer>,
}

impl SegmenterParams {
    pub fn init(arch: &SegmenterArch, seed: u64) -> Result<SegmenterParams> {
        arch.validate()?;
        let mut feat = Vec::new();
        let mut cin = arch.in_channels;
        for (i, (&w, &s)) in arch.widths.iter().zip(&arch.strides).enumerate() {
            feat.push(ConvLayer::init(w, cin, 3, s, 1, derive_seed(seed, 1, i as u64)));
            cin = w;
        }
        let mut heads = BTreeMap::new();
        for (i, id) in arch.head_ids.iter().enumerate() {
            heads.insert(
                id.clone(),
                ConvLayer::init(arch.num_classes, cin, 1, 1, 0, derive_seed(seed, 2, i as u64)),
            );
        }
        Ok(SegmenterParams { arch: arch.clone(), feat, heads })
    }

    /// Shared feature extraction; the same output feeds every head.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = batch.clone();
        for layer in &self.feat {
            x = leaky_relu(&layer.forward(&x)?, self.arch.leaky_slope);
        }
        Ok(x)
    }

    /// Head classification over precomputed features, upsampled to
    /// (out_h, out_w) before the softmax.
    pub fn head_soft_maps(
        &self,
        features: &Tensor,
        head_id: &str,
        out_h: usize,
        out_w: usize,
    ) -> Result<SoftMaps> {
        let head = self
            .heads
            .get(head_id)
            .ok_or_else(|| Error::Config(format!("unknown head '{head_id}'")))?;
        let logits = bilinear_upsample(&head.forward(features)?, out_h, out_w);
        let probs = softmax_channel(&logits);
        Ok(SoftMaps { probs, logits })
    }

    /// Full forward pass of one head on an [N,3,H,W] batch.
    pub fn forward(&self, batch: &Tensor, head_id: &str) -> Result<SoftMaps> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::Dimension(format!(
                "segmenter expects [N,{},H,W], got {s:?}",
                self.arch.in_channels
            )));
        }
        let feats = self.features(batch)?;
        self.head_soft_maps(&feats, head_id, s[2], s[3])
    }

    pub fn feat_named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.feat.iter().enumerate() {
            out.push((format!("feat.{i}.weight"), l.weight.clone()));
            out.push((format!("feat.{i}.bias"), l.bias.clone()));
        }
        out
    }

    pub fn head_named_params(&self, head_id: &str) -> Vec<(String, Tensor)> {
        match self.heads.get(head_id) {
            Some(l) => vec![
                (format!("head.{head_id}.weight"), l.weight.clone()),
                (format!("head.{head_id}.bias"), l.bias.clone()),
            ],
            None => Vec::new(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.feat_named_params();
        for id in self.heads.keys() {
            out.extend(self.head_named_params(id));
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

/// Discriminator architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl DiscriminatorArch {
    /// Default: 4 stride-2 conv blocks, widths 16-32-64-1, leaky slope 0.2.
    pub fn default_for(num_classes: usize) -> DiscriminatorArch {
        DiscriminatorArch { in_channels: num_classes, widths: vec![16, 32, 64, 1], leaky_slope: 0.2 }
    }
}

/// Fully-convolutional binary classifier over prediction-space maps;
/// outputs a raw logit map (no final sigmoid).
pub struct DiscriminatorParams {
    pub arch: DiscriminatorArch,
    pub layers: Vec<ConvLayer>,
}

impl DiscriminatorParams {
    pub fn init(arch: &DiscriminatorArch, seed: u64) -> Result<DiscriminatorParams> {
        if arch.widths.last() != Some(&1) {
            return Err(Error::Config("discriminator must end in a 1-channel logit map".into()));
        }
        let mut layers = Vec::new();
        let mut cin = arch.in_channels;
        for (i, &w) in arch.widths.iter().enumerate() {
            layers.push(ConvLayer::init(w, cin, 3, 2, 1, derive_seed(seed, 3, i as u64)));
            cin = w;
        }
        Ok(DiscriminatorParams { arch: arch.clone(), layers })
    }

    fn run(&self, q: &Tensor, frozen: bool) -> Result<Tensor> {
        let s = q.shape();
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::Dimension(format!(
                "discriminator expects [N,{},H,W], got {s:?}",
                self.arch.in_channels
            )));
        }
        let mut x = q.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = if frozen { layer.forward_frozen(&x)? } else { layer.forward(&x)? };
            if i != last {
                x = leaky_relu(&x, self.arch.leaky_slope);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, q: &Tensor) -> Result<Tensor> {
        self.run(q, false)
    }

    /// Forward with parameters treated as constants; gradients flow to the
    /// input only.
    pub fn forward_frozen(&self, q: &Tensor) -> Result<Tensor> {
        self.run(q, true)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layer.{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}layer.{i}.bias"), l.bias.clone()));
        }
        out
    }
}

/// Indexed discriminator sets: source-target D^s-t_n and target-target D^t_n.
pub struct DiscriminatorBank {
    pub source_target: BTreeMap<usize, DiscriminatorParams>,
    pub target_target: BTreeMap<usize, DiscriminatorParams>,
}

impl DiscriminatorBank {
    pub fn empty() -> DiscriminatorBank {
        DiscriminatorBank { source_target: BTreeMap::new(), target_target: BTreeMap::new() }
    }

    /// One source-target discriminator (baseline single-target setup).
    pub fn single(num_classes: usize, seed: u64) -> Result<DiscriminatorBank> {
        let arch = DiscriminatorArch::default_for(num_classes);
        let mut st = BTreeMap::new();
        st.insert(0, DiscriminatorParams::init(&arch, derive_seed(seed, 10, 0))?);
        Ok(DiscriminatorBank { source_target: st, target_target: BTreeMap::new() })
    }

    /// T source-target plus T target-target discriminators (Multi-Dis.).
    pub fn multidis(num_classes: usize, num_targets: usize, seed: u64) -> Result<DiscriminatorBank> {
        let arch = DiscriminatorArch::default_for(num_classes);
        let mut st = BTreeMap::new();
        let mut tt = BTreeMap::new();
        for n in 0..num_targets {
            st.insert(n, DiscriminatorParams::init(&arch, derive_seed(seed, 10, n as u64))?);
            tt.insert(n, DiscriminatorParams::init(&arch, derive_seed(seed, 11, n as u64))?);
        }
        Ok(DiscriminatorBank { source_target: st, target_target: tt })
    }

    /// T source-target discriminators, no target-target ones (MTKT).
    pub fn mtkt(num_classes: usize, num_targets: usize, seed: u64) -> Result<DiscriminatorBank> {
        let arch = DiscriminatorArch::default_for(num_classes);
        let mut st = BTreeMap::new();
        for n in 0..num_targets {
            st.insert(n, DiscriminatorParams::init(&arch, derive_seed(seed, 10, n as u64))?);
        }
        Ok(DiscriminatorBank { source_target: st, target_target: BTreeMap::new() })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, d) in &self.source_target {
            out.extend(d.named_params(&format!("disc.st.{n}.")));
        }
        for (n, d) in &self.target_target {
            out.extend(d.named_params(&format!("disc.tt.{n}.")));
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}
