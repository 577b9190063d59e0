//! Procedural multi-domain urban-scene stand-ins.
//!
//! Each scene is a layered composition — sky band, ground band, a
//! construction/nature skyline, poles, humans and vehicles — with exact
//! ground-truth labels by construction. The domain gap is factored into
//! appearance shift (palette, hue, brightness, noise, grain) and content
//! shift (class frequency bias): layout flows from one rng stream that only
//! reads the frequency bias, rendering from a second stream, so two specs
//! differing only in appearance produce identical label maps for the same
//! seed.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, NUM_CLASSES};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Generation recipe for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Base RGB color per super class, components in [0,1].
    pub palette: [[f64; 3]; NUM_CLASSES],
    /// Hue rotation in degrees applied to every rendered pixel.
    pub hue_shift: f64,
    /// Global brightness multiplier (> 0).
    pub brightness: f64,
    /// Std-dev of per-pixel Gaussian noise and of the per-block grain offset.
    pub noise_sigma: f64,
    /// Relative prevalence of each super class (>= 0, at least 3 nonzero).
    pub class_frequency_bias: [f64; NUM_CLASSES],
    /// Side length in pixels of the grain blocks (>= 1).
    pub texture_grain: u32,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.brightness <= 0.0 {
            return Err(Error::Config(format!(
                "domain {}: brightness must be > 0",
                self.domain_id
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "domain {}: noise_sigma must be >= 0",
                self.domain_id
            )));
        }
        if self.texture_grain == 0 {
            return Err(Error::Config(format!(
                "domain {}: texture_grain must be >= 1",
                self.domain_id
            )));
        }
        if self.class_frequency_bias.iter().any(|&b| b < 0.0) {
            return Err(Error::Config(format!(
                "domain {}: class_frequency_bias entries must be >= 0",
                self.domain_id
            )));
        }
        let nonzero = self.class_frequency_bias.iter().filter(|&&b| b > 0.0).count();
        if nonzero < 3 {
            return Err(Error::Config(format!(
                "domain {}: class_frequency_bias needs at least 3 nonzero entries, got {nonzero}",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Named preset specs, desk-scale analogs of the four driving datasets.
pub fn preset(name: &str) -> Result<DomainSpec> {
    let spec = match name {
        // Saturated source-like palette.
        "synth" => DomainSpec {
            domain_id: "synth".into(),
            palette: [
                [0.50, 0.25, 0.50], // flat
                [0.27, 0.27, 0.27], // construction
                [0.60, 0.60, 0.20], // object
                [0.13, 0.56, 0.13], // nature
                [0.27, 0.51, 0.71], // sky
                [0.86, 0.08, 0.24], // human
                [0.00, 0.00, 0.56], // vehicle
            ],
            hue_shift: 0.0,
            brightness: 1.0,
            noise_sigma: 0.02,
            class_frequency_bias: [0.28, 0.22, 0.06, 0.14, 0.16, 0.05, 0.09],
            texture_grain: 4,
        },
        // Muted, low-noise city.
        "euro" => DomainSpec {
            domain_id: "euro".into(),
            palette: [
                [0.45, 0.40, 0.45],
                [0.35, 0.33, 0.32],
                [0.55, 0.55, 0.35],
                [0.25, 0.45, 0.25],
                [0.55, 0.60, 0.68],
                [0.65, 0.25, 0.30],
                [0.15, 0.15, 0.40],
            ],
            hue_shift: -10.0,
            brightness: 0.9,
            noise_sigma: 0.008,
            class_frequency_bias: [0.30, 0.24, 0.06, 0.12, 0.14, 0.05, 0.09],
            texture_grain: 4,
        },
        // Warm hue, object/vehicle heavy streets.
        "india" => DomainSpec {
            domain_id: "india".into(),
            palette: [
                [0.55, 0.40, 0.30],
                [0.55, 0.45, 0.35],
                [0.70, 0.60, 0.25],
                [0.25, 0.50, 0.20],
                [0.70, 0.65, 0.55],
                [0.80, 0.30, 0.20],
                [0.30, 0.25, 0.20],
            ],
            hue_shift: 25.0,
            brightness: 1.05,
            noise_sigma: 0.03,
            class_frequency_bias: [0.26, 0.18, 0.10, 0.10, 0.14, 0.08, 0.14],
            texture_grain: 3,
        },
        // High-variance everything.
        "world" => DomainSpec {
            domain_id: "world".into(),
            palette: [
                [0.40, 0.35, 0.40],
                [0.50, 0.40, 0.45],
                [0.60, 0.55, 0.30],
                [0.20, 0.55, 0.30],
                [0.40, 0.55, 0.75],
                [0.75, 0.35, 0.35],
                [0.20, 0.20, 0.50],
            ],
            hue_shift: 40.0,
            brightness: 1.1,
            noise_sigma: 0.05,
            class_frequency_bias: [0.25, 0.20, 0.08, 0.15, 0.14, 0.06, 0.12],
            texture_grain: 8,
        },
        other => return Err(Error::Config(format!("unknown domain preset \"{other}\""))),
    };
    spec.validate().expect("shipped preset must validate");
    Ok(spec)
}

/// One rendered scene with its exact ground-truth labels.
#[derive(Debug, Clone)]
pub struct Scene {
    /// RGB image, shape [3,H,W], values in [0,1].
    pub image: Tensor,
    /// [1,H,W] map over {0..6}.
    pub labels: LabelMap,
    pub domain_id: String,
}

/// Collection of scenes from one (possibly merged) domain.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub scenes: Vec<Scene>,
    /// Whether labels may be consumed by training code.
    pub labeled: bool,
    pub domain_id: String,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Ground-truth access for the training path: refuses on unlabeled sets.
    /// Evaluation code reads `scene.labels` directly instead.
    pub fn train_labels(&self, index: usize) -> Result<&LabelMap> {
        if !self.labeled {
            return Err(Error::Contract(format!(
                "domain {} is unlabeled; its ground truth is reserved for evaluation",
                self.domain_id
            )));
        }
        Ok(&self.scenes[index].labels)
    }

    /// Splits off the last `val_count` scenes as a validation set.
    pub fn split(&self, val_count: usize) -> Result<(DomainDataset, DomainDataset)> {
        if val_count == 0 || val_count >= self.len() {
            return Err(Error::Config(format!(
                "split of {} scenes into validation size {val_count} leaves an empty side",
                self.len()
            )));
        }
        let cut = self.len() - val_count;
        let train = DomainDataset {
            scenes: self.scenes[..cut].to_vec(),
            labeled: self.labeled,
            domain_id: self.domain_id.clone(),
        };
        let val = DomainDataset {
            scenes: self.scenes[cut..].to_vec(),
            labeled: true,
            domain_id: self.domain_id.clone(),
        };
        Ok((train, val))
    }
}

const SKY: u8 = 4;
const FLAT: u8 = 0;
const CONSTRUCTION: u8 = 1;
const NATURE: u8 = 3;
const OBJECT: u8 = 2;
const HUMAN: u8 = 5;
const VEHICLE: u8 = 6;

fn paint_rect(labels: &mut [u8], w: usize, x0: usize, y0: usize, rw: usize, rh: usize, class: u8) {
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            labels[y * w + x] = class;
        }
    }
}

/// Label-map layout; reads only h, w, the seed and the class frequency bias.
fn generate_labels(spec: &DomainSpec, seed: u64, h: usize, w: usize) -> Vec<u8> {
    let mut rng = Rng::new(derive_seed(seed, 1, 0));
    let total = h * w;
    let sum: f64 = spec.class_frequency_bias.iter().sum();
    let frac: Vec<f64> = spec.class_frequency_bias.iter().map(|b| b / sum).collect();

    // Horizontal bands: sky on top, flat ground at the bottom, with a little
    // per-scene jitter. The middle band keeps at least a quarter of the rows.
    let jitter = |rng: &mut Rng| rng.below(3) as isize - 1;
    let mut sky_h = ((frac[SKY as usize] * h as f64).round() as isize + jitter(&mut rng))
        .clamp(0, (h / 2) as isize) as usize;
    let mut flat_h = ((frac[FLAT as usize] * h as f64).round() as isize + jitter(&mut rng))
        .clamp(0, (h / 2) as isize) as usize;
    let min_mid = h / 4;
    while h - sky_h - flat_h < min_mid {
        if sky_h >= flat_h && sky_h > 0 {
            sky_h -= 1;
        } else if flat_h > 0 {
            flat_h -= 1;
        } else {
            break;
        }
    }
    let mid_top = sky_h;
    let mid_bot = h - flat_h; // exclusive
    let mid_h = mid_bot - mid_top;

    let mut labels = vec![FLAT; total];
    for p in 0..sky_h * w {
        labels[p] = SKY;
    }

    // Middle background: the heavier of construction/nature fills the band,
    // the lighter one is painted on top as blobs up to its area quota.
    let (fc, fn_) = (frac[CONSTRUCTION as usize], frac[NATURE as usize]);
    let (bg, fg, fg_frac) = if fc >= fn_ {
        (CONSTRUCTION, NATURE, fn_)
    } else {
        (NATURE, CONSTRUCTION, fc)
    };
    if fc > 0.0 || fn_ > 0.0 {
        for y in mid_top..mid_bot {
            for x in 0..w {
                labels[y * w + x] = bg;
            }
        }
        let quota = (fg_frac * total as f64).round() as usize;
        let mut painted = 0usize;
        let mut attempts = 0usize;
        while painted < quota && attempts < 8 * quota + 64 {
            attempts += 1;
            let rw = 3 + rng.below(8).min(w.saturating_sub(4));
            let rh = (3 + rng.below(8)).min(mid_h);
            if rw > w || rh > mid_h {
                continue;
            }
            let x0 = rng.below(w - rw + 1);
            let y0 = mid_top + rng.below(mid_h - rh + 1);
            paint_rect(&mut labels, w, x0, y0, rw, rh, fg);
            painted += rw * rh;
        }
    }

    // Small foreground classes, painted to their area quotas inside the
    // middle band: poles, then vehicles and humans near the band's bottom.
    let shapes: [(u8, usize, usize, usize, usize); 3] = [
        (OBJECT, 1, 2, mid_h / 2, mid_h),    // thin tall poles
        (VEHICLE, 3, 7, 2, 4),               // wide low boxes
        (HUMAN, 1, 2, 2, 4),                 // narrow low boxes
    ];
    for (class, w_lo, w_hi, h_lo, h_hi) in shapes {
        let quota = (frac[class as usize] * total as f64).round() as usize;
        let mut painted = 0usize;
        let mut attempts = 0usize;
        while painted < quota && attempts < 8 * quota + 64 {
            attempts += 1;
            let rw = (w_lo + rng.below(w_hi - w_lo + 1)).min(w);
            let rh = (h_lo.max(1) + rng.below(h_hi - h_lo.max(1) + 1)).min(mid_h.max(1));
            if rh > mid_h || rw > w || mid_h == 0 {
                break;
            }
            let x0 = rng.below(w - rw + 1);
            // Ground-dwelling classes sit at the bottom of the middle band.
            let y0 = if class == OBJECT {
                mid_top + rng.below(mid_h - rh + 1)
            } else {
                mid_bot - rh
            };
            paint_rect(&mut labels, w, x0, y0, rw, rh, class);
            painted += rw * rh;
        }
    }
    labels
}

/// Hue-rotation matrix (degrees), identity at 0.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let a = degrees.to_radians();
    let (c, s) = (a.cos(), a.sin());
    [
        [
            0.213 + 0.787 * c - 0.213 * s,
            0.715 - 0.715 * c - 0.715 * s,
            0.072 - 0.072 * c + 0.787 * s,
        ],
        [
            0.213 - 0.213 * c + 0.143 * s,
            0.715 + 0.285 * c + 0.140 * s,
            0.072 - 0.072 * c - 0.283 * s,
        ],
        [
            0.213 - 0.213 * c - 0.787 * s,
            0.715 - 0.715 * c + 0.715 * s,
            0.072 + 0.928 * c + 0.072 * s,
        ],
    ]
}

/// Rendering; reads the seed and all appearance fields, never the layout rng.
fn render_image(spec: &DomainSpec, labels: &[u8], seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = Rng::new(derive_seed(seed, 2, 0));
    let m = hue_matrix(spec.hue_shift);
    let shifted: Vec<[f64; 3]> = spec
        .palette
        .iter()
        .map(|rgb| {
            let mut out = [0.0; 3];
            for (i, row) in m.iter().enumerate() {
                out[i] = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]) * spec.brightness;
            }
            out
        })
        .collect();

    // Per-block grain offsets, drawn in block order independent of content.
    let g = spec.texture_grain as usize;
    let (bh, bw) = (h.div_ceil(g), w.div_ceil(g));
    let grain: Vec<f64> =
        (0..bh * bw).map(|_| rng.normal() * spec.noise_sigma).collect();

    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let base = shifted[labels[p] as usize];
            let offset = grain[(y / g) * bw + x / g];
            for ch in 0..3 {
                let noise = rng.normal() * spec.noise_sigma;
                image[ch * h * w + p] = (base[ch] + offset + noise).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Generates one scene, deterministic in (spec, seed).
pub fn generate_scene(spec: &DomainSpec, seed: u64, h: usize, w: usize) -> Result<Scene> {
    spec.validate()?;
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("scene size {h}x{w} below the 32x32 minimum")));
    }
    let labels = generate_labels(spec, seed, h, w);
    let image = render_image(spec, &labels, seed, h, w);
    Ok(Scene {
        image: Tensor::from_values(&[3, h, w], image),
        labels: LabelMap::new(1, h, w, labels)?,
        domain_id: spec.domain_id.clone(),
    })
}

/// Generates `n` scenes with per-scene seeds derived from (seed, index).
pub fn generate_dataset(
    spec: &DomainSpec,
    n: usize,
    seed: u64,
    h: usize,
    w: usize,
    labeled: bool,
) -> Result<DomainDataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    let scenes = (0..n)
        .map(|i| generate_scene(spec, derive_seed(seed, 3, i as u64), h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDataset { scenes, labeled, domain_id: spec.domain_id.clone() })
}

/// Concatenates datasets in interleaved round-robin order:
/// d1[0], d2[0], ..., d1[1], d2[1], ...; per-scene domain ids are preserved.
pub fn merge_datasets(datasets: &[DomainDataset]) -> Result<DomainDataset> {
    if datasets.is_empty() {
        return Err(Error::Contract("merge_datasets on empty list".into()));
    }
    let labeled = datasets[0].labeled;
    if datasets.iter().any(|d| d.labeled != labeled) {
        return Err(Error::Contract(
            "merge_datasets: mixed labeled/unlabeled datasets".into(),
        ));
    }
    let longest = datasets.iter().map(DomainDataset::len).max().unwrap();
    let mut scenes = Vec::with_capacity(datasets.iter().map(DomainDataset::len).sum());
    for i in 0..longest {
        for d in datasets {
            if i < d.len() {
                scenes.push(d.scenes[i].clone());
            }
        }
    }
    let domain_id = datasets
        .iter()
        .map(|d| d.domain_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(DomainDataset { scenes, labeled, domain_id })
}

const IMG_MAGIC: &[u8; 6] = b"MTIMG1";
const LBL_MAGIC: &[u8; 6] = b"MTLBL1";

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    if end > buf.len() {
        return Err(Error::Format("truncated file: missing u32".into()));
    }
    let v = u32::from_le_bytes(buf[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

/// Serializes an image tensor: magic, (c,h,w) as u32 LE, values as f64 LE.
pub fn encode_image(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    assert_eq!(s.len(), 3, "scene images are [C,H,W]");
    let mut out = Vec::with_capacity(6 + 12 + image.numel() * 8);
    out.extend_from_slice(IMG_MAGIC);
    for d in s {
        write_u32(&mut out, *d as u32);
    }
    for v in image.values().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 6 || &buf[..6] != IMG_MAGIC {
        return Err(Error::Format("bad image magic (expected MTIMG1)".into()));
    }
    let mut pos = 6;
    let c = read_u32(buf, &mut pos)? as usize;
    let h = read_u32(buf, &mut pos)? as usize;
    let w = read_u32(buf, &mut pos)? as usize;
    let n = c * h * w;
    if buf.len() != pos + n * 8 {
        return Err(Error::Format(format!(
            "image payload is {} bytes, expected {}",
            buf.len() - pos,
            n * 8
        )));
    }
    let values = buf[pos..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_values(&[c, h, w], values))
}

/// Serializes a label map: magic, (n,h,w) as u32 LE, one byte per pixel.
pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 12 + labels.numel());
    out.extend_from_slice(LBL_MAGIC);
    write_u32(&mut out, labels.n as u32);
    write_u32(&mut out, labels.h as u32);
    write_u32(&mut out, labels.w as u32);
    out.extend_from_slice(&labels.data);
    out
}

pub fn decode_labels(buf: &[u8]) -> Result<LabelMap> {
    if buf.len() < 6 || &buf[..6] != LBL_MAGIC {
        return Err(Error::Format("bad label magic (expected MTLBL1)".into()));
    }
    let mut pos = 6;
    let n = read_u32(buf, &mut pos)? as usize;
    let h = read_u32(buf, &mut pos)? as usize;
    let w = read_u32(buf, &mut pos)? as usize;
    if buf.len() != pos + n * h * w {
        return Err(Error::Format(format!(
            "label payload is {} bytes, expected {}",
            buf.len() - pos,
            n * h * w
        )));
    }
    LabelMap::new(n, h, w, buf[pos..].to_vec())
}

/// Writes a dataset as paired image/label files plus a manifest.
pub fn export_dataset(dataset: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("# domain_id = {}\n", dataset.domain_id));
    manifest.push_str(&format!("# labeled = {}\n", if dataset.labeled { 1 } else { 0 }));
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let img_name = format!("scene_{i:05}.img");
        let lbl_name = format!("scene_{i:05}.lbl");
        fs::write(dir.join(&img_name), encode_image(&scene.image))?;
        fs::write(dir.join(&lbl_name), encode_labels(&scene.labels))?;
        manifest.push_str(&format!("{i}\t{}\t{img_name}\t{lbl_name}\n", scene.domain_id));
    }
    let mut f = fs::File::create(dir.join("manifest.tsv"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Reads a dataset previously written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<DomainDataset> {
    let mut manifest = String::new();
    fs::File::open(dir.join("manifest.tsv"))?.read_to_string(&mut manifest)?;
    let mut domain_id = String::new();
    let mut labeled = false;
    let mut scenes = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut kv = rest.splitn(2, '=');
            let key = kv.next().unwrap_or("").trim();
            let value = kv.next().unwrap_or("").trim();
            match key {
                "domain_id" => domain_id = value.to_string(),
                "labeled" => labeled = value == "1",
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Validation {
                line: lineno + 1,
                msg: format!("manifest row needs 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let image = decode_image(&fs::read(dir.join(fields[2]))?)?;
        let labels = decode_labels(&fs::read(dir.join(fields[3]))?)?;
        scenes.push(Scene { image, labels, domain_id: fields[1].to_string() });
    }
    if scenes.is_empty() {
        return Err(Error::Format("manifest lists no scenes".into()));
    }
    Ok(DomainDataset { scenes, labeled, domain_id })
}
