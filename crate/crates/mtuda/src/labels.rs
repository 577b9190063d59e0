//! Dense per-pixel class-id maps.

use crate::error::{Error, Result};

/// Sentinel for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Number of shared super classes.
pub const NUM_CLASSES: usize = 7;

/// Super-class names in their fixed index order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["flat", "construction", "object", "nature", "sky", "human", "vehicle"];

/// [N,H,W] map of class ids (or IGNORE), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != n * h * w {
            return Err(Error::Dimension(format!(
                "label map of {n}x{h}x{w} needs {} entries, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> LabelMap {
        LabelMap { n, h, w, data: vec![value; n * h * w] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_ignored(&self) -> bool {
        self.data.iter().all(|&v| v == IGNORE)
    }

    /// Stacks single-image maps ([1,H,W]) into one batch map.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let (h, w) = (maps[0].h, maps[0].w);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (h, w) {
                return Err(Error::Dimension("stack: mixed label map sizes".into()));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        LabelMap::new(n, h, w, data)
    }
}
