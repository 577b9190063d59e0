//! Label-taxonomy remapping: original dataset class ids to the 7 shared
//! super classes. The mapping tables for the four driving datasets ship as
//! tab-separated files under `data/` and are embedded at compile time.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, CLASS_NAMES, IGNORE, NUM_CLASSES};

/// Target of a mapping row: one of the 7 super classes, or a class that is
/// dropped at remap time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuperClass {
    /// Index into [`CLASS_NAMES`].
    Class(u8),
    /// Structurally unlabeled content (borders, ego vehicle, ...).
    Void,
    /// Real content outside the 7 evaluated classes (birds, animals).
    Other,
}

impl SuperClass {
    pub fn parse(s: &str) -> Option<SuperClass> {
        match s {
            "void" => Some(SuperClass::Void),
            "other" => Some(SuperClass::Other),
            name => CLASS_NAMES
                .iter()
                .position(|&c| c == name)
                .map(|i| SuperClass::Class(i as u8)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SuperClass::Class(i) => CLASS_NAMES[*i as usize],
            SuperClass::Void => "void",
            SuperClass::Other => "other",
        }
    }
}

/// One row of a mapping table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub orig_id: i32,
    pub name: String,
    pub used: bool,
    pub super_class: SuperClass,
}

/// Validated mapping of one dataset's original ids to super classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    pub dataset_name: String,
    pub entries: Vec<MappingEntry>,
}

/// Parses and validates a mapping table.
/// Format: `orig_id<TAB>name<TAB>used(0|1)<TAB>super_class`, `#` comments.
pub fn load_mapping(dataset_name: &str, source: &str) -> Result<ClassMapping> {
    let mut entries = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Validation {
                line,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let orig_id: i32 = fields[0].parse().map_err(|_| Error::Validation {
            line,
            msg: format!("orig_id \"{}\" is not an integer", fields[0]),
        })?;
        if !seen_ids.insert(orig_id) {
            return Err(Error::Validation { line, msg: format!("duplicate orig_id {orig_id}") });
        }
        let used = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation {
                    line,
                    msg: format!("used flag must be 0 or 1, got \"{other}\""),
                })
            }
        };
        let super_class = SuperClass::parse(fields[3]).ok_or_else(|| Error::Validation {
            line,
            msg: format!("unknown super class \"{}\"", fields[3]),
        })?;
        if used && !matches!(super_class, SuperClass::Class(_)) {
            return Err(Error::Validation {
                line,
                msg: format!(
                    "used class \"{}\" maps to {}, which is not a super class",
                    fields[1], fields[3]
                ),
            });
        }
        entries.push(MappingEntry { orig_id, name: fields[1].to_string(), used, super_class });
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("mapping table for {dataset_name} has no rows")));
    }
    Ok(ClassMapping { dataset_name: dataset_name.to_string(), entries })
}

impl ClassMapping {
    /// Asserts that every one of the 7 super classes receives at least one
    /// used entry (invariant of the shipped tables).
    pub fn check_full_coverage(&self) -> Result<()> {
        let mut hit = [false; NUM_CLASSES];
        for e in &self.entries {
            if let (true, SuperClass::Class(i)) = (e.used, e.super_class) {
                hit[i as usize] = true;
            }
        }
        for (i, h) in hit.iter().enumerate() {
            if !h {
                return Err(Error::Validation {
                    line: 0,
                    msg: format!(
                        "mapping {} has no used entry for super class {}",
                        self.dataset_name, CLASS_NAMES[i]
                    ),
                });
            }
        }
        Ok(())
    }

    /// Serializes back to the table text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# orig_id\tname\tused\tsuper_class\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.orig_id,
                e.name,
                if e.used { 1 } else { 0 },
                e.super_class.name()
            ));
        }
        out
    }

    pub fn entry(&self, orig_id: i32) -> Option<&MappingEntry> {
        self.entries.iter().find(|e| e.orig_id == orig_id)
    }
}

/// Remaps a label map over original ids to super-class ids; used classes map
/// to their super class, everything else (unused, void, other) to IGNORE.
pub fn remap_labels(mapping: &ClassMapping, labels: &LabelMap) -> Result<LabelMap> {
    let lut: HashMap<i32, u8> = mapping
        .entries
        .iter()
        .map(|e| {
            let target = match (e.used, e.super_class) {
                (true, SuperClass::Class(i)) => i,
                _ => IGNORE,
            };
            (e.orig_id, target)
        })
        .collect();
    let data = labels
        .data
        .iter()
        .map(|&id| {
            lut.get(&(id as i32)).copied().ok_or_else(|| {
                Error::Validation {
                    line: 0,
                    msg: format!(
                        "label id {id} is not in the {} mapping",
                        mapping.dataset_name
                    ),
                }
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(labels.n, labels.h, labels.w, data)
}

/// Names of the four shipped mapping tables.
pub const SHIPPED_DATASETS: [&str; 4] = ["cityscapes", "gta5", "mapillary", "idd"];

/// Loads one of the shipped, compile-time-embedded mapping tables.
pub fn shipped(dataset: &str) -> Result<ClassMapping> {
    let text = match dataset {
        "cityscapes" => include_str!("../data/cityscapes.tsv"),
        "gta5" => include_str!("../data/gta5.tsv"),
        "mapillary" => include_str!("../data/mapillary.tsv"),
        "idd" => include_str!("../data/idd.tsv"),
        other => return Err(Error::Config(format!("no shipped mapping for \"{other}\""))),
    };
    load_mapping(dataset, text)
}

#[cfg(test)]
mod tests;
