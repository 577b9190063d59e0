use super::*;
use crate::labels::{LabelMap, IGNORE};

fn expect(m: &ClassMapping, id: i32, name: &str, used: bool, class: &str) {
    let e = m.entry(id).unwrap_or_else(|| panic!("{}: missing id {id}", m.dataset_name));
    assert_eq!(e.name, name, "{}: id {id}", m.dataset_name);
    assert_eq!(e.used, used, "{}: id {id} used flag", m.dataset_name);
    assert_eq!(e.super_class.name(), class, "{}: id {id} target", m.dataset_name);
}

#[test]
fn shipped_tables_load_and_cover_all_classes() {
    for name in SHIPPED_DATASETS {
        let m = shipped(name).unwrap();
        m.check_full_coverage().unwrap();
    }
}

#[test]
fn cityscapes_spot_rows() {
    let m = shipped("cityscapes").unwrap();
    expect(&m, 0, "unlabeled", false, "void");
    expect(&m, 7, "road", true, "flat");
    expect(&m, 8, "sidewalk", true, "flat");
    expect(&m, 9, "parking", false, "flat");
    expect(&m, 11, "building", true, "construction");
    expect(&m, 17, "pole", true, "object");
    expect(&m, 22, "terrain", true, "nature");
    expect(&m, 23, "sky", true, "sky");
    expect(&m, 24, "person", true, "human");
    expect(&m, 26, "car", true, "vehicle");
    expect(&m, 33, "bicycle", true, "vehicle");
    expect(&m, -1, "license plate", false, "vehicle");
    assert_eq!(m.entries.len(), 35);
}

#[test]
fn gta5_spot_rows() {
    let m = shipped("gta5").unwrap();
    expect(&m, 0, "road", true, "flat");
    expect(&m, 2, "building", true, "construction");
    expect(&m, 5, "pole", true, "object");
    expect(&m, 8, "vegetation", true, "nature");
    expect(&m, 9, "terrain", true, "nature");
    expect(&m, 10, "sky", true, "sky");
    expect(&m, 11, "person", true, "human");
    expect(&m, 13, "car", true, "vehicle");
    expect(&m, 16, "train", true, "vehicle");
    expect(&m, 18, "bicycle", true, "vehicle");
    expect(&m, -1, "unlabeled", false, "void");
    // GTA5 ships the 19 Cityscapes training classes, all used.
    assert_eq!(m.entries.iter().filter(|e| e.used).count(), 19);
}

#[test]
fn mapillary_spot_rows() {
    let m = shipped("mapillary").unwrap();
    expect(&m, 0, "bird", false, "other");
    expect(&m, 13, "road", true, "flat");
    expect(&m, 17, "building", true, "construction");
    expect(&m, 25, "mountain", false, "nature");
    expect(&m, 27, "sky", true, "sky");
    expect(&m, 29, "terrain", true, "flat");
    expect(&m, 30, "vegetation", true, "nature");
    expect(&m, 19, "person", true, "human");
    expect(&m, 45, "pole", true, "object");
    expect(&m, 53, "boat", true, "vehicle");
    expect(&m, 55, "car", true, "vehicle");
    expect(&m, 64, "ego vehicle", false, "void");
}

#[test]
fn idd_spot_rows() {
    let m = shipped("idd").unwrap();
    expect(&m, 0, "road", true, "flat");
    expect(&m, 1, "parking", false, "flat");
    expect(&m, 6, "person", true, "human");
    expect(&m, 7, "animal", false, "other");
    expect(&m, 11, "autorickshaw", true, "vehicle");
    expect(&m, 12, "car", true, "vehicle");
    expect(&m, 19, "curb", true, "construction");
    expect(&m, 26, "pole", true, "object");
    expect(&m, 29, "building", true, "construction");
    expect(&m, 32, "vegetation", true, "nature");
    expect(&m, 33, "sky", true, "sky");
    expect(&m, 39, "license plate", false, "vehicle");
}

#[test]
fn remap_examples() {
    let m = shipped("cityscapes").unwrap();
    // All-road map -> all flat.
    let roads = LabelMap::filled(1, 2, 2, 7);
    assert_eq!(remap_labels(&m, &roads).unwrap().data, vec![0u8; 4]);
    // parking (9) is unused -> IGNORE.
    let mixed = LabelMap::new(1, 1, 3, vec![9, 26, 0]).unwrap();
    assert_eq!(remap_labels(&m, &mixed).unwrap().data, vec![IGNORE, 6, IGNORE]);
    // Mapillary 55 (car) -> vehicle.
    let mp = shipped("mapillary").unwrap();
    let cars = LabelMap::filled(1, 1, 2, 55);
    assert_eq!(remap_labels(&mp, &cars).unwrap().data, vec![6u8, 6]);
    // Unknown id errors naming the id.
    let bad = LabelMap::filled(1, 1, 1, 200);
    let err = remap_labels(&m, &bad).unwrap_err().to_string();
    assert!(err.contains("200"), "{err}");
}

#[test]
fn remap_output_range_and_idempotence() {
    // Identity mapping over the super-class ids themselves.
    let mut text = String::new();
    for (i, name) in crate::labels::CLASS_NAMES.iter().enumerate() {
        text.push_str(&format!("{i}\t{name}\t1\t{name}\n"));
    }
    let ident = load_mapping("identity", &text).unwrap();
    let m = shipped("idd").unwrap();
    let mut orig = Vec::new();
    for id in 0..40u8 {
        orig.push(id);
    }
    let first = remap_labels(&m, &LabelMap::new(1, 5, 8, orig).unwrap()).unwrap();
    assert!(first.data.iter().all(|&v| v < 7 || v == IGNORE));
    // Composing with the identity mapping (IGNORE pixels removed) is a no-op.
    let kept: Vec<u8> = first.data.iter().copied().filter(|&v| v != IGNORE).collect();
    let kept_map = LabelMap::new(1, 1, kept.len(), kept.clone()).unwrap();
    assert_eq!(remap_labels(&ident, &kept_map).unwrap().data, kept);
}

#[test]
fn round_trip_serialization() {
    for name in SHIPPED_DATASETS {
        let m = shipped(name).unwrap();
        let again = load_mapping(name, &m.to_text()).unwrap();
        assert_eq!(m, again, "{name} did not round-trip");
    }
}

#[test]
fn validation_errors_carry_line_numbers() {
    let dup = "1\ta\t1\tflat\n1\tb\t1\tsky\n";
    match load_mapping("x", dup) {
        Err(crate::Error::Validation { line, msg }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("duplicate"));
        }
        other => panic!("expected validation error, got {other:?}"),
    }
    let used_void = "1\ta\t1\tvoid\n";
    assert!(load_mapping("x", used_void).is_err());
    let bad_class = "1\ta\t1\tocean\n";
    assert!(load_mapping("x", bad_class).is_err());
    let bad_flag = "1\ta\t2\tflat\n";
    assert!(load_mapping("x", bad_flag).is_err());
    let short = "1\ta\t1\n";
    assert!(load_mapping("x", short).is_err());
}
