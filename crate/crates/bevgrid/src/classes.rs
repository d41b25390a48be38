//! The fixed semantic and detection class vocabularies.
//!
//! Semantic ids label voxels and points: id 0 is reserved for empty space,
//! ids 1-16 cover foreground objects and flat/static surfaces. Detection ids
//! 0-9 name the box categories and map into the semantic list via
//! [`detection_to_semantic`]. Both tables are frozen — file formats and
//! evaluation reports refer to these integers.

/// Number of semantic classes including `empty` (id 0).
pub const NUM_SEMANTIC_CLASSES: u16 = 17;

/// Semantic class names, indexed by id.
pub const SEMANTIC_NAMES: [&str; 17] = [
    "empty",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

/// Semantic ids by name.
pub mod semantic {
    pub const EMPTY: u16 = 0;
    pub const BARRIER: u16 = 1;
    pub const BICYCLE: u16 = 2;
    pub const BUS: u16 = 3;
    pub const CAR: u16 = 4;
    pub const CONSTRUCTION_VEHICLE: u16 = 5;
    pub const MOTORCYCLE: u16 = 6;
    pub const PEDESTRIAN: u16 = 7;
    pub const TRAFFIC_CONE: u16 = 8;
    pub const TRAILER: u16 = 9;
    pub const TRUCK: u16 = 10;
    pub const DRIVEABLE_SURFACE: u16 = 11;
    pub const OTHER_FLAT: u16 = 12;
    pub const SIDEWALK: u16 = 13;
    pub const TERRAIN: u16 = 14;
    pub const MANMADE: u16 = 15;
    pub const VEGETATION: u16 = 16;
}

/// Detection class names, indexed by detection id.
pub const DETECTION_NAMES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

/// Detection ids by name.
pub mod detection {
    pub const CAR: u8 = 0;
    pub const TRUCK: u8 = 1;
    pub const CONSTRUCTION_VEHICLE: u8 = 2;
    pub const BUS: u8 = 3;
    pub const TRAILER: u8 = 4;
    pub const BARRIER: u8 = 5;
    pub const MOTORCYCLE: u8 = 6;
    pub const BICYCLE: u8 = 7;
    pub const PEDESTRIAN: u8 = 8;
    pub const TRAFFIC_CONE: u8 = 9;
}

/// Semantic id of a detection class (points on a detected object carry this
/// label).
pub fn detection_to_semantic(det: u8) -> u16 {
    match det {
        0 => semantic::CAR,
        1 => semantic::TRUCK,
        2 => semantic::CONSTRUCTION_VEHICLE,
        3 => semantic::BUS,
        4 => semantic::TRAILER,
        5 => semantic::BARRIER,
        6 => semantic::MOTORCYCLE,
        7 => semantic::BICYCLE,
        8 => semantic::PEDESTRIAN,
        9 => semantic::TRAFFIC_CONE,
        _ => panic!("detection id {det} out of range"),
    }
}
