//! The bundled replication dataset, factor mapping and reference table.

/// Coded effect sizes, one row per (sample, raw variable).
pub const DATASET_CSV: &str = include_str!("../data/dataset.csv");

/// Raw variable name to canonical factor table.
pub const MAPPING_CSV: &str = include_str!("../data/mapping.csv");

/// Expected report cells with per-cell tolerances.
pub const REFERENCE_CSV: &str = include_str!("../data/reference.csv");
