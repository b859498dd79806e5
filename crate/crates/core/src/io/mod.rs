//! File formats: IDX datasets, run configs, checkpoints, CSV and PGM export.

pub mod idx;

pub mod checkpoint;
pub mod config;
pub mod export;
