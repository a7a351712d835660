//! File formats: NIfTI-1 volumes, JSON configuration, CSV diagnostics.

pub mod config;
pub mod diagnostics;
pub mod nifti;

pub use config::RunConfig;
pub use diagnostics::{diagnostics_csv, write_diagnostics, CSV_COLUMNS};
pub use nifti::{
    read_displacement, read_labels, read_scalar, read_velocity, read_volume, write_volume, write_volume_as, Expect,
    Orientation, Volume, VolumeRef,
};
