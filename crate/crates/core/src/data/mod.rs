//! Observation tables, terrain rasters and the site-wise fold protocol.

mod folds;
mod observations;
mod raster;

pub use folds::{fold_map, split_folds_by_site, subsample_hourly, FoldRoles};
pub use observations::{
    format_timestamp, load_observations, parse_timestamp, read_observations, write_observations, LoadReport, Observation, ObservationTable,
    SiteIndex,
};
pub use raster::{extract_patch, parse_ascii_grid, read_ascii_grid, write_ascii_grid, Patch, TerrainGrid};
