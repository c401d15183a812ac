//! Ingestion, normalization, windowing, splitting, missing-value handling,
//! and the grid-to-graph extraction pipeline.

mod extract;
mod grid;
mod series;
mod window;

pub use extract::{extract_graph_from_grid, ExtractParams};
pub use grid::GridMovie;
pub use series::TrafficSeries;
pub use window::{
    chronological_split, impute_inputs, make_windows, prepare_datasets, zscore_normalize,
    NormStats, SplitSpec, WindowSample, WindowedDataset,
};
