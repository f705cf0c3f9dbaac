//! Overlapping window tiling for large multi-channel 2D/3D tensors.
//!
//! The crate covers the full patch workflow:
//!
//! - [`geometry`] plans window placements and per-placement weight maps,
//! - [`subsample`] cuts windows out of tensors (materialized or streamed),
//! - [`curate`] masks label borders, drops unannotated pairs and reports
//!   annotation duplication,
//! - [`stitch`] reassembles per-patch results through on-disk weighted
//!   mean and normalization accumulators,
//! - [`store`] is the uncompressed zarr v2 chunk store underneath.

pub mod cli;
pub mod curate;
pub mod error;
pub mod geometry;
mod region;
pub mod stitch;
pub mod store;
pub mod subsample;

pub use curate::{
    duplication_rate, filter_unlabeled, mask_border, CurationReport, LabelConvention,
};
pub use error::{Error, Result};
pub use geometry::{
    axis_positions, build_plan, weight_map, PatchPlan, Placement, TensorLayout, WeightMap,
    WindowSpec,
};
pub use stitch::{create_accumulators, stitch_stream, Accumulators, StitchPolicy, ZeroCoverage};
pub use store::{chunk_key, ArrayMetadata, ChunkedArray};
pub use subsample::{
    extract, extract_pair, patch_region, patches, DenseTensor, PatchStack, WindowSource,
};
