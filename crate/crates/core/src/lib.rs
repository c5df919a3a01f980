//! Deterministic engine for producing and evaluating agricultural field-boundary maps.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`raster`] – grids, geotransforms, windows, softmax/argmax, normalization.
//! 2. [`synth`] – seeded synthetic field worlds and stub model backends.
//! 3. [`tiler`] – overlapping patch enumeration, Gaussian apodization, stitching.
//! 4. [`instances`] – connected components, blockwise polygonization, field statistics.
//! 5. [`metrics`] – pixel metrics, instance matching, object P/R/F1, COCO-style AP.
//! 6. [`robustness`] – translation consistency and input-order, preprocessing
//!    and scale sensitivity.
//! 7. [`losses`] – segmentation loss family with analytic gradients.
//! 8. [`mosaic`] – season windows, scene prefiltering, greedy scene selection,
//!    median compositing.
//! 9. [`change`] – multi-year change magnitude and masks.
//!
//! [`io`] handles the `.fsr` raster container and GeoJSON output; [`report`]
//! holds the serializable run report and throughput accounting.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod change;
pub mod error;
pub mod instances;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mosaic;
pub mod raster;
pub mod report;
pub mod rng;
pub mod robustness;
pub mod synth;
pub mod tiler;

pub use error::{Error, Result};
pub use instances::{FieldInstance, FieldStats, InstanceIdMap};
pub use metrics::{APResult, MatchResult, PixelMetrics};
pub use raster::{
    BandStack, GeoTransform, LabelMask, LogitMap, NormalizationSpec, ProbMap, Window,
    BACKGROUND, BOUNDARY, INTERIOR, UNKNOWN,
};
pub use report::{MetricReport, RunConfig};
pub use tiler::{ModelBackend, Patch, TilingSpec};

/// Engine version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
