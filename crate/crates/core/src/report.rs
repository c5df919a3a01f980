//! Run configuration echo, metric reports and throughput accounting.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{APResult, ObjectPrf, PixelMetrics};
use crate::raster::GeoTransform;
use crate::robustness::RobustnessSummary;

pub const SCHEMA_VERSION: u32 = 1;

/// Monotonic seconds source; injectable so throughput can be tested.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        use std::sync::OnceLock;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_secs_f64()
    }
}

/// Clock that advances by a fixed step on every read.
#[derive(Debug)]
pub struct FakeClock {
    start: f64,
    step: f64,
    reads: AtomicU64,
}

impl FakeClock {
    pub fn stepping(start: f64, step: f64) -> Self {
        FakeClock {
            start,
            step,
            reads: AtomicU64::new(0),
        }
    }
}

impl Clock for FakeClock {
    fn now(&self) -> f64 {
        let k = self.reads.fetch_add(1, Ordering::SeqCst);
        self.start + k as f64 * self.step
    }
}

/// Ground area of `pixels` cells under `geotransform`, in km² (map units assumed metres).
pub fn area_km2(pixels: usize, geotransform: &GeoTransform) -> f64 {
    pixels as f64 * geotransform.pixel_area() / 1e6
}

/// Processed area per wall-clock second.
pub fn measure_throughput(area_km2: f64, wall_seconds: f64) -> Result<f64> {
    if !(wall_seconds > 0.0) {
        return Err(Error::invalid(format!(
            "wall time must be positive, got {wall_seconds}"
        )));
    }
    if !(area_km2 >= 0.0) {
        return Err(Error::invalid("area must be non-negative"));
    }
    Ok(area_km2 / wall_seconds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub area_km2: f64,
    pub wall_seconds: f64,
    /// `None` when the measured duration was zero.
    pub km2_per_s: Option<f64>,
}

impl Throughput {
    pub fn for_grid(pixels: usize, geotransform: &GeoTransform, wall_seconds: f64) -> Self {
        let area = area_km2(pixels, geotransform);
        Throughput {
            area_km2: area,
            wall_seconds,
            km2_per_s: measure_throughput(area, wall_seconds).ok(),
        }
    }
}

/// Resolved parameters of one invocation, echoed into every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub params: BTreeMap<String, serde_json::Value>,
}

impl RunConfig {
    pub fn new(command: impl Into<String>) -> Self {
        RunConfig {
            command: command.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.params.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub engine_version: String,
    pub config: RunConfig,
    pub pixel: Option<PixelMetrics>,
    pub object: Option<ObjectPrf>,
    pub ap: Option<APResult>,
    pub robustness: Option<RobustnessSummary>,
    pub throughput: Option<Throughput>,
    pub wall_seconds: Option<f64>,
}

impl MetricReport {
    pub fn new(config: RunConfig) -> Self {
        MetricReport {
            schema_version: SCHEMA_VERSION,
            engine_version: crate::VERSION.to_string(),
            config,
            pixel: None,
            object: None,
            ap: None,
            robustness: None,
            throughput: None,
            wall_seconds: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const SUMMARY_CSV_HEADER: &'static str =
        "iou,precision,recall,object_precision,object_recall,object_f1,ap50_95,ap50,throughput_km2_s";

    /// Pixel, object, AP and throughput columns; empty cells for missing values.
    pub fn summary_csv_row(&self) -> String {
        let cells = [
            self.pixel.as_ref().and_then(|p| p.interior.iou),
            self.pixel.as_ref().and_then(|p| p.interior.precision),
            self.pixel.as_ref().and_then(|p| p.interior.recall),
            self.object.as_ref().map(|o| o.precision),
            self.object.as_ref().map(|o| o.recall),
            self.object.as_ref().map(|o| o.f1),
            self.ap.as_ref().and_then(|a| a.ap50_95),
            self.ap.as_ref().and_then(|a| a.ap50),
            self.throughput.as_ref().and_then(|t| t.km2_per_s),
        ];
        csv_cells(&cells)
    }
}

pub(crate) fn csv_cells(cells: &[Option<f64>]) -> String {
    cells
        .iter()
        .map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(",")
}
