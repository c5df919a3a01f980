//! `.fsr` raster container, GeoJSON field layers and scene directories.
//!
//! An `.fsr` raster is a pair of files sharing a stem: `<stem>.bin` holds the
//! little-endian, row-major payload and `<stem>.json` the header
//! (`dtype`, `shape`, `geotransform`, `nodata`). Both files are written to a
//! temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::instances::{FieldInstance, InstanceIdMap, Ring};
use crate::mosaic::{Scene, SceneStack};
use crate::raster::{BandStack, ClassGrid, GeoTransform, LabelMask, LogitMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Uint8,
    Uint16,
    Uint32,
    Float32,
    Float64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Uint8 => 1,
            DType::Uint16 => 2,
            DType::Uint32 | DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsrHeader {
    pub dtype: DType,
    /// Outermost first, e.g. `[T, B, H, W]` or `[C, H, W]`; the last two are `H, W`.
    pub shape: Vec<usize>,
    pub geotransform: GeoTransform,
    pub nodata: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RasterData {
    pub fn dtype(&self) -> DType {
        match self {
            RasterData::U8(_) => DType::Uint8,
            RasterData::U16(_) => DType::Uint16,
            RasterData::U32(_) => DType::Uint32,
            RasterData::F32(_) => DType::Float32,
            RasterData::F64(_) => DType::Float64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RasterData::U8(v) => v.len(),
            RasterData::U16(v) => v.len(),
            RasterData::U32(v) => v.len(),
            RasterData::F32(v) => v.len(),
            RasterData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RasterData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            RasterData::U16(v) => v.iter().map(|&x| x as f64).collect(),
            RasterData::U32(v) => v.iter().map(|&x| x as f64).collect(),
            RasterData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RasterData::F64(v) => v.clone(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            RasterData::U8(v) => v.clone(),
            RasterData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            RasterData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            RasterData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            RasterData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::Uint8 => RasterData::U8(bytes.to_vec()),
            DType::Uint16 => RasterData::U16(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
            DType::Uint32 => RasterData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::Float32 => RasterData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::Float64 => RasterData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsrRaster {
    pub header: FsrHeader,
    pub data: RasterData,
}

impl FsrRaster {
    pub fn new(shape: Vec<usize>, data: RasterData, geotransform: GeoTransform, nodata: Option<f64>) -> Result<Self> {
        if shape.len() < 2 || shape.contains(&0) {
            return Err(Error::invalid(format!("raster shape {shape:?} needs >= 2 non-zero dims")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        geotransform.validate()?;
        Ok(FsrRaster {
            header: FsrHeader {
                dtype: data.dtype(),
                shape,
                geotransform,
                nodata,
            },
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.header.shape[self.header.shape.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.header.shape[self.header.shape.len() - 1]
    }

    pub fn from_label_mask(mask: &LabelMask) -> Self {
        FsrRaster {
            header: FsrHeader {
                dtype: DType::Uint8,
                shape: vec![mask.height(), mask.width()],
                geotransform: mask.geotransform().clone(),
                nodata: Some(crate::raster::UNKNOWN as f64),
            },
            data: RasterData::U8(mask.data().to_vec()),
        }
    }

    pub fn to_label_mask(&self) -> Result<LabelMask> {
        let [h, w] = self.header.shape[..] else {
            return Err(Error::shape(format!("label mask must be 2-D, got {:?}", self.header.shape)));
        };
        let data = match &self.data {
            RasterData::U8(v) => v.clone(),
            other => other
                .to_f64()
                .into_iter()
                .map(|v| {
                    if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::invalid(format!("label value {v} is not a byte")))
                    }
                })
                .collect::<Result<_>>()?,
        };
        LabelMask::new(h, w, data, self.header.geotransform.clone())
    }

    pub fn from_logits(logits: &LogitMap) -> Self {
        FsrRaster {
            header: FsrHeader {
                dtype: DType::Float32,
                shape: vec![logits.classes(), logits.height(), logits.width()],
                geotransform: logits.geotransform().clone(),
                nodata: None,
            },
            data: RasterData::F32(logits.values().to_vec()),
        }
    }

    pub fn to_logits(&self) -> Result<LogitMap> {
        let [c, h, w] = self.header.shape[..] else {
            return Err(Error::shape(format!("logits must be 3-D, got {:?}", self.header.shape)));
        };
        let data = self.to_f32();
        LogitMap::new(c, h, w, data, self.header.geotransform.clone())
    }

    /// Band stack raster, `[T, B, H, W]`; invalid pixels hold the fill value as nodata.
    pub fn from_band_stack(x: &BandStack) -> Self {
        FsrRaster {
            header: FsrHeader {
                dtype: DType::Float32,
                shape: vec![x.frames(), x.bands(), x.height(), x.width()],
                geotransform: x.geotransform().clone(),
                nodata: Some(x.fill() as f64),
            },
            data: RasterData::F32(x.data().to_vec()),
        }
    }

    /// Band stack from a `[T, B, H, W]` or `[B, H, W]` raster. A pixel of a
    /// frame is invalid when every band equals nodata.
    pub fn to_band_stack(&self) -> Result<BandStack> {
        let (t, b, h, w) = match self.header.shape[..] {
            [t, b, h, w] => (t, b, h, w),
            [b, h, w] => (1, b, h, w),
            _ => return Err(Error::shape(format!("band stack must be 3-D or 4-D, got {:?}", self.header.shape))),
        };
        let data = self.to_f32();
        let n = h * w;
        let (valid, fill) = match self.header.nodata {
            Some(nd) => {
                let nd = nd as f32;
                let is_nd = |v: f32| v == nd || (v.is_nan() && nd.is_nan());
                let valid = (0..t)
                    .flat_map(|ti| {
                        let data = &data;
                        (0..n).map(move |px| !(0..b).all(|bi| is_nd(data[(ti * b + bi) * n + px])))
                    })
                    .collect();
                (valid, nd)
            }
            None => (vec![true; t * n], 0.0),
        };
        BandStack::new(t, b, h, w, data, valid, fill, self.header.geotransform.clone())
    }

    pub fn from_ids(ids: &InstanceIdMap) -> Self {
        FsrRaster {
            header: FsrHeader {
                dtype: DType::Uint32,
                shape: vec![ids.height(), ids.width()],
                geotransform: ids.geotransform().clone(),
                nodata: Some(0.0),
            },
            data: RasterData::U32(ids.ids().to_vec()),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            RasterData::F32(v) => v.clone(),
            other => other.to_f64().into_iter().map(|v| v as f32).collect(),
        }
    }
}

/// `(stem.bin, stem.json)` for a path given as stem, `.bin` or `.json`.
pub fn fsr_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") | Some("fsr") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".bin"), with(".json"))
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_fsr(path: &Path, raster: &FsrRaster) -> Result<()> {
    let (bin, json) = fsr_paths(path);
    write_atomic(&bin, &raster.data.to_bytes())?;
    write_atomic(&json, serde_json::to_string_pretty(&raster.header)?.as_bytes())?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn read_fsr(path: &Path) -> Result<FsrRaster> {
    let (bin, json) = fsr_paths(path);
    let header: FsrHeader = serde_json::from_slice(&read_file(&json)?)?;
    let bytes = read_file(&bin)?;
    let count: usize = header.shape.iter().product();
    if bytes.len() != count * header.dtype.size() {
        return Err(Error::shape(format!(
            "{} holds {} bytes, header {:?} {:?} needs {}",
            bin.display(),
            bytes.len(),
            header.dtype,
            header.shape,
            count * header.dtype.size()
        )));
    }
    let data = RasterData::from_bytes(header.dtype, &bytes);
    FsrRaster::new(header.shape.clone(), data, header.geotransform.clone(), header.nodata)
}

pub const DETERMINATION_METHOD: &str = "auto-imagery";

/// GeoJSON FeatureCollection of field polygons in map coordinates.
pub fn fields_to_geojson(fields: &[FieldInstance], geotransform: &GeoTransform) -> Value {
    let features: Vec<Value> = fields
        .iter()
        .map(|f| {
            let (ext, holes) = f.map_rings(geotransform);
            let rings: Vec<&Vec<[f64; 2]>> = std::iter::once(&ext).chain(holes.iter()).collect();
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": rings },
                "properties": {
                    "id": f.id,
                    "confidence": f.confidence,
                    "area_ha": f.area_ha,
                    "determination_method": DETERMINATION_METHOD,
                },
            })
        })
        .collect();
    json!({
        "type": "FeatureCollection",
        "crs": { "type": "name", "properties": { "name": geotransform.crs_id } },
        "features": features,
    })
}

pub fn write_geojson(path: &Path, fields: &[FieldInstance], geotransform: &GeoTransform) -> Result<()> {
    let doc = fields_to_geojson(fields, geotransform);
    write_atomic(path, serde_json::to_string_pretty(&doc)?.as_bytes())
}

fn parse_ring(v: &Value, geotransform: &GeoTransform) -> Result<Ring> {
    let pts = v.as_array().ok_or_else(|| Error::invalid("polygon ring is not an array"))?;
    pts.iter()
        .map(|p| {
            let xy = p.as_array().filter(|a| a.len() >= 2);
            let (x, y) = match xy.map(|a| (a[0].as_f64(), a[1].as_f64())) {
                Some((Some(x), Some(y))) => (x, y),
                _ => return Err(Error::invalid("ring vertex is not a coordinate pair")),
            };
            let (col, row) = geotransform.invert(x, y);
            Ok([col, row])
        })
        .collect()
}

/// Reads Polygon and MultiPolygon features back into pixel-space instances.
/// Ids default to the feature position (1-based); each MultiPolygon part
/// becomes its own instance sharing the feature's properties.
pub fn read_geojson(path: &Path, geotransform: &GeoTransform) -> Result<Vec<FieldInstance>> {
    let doc: Value = serde_json::from_slice(&read_file(path)?)?;
    geojson_to_fields(&doc, geotransform)
}

pub fn geojson_to_fields(doc: &Value, geotransform: &GeoTransform) -> Result<Vec<FieldInstance>> {
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| Error::invalid("GeoJSON has no feature array"))?;
    let to_ha = geotransform.pixel_area() / 1e4;
    let mut out = Vec::new();
    for (k, feat) in features.iter().enumerate() {
        let props = &feat["properties"];
        let id = props["id"].as_u64().unwrap_or(k as u64 + 1) as u32;
        let confidence = props["confidence"].as_f64();
        let geom = &feat["geometry"];
        let polys: Vec<&Value> = match geom["type"].as_str() {
            Some("Polygon") => vec![&geom["coordinates"]],
            Some("MultiPolygon") => geom["coordinates"]
                .as_array()
                .map(|a| a.iter().collect())
                .unwrap_or_default(),
            other => return Err(Error::invalid(format!("unsupported geometry type {other:?}"))),
        };
        for poly in polys {
            let rings = poly.as_array().ok_or_else(|| Error::invalid("polygon is not a ring array"))?;
            let Some((ext, holes)) = rings.split_first() else { continue };
            let mut inst = FieldInstance {
                id,
                exterior: parse_ring(ext, geotransform)?,
                holes: holes.iter().map(|h| parse_ring(h, geotransform)).collect::<Result<_>>()?,
                pixel_count: 0,
                area_ha: 0.0,
                confidence,
            };
            let area = inst.pixel_area();
            inst.pixel_count = area.round().max(0.0) as usize;
            inst.area_ha = props["area_ha"].as_f64().unwrap_or(area * to_ha);
            out.push(inst);
        }
    }
    Ok(out)
}

/// One scene entry of a `scenes.json` index; raster paths are relative to the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub timestamp: String,
    pub cloud_cover_pct: f64,
    /// `[B, H, W]` reflectance raster.
    pub bands: String,
    /// `[H, W]` scene classification raster.
    pub scl: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneIndex {
    pub scenes: Vec<SceneEntry>,
}

/// Loads `dir/scenes.json` and its rasters. Pixels where every band equals
/// the raster's nodata are invalid; classification filtering is left to
/// [`crate::mosaic::prefilter_scenes`].
pub fn load_scene_dir(dir: &Path) -> Result<(SceneStack, GeoTransform)> {
    let index: SceneIndex = serde_json::from_slice(&read_file(&dir.join("scenes.json"))?)?;
    let mut scenes = Vec::with_capacity(index.scenes.len());
    let mut dims: Option<(usize, usize, usize, GeoTransform)> = None;
    for e in &index.scenes {
        let bands = read_fsr(&dir.join(&e.bands))?.to_band_stack()?;
        if bands.frames() != 1 {
            return Err(Error::shape(format!("scene {} must hold a single frame", e.timestamp)));
        }
        let scl = read_fsr(&dir.join(&e.scl))?;
        let RasterData::U8(scl) = scl.data else {
            return Err(Error::invalid(format!("scene {} classification must be uint8", e.timestamp)));
        };
        if scl.len() != bands.height() * bands.width() {
            return Err(Error::shape(format!("scene {} classification grid differs from its bands", e.timestamp)));
        }
        let d = (bands.bands(), bands.height(), bands.width(), bands.geotransform().clone());
        match &dims {
            Some(prev) if *prev != d => {
                return Err(Error::shape(format!("scene {} is on a different grid", e.timestamp)))
            }
            _ => dims = Some(d),
        }
        scenes.push(Scene {
            timestamp: e.timestamp.clone(),
            cloud_cover_pct: e.cloud_cover_pct,
            bands: bands.data().to_vec(),
            scl,
            valid: bands.valid().to_vec(),
        });
    }
    let Some((b, h, w, gt)) = dims else {
        return Err(Error::invalid("scene index lists no scenes"));
    };
    Ok((SceneStack::new(b, h, w, scenes)?, gt))
}
