use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde_json::{json, Value};

use fieldscale::change::{change_magnitude, change_mask};
use fieldscale::instances::{
    assign_confidence, connected_components, field_stats, field_stats_from_areas, polygonize, rasterize,
    Connectivity, PolygonizeOptions,
};
use fieldscale::io::{
    load_scene_dir, read_fsr, read_geojson, write_atomic, write_fsr, write_geojson, FsrRaster, RasterData,
};
use fieldscale::losses::{class_weights, finite_diff_check, random_problem, LossKind, LossSpec, Objective};
use fieldscale::metrics::{
    average_precision, instances_from_ids, match_instances, pixel_metrics, prf_from_counts, MatchStrategy,
    ObjectPrf, ScoredInstance,
};
use fieldscale::mosaic::{
    harvest_doy, median_composite, planting_doy, prefilter_scenes, select_scenes_greedy, DEFAULT_EXCLUDED_SCL,
    DEFAULT_MAX_CLOUD,
};
use fieldscale::raster::{apply_normalization, argmax_labels, softmax, ClassGrid, ProbMap};
use fieldscale::report::{MetricReport, RunConfig};
use fieldscale::robustness::{
    brightness_sensitivity, consistency, consistency_sweep, default_preprocessing_variants,
    input_order_sensitivity, preprocessing_sensitivity, scale_sensitivity, EvalConfig, Metric,
    RobustnessSummary, Sample, DEFAULT_SCALE_FACTORS,
};
use fieldscale::synth::generate_world;
use fieldscale::tiler::{predict_checked, protocol, run_tiled, ApodizationKernel};
use fieldscale::{LabelMask, NormalizationSpec, TilingSpec, BACKGROUND, INTERIOR};

use crate::config::ConfigFile;
use crate::models::{build_model, parse_model_spec, ModelSpec};
use crate::{
    ChangeArgs, Cli, Command, EvaluateArgs, ExtractArgs, LossCheckArgs, Output, RobustnessArgs, SeasonsArgs,
    SelectScenesArgs, ServeModelArgs, StatsArgs, StitchArgs, SynthArgs, UsageError,
};

pub fn run(cli: Cli, cfg: &ConfigFile) -> anyhow::Result<Option<Output>> {
    let workers = match cli.workers {
        Some(0) => bail!(UsageError("--workers must be >= 1".into())),
        Some(w) => w,
        None => cfg
            .get::<usize>("", "workers")?
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    let out = match cli.command {
        Command::Synth(a) => synth(a, cfg)?,
        Command::Stitch(a) => stitch(a, cfg, workers)?,
        Command::Extract(a) => extract(a, cfg)?,
        Command::Evaluate(a) => evaluate(a, cfg)?,
        Command::Robustness(a) => robustness(a, cfg, workers)?,
        Command::Seasons(a) => seasons(a)?,
        Command::SelectScenes(a) => select_scenes(a, cfg)?,
        Command::Change(a) => change(a, cfg)?,
        Command::LossCheck(a) => loss_check(a, cfg)?,
        Command::Stats(a) => stats(a)?,
        Command::ServeModel(a) => {
            serve_model(a)?;
            return Ok(None);
        }
    };
    Ok(Some(out))
}

fn connectivity(value: u8) -> anyhow::Result<Connectivity> {
    match value {
        4 => Ok(Connectivity::Four),
        8 => Ok(Connectivity::Eight),
        other => bail!(UsageError(format!("connectivity must be 4 or 8, got {other}"))),
    }
}

fn parse_normalization(text: &str) -> anyhow::Result<NormalizationSpec> {
    let spec: NormalizationSpec =
        serde_json::from_str(text).map_err(|e| UsageError(format!("bad normalization `{text}`: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn model_spec(text: &str) -> anyhow::Result<ModelSpec> {
    Ok(parse_model_spec(text)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn synth(a: SynthArgs, cfg: &ConfigFile) -> anyhow::Result<Output> {
    let seed = cfg.resolve("synth", "seed", a.seed, 0)?;
    let height = cfg.resolve("synth", "height", a.height, 256)?;
    let width = cfg.resolve("synth", "width", a.width, 256)?;
    let fields = cfg.resolve("synth", "fields", a.fields, 24)?;
    let background = cfg.resolve("synth", "background", a.background, 0.2)?;
    let world = generate_world(seed, height, width, fields, background)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_fsr(&a.out.join("bands"), &FsrRaster::from_band_stack(&world.bands))?;
    write_fsr(&a.out.join("gt_mask"), &FsrRaster::from_label_mask(&world.gt_mask))?;
    write_fsr(&a.out.join("gt_ids"), &FsrRaster::from_ids(&world.gt_ids))?;
    write_geojson(&a.out.join("gt.geojson"), &world.gt_instances, world.geotransform())?;
    let json = json!({
        "seed": seed,
        "height": height,
        "width": width,
        "fields_requested": fields,
        "instances": world.gt_instances.len(),
        "background_fraction": world.observed_background_fraction(),
        "out": a.out,
    });
    let text = format!(
        "world {height}x{width} seed {seed}: {} field instances, background {:.3} -> {}\n",
        world.gt_instances.len(),
        world.observed_background_fraction(),
        a.out.display()
    );
    Ok(Output { json, text, ok: true })
}

fn stitch(a: StitchArgs, cfg: &ConfigFile, workers: usize) -> anyhow::Result<Output> {
    let model_text = cfg.resolve("stitch", "model", a.model, "oracle".to_string())?;
    let spec = model_spec(&model_text)?;
    let patch_size = cfg.resolve("stitch", "patch_size", a.patch_size, 256)?;
    let overlap = cfg.resolve("stitch", "overlap", a.overlap, 0.25)?;
    let tiling = TilingSpec::new(patch_size, overlap)?;
    let sigma = cfg.resolve("stitch", "sigma", a.sigma, tiling.default_sigma())?;
    let gain = cfg.resolve("stitch", "logit_gain", a.logit_gain, 10.0)?;
    let normalization = cfg
        .resolve_opt::<String>("stitch", "normalization", a.normalization)?
        .map(|t| parse_normalization(&t))
        .transpose()?;

    let start = Instant::now();
    let mut x = read_fsr(&a.input)?.to_band_stack()?;
    if let Some(n) = &normalization {
        x = apply_normalization(&x, n)?.stack;
    }
    let model = build_model(&spec, x.frames(), x.bands(), gain)?;
    let kernel = ApodizationKernel::new(patch_size.min(x.height()), patch_size.min(x.width()), sigma)?;
    let out = run_tiled(model.as_ref(), &x, &tiling, &kernel, workers)?;
    write_fsr(&a.out, &FsrRaster::from_logits(&out.logits))?;

    let config = RunConfig::new("stitch")
        .with("input", &a.input)
        .with("out", &a.out)
        .with("model", &model_text)
        .with("patch_size", patch_size)
        .with("overlap", overlap)
        .with("sigma", sigma)
        .with("logit_gain", gain)
        .with("normalization", normalization)
        .with("workers", workers);
    let mut report = MetricReport::new(config);
    report.throughput = Some(out.throughput.clone());
    report.wall_seconds = Some(start.elapsed().as_secs_f64());
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    let text = format!(
        "stitched {} patches over {}x{} ({:.3} km², {} km²/s) -> {}\n",
        out.patches,
        x.height(),
        x.width(),
        out.throughput.area_km2,
        fmt_opt(out.throughput.km2_per_s),
        a.out.display()
    );
    Ok(Output {
        json: serde_json::to_value(&report)?,
        text,
        ok: true,
    })
}

fn extract(a: ExtractArgs, cfg: &ConfigFile) -> anyhow::Result<Output> {
    let block_size = cfg.resolve("extract", "block_size", a.block_size, 4096)?;
    let min_area_px = cfg.resolve("extract", "min_area_px", a.min_area_px, 0)?;
    let simplify_tol = cfg.resolve("extract", "simplify_tol", a.simplify_tol, 0.0)?;
    let conn = connectivity(cfg.resolve("extract", "connectivity", a.connectivity, 4)?)?;

    let logits = read_fsr(&a.logits)?.to_logits()?;
    let labels = argmax_labels(&logits);
    let ids = connected_components(&labels, INTERIOR, conn);
    let options = PolygonizeOptions {
        block_size,
        connectivity: conn,
        min_area_px,
        simplify_tol,
    };
    let mut fields = polygonize(&ids, &options)?;
    assign_confidence(&mut fields, &ids, &softmax(&logits)?)?;
    write_geojson(&a.out, &fields, logits.geotransform())?;
    if let Some(p) = &a.mask_out {
        write_fsr(p, &FsrRaster::from_label_mask(&labels))?;
    }
    if let Some(p) = &a.ids_out {
        write_fsr(p, &FsrRaster::from_ids(&ids))?;
    }
    let stats = field_stats(&fields, logits.geotransform());
    let json = json!({
        "components": ids.count(),
        "polygons": fields.len(),
        "stats": stats,
        "out": a.out,
    });
    let text = format!(
        "{} polygons from {} components, total {:.2} ha -> {}\n",
        fields.len(),
        ids.count(),
        stats.total_area_ha,
        a.out.display()
    );
    Ok(Output { json, text, ok: true })
}

fn is_geojson(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("geojson")
    )
}

/// Predicted label mask and scored instances from a prediction file.
fn load_prediction(
    path: &Path,
    gt: &LabelMask,
    probabilities: bool,
    conn: Connectivity,
) -> anyhow::Result<(LabelMask, Vec<ScoredInstance>)> {
    let (h, w) = (gt.height(), gt.width());
    if is_geojson(path) {
        let mut fields = read_geojson(path, gt.geotransform())?;
        for (k, f) in fields.iter_mut().enumerate() {
            f.id = k as u32 + 1;
        }
        let raster = rasterize(&fields, h, w);
        let mut pixels = vec![Vec::new(); fields.len()];
        for (px, &id) in raster.iter().enumerate() {
            if id > 0 {
                pixels[id as usize - 1].push(px as u32);
            }
        }
        let preds = fields
            .iter()
            .zip(pixels)
            .filter(|(_, p)| !p.is_empty())
            .map(|(f, p)| ScoredInstance::new(f.id, p, f.confidence.unwrap_or(1.0)))
            .collect();
        let labels = raster.iter().map(|&id| if id > 0 { INTERIOR } else { BACKGROUND }).collect();
        return Ok((LabelMask::new(h, w, labels, gt.geotransform().clone())?, preds));
    }
    let raster = read_fsr(path)?;
    let [c, rh, rw] = raster.header.shape[..] else {
        bail!(UsageError(format!("prediction raster must be [C, H, W], got {:?}", raster.header.shape)));
    };
    let prob = if probabilities {
        ProbMap::new(c, rh, rw, raster.to_f32(), raster.header.geotransform.clone())?
    } else {
        softmax(&raster.to_logits()?)?
    };
    if (rh, rw) != (h, w) {
        bail!(UsageError(format!("prediction is {rh}x{rw}, ground truth is {h}x{w}")));
    }
    let labels = argmax_labels(&prob);
    let ids = connected_components(&labels, INTERIOR, conn);
    let interior = prob.plane(INTERIOR as usize);
    let preds = instances_from_ids(&ids, None)
        .into_iter()
        .map(|mut inst| {
            let s: f64 = inst.pixels.iter().map(|&px| interior[px as usize] as f64).sum();
            inst.confidence = s / inst.pixels.len() as f64;
            inst
        })
        .collect();
    Ok((labels, preds))
}

fn evaluate(a: EvaluateArgs, cfg: &ConfigFile) -> anyhow::Result<Output> {
    let conf_thresh = cfg.resolve("evaluate", "conf_thresh", a.conf_thresh, 0.5)?;
    let iou_thresh = cfg.resolve("evaluate", "iou_thresh", a.iou_thresh, 0.5)?;
    let matching = cfg.resolve("evaluate", "matching", a.matching, "greedy".to_string())?;
    let strategy = match matching.as_str() {
        "greedy" => MatchStrategy::Greedy,
        "optimal" => MatchStrategy::Optimal,
        other => bail!(UsageError(format!("matching must be greedy or optimal, got {other}"))),
    };
    let conn = connectivity(cfg.resolve("evaluate", "connectivity", a.connectivity, 4)?)?;

    let start = Instant::now();
    let gt = read_fsr(&a.gt)?.to_label_mask()?;
    let (pred_labels, preds) = load_prediction(&a.pred, &gt, a.probabilities, conn)?;
    let gts = instances_from_ids(&connected_components(&gt, INTERIOR, conn), None);

    let pixel = pixel_metrics(&pred_labels, &gt)?;
    let kept: Vec<ScoredInstance> = preds.iter().filter(|p| p.confidence >= conf_thresh).cloned().collect();
    let m = match_instances(&kept, &gts, iou_thresh, strategy)?;
    let (precision, recall, f1) = prf_from_counts(m.pairs.len(), kept.len(), gts.len());
    let object = ObjectPrf {
        precision,
        recall,
        f1,
        matches: m.pairs.len(),
        kept_preds: kept.len(),
        gts: gts.len(),
        conf_threshold: conf_thresh,
        iou_threshold: iou_thresh,
    };
    let ap = average_precision(&preds, &gts);

    let config = RunConfig::new("evaluate")
        .with("pred", &a.pred)
        .with("gt", &a.gt)
        .with("probabilities", a.probabilities)
        .with("conf_thresh", conf_thresh)
        .with("iou_thresh", iou_thresh)
        .with("matching", &matching)
        .with("connectivity", conn);
    let mut report = MetricReport::new(config);
    report.pixel = Some(pixel);
    report.object = Some(object);
    report.ap = Some(ap);
    if let Some(p) = &a.stitch_report {
        let stitched: MetricReport = serde_json::from_slice(&std::fs::read(p)?)
            .map_err(|e| UsageError(format!("{} is not a report: {e}", p.display())))?;
        report.throughput = stitched.throughput;
    }
    report.wall_seconds = Some(start.elapsed().as_secs_f64());
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }

    let text = if a.csv {
        format!("{}\n{}\n", MetricReport::SUMMARY_CSV_HEADER, report.summary_csv_row())
    } else {
        let px = report.pixel.as_ref().expect("pixel metrics set");
        let ap = report.ap.as_ref().expect("ap set");
        format!(
            "pixel IoU {}  precision {}  recall {}  ({} px evaluated)\n\
             object P {:.4}  R {:.4}  F1 {:.4}  ({} matches, {} kept preds, {} gts)\n\
             AP50 {}  AP50:95 {}\n",
            fmt_opt(px.interior.iou),
            fmt_opt(px.interior.precision),
            fmt_opt(px.interior.recall),
            px.evaluated_pixel_count,
            object.precision,
            object.recall,
            object.f1,
            object.matches,
            object.kept_preds,
            object.gts,
            fmt_opt(ap.ap50),
            fmt_opt(ap.ap50_95),
        )
    };
    Ok(Output {
        json: serde_json::to_value(&report)?,
        text,
        ok: true,
    })
}

fn parse_sample(text: &str) -> anyhow::Result<Sample> {
    let Some((bands, mask)) = text.rsplit_once(':') else {
        bail!(UsageError(format!("sample `{text}` must be <bands.fsr>:<mask.fsr>")));
    };
    Ok(Sample {
        x: read_fsr(Path::new(bands))?.to_band_stack()?,
        gt: read_fsr(Path::new(mask))?.to_label_mask()?,
    })
}

fn robustness(a: RobustnessArgs, cfg: &ConfigFile, workers: usize) -> anyhow::Result<Output> {
    let model_text = cfg.resolve("robustness", "model", a.model, "oracle".to_string())?;
    let spec = model_spec(&model_text)?;
    let gain = cfg.resolve("robustness", "logit_gain", a.logit_gain, 10.0)?;
    let seed = cfg.resolve("robustness", "seed", a.seed, 0u64)?;
    let n_worlds = cfg.resolve("robustness", "worlds", a.worlds, 4usize)?;
    let size = cfg.resolve("robustness", "size", a.size, 256usize)?;
    let fields = cfg.resolve("robustness", "fields", a.fields, 24usize)?;
    let background = cfg.resolve("robustness", "background", a.background, 0.2)?;
    let scales = cfg.resolve("robustness", "scales", a.scales, DEFAULT_SCALE_FACTORS.to_vec())?;
    let brightness = cfg.resolve("robustness", "brightness", a.brightness, Vec::<f64>::new())?;
    let reference = match cfg.resolve_opt::<String>("robustness", "reference", a.reference)? {
        Some(t) => parse_normalization(&t)?,
        None => EvalConfig::default().reference,
    };

    let samples: Vec<Sample> = if a.sample.is_empty() {
        (0..n_worlds as u64)
            .map(|k| {
                let w = generate_world(seed + k, size, size, fields, background)?;
                Ok(Sample { x: w.bands, gt: w.gt_mask })
            })
            .collect::<anyhow::Result<_>>()?
    } else {
        a.sample.iter().map(|s| parse_sample(s)).collect::<anyhow::Result<_>>()?
    };
    let Some(first) = samples.first() else {
        bail!(UsageError("no evaluation samples".into()));
    };
    let (frames, bands) = (first.x.frames(), first.x.bands());
    let patch = first.x.height();
    let crop = cfg.resolve("robustness", "crop", a.crop, (3 * patch).div_ceil(4))?;
    let sweep = cfg.resolve("robustness", "sweep", a.sweep, {
        [patch / 4, patch / 2, 3 * patch / 4]
            .into_iter()
            .map(|side| (patch + side).div_ceil(2))
            .filter(|&p| 2 * p > patch && p < patch)
            .collect::<Vec<_>>()
    })?;
    let model = build_model(&spec, frames, bands, gain)?;
    let model = model.as_ref();

    let pool = rayon_pool(workers)?;
    let (summary, details) = pool.install(|| -> anyhow::Result<(RobustnessSummary, Value)> {
        let mut summary = RobustnessSummary::default();
        let mut details = serde_json::Map::new();
        for metric in [Metric::ObjectF1, Metric::PixelIou] {
            let config = EvalConfig {
                metric,
                reference,
                ..EvalConfig::default()
            };
            let order = input_order_sensitivity(model, &samples, &config)?;
            let prep = preprocessing_sensitivity(model, &samples, &config, &default_preprocessing_variants())?;
            let scale = scale_sensitivity(model, &samples, &config, &scales)?;
            let bright = if brightness.is_empty() {
                None
            } else {
                Some(brightness_sensitivity(model, &samples, &config, &brightness)?)
            };
            match metric {
                Metric::ObjectF1 => {
                    summary.object_f1 = order.m_ref;
                    summary.order_f1_delta = order.delta;
                    summary.preprocessing_f1_delta = prep.delta;
                    summary.scale_f1_delta = scale.delta;
                    summary.brightness_f1_delta = bright.as_ref().and_then(|b| b.delta);
                }
                Metric::PixelIou => {
                    summary.pixel_iou = order.m_ref;
                    summary.order_iou_delta = order.delta;
                    summary.preprocessing_iou_delta = prep.delta;
                    summary.scale_iou_delta = scale.delta;
                    summary.brightness_iou_delta = bright.as_ref().and_then(|b| b.delta);
                }
            }
            let key = serde_json::to_value(metric)?.as_str().unwrap_or("metric").to_string();
            details.insert(
                key,
                json!({ "input_order": order, "preprocessing": prep, "scale": scale, "brightness": bright }),
            );
        }
        let square = samples.iter().all(|s| s.x.height() == patch && s.x.width() == patch);
        if square {
            let normalized = samples
                .iter()
                .map(|s| Ok(apply_normalization(&s.x, &reference)?.stack))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let spec = fieldscale::robustness::ConsistencySpec::new(patch, crop)?;
            let scores = normalized
                .iter()
                .map(|x| consistency(model, x, &spec))
                .collect::<fieldscale::Result<Vec<_>>>()?;
            summary.agreement = Some(scores.iter().sum::<f64>() / scores.len() as f64);
            if !sweep.is_empty() {
                let points = consistency_sweep(model, &normalized, patch, &sweep)?;
                summary.agreement_sweep_mean =
                    Some(points.iter().map(|p| p.mean_consistency).sum::<f64>() / points.len() as f64);
                details.insert("sweep".into(), serde_json::to_value(points)?);
            }
        }
        Ok((summary, Value::Object(details)))
    })?;

    let config = RunConfig::new("robustness")
        .with("model", &model_text)
        .with("samples", samples.len())
        .with("seed", seed)
        .with("crop", crop)
        .with("sweep", &sweep)
        .with("scales", &scales)
        .with("brightness", &brightness)
        .with("reference", reference)
        .with("workers", workers);
    let mut report = MetricReport::new(config);
    report.robustness = Some(summary.clone());
    let json = json!({ "report": report, "details": details });
    let text = if a.csv {
        format!("{}\n{}\n", RobustnessSummary::CSV_HEADER, summary.csv_row())
    } else {
        format!(
            "object F1 {}  pixel IoU {}\n\
             input order |Δ| F1 {} IoU {}\n\
             brightness |Δ| F1 {} IoU {}\n\
             preprocessing |Δ| F1 {} IoU {}\n\
             scale |Δ| F1 {} IoU {}\n\
             agreement {} (sweep mean {})\n",
            fmt_opt(summary.object_f1),
            fmt_opt(summary.pixel_iou),
            fmt_opt(summary.order_f1_delta),
            fmt_opt(summary.order_iou_delta),
            fmt_opt(summary.brightness_f1_delta),
            fmt_opt(summary.brightness_iou_delta),
            fmt_opt(summary.preprocessing_f1_delta),
            fmt_opt(summary.preprocessing_iou_delta),
            fmt_opt(summary.scale_f1_delta),
            fmt_opt(summary.scale_iou_delta),
            fmt_opt(summary.agreement),
            fmt_opt(summary.agreement_sweep_mean),
        )
    };
    Ok(Output { json, text, ok: true })
}

fn rayon_pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn seasons(a: SeasonsArgs) -> anyhow::Result<Output> {
    let planting = planting_doy(a.lat)?;
    let harvest = harvest_doy(a.lat)?;
    let json = json!({ "latitude": a.lat, "planting": planting, "harvest": harvest });
    let text = format!(
        "planting ({}, {})\nharvest ({}, {})\n",
        planting.start_doy, planting.end_doy, harvest.start_doy, harvest.end_doy
    );
    Ok(Output { json, text, ok: true })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn select_scenes(a: SelectScenesArgs, cfg: &ConfigFile) -> anyhow::Result<Output> {
    let target = cfg.resolve("select-scenes", "target_coverage", a.target_coverage, 5u32)?;
    let max_scenes = cfg.resolve("select-scenes", "max_scenes", a.max_scenes, 10usize)?;
    let max_cloud = cfg.resolve("select-scenes", "max_cloud", a.max_cloud, DEFAULT_MAX_CLOUD)?;
    let (stack, gt) = load_scene_dir(&a.dir)?;
    let filtered = prefilter_scenes(&stack, max_cloud, &DEFAULT_EXCLUDED_SCL);
    let (selected, gains) = if filtered.scenes().is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let s = select_scenes_greedy(&filtered.valid_masks(), target, max_scenes)?;
        (s.selected, s.gains)
    };
    let composite = median_composite(&filtered, &selected, -9999.0)?;
    if let Some(out) = &a.out {
        let (b, h, w) = (filtered.bands(), filtered.height(), filtered.width());
        let median = FsrRaster::new(vec![b, h, w], RasterData::F32(composite.median.clone()), gt.clone(), Some(-9999.0))?;
        write_fsr(out, &median)?;
        let counts = FsrRaster::new(vec![h, w], RasterData::U32(composite.counts.clone()), gt, None)?;
        write_fsr(&with_suffix(out, "_count"), &counts)?;
    }
    let json = json!({
        "scenes": stack.scenes().len(),
        "after_prefilter": filtered.scenes().len(),
        "selected": composite.selected_timestamps,
        "gains": gains,
        "target_coverage": target,
        "max_scenes": max_scenes,
    });
    let text = format!(
        "{} of {} scenes pass the prefilter; selected: {}\n",
        filtered.scenes().len(),
        stack.scenes().len(),
        if composite.selected_timestamps.is_empty() {
            "none".to_string()
        } else {
            composite.selected_timestamps.join(", ")
        }
    );
    Ok(Output { json, text, ok: true })
}

fn change(a: ChangeArgs, cfg: &ConfigFile) -> anyhow::Result<Output> {
    let thresh = cfg.resolve("change", "thresh", a.thresh, 0.5)?;
    let class = cfg.resolve("change", "class", a.class, INTERIOR as usize)?;
    let y1 = read_fsr(&a.y1)?.to_logits()?;
    let y2 = read_fsr(&a.y2)?.to_logits()?;
    let magnitude = change_magnitude(&y1, &y2, class)?;
    let mut mask = change_mask(&magnitude, y1.height(), y1.width(), thresh)?;
    mask.years = Some((a.y1.display().to_string(), a.y2.display().to_string()));
    let labels = mask.to_label_mask(y1.geotransform().clone())?;
    let bytes = mask.changed.iter().map(|&c| c as u8).collect();
    write_fsr(
        &a.out,
        &FsrRaster::new(vec![mask.height, mask.width], RasterData::U8(bytes), y1.geotransform().clone(), None)?,
    )?;
    let mut polygons = None;
    if let Some(path) = &a.geojson {
        let ids = connected_components(&labels, INTERIOR, Connectivity::Four);
        let polys = polygonize(&ids, &PolygonizeOptions::default())?;
        write_geojson(path, &polys, y1.geotransform())?;
        polygons = Some(polys.len());
    }
    let json = json!({
        "changed_pixels": mask.count(),
        "total_pixels": mask.changed.len(),
        "threshold": thresh,
        "class": class,
        "polygons": polygons,
    });
    let text = format!(
        "{} of {} pixels changed at threshold {thresh}\n",
        mask.count(),
        mask.changed.len()
    );
    Ok(Output { json, text, ok: true })
}

fn loss_check(a: LossCheckArgs, cfg: &ConfigFile) -> anyhow::Result<Output> {
    let seeds = cfg.resolve("loss-check", "seeds", a.seeds, 10u64)?;
    let step = cfg.resolve("loss-check", "step", a.step, 1e-3)?;
    let tol = cfg.resolve("loss-check", "tol", a.tol, 1e-4)?;
    let omega = cfg.resolve_opt("loss-check", "omega", a.omega)?;
    let mut specs: Vec<LossSpec> = LossKind::all_defaults().into_iter().map(LossSpec::new).collect();
    if let Some(o) = omega {
        let w = class_weights(o)?;
        specs.extend(LossKind::all_defaults().into_iter().map(|k| LossSpec::weighted(k, w.clone())));
    }
    let mut rows = Vec::new();
    let mut text = format!("{:<24} {:>12}  result\n", "loss", "max rel err");
    let mut all_ok = true;
    for spec in &specs {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let (logits, target) = random_problem(seed, 3, 8, 8)?;
            worst = worst.max(finite_diff_check(spec, &logits, &target, step)?);
        }
        let ok = worst <= tol;
        all_ok &= ok;
        text.push_str(&format!(
            "{:<24} {:>12.3e}  {}\n",
            spec.name(),
            worst,
            if ok { "pass" } else { "FAIL" }
        ));
        rows.push(json!({ "loss": spec.name(), "max_rel_err": worst, "pass": ok }));
    }
    let json = json!({ "seeds": seeds, "step": step, "tolerance": tol, "results": rows, "pass": all_ok });
    Ok(Output { json, text, ok: all_ok })
}

fn stats(a: StatsArgs) -> anyhow::Result<Output> {
    let unit = fieldscale::GeoTransform::new(0.0, 0.0, 1.0, -1.0, "unknown")?;
    let fields = read_geojson(&a.geojson, &unit)?;
    let areas: Vec<f64> = fields.iter().map(|f| f.area_ha).collect();
    let stats = field_stats_from_areas(&areas);
    let text = format!(
        "{} fields, median {} ha, total {:.4} ha\n",
        stats.field_count,
        fmt_opt(stats.median_area_ha),
        stats.total_area_ha
    );
    Ok(Output {
        json: serde_json::to_value(&stats)?,
        text,
        ok: true,
    })
}

fn serve_model(a: ServeModelArgs) -> anyhow::Result<()> {
    let spec = model_spec(&a.model)?;
    if matches!(spec, ModelSpec::Exec(_)) {
        bail!(UsageError("serve-model cannot wrap another exec model".into()));
    }
    let model = build_model(&spec, a.frames, a.bands, a.logit_gain)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut input = BufReader::new(stdin.lock());
    let mut output = BufWriter::new(stdout.lock());
    protocol::serve(&mut input, &mut output, |patch| {
        let out = predict_checked(model.as_ref(), patch);
        out
    })?;
    output.flush()?;
    Ok(())
}
