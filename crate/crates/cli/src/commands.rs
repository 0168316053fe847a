//! The four pipeline commands: scene generation, clustering, training, and
//! evaluation. Every command is deterministic given its config and seed;
//! all reductions run in image-id order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use dthcp::geometry::BBox;
use dthcp::heatmap::{normalize, read_grid_file, RawActivationMap};
use dthcp::hgps::build_clusters;
use dthcp::metrics::{
    corloc, per_class_ap, pseudo_gt_quality, read_detections_file, read_ground_truth_file,
    write_ground_truth_csv, ApInterpolation, Detection, GroundTruth, QualityReport, TopBox,
};
use dthcp::midn::Checkpoint;
use dthcp::synth::{generate_scene, mix_seed, SceneBundle};
use dthcp::trainer::{detections_for_scene, prepare_scene, train, PreparedScene};
use dthcp::hgps::{PseudoGt, PseudoGtSet, StageTag};
use serde::Serialize;

use crate::bundle::{read_bundle, read_manifest, write_bundle, write_manifest, Manifest};
use crate::config::RunConfig;
use crate::overlay::render_class_overlay;
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))
}

/// Generate `config.scenes` scene bundles into `out_dir`, with per-scene
/// seeds derived from the master seed.
pub fn cmd_synth(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let mut scene_files = Vec::new();
    let mut all_gt: Vec<GroundTruth> = Vec::new();
    for image_id in 0..config.scenes {
        let seed = mix_seed(config.seed, image_id as u64);
        let bundle = generate_scene(&config.synth, seed, image_id)?;
        all_gt.extend_from_slice(&bundle.ground_truth);
        scene_files.push(write_bundle(out_dir, &bundle)?);
    }
    write_manifest(
        out_dir,
        &Manifest {
            rng_algorithm: config.synth.rng_algorithm.clone(),
            config: config.clone(),
            scenes: scene_files,
        },
    )?;
    let gt_file = std::fs::File::create(out_dir.join("ground_truth.csv"))?;
    write_ground_truth_csv(std::io::BufWriter::new(gt_file), &all_gt)?;
    println!("wrote {} scenes to {}", config.scenes, out_dir.display());
    Ok(())
}

/// Parse `CLASS=PATH` heatmap arguments.
pub fn parse_heatmap_args(args: &[String]) -> Result<Vec<(usize, PathBuf)>, CliError> {
    args.iter()
        .map(|arg| {
            let (class, path) = arg
                .split_once('=')
                .ok_or_else(|| CliError::user(format!("expected CLASS=PATH, got '{arg}'")))?;
            let class: usize = class
                .trim()
                .parse()
                .map_err(|e| CliError::user(format!("bad class id in '{arg}': {e}")))?;
            Ok((class, PathBuf::from(path.trim())))
        })
        .collect()
}

/// Plain proposal boxes, one `x1,y1,x2,y2` line each.
pub fn read_proposals_csv(path: &Path) -> Result<Vec<BBox>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::user(format!("bad proposal line {}: {e}", lineno + 1)))?;
        if fields.len() != 4 {
            return Err(CliError::user(format!(
                "proposal line {} has {} fields, expected 4",
                lineno + 1,
                fields.len()
            )));
        }
        out.push(BBox::new(fields[0], fields[1], fields[2], fields[3])?);
    }
    Ok(out)
}

pub struct ClusterArgs {
    pub heatmaps: Vec<(usize, PathBuf)>,
    pub proposals: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub image_size: Option<(usize, usize)>,
    pub overlay: bool,
}

/// Build pseudo-GT clusters from heatmap grid files and a proposal list;
/// dump them as JSON, optionally with one overlay pixmap per class.
pub fn cmd_cluster(config: &RunConfig, args: &ClusterArgs, out_dir: &Path) -> Result<(), CliError> {
    config.hgps.validate()?;
    ensure_dir(out_dir)?;

    let mut heatmaps = Vec::new();
    for (class_id, path) in &args.heatmaps {
        let values = read_grid_file(path)?;
        heatmaps.push(normalize(&RawActivationMap::new(values, *class_id)?));
    }
    let num_classes = args
        .num_classes
        .unwrap_or_else(|| heatmaps.iter().map(|h| h.class_id + 1).max().unwrap_or(0));
    let mut labels = vec![false; num_classes];
    for map in &heatmaps {
        if map.class_id >= num_classes {
            return Err(CliError::user(format!(
                "heatmap class {} outside --num-classes {num_classes}",
                map.class_id
            )));
        }
        labels[map.class_id] = true;
    }
    let proposals = match &args.proposals {
        Some(path) => read_proposals_csv(path)?,
        None => Vec::new(),
    };
    let image_size = args.image_size.unwrap_or_else(|| {
        heatmaps
            .first()
            .map(|h| (h.width(), h.height()))
            .unwrap_or((1, 1))
    });

    let clusters = build_clusters(&heatmaps, &labels, &proposals, image_size, &config.hgps)?;
    let json = serde_json::to_string_pretty(&clusters)
        .map_err(|e| CliError::internal(format!("cluster serialization: {e}")))?;
    std::fs::write(out_dir.join("clusters.json"), json + "\n")?;

    if args.overlay {
        for map in &heatmaps {
            let ppm = render_class_overlay(map, &config.hgps, clusters.clusters(map.class_id));
            std::fs::write(
                out_dir.join(format!("overlay_class{}.ppm", map.class_id)),
                ppm,
            )?;
        }
    }
    let total: usize = (0..num_classes).map(|c| clusters.clusters(c).len()).sum();
    println!(
        "wrote clusters.json ({num_classes} classes, {total} clusters) to {}",
        out_dir.display()
    );
    Ok(())
}

fn load_scene_dir(scene_dir: &Path) -> Result<(RunConfig, Vec<SceneBundle>), CliError> {
    let manifest = read_manifest(scene_dir)?;
    let mut bundles = Vec::new();
    for name in &manifest.scenes {
        bundles.push(read_bundle(scene_dir, name)?);
    }
    Ok((manifest.config, bundles))
}

#[derive(Serialize)]
struct TrainMetrics {
    iterations: usize,
    final_loss: f64,
    final_map: f64,
    final_corloc: f64,
}

/// Train on a directory of scene bundles; emits checkpoint, curve CSV,
/// final detections, and summary metrics.
pub fn cmd_train(config: &RunConfig, scene_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let (_, bundles) = load_scene_dir(scene_dir)?;
    if bundles.is_empty() {
        return Err(CliError::user("scene directory has no scenes"));
    }
    let scenes: Vec<PreparedScene> = bundles
        .iter()
        .map(|b| prepare_scene(b, &config.hgps).map_err(CliError::from))
        .collect::<Result<_, _>>()?;

    let mut trainer_cfg = config.trainer.clone();
    trainer_cfg.seed = config.seed;
    let outcome = train(&scenes, &config.hgps, &trainer_cfg)?;

    Checkpoint::from_model(&outcome.model, outcome.iterations as u64)
        .save(out_dir.join("checkpoint.json"))?;

    let mut curve = std::io::BufWriter::new(std::fs::File::create(out_dir.join("curve.csv"))?);
    writeln!(curve, "iteration,epoch,loss,map")?;
    for row in &outcome.records {
        let map = row.map.map(|m| m.to_string()).unwrap_or_default();
        writeln!(curve, "{},{},{},{}", row.iteration, row.epoch, row.loss, map)?;
    }
    curve.flush().map_err(dthcp::Error::Io)?;

    let mut dets: Vec<Detection> = Vec::new();
    for scene in &scenes {
        dets.extend(detections_for_scene(scene, &outcome.model, trainer_cfg.nms_iou)?);
    }
    let det_file = std::fs::File::create(out_dir.join("detections.csv"))?;
    dthcp::metrics::write_detections_csv(std::io::BufWriter::new(det_file), &dets)?;

    let metrics = TrainMetrics {
        iterations: outcome.iterations,
        final_loss: outcome.records.last().map(|r| r.loss).unwrap_or(0.0),
        final_map: outcome.final_map,
        final_corloc: outcome.final_corloc,
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CliError::internal(format!("metrics serialization: {e}")))?;
    std::fs::write(out_dir.join("metrics.json"), json + "\n")?;
    println!(
        "trained {} iterations, final mAP {:.4}, CorLoc {:.4}",
        outcome.iterations, outcome.final_map, outcome.final_corloc
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalMetrics {
    per_class_ap: Vec<f64>,
    map: f64,
    corloc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pseudo_quality: Option<QualityByClass>,
}

#[derive(Serialize)]
struct QualityByClass {
    per_class: BTreeMap<usize, QualityReport>,
    overall: QualityReport,
}

/// Score a detections file against a ground-truth file; optionally
/// diagnose a pseudo-GT file (same CSV shape, score column = weight).
pub fn cmd_eval(
    detections: &Path,
    ground_truth: &Path,
    pseudo: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let dets = read_detections_file(detections)?;
    let gts = read_ground_truth_file(ground_truth)?;
    let num_classes = gts
        .iter()
        .map(|g| g.class_id + 1)
        .chain(dets.iter().map(|d| d.class_id + 1))
        .max()
        .unwrap_or(0);

    let (per_class, map) = per_class_ap(&dets, &gts, num_classes, 0.5, ApInterpolation::Continuous);

    // top-1 per (image, class) for correct localization
    let mut tops: Vec<TopBox> = Vec::new();
    let mut images: Vec<usize> = gts.iter().map(|g| g.image_id).collect();
    images.sort_unstable();
    images.dedup();
    for &image_id in &images {
        for class_id in 0..num_classes {
            if !gts
                .iter()
                .any(|g| g.image_id == image_id && g.class_id == class_id)
            {
                continue;
            }
            let best = dets
                .iter()
                .filter(|d| d.image_id == image_id && d.class_id == class_id)
                .max_by(|a, b| {
                    a.score
                        .partial_cmp(&b.score)
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
            if let Some(d) = best {
                tops.push(TopBox {
                    image_id,
                    class_id,
                    bbox: d.bbox,
                });
            }
        }
    }
    let corloc_value = corloc(&tops, &gts, num_classes);

    let pseudo_quality = match pseudo {
        Some(path) => {
            let entries = read_detections_file(path)?;
            let mut per_class: BTreeMap<usize, QualityReport> = BTreeMap::new();
            let mut overall = QualityReport::default();
            for &image_id in &images {
                let image_gts: Vec<GroundTruth> = gts
                    .iter()
                    .filter(|g| g.image_id == image_id)
                    .cloned()
                    .collect();
                for class_id in 0..num_classes {
                    let class_gts: Vec<GroundTruth> = image_gts
                        .iter()
                        .filter(|g| g.class_id == class_id)
                        .cloned()
                        .collect();
                    if class_gts.is_empty() {
                        continue;
                    }
                    let set = PseudoGtSet {
                        stage: StageTag::Wsbdn,
                        entries: entries
                            .iter()
                            .filter(|d| d.image_id == image_id && d.class_id == class_id)
                            .map(|d| PseudoGt {
                                bbox: d.bbox,
                                weight: d.score,
                                class_id: d.class_id,
                            })
                            .collect(),
                    };
                    let report = pseudo_gt_quality(&set, &class_gts);
                    per_class.entry(class_id).or_default().merge(&report);
                    overall.merge(&report);
                }
            }
            Some(QualityByClass { per_class, overall })
        }
        None => None,
    };

    let metrics = EvalMetrics {
        per_class_ap: per_class,
        map,
        corloc: corloc_value,
        pseudo_quality,
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CliError::internal(format!("metrics serialization: {e}")))?;
    match out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            std::fs::write(dir.join("metrics.json"), json.clone() + "\n")?;
            println!("mAP {:.4}, CorLoc {:.4}", metrics.map, metrics.corloc);
        }
        None => println!("{json}"),
    }
    Ok(())
}
