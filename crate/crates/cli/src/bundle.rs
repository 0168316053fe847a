//! On-disk scene bundle: one JSON document per scene plus one text grid per
//! (scene, class) heatmap, tied together by a manifest.

use dthcp::geometry::BBox;
use dthcp::heatmap::{normalize, read_grid_file, write_grid_file, RawActivationMap};
use dthcp::metrics::GroundTruth;
use dthcp::synth::{Scene, SceneBundle, SynthConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneFile {
    pub image_id: usize,
    pub config: SynthConfig,
    pub scene: Scene,
    pub image_labels: Vec<bool>,
    pub proposals: Vec<BBox>,
    pub ground_truth: Vec<GroundTruth>,
    /// class id -> heatmap grid file, relative to the scene file.
    pub heatmap_files: BTreeMap<usize, String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub rng_algorithm: String,
    pub config: RunConfig,
    pub scenes: Vec<String>,
}

pub fn scene_stem(image_id: usize) -> String {
    format!("scene_{image_id:04}")
}

/// Write the scene JSON and its heatmap grids into `dir`; returns the scene
/// file name.
pub fn write_bundle(dir: &Path, bundle: &SceneBundle) -> Result<String, CliError> {
    let stem = scene_stem(bundle.image_id);
    let mut heatmap_files = BTreeMap::new();
    for map in &bundle.heatmaps {
        let name = format!("{stem}_class{}.hm.txt", map.class_id);
        write_grid_file(dir.join(&name), map.values())?;
        heatmap_files.insert(map.class_id, name);
    }
    let file = SceneFile {
        image_id: bundle.image_id,
        config: bundle.config.clone(),
        scene: bundle.scene.clone(),
        image_labels: bundle.image_labels.clone(),
        proposals: bundle.proposals.clone(),
        ground_truth: bundle.ground_truth.clone(),
        heatmap_files,
    };
    let name = format!("{stem}.json");
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::internal(format!("scene serialization: {e}")))?;
    std::fs::write(dir.join(&name), json + "\n")?;
    Ok(name)
}

/// Load a scene bundle back, re-reading and re-normalizing the heatmap
/// grids (pre-normalized inputs pass through unchanged).
pub fn read_bundle(dir: &Path, name: &str) -> Result<SceneBundle, CliError> {
    let text = std::fs::read_to_string(dir.join(name))
        .map_err(|e| CliError::user(format!("cannot read scene {name}: {e}")))?;
    let file: SceneFile =
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("bad scene {name}: {e}")))?;
    let mut heatmaps = Vec::new();
    for (&class_id, grid_name) in &file.heatmap_files {
        let values = read_grid_file(dir.join(grid_name))?;
        heatmaps.push(normalize(&RawActivationMap::new(values, class_id)?));
    }
    Ok(SceneBundle {
        image_id: file.image_id,
        config: file.config,
        scene: file.scene,
        image_labels: file.image_labels,
        heatmaps,
        proposals: file.proposals,
        ground_truth: file.ground_truth,
    })
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::internal(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::user(format!("bad manifest: {e}")))
}
