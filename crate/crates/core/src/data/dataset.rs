use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{atomic_write, read_ply, read_ppm, write_ply, write_ppm};
use super::RegistrationPair;
use crate::error::{Error, Result};
use crate::registration::RigidTransform;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Scene the pair was cut from; pairs of one scene share a label.
    #[serde(default)]
    pub scene: String,
    pub src_cloud: String,
    pub dst_cloud: String,
    pub src_image: String,
    pub dst_image: String,
    /// Row-major rotation of the source-to-target transform.
    pub gt_rotation: [f64; 9],
    pub gt_translation: [f64; 3],
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub pairs: Vec<ManifestEntry>,
}

impl ManifestEntry {
    pub fn gt(&self) -> Result<RigidTransform> {
        let r = &self.gt_rotation;
        RigidTransform::new(
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            self.gt_translation,
        )
    }
}

/// Writes every pair as two PLY clouds and two PPM images plus a JSON
/// manifest with paths relative to `dir`.
pub fn save_dataset(dir: &Path, pairs: &[RegistrationPair]) -> Result<Manifest> {
    let scenes: Vec<String> = (0..pairs.len()).map(|i| format!("scene_{i:04}")).collect();
    save_dataset_with_scenes(dir, pairs, &scenes)
}

/// Like [`save_dataset`], with one scene label per pair.
pub fn save_dataset_with_scenes(
    dir: &Path,
    pairs: &[RegistrationPair],
    scenes: &[String],
) -> Result<Manifest> {
    if scenes.len() != pairs.len() {
        return Err(Error::dim("save_dataset", &[pairs.len()], &[scenes.len()]));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let id = format!("pair_{i:04}");
        let entry = ManifestEntry {
            src_cloud: format!("{id}_src.ply"),
            dst_cloud: format!("{id}_dst.ply"),
            src_image: format!("{id}_src.ppm"),
            dst_image: format!("{id}_dst.ppm"),
            gt_rotation: std::array::from_fn(|k| pair.gt.rotation[k / 3][k % 3]),
            gt_translation: pair.gt.translation,
            overlap: pair.overlap_fraction,
            scene: scenes[i].clone(),
            id,
        };
        write_ply(&dir.join(&entry.src_cloud), &pair.src)?;
        write_ply(&dir.join(&entry.dst_cloud), &pair.dst)?;
        write_ppm(&dir.join(&entry.src_image), &pair.src_image)?;
        write_ppm(&dir.join(&entry.dst_image), &pair.dst_image)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        version: 1,
        pairs: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    atomic_write(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<RegistrationPair>)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::contract(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| {
            Ok(RegistrationPair {
                src: read_ply(&dir.join(&e.src_cloud))?,
                dst: read_ply(&dir.join(&e.dst_cloud))?,
                src_image: read_ppm(&dir.join(&e.src_image))?,
                dst_image: read_ppm(&dir.join(&e.dst_image))?,
                gt: e.gt()?,
                overlap_fraction: e.overlap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}
