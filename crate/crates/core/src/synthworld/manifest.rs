//! On-disk dataset layout: `manifest.json` plus one 8-bit RGB PNG per
//! image under `images/`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::geometry::{CameraPose, Resolution};
use super::{CapturedImage, Split, WorldError};
use crate::numerics::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: u32,
    pub file: String,
    pub split: Split,
    pub condition: String,
    pub quaternion_wxyz: [f64; 4],
    pub translation_xyz: [f64; 3],
    pub visible_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub resolution: Resolution,
    pub conditions: Vec<String>,
    pub images: Vec<ManifestEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> WorldError {
    WorldError::Io(format!("{}: {e}", path.display()))
}

pub fn write_png(path: &Path, pixels: &Tensor) -> Result<(), WorldError> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = pixels
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = enc.write_header().map_err(|e| io_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| io_err(path, e))?;
    writer.finish().map_err(|e| io_err(path, e))
}

pub fn read_png(path: &Path) -> Result<Tensor, WorldError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| io_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| io_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| io_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(io_err(path, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * 3].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data).map_err(|e| io_err(path, e))
}

/// Writes the manifest and all images under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path, config_hash: &str) -> Result<Manifest, WorldError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| io_err(&img_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let file = format!("images/{:06}.png", img.image_id);
        write_png(&dir.join(&file), &img.pixels)?;
        entries.push(ManifestEntry {
            image_id: img.image_id,
            file,
            split: img.split,
            condition: dataset.condition_name(img.condition).to_string(),
            quaternion_wxyz: img.pose.rotation,
            translation_xyz: img.pose.translation,
            visible_ids: img.visible_ids.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_hash: config_hash.to_string(),
        resolution: dataset.resolution,
        conditions: dataset.condition_names.clone(),
        images: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, WorldError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(io_err(
            &path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

fn stored_pose(e: &ManifestEntry) -> Result<CameraPose, WorldError> {
    let pose = CameraPose {
        rotation: e.quaternion_wxyz,
        translation: e.translation_xyz,
    };
    if (pose.quaternion_norm() - 1.0).abs() > 1e-9 || e.translation_xyz.iter().any(|v| !v.is_finite()) {
        return Err(WorldError::InvalidPose(format!("image {}: non-unit quaternion", e.image_id)));
    }
    Ok(pose)
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest), WorldError> {
    let manifest = read_manifest(dir)?;
    let mut images = Vec::with_capacity(manifest.images.len());
    for (i, e) in manifest.images.iter().enumerate() {
        if e.image_id as usize != i {
            return Err(WorldError::Io(format!(
                "manifest entry {i} has image_id {}; ids must be dense and ordered",
                e.image_id
            )));
        }
        let condition = manifest
            .conditions
            .iter()
            .position(|c| *c == e.condition)
            .ok_or_else(|| WorldError::UnknownCondition(e.condition.clone()))?;
        let pixels = read_png(&dir.join(&e.file))?;
        if pixels.shape() != [manifest.resolution.height, manifest.resolution.width, 3] {
            return Err(WorldError::Io(format!("{} has the wrong size", e.file)));
        }
        images.push(CapturedImage {
            image_id: e.image_id,
            split: e.split,
            condition: super::ConditionId(condition),
            pose: stored_pose(e)?,
            pixels,
            visible_ids: e.visible_ids.clone(),
        });
    }
    let dataset = Dataset {
        condition_names: manifest.conditions.clone(),
        resolution: manifest.resolution,
        images,
    };
    Ok((dataset, manifest))
}
