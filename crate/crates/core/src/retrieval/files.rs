//! Descriptor and index files.
//!
//! Descriptor file (`CDSC`): magic, version `u32`, count `u64`, dim `u32`,
//! then `count × dim` little-endian `f32` values, row-major.
//!
//! Index file (`CIDX`): magic, version `u32`, JSON header length `u64`,
//! JSON header (config hash, extraction options, whitening transform,
//! image ids and poses), then an embedded descriptor file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DescriptorIndex, IndexEntry, RetrievalError, RetrievalOptions, WhitenTransform};
use crate::model::Descriptor;
use crate::synthworld::CameraPose;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"CDSC";
pub const INDEX_MAGIC: &[u8; 4] = b"CIDX";
const VERSION: u32 = 1;

/// Row-major descriptor matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

fn file_err(path: &Path, message: impl std::fmt::Display) -> RetrievalError {
    RetrievalError::File {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn encode_descriptors(rows: &[&[f64]], dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + rows.len() * dim * 4);
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        for v in r.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorFile, String> {
    if bytes.len() < 20 || &bytes[..4] != DESCRIPTOR_MAGIC {
        return Err("not a CDSC descriptor file".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("descriptor file version {version} is not supported"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or("descriptor count overflows")?;
    if bytes.len() - 20 != expected {
        return Err(format!(
            "expected {expected} bytes of descriptor data, found {}",
            bytes.len() - 20
        ));
    }
    let values: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let rows = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        values.chunks_exact(dim).map(<[f32]>::to_vec).collect()
    };
    Ok(DescriptorFile { dim, rows })
}

pub fn write_descriptors(path: &Path, rows: &[&[f64]]) -> Result<(), RetrievalError> {
    let dim = rows.first().map_or(0, |r| r.len());
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    std::fs::write(path, encode_descriptors(rows, dim)).map_err(|e| file_err(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorFile, RetrievalError> {
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
    decode_descriptors(&bytes).map_err(|m| file_err(path, m))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    config_hash: String,
    options: RetrievalOptions,
    whitening: Option<WhitenTransform>,
    image_ids: Vec<u32>,
    poses: Vec<CameraPose>,
}

pub fn write_index(
    path: &Path,
    index: &DescriptorIndex,
    options: &RetrievalOptions,
    config_hash: &str,
) -> Result<(), RetrievalError> {
    let header = IndexHeader {
        config_hash: config_hash.to_string(),
        options: options.clone(),
        whitening: index.whitening().cloned(),
        image_ids: index.entries().iter().map(|e| e.image_id).collect(),
        poses: index.entries().iter().map(|e| e.pose).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| file_err(path, e))?;
    let rows: Vec<&[f64]> = index.entries().iter().map(|e| e.descriptor.as_slice()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&encode_descriptors(&rows, index.dim()));
    std::fs::write(path, out).map_err(|e| file_err(path, e))
}

/// Reads an index file; returns the index, the options it was built with,
/// and its config hash.
pub fn read_index(path: &Path) -> Result<(DescriptorIndex, RetrievalOptions, String), RetrievalError> {
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != INDEX_MAGIC {
        return Err(file_err(path, "not a CIDX index file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(file_err(path, format!("index version {version} is not supported")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| file_err(path, "truncated header"))?;
    let header: IndexHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| file_err(path, format!("header: {e}")))?;
    let desc = decode_descriptors(&bytes[header_end..]).map_err(|m| file_err(path, m))?;
    if desc.rows.len() != header.image_ids.len() || header.poses.len() != header.image_ids.len() {
        return Err(file_err(path, "descriptor, id and pose counts differ"));
    }
    let entries = header
        .image_ids
        .iter()
        .zip(&header.poses)
        .zip(desc.rows)
        .map(|((id, pose), row)| {
            let descriptor = Descriptor::from_unit(row.into_iter().map(f64::from).collect())
                .map_err(|e| file_err(path, format!("image {id}: {e}")))?;
            Ok(IndexEntry {
                image_id: *id,
                descriptor,
                pose: *pose,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let index = DescriptorIndex::from_entries(entries, header.whitening)?;
    Ok((index, header.options, header.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::l2_normalize;

    #[test]
    fn descriptor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cdsc");
        let rows = [vec![0.5, -0.25, 1.0], vec![0.0, 2.0, 3.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        write_descriptors(&p, &refs).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CDSC");
        assert_eq!(bytes.len(), 20 + 6 * 4);
        let back = read_descriptors(&p).unwrap();
        assert_eq!(back.dim, 3);
        assert_eq!(back.rows[1], vec![0.0f32, 2.0, 3.0]);
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_descriptors(&p).is_err());
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.cidx");
        let entries = vec![
            IndexEntry {
                image_id: 3,
                descriptor: l2_normalize(&[0.5, 0.5]).unwrap(),
                pose: CameraPose::identity(),
            },
            IndexEntry {
                image_id: 1,
                descriptor: l2_normalize(&[1.0, 0.0]).unwrap(),
                pose: CameraPose::looking_horizontally([1.0, 2.0, 3.0], 0.3),
            },
        ];
        let idx = DescriptorIndex::from_entries(entries, Some(WhitenTransform::identity(2))).unwrap();
        write_index(&p, &idx, &RetrievalOptions::default(), "h").unwrap();
        let (back, opts, hash) = read_index(&p).unwrap();
        assert_eq!(hash, "h");
        assert_eq!(opts, RetrievalOptions::default());
        assert_eq!(back.len(), 2);
        assert_eq!(back.entries()[1].pose, idx.entries()[1].pose);
        assert_eq!(back.query_topk(&[1.0, 0.0], 1).unwrap()[0].image_id, 1);
    }
}
