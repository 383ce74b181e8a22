//! Predictions CSV:
//! `query_id,tx,ty,tz,qw,qx,qy,qz,top1_id,top1_sim`, preceded by a
//! `# config_hash=` comment line.

use std::fmt::Write as _;
use std::path::Path;

use super::{file_err, EvalError};
use crate::synthworld::CameraPose;

pub const PREDICTIONS_HEADER: &str = "query_id,tx,ty,tz,qw,qx,qy,qz,top1_id,top1_sim";

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub query_id: u32,
    pub pose: CameraPose,
    pub top1_id: u32,
    pub top1_sim: f64,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction], config_hash: &str) -> Result<(), EvalError> {
    let mut out = format!("# config_hash={config_hash}\n{PREDICTIONS_HEADER}\n");
    for p in predictions {
        let [tx, ty, tz] = p.pose.translation;
        let [qw, qx, qy, qz] = p.pose.rotation;
        writeln!(
            out,
            "{},{tx},{ty},{tz},{qw},{qx},{qy},{qz},{},{}",
            p.query_id, p.top1_id, p.top1_sim
        )
        .expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| file_err(path, e))
}

/// Parses a predictions file; returns the rows and the embedded config
/// hash, if any.
pub fn read_predictions(path: &Path) -> Result<(Vec<Prediction>, Option<String>), EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut hash = None;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if let Some(c) = line.strip_prefix('#') {
            if let Some(h) = c.trim().strip_prefix("config_hash=") {
                hash = Some(h.to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line.trim() != PREDICTIONS_HEADER {
                return Err(file_err(path, format!("line {line_no}: expected header `{PREDICTIONS_HEADER}`")));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(file_err(path, format!("line {line_no}: expected 10 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, EvalError> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| file_err(path, format!("line {line_no}, field {}: {e}", i + 1)))
        };
        let id = |i: usize| -> Result<u32, EvalError> {
            fields[i]
                .trim()
                .parse::<u32>()
                .map_err(|e| file_err(path, format!("line {line_no}, field {}: {e}", i + 1)))
        };
        rows.push(Prediction {
            query_id: id(0)?,
            pose: CameraPose {
                translation: [num(1)?, num(2)?, num(3)?],
                rotation: [num(4)?, num(5)?, num(6)?, num(7)?],
            },
            top1_id: id(8)?,
            top1_sim: num(9)?,
        });
    }
    if !seen_header {
        return Err(file_err(path, "missing header"));
    }
    Ok((rows, hash))
}
