//! Gate exports: PGM images for pixel cells, CSV lines for channel cells,
//! and an NFS1 container holding derived gates for retraining.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::cell::{SearchCell, StageCells};
use crate::error::{NfsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointEntry, GateLevel};

/// Derived binary gates keyed by cell name (`stage{n}.{modality}.{level}`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DerivedGates {
    pub cells: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl DerivedGates {
    pub fn stages(&self) -> Vec<usize> {
        let mut stages: Vec<usize> = self
            .cells
            .keys()
            .filter_map(|k| k.strip_prefix("stage")?.split('.').next()?.parse().ok())
            .collect();
        stages.dedup();
        stages
    }
}

/// Writes a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(NfsError::shape("write_pgm", "pixel count", width * height, pixels.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| NfsError::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn file_stem<T: Scalar>(cell: &SearchCell<T>) -> String {
    cell.name().replace('.', "_")
}

fn export_cell<T: Scalar>(dir: &Path, cell: &SearchCell<T>) -> Result<Vec<PathBuf>> {
    let probs: Vec<f64> = cell.probabilities().into_iter().map(|p| p.to_f64_lossy()).collect();
    let derived: Option<Vec<f64>> = cell.derived().map(|g| g.iter().map(|v| v.to_f64_lossy()).collect());
    let stem = file_stem(cell);
    let mut written = Vec::new();
    match cell.level {
        GateLevel::Pixel => {
            // channels stacked vertically: width W, height C*H
            let shape = cell.shape();
            let (width, height) = (shape[2], shape[0] * shape[1]);
            let path = dir.join(format!("{stem}_prob.pgm"));
            write_pgm(&path, width, height, &probs.iter().map(|&p| to_byte(p)).collect::<Vec<_>>())?;
            written.push(path);
            if let Some(g) = derived {
                let path = dir.join(format!("{stem}_gate.pgm"));
                write_pgm(&path, width, height, &g.iter().map(|&v| to_byte(v)).collect::<Vec<_>>())?;
                written.push(path);
            }
        }
        GateLevel::Channel => {
            let line = |vals: &[f64]| {
                let mut s = String::new();
                for (i, v) in vals.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    write!(s, "{v}").expect("string write");
                }
                s.push('\n');
                s
            };
            let path = dir.join(format!("{stem}_prob.csv"));
            fs::write(&path, line(&probs)).map_err(|e| NfsError::io(&path, e))?;
            written.push(path);
            if let Some(g) = derived {
                let path = dir.join(format!("{stem}_gate.csv"));
                fs::write(&path, line(&g)).map_err(|e| NfsError::io(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Writes probability and (if derived) gate exports for every cell of a stage.
pub fn export_stage_gates<T: Scalar>(dir: &Path, stage: &StageCells<T>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| NfsError::io(dir, e))?;
    let mut written = Vec::new();
    for cell in stage.cells() {
        written.extend(export_cell(dir, cell)?);
    }
    Ok(written)
}

pub fn gates_to_checkpoint(path: &Path, gates: &DerivedGates) -> Result<()> {
    let entries: Vec<CheckpointEntry> = gates
        .cells
        .iter()
        .map(|(name, (shape, values))| CheckpointEntry {
            name: name.clone(),
            shape: shape.clone(),
            values: values.clone(),
        })
        .collect();
    write_checkpoint(path, &entries)
}

pub fn gates_from_checkpoint(path: &Path) -> Result<DerivedGates> {
    let mut gates = DerivedGates::default();
    for entry in read_checkpoint(path)? {
        if !entry.name.starts_with("stage") {
            return Err(NfsError::format(path, format!("unexpected gate entry {}", entry.name)));
        }
        if entry.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(NfsError::format(path, format!("gate entry {} is not binary", entry.name)));
        }
        gates.cells.insert(entry.name, (entry.shape, entry.values));
    }
    Ok(gates)
}
