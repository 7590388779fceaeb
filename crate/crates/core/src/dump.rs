//! Attention maps and retained-token masks as 8-bit PGM images, each with a
//! JSON sidecar holding the min-max range used for normalisation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ForwardOptions, Model};
use crate::numerics::{Array, Real, Tape};
use crate::pruning::PruneDecision;
use crate::schema::Group;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Min-max normalises `values` (row-major `rows × cols`) to 0..=255 and
/// encodes a binary PGM.
pub fn encode_pgm(values: &[f64], rows: usize, cols: usize) -> (Vec<u8>, Sidecar) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - min) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    let (min, max) = if values.is_empty() { (0.0, 0.0) } else { (min, max) };
    (out, Sidecar { min, max, rows, cols })
}

pub fn write_pgm(dir: &Path, stem: &str, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    let (bytes, side) = encode_pgm(values, rows, cols);
    std::fs::write(dir.join(format!("{stem}.pgm")), bytes)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

fn group_tag(g: Option<Group>) -> &'static str {
    g.map_or("all", Group::name)
}

/// Retained patches of one decision as a `rows × cols` 0/1 grid.
pub fn retained_mask(d: &PruneDecision, rows: usize, cols: usize) -> Vec<f64> {
    let mut m = vec![0.0; rows * cols];
    for &p in &d.retained {
        m[p] = 1.0;
    }
    m
}

/// Runs a pruned forward with attention recording and writes every layer's
/// per-head attention, every stage's retained-token mask and the decisions.
/// Returns the number of images written.
pub fn dump_sample<T: Real>(model: &Model<T>, image: &Array<T>, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let tape = Tape::new();
    let opts = ForwardOptions {
        prune: true,
        record_attention: true,
        replay: None,
    };
    let out = model.forward(&tape, image, &opts)?;
    let mut written = 0;
    for r in &out.records {
        let &[h, nq, nk] = r.attention.shape() else {
            unreachable!("attention records are rank 3")
        };
        let data: Vec<f64> = r.attention.data().iter().map(|v| v.as_f64()).collect();
        for head in 0..h {
            let slice = &data[head * nq * nk..(head + 1) * nq * nk];
            let name = format!("attn_l{:02}_{}_h{head}", r.layer, group_tag(r.group));
            write_pgm(dir, &name, slice, nq, nk)?;
            written += 1;
        }
    }
    let (rows, cols) = (model.config.grid_rows(), model.config.grid_cols());
    for d in &out.decisions {
        let name = format!("mask_s{}_{}", d.stage as u8, group_tag(d.group));
        write_pgm(dir, &name, &retained_mask(d, rows, cols), rows, cols)?;
        written += 1;
    }
    std::fs::write(dir.join("decisions.json"), serde_json::to_vec_pretty(&out.decisions)?)?;
    Ok(written)
}
