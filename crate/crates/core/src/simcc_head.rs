//! Coordinate-classification head: each keypoint token becomes a pair of 1D
//! distributions over horizontal and vertical sub-pixel bins.

use crate::error::{Error, Result};
use crate::layers::linear;
use crate::model::Context;
use crate::numerics::{Array, Real, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct HeatmapPair {
    /// `K × (k·W)`.
    pub logits_x: Var,
    /// `K × (k·H)`.
    pub logits_y: Var,
    pub split: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl HeatmapPair {
    pub fn decode<T: Real>(&self, tape: &Tape<T>) -> Vec<[f64; 2]> {
        decode(&tape.value(self.logits_x), &tape.value(self.logits_y), self.split)
    }
}

/// Layer-normalises the tokens, then applies one shared linear classifier
/// per axis to every keypoint.
pub fn head_forward<T: Real>(cx: &Context<'_, T>, tokens: Var) -> Result<HeatmapPair> {
    let k = cx.schema.num_keypoints();
    let rows = cx.tape.shape(tokens)[0];
    if rows != k {
        return Err(Error::arg(
            "head_forward",
            format!("{rows} keypoint tokens, schema has {k}"),
        ));
    }
    let tape = cx.tape;
    let xn = tape.layer_norm(tokens, cx.param("head.norm.gain")?, cx.param("head.norm.bias")?)?;
    Ok(HeatmapPair {
        logits_x: linear(tape, xn, cx.param("head.x.weight")?, cx.param("head.x.bias")?)?,
        logits_y: linear(tape, xn, cx.param("head.y.weight")?, cx.param("head.y.bias")?)?,
        split: cx.config.simcc_split,
        image_width: cx.config.image_width,
        image_height: cx.config.image_height,
    })
}

/// First index of the row maximum.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pixel coordinates `(x, y)` from the arg-max bins.
pub fn decode<T: Real>(logits_x: &Array<T>, logits_y: &Array<T>, split: usize) -> Vec<[f64; 2]> {
    let k = split as f64;
    (0..logits_x.rows())
        .map(|i| {
            [
                argmax(logits_x.row(i)) as f64 / k,
                argmax(logits_y.row(i)) as f64 / k,
            ]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Targets<T> {
    /// `K × (k·W)` rows summing to one.
    pub x: Array<T>,
    /// `K × (k·H)` rows summing to one.
    pub y: Array<T>,
    /// Keypoints that contribute to the loss.
    pub visible: Vec<bool>,
}

/// A coordinate is encodable when its centre bin exists.
pub fn in_bounds(c: f64, size: usize, split: usize) -> bool {
    c.is_finite() && c >= 0.0 && c * split as f64 <= (split * size - 1) as f64
}

fn gaussian_row<T: Real>(centre: f64, bins: usize, sigma: f64, out: &mut [T]) {
    let mut total = 0.0;
    let vals: Vec<f64> = (0..bins)
        .map(|b| {
            let z = (b as f64 - centre) / sigma;
            let v = (-0.5 * z * z).exp();
            total += v;
            v
        })
        .collect();
    for (o, v) in out.iter_mut().zip(vals) {
        *o = T::lit(v / total);
    }
}

/// Discrete Gaussians centred at `k·c` on each axis, normalised per row.
/// Out-of-bounds keypoints are marked invisible and get all-zero rows.
pub fn encode_target<T: Real>(
    coords: &[[f64; 2]],
    visible: &[bool],
    sigma: f64,
    split: usize,
    width: usize,
    height: usize,
) -> Result<Targets<T>> {
    if coords.len() != visible.len() {
        return Err(Error::shape("encode_target", &[coords.len()], &[visible.len()]));
    }
    if !(sigma > 0.0) {
        return Err(Error::arg("encode_target", "sigma must be positive"));
    }
    let (bx, by) = (split * width, split * height);
    let k = coords.len();
    let mut x = Array::zeros(&[k, bx]);
    let mut y = Array::zeros(&[k, by]);
    let mut vis = Vec::with_capacity(k);
    let s = split as f64;
    for (i, (&[cx, cy], &v)) in coords.iter().zip(visible).enumerate() {
        let ok = v && in_bounds(cx, width, split) && in_bounds(cy, height, split);
        if ok {
            gaussian_row(s * cx, bx, sigma, x.row_mut(i));
            gaussian_row(s * cy, by, sigma, y.row_mut(i));
        }
        vis.push(ok);
    }
    Ok(Targets { x, y, visible: vis })
}
