//! Seed-addressed synthetic stick figures: kinematic skeletons rendered as
//! anti-aliased limbs and joint blobs, with optional dense clusters.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{KeypointSchema, Mode};

const MAGIC: &[u8; 4] = b"GSYN";
const VERSION: u32 = 1;
const MAX_RESAMPLES: usize = 100;

/// Limbs between body joints, drawn as line segments.
pub const LIMBS: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

/// Sampling ranges in pixels and radians. Lengths are for a 64-pixel-tall
/// image and scale with the image height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    /// Pelvis position as fractions of width and height.
    pub root_x: (f64, f64),
    pub root_y: (f64, f64),
    pub torso: f64,
    pub neck: f64,
    pub shoulder_half: f64,
    pub hip_half: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    /// Relative length jitter, e.g. 0.1 for ±10%.
    pub jitter: f64,
    pub torso_tilt: f64,
    pub shoulder_angle: f64,
    pub elbow_angle: f64,
    pub hip_angle: f64,
    pub knee_angle: f64,
    pub occlusion: f64,
    pub noise: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            root_x: (0.44, 0.56),
            root_y: (0.55, 0.62),
            torso: 14.0,
            neck: 5.0,
            shoulder_half: 5.0,
            hip_half: 3.5,
            upper_arm: 6.5,
            forearm: 5.5,
            thigh: 9.0,
            shin: 9.0,
            jitter: 0.1,
            torso_tilt: 10f64.to_radians(),
            shoulder_angle: 60f64.to_radians(),
            elbow_angle: 60f64.to_radians(),
            hip_angle: 25f64.to_radians(),
            knee_angle: 40f64.to_radians(),
            occlusion: 0.02,
            noise: 0.05,
        }
    }
}

impl Geometry {
    /// No randomness in lengths or angles: a centred T-pose.
    pub fn rigid() -> Self {
        Self {
            root_x: (0.5, 0.5),
            root_y: (0.6, 0.6),
            jitter: 0.0,
            torso_tilt: 0.0,
            shoulder_angle: 0.0,
            elbow_angle: 0.0,
            hip_angle: 0.0,
            knee_angle: 0.0,
            occlusion: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub coords: Vec<[f32; 2]>,
    pub visibility: Vec<bool>,
    pub seed: u64,
}

type P = [f64; 2];

fn add(a: P, b: P) -> P {
    [a[0] + b[0], a[1] + b[1]]
}

fn mul(a: P, s: f64) -> P {
    [a[0] * s, a[1] * s]
}

fn rot(v: P, angle: f64) -> P {
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

fn sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn span(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn in_image(p: P, h: usize, w: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64
}

/// Body joints in the standard 17-joint order, plus dense points when the
/// schema has them.
fn skeleton(rng: &mut ChaCha8Rng, schema: &KeypointSchema, g: &Geometry, h: usize, w: usize) -> Vec<P> {
    let s = h as f64 / 64.0;
    let mut len = |base: f64| base * s * (1.0 + sym(rng, g.jitter));
    let (torso, neck, sh, hh) = (len(g.torso), len(g.neck), len(g.shoulder_half), len(g.hip_half));
    let (ua, fa, th, sn) = (len(g.upper_arm), len(g.forearm), len(g.thigh), len(g.shin));
    let root = [span(rng, g.root_x) * w as f64, span(rng, g.root_y) * h as f64];
    let tilt = sym(rng, g.torso_tilt);
    let up = rot([0.0, -1.0], tilt);
    let right = rot([1.0, 0.0], tilt);
    let down = mul(up, -1.0);

    let neck_pt = add(root, mul(up, torso));
    let head = add(neck_pt, mul(up, neck));
    let mut j = vec![[0.0; 2]; 17];
    j[0] = head;
    j[1] = add(head, add(mul(up, 1.2 * s), mul(right, 1.2 * s)));
    j[2] = add(head, add(mul(up, 1.2 * s), mul(right, -1.2 * s)));
    j[3] = add(head, mul(right, 2.5 * s));
    j[4] = add(head, mul(right, -2.5 * s));
    j[5] = add(neck_pt, mul(right, sh));
    j[6] = add(neck_pt, mul(right, -sh));
    j[11] = add(root, mul(right, hh));
    j[12] = add(root, mul(right, -hh));
    for (side, (sho, elb, wri)) in [(1.0, (5, 7, 9)), (-1.0, (6, 8, 10))] {
        let a1 = sym(rng, g.shoulder_angle);
        let a2 = sym(rng, g.elbow_angle);
        let dir = rot(mul(right, side), a1);
        j[elb] = add(j[sho], mul(dir, ua));
        j[wri] = add(j[elb], mul(rot(dir, a2), fa));
    }
    for (side, (hip, knee, ankle)) in [(1.0, (11, 13, 15)), (-1.0, (12, 14, 16))] {
        let a1 = sym(rng, g.hip_angle);
        let a2 = side * span(rng, (0.0, g.knee_angle));
        let dir = rot(down, a1);
        j[knee] = add(j[hip], mul(dir, th));
        j[ankle] = add(j[knee], mul(rot(dir, a2), sn));
    }

    if schema.mode == Mode::Wholebody {
        // anchors per part: face, left hand, right hand, left foot, right foot
        let anchors = [head, j[9], j[10], j[15], j[16]];
        let radius = [2.5 * s, 1.5 * s, 1.5 * s, 1.2 * s, 1.2 * s];
        let mut per_part = [0usize; 5];
        for &o in &schema.dense_owner {
            per_part[o] += 1;
        }
        let mut seen = [0usize; 5];
        for &o in &schema.dense_owner {
            let n = per_part[o].max(1) as f64;
            let t = 2.0 * PI * seen[o] as f64 / n;
            seen[o] += 1;
            let r = radius[o] * (1.0 + 0.15 * sym(rng, 1.0));
            let offset = [r * t.cos(), r * 0.8 * t.sin()];
            j.push(add(anchors[o], rot(offset, tilt)));
        }
    }
    j
}

/// Keypoint coordinates and visibility for `seed`. Joints outside the image
/// or randomly occluded are invisible.
pub fn sample_skeleton(
    seed: u64,
    schema: &KeypointSchema,
    geometry: &Geometry,
    height: usize,
    width: usize,
) -> Result<(Vec<[f64; 2]>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLES {
        let coords = skeleton(&mut rng, schema, geometry, height, width);
        let vis: Vec<bool> = coords
            .iter()
            .map(|&c| in_image(c, height, width) && !rng.random_bool(geometry.occlusion.clamp(0.0, 1.0)))
            .collect();
        if vis.iter().any(|&v| v) {
            return Ok((coords, vis));
        }
    }
    Err(Error::arg(
        "sample_skeleton",
        format!("no visible joint after {MAX_RESAMPLES} draws; geometry places the figure off-image"),
    ))
}

fn segment_distance(p: P, a: P, b: P) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

const LIMB_HALF_WIDTH: f64 = 0.6;
const LIMB_LEVEL: f64 = 0.45;
const JOINT_LEVEL: f64 = 1.0;
const JOINT_SIGMA: f64 = 1.0;
const DENSE_LEVEL: f64 = 0.6;
const DENSE_SIGMA: f64 = 0.6;

/// Renders limbs between visible body joints and a Gaussian blob at every
/// visible keypoint, adds `noise · U[0, 1)` per pixel and clips to `[0, 1]`.
pub fn render(
    coords: &[[f64; 2]],
    visible: &[bool],
    height: usize,
    width: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let mut img = vec![0.0f64; height * width];
    for &(a, b) in &LIMBS {
        if a >= coords.len() || b >= coords.len() || !(visible[a] && visible[b]) {
            continue;
        }
        let (pa, pb) = (coords[a], coords[b]);
        let pad = LIMB_HALF_WIDTH + 1.0;
        let x0 = (pa[0].min(pb[0]) - pad).floor().max(0.0) as usize;
        let x1 = ((pa[0].max(pb[0]) + pad).ceil() as usize).min(width - 1);
        let y0 = (pa[1].min(pb[1]) - pad).floor().max(0.0) as usize;
        let y1 = ((pa[1].max(pb[1]) + pad).ceil() as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance([x as f64, y as f64], pa, pb);
                let cover = (LIMB_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
                img[y * width + x] += LIMB_LEVEL * cover;
            }
        }
    }
    for (i, (&c, &v)) in coords.iter().zip(visible).enumerate() {
        if !v {
            continue;
        }
        let (level, sigma) = if i < 17 {
            (JOINT_LEVEL, JOINT_SIGMA)
        } else {
            (DENSE_LEVEL, DENSE_SIGMA)
        };
        let r = (3.0 * sigma).ceil() as isize;
        let (cx, cy) = (c[0].round() as isize, c[1].round() as isize);
        for y in (cy - r).max(0)..=(cy + r).min(height as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(width as isize - 1) {
                let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
                img[y as usize * width + x as usize] +=
                    level * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    img.iter()
        .map(|&v| {
            let n = if noise > 0.0 { noise * rng.random::<f64>() } else { 0.0 };
            (v + n).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Seed of the `index`-th sample of a dataset.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn make_sample(
    seed: u64,
    schema: &KeypointSchema,
    geometry: &Geometry,
    height: usize,
    width: usize,
) -> Result<Sample> {
    let (coords, vis) = sample_skeleton(seed, schema, geometry, height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    let image = render(&coords, &vis, height, width, geometry.noise, &mut rng);
    Ok(Sample {
        height,
        width,
        image,
        coords: coords.iter().map(|c| [c[0] as f32, c[1] as f32]).collect(),
        visibility: vis,
        seed,
    })
}

/// `count` samples, generated in parallel; sample `i` depends only on
/// `(seed, i)`.
pub fn generate(
    count: usize,
    seed: u64,
    schema: &KeypointSchema,
    geometry: &Geometry,
    height: usize,
    width: usize,
) -> Result<Vec<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|i| make_sample(sample_seed(seed, i), schema, geometry, height, width))
        .collect()
}

/// Fraction of visible keypoints whose error is within `threshold` times the
/// diagonal of the visible ground-truth bounding box. `None` when nothing is
/// visible.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], visible: &[bool], threshold: f64) -> Option<f64> {
    let vis: Vec<usize> = (0..gt.len()).filter(|&i| visible[i]).collect();
    if vis.is_empty() {
        return None;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &i in &vis {
        for a in 0..2 {
            lo[a] = lo[a].min(gt[i][a]);
            hi[a] = hi[a].max(gt[i][a]);
        }
    }
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    let tol = threshold * diag;
    let hits = vis
        .iter()
        .filter(|&&i| {
            let (dx, dy) = (pred[i][0] - gt[i][0], pred[i][1] - gt[i][1]);
            (dx * dx + dy * dy).sqrt() <= tol
        })
        .count();
    Some(hits as f64 / vis.len() as f64)
}

fn u16_of(v: usize, what: &str) -> Result<[u8; 2]> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
}

pub fn write_dataset(mut w: impl Write, samples: &[Sample]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(samples.len()).map_err(|_| Error::Format("too many samples".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for s in samples {
        w.write_all(&u16_of(s.height, "height")?)?;
        w.write_all(&u16_of(s.width, "width")?)?;
        for v in &s.image {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&u16_of(s.coords.len(), "keypoint count")?)?;
        for c in &s.coords {
            w.write_all(&c[0].to_le_bytes())?;
            w.write_all(&c[1].to_le_bytes())?;
        }
        let vis: Vec<u8> = s.visibility.iter().map(|&v| v as u8).collect();
        w.write_all(&vis)?;
        w.write_all(&s.seed.to_le_bytes())?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_dataset(mut r: impl Read) -> Result<Vec<Sample>> {
    if &take::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("not a GSYN dataset".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let height = u16::from_le_bytes(take(&mut r)?) as usize;
        let width = u16::from_le_bytes(take(&mut r)?) as usize;
        let image = f32s(&mut r, height * width)?;
        let k = u16::from_le_bytes(take(&mut r)?) as usize;
        let flat = f32s(&mut r, 2 * k)?;
        let coords = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let mut vis = vec![0u8; k];
        r.read_exact(&mut vis)?;
        let seed = u64::from_le_bytes(take(&mut r)?);
        out.push(Sample {
            height,
            width,
            image,
            coords,
            visibility: vis.into_iter().map(|v| v != 0).collect(),
            seed,
        });
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, samples)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path)?;
    read_dataset(bytes.as_slice())
}
