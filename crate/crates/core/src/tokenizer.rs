//! Conv stem and patch embedding: image → visual tokens.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::linear;
use crate::model::Context;
use crate::numerics::{Real, Var};

/// `height × width × channels` activations, stored row-major as a
/// `(height·width) × channels` matrix.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct VisualTokens {
    /// `N_vis × d`.
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
}

impl VisualTokens {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch-grid position of token `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        (t / self.cols, t % self.cols)
    }
}

/// im2col gather for a 3×3, stride-2, pad-1 convolution. Column order within
/// a row is `(ky, kx, c)`; padding positions gather zero.
pub fn conv3x3_s2_indices(h: usize, w: usize, c: usize) -> (Arc<[Option<usize>]>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(ho * wo * 9 * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (y, x) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        idx.push(inside.then(|| (y as usize * w + x as usize) * c + ch));
                    }
                }
            }
        }
    }
    (idx.into(), ho, wo)
}

/// Patch extraction: one row per patch in row-major grid order, each row
/// flattened as `(py, px, c)`.
pub fn patch_indices(h: usize, w: usize, c: usize, ph: usize, pw: usize) -> Arc<[Option<usize>]> {
    let (gr, gc) = (h / ph, w / pw);
    let mut idx = Vec::with_capacity(h * w * c);
    for r in 0..gr {
        for col in 0..gc {
            for py in 0..ph {
                for px in 0..pw {
                    let (y, x) = (r * ph + py, col * pw + px);
                    for ch in 0..c {
                        idx.push(Some((y * w + x) * c + ch));
                    }
                }
            }
        }
    }
    idx.into()
}

/// Stride-2 conv + GELU blocks. With zero blocks the image passes through.
pub fn stem<T: Real>(cx: &Context<'_, T>, image: Var) -> Result<FeatureMap> {
    let cfg = cx.config;
    let shape = cx.tape.shape(image);
    let expected = [cfg.image_height, cfg.image_width, cfg.image_channels];
    if shape != expected {
        return Err(Error::shape("stem", &shape, &expected));
    }
    let (mut h, mut w, mut c) = (cfg.image_height, cfg.image_width, cfg.image_channels);
    if h % cfg.downsample() != 0 || w % cfg.downsample() != 0 {
        return Err(Error::arg(
            "stem",
            format!("image {h}x{w} is not divisible by downsample {}", cfg.downsample()),
        ));
    }
    let mut x = image;
    for i in 0..cfg.stem_layers {
        let (idx, ho, wo) = conv3x3_s2_indices(h, w, c);
        let cols = cx.tape.gather_elems(x, idx, &[ho * wo, 9 * c])?;
        let wgt = cx.param(&format!("stem.{i}.weight"))?;
        let b = cx.param(&format!("stem.{i}.bias"))?;
        x = cx.tape.gelu(linear(cx.tape, cols, wgt, b)?);
        (h, w, c) = (ho, wo, cfg.stem_channels);
    }
    Ok(FeatureMap {
        var: x,
        height: h,
        width: w,
        channels: c,
    })
}

/// Flattens non-overlapping patches, projects them to `d` and adds the
/// per-position embedding.
pub fn patchify_embed<T: Real>(cx: &Context<'_, T>, fm: &FeatureMap) -> Result<VisualTokens> {
    let (ph, pw) = (cx.config.patch_height, cx.config.patch_width);
    if fm.height % ph != 0 || fm.width % pw != 0 {
        return Err(Error::arg(
            "patchify_embed",
            format!("{}x{} map is not divisible into {ph}x{pw} patches", fm.height, fm.width),
        ));
    }
    let (rows, cols) = (fm.height / ph, fm.width / pw);
    let idx = patch_indices(fm.height, fm.width, fm.channels, ph, pw);
    let patches = cx
        .tape
        .gather_elems(fm.var, idx, &[rows * cols, ph * pw * fm.channels])?;
    let e = linear(
        cx.tape,
        patches,
        cx.param("patch_embed.weight")?,
        cx.param("patch_embed.bias")?,
    )?;
    let tokens = cx.tape.add(e, cx.param("pos_embed")?)?;
    Ok(VisualTokens { tokens, rows, cols })
}
