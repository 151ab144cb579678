//! Non-overlapping patch tokenization and the linear patch projection.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::Var;

/// Layout of the `rows × cols` patch grid over an `height × width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    patch: usize,
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible into {patch}x{patch} patches"
            )));
        }
        Ok(PatchGrid {
            patch,
            rows: height / patch,
            cols: width / patch,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left pixel of token `i` (row-major token order).
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.cols) * self.patch, (i % self.cols) * self.patch)
    }

    /// Pixel center `(row, col)` of token `i`; a window of side `p` centred
    /// here is exactly the patch.
    pub fn center(&self, i: usize) -> (usize, usize) {
        let (y, x) = self.origin(i);
        (y + self.patch / 2, x + self.patch / 2)
    }

    /// Flat `[H, W, 3]` indices of every token's pixels, one row of
    /// `p·p·3` values per token, flattened (row, col, channel).
    pub fn patch_index(&self) -> Rc<[usize]> {
        let (p, w) = (self.patch, self.width());
        let mut idx = Vec::with_capacity(self.token_count() * p * p * 3);
        for t in 0..self.token_count() {
            let (y0, x0) = self.origin(t);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    for c in 0..3 {
                        idx.push((y * w + x) * 3 + c);
                    }
                }
            }
        }
        idx.into()
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        if img.height() != self.height() || img.width() != self.width() {
            return Err(Error::Contract(format!(
                "image {}x{} does not match patch grid {}x{}",
                img.height(),
                img.width(),
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Cut an image into row-major `p × p` patches.
pub fn split_patches(img: &Image, patch: usize) -> Result<(Vec<Image>, PatchGrid)> {
    let grid = PatchGrid::new(img.height(), img.width(), patch)?;
    let patches = (0..grid.token_count())
        .map(|t| {
            let (y0, x0) = grid.origin(t);
            Image::from_fn(patch, patch, |y, x, c| img.get(y0 + y, x0 + x, c))
        })
        .collect();
    Ok((patches, grid))
}

/// Inverse of [`split_patches`].
pub fn assemble(patches: &[Image], grid: &PatchGrid) -> Result<Image> {
    if patches.len() != grid.token_count() {
        return Err(Error::Contract(format!(
            "{} patches for a grid of {} tokens",
            patches.len(),
            grid.token_count()
        )));
    }
    let p = grid.patch_size();
    Ok(Image::from_fn(grid.height(), grid.width(), |y, x, c| {
        patches[(y / p) * grid.cols() + x / p].get(y % p, x % p, c)
    }))
}

/// `E_i = flatten(P_i) · W + b`.
#[derive(Clone, Debug)]
pub struct PatchProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchProjection {
    pub fn new(store: &mut ParamStore, init: &mut Init, patch: usize, d: usize) -> Result<Self> {
        let fan_in = patch * patch * 3;
        Ok(PatchProjection {
            weight: store.add("patch.weight", init.fan_in(&[fan_in, d], fan_in))?,
            bias: store.add("patch.bias", crate::tensor::Tensor::zeros(&[d]))?,
        })
    }
}

/// Flatten each patch of `pixels` (`[H, W, 3]`) into a `[L, p·p·3]` matrix.
pub fn patch_matrix(g: &mut Graph, pixels: Var, grid: &PatchGrid) -> Result<Var> {
    let p = grid.patch_size();
    g.tape
        .gather(pixels, grid.patch_index(), &[grid.token_count(), p * p * 3])
}

/// Token embeddings `[L, d]` of an image tensor.
pub fn embed(g: &mut Graph, pixels: Var, grid: &PatchGrid, proj: &PatchProjection) -> Result<Var> {
    let patches = patch_matrix(g, pixels, grid)?;
    let w = g.param(proj.weight);
    let b = g.param(proj.bias);
    let e = g.tape.matmul(patches, w)?;
    g.tape.add_bias(e, b)
}
