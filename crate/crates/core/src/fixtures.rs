//! Small procedural images for tests, demos and smoke runs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{save, Image};

/// Soft radial gradient with an off-centre bright disc.
pub fn radial(size: usize) -> Image {
    let s = size as f64;
    Image::from_fn(size, size, |y, x, c| {
        let (fy, fx) = (y as f64 / s - 0.5, x as f64 / s - 0.5);
        let r = (fy * fy + fx * fx).sqrt();
        let disc = ((fy + 0.15).powi(2) + (fx - 0.2).powi(2)).sqrt() < 0.18;
        let base = [0.8 - r, 0.5 + 0.4 * fx, 0.3 + 0.5 * fy][c];
        if disc {
            [0.95, 0.9, 0.4][c]
        } else {
            base.clamp(0.0, 1.0)
        }
    })
}

/// Horizon-like split: sky gradient over a darker ground band.
pub fn landscape(size: usize) -> Image {
    let s = size as f64;
    Image::from_fn(size, size, |y, x, c| {
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        let ground = fy > 0.6 + 0.1 * (fx * 6.0).sin();
        if ground {
            [0.2 + 0.2 * fx, 0.45, 0.15][c]
        } else {
            [0.4 + 0.3 * fy, 0.6 + 0.2 * fy, 0.9][c]
        }
    })
}

/// Saturated diagonal colour stripes.
pub fn stripes(size: usize) -> Image {
    let palette = [[0.9, 0.2, 0.1], [0.1, 0.3, 0.8], [0.95, 0.8, 0.1]];
    Image::from_fn(size, size, |y, x, c| palette[((x + y) / 3) % 3][c])
}

/// Two-tone checkerboard with 2-pixel cells.
pub fn checker(size: usize) -> Image {
    Image::from_fn(size, size, |y, x, c| {
        if (y / 2 + x / 2) % 2 == 0 {
            [0.1, 0.05, 0.3][c]
        } else {
            [0.7, 0.9, 0.6][c]
        }
    })
}

pub fn content_images(size: usize) -> Vec<Image> {
    vec![radial(size), landscape(size)]
}

pub fn style_images(size: usize) -> Vec<Image> {
    vec![stripes(size), checker(size)]
}

/// Write `content/` and `style/` PPM directories under `root`, with
/// `contents` and `styles` images each (at most two of each).
pub fn write_dataset(root: &Path, size: usize, contents: usize, styles: usize) -> Result<()> {
    if contents > 2 || styles > 2 {
        return Err(Error::Config(
            "at most two fixture images of each kind".into(),
        ));
    }
    for (dir, images, n) in [
        ("content", content_images(size), contents),
        ("style", style_images(size), styles),
    ] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, img) in images.iter().take(n).enumerate() {
            save(img, d.join(format!("{dir}{i}.ppm")))?;
        }
    }
    Ok(())
}
