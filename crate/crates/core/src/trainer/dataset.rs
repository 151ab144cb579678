use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{self, resize_bilinear, Image};

#[derive(Clone, Debug)]
pub struct NamedImage {
    pub name: String,
    pub image: Image,
}

/// Content and style images, resized to the training resolution. Pairs are
/// the content × style product in lexicographic file order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub contents: Vec<NamedImage>,
    pub styles: Vec<NamedImage>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
}

/// Image files (`.ppm`, `.png`) in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_dir(dir: &Path, size: usize) -> Result<Vec<NamedImage>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm or .png images in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| {
            let img = imageio::load(p).map_err(|e| Error::Data(e.to_string()))?;
            Ok(NamedImage {
                name: p
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                image: resize_bilinear(&img, size, size),
            })
        })
        .collect()
}

impl Dataset {
    pub fn load(content_dir: &Path, style_dir: &Path, size: usize) -> Result<Self> {
        Ok(Dataset {
            contents: load_dir(content_dir, size)?,
            styles: load_dir(style_dir, size)?,
        })
    }

    pub fn from_images(contents: Vec<Image>, styles: Vec<Image>) -> Result<Self> {
        if contents.is_empty() || styles.is_empty() {
            return Err(Error::Data(
                "dataset needs at least one content and one style image".into(),
            ));
        }
        let named = |v: Vec<Image>, tag: &str| {
            v.into_iter()
                .enumerate()
                .map(|(i, image)| NamedImage {
                    name: format!("{tag}{i}"),
                    image,
                })
                .collect()
        };
        Ok(Dataset {
            contents: named(contents, "content"),
            styles: named(styles, "style"),
        })
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.contents.len())
            .flat_map(|c| (0..self.styles.len()).map(move |s| (c, s)))
            .collect()
    }

    /// Pair order for `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<(usize, usize)> {
        let mut pairs = self.pairs();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch));
        pairs.shuffle(&mut rng);
        pairs
    }
}

pub fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0x5851_F42D_4C95_7F2D)
}
