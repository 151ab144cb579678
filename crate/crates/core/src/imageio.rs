//! RGB images: binary PPM (P6) and PNG I/O plus corner-aligned bilinear
//! resizing.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major as `H × W × 3`. Loading maps
//! a byte `b` to exactly `b / 255`; saving clamps to `[0, 1]` and rounds half
//! up to the nearest byte, so `load ∘ save ∘ load` is the identity on bytes.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::dim("image", &[height, width, 3], &[pixels.len()]));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    /// Interpret a `[H, W, 3]` tensor as an image. Values are kept as is;
    /// clamping happens on save.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, 3] => Image::new(h, w, t.data().to_vec()),
            other => Err(Error::dim("image", other, &[0, 0, 3])),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.pixels.clone())
            .expect("image buffer matches its dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        total / self.pixels.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

/// Clamp to `[0, 1]` and round half up to a byte.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Load a PPM (P6, maxval 255) or PNG file, chosen by content.
pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes, path)
    } else {
        decode_ppm(bytes, path)
    }
}

/// Save as PNG when the extension is `.png`, PPM otherwise.
pub fn save(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(img)?
    } else {
        encode_ppm(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderCursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                msg: format!("invalid {what}"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut cur = HeaderCursor {
        bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 2 {
        return Err(cur.err("truncated header"));
    }
    if &bytes[..2] != b"P6" {
        return Err(cur.err(format!(
            "unsupported magic {:?}",
            String::from_utf8_lossy(&bytes[..2])
        )));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: maxval_at,
            msg: format!("maxval {maxval} unsupported (need 255)"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("missing whitespace after maxval"));
    }
    cur.pos += 1;
    let need = width * height * 3;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            msg: format!(
                "truncated payload: need {need} bytes, found {}",
                payload.len()
            ),
        });
    }
    Image::from_bytes(height, width, &payload[..need])
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let parse_err = |e: png::DecodingError| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        msg: format!("png: {e}"),
    };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(parse_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(parse_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(Error::Data("unexpanded indexed png".into()));
        }
    };
    Image::from_bytes(h, w, &rgb)
}

/// Bilinear resize on a corner-aligned grid: output corners sample input
/// corners exactly, so resizing to the same size is the identity.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "target size must be positive");
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (s.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let rows: Vec<_> = (0..height).map(|y| coord(y, height, img.height)).collect();
    let cols: Vec<_> = (0..width).map(|x| coord(x, width, img.width)).collect();
    Image::from_fn(height, width, |y, x, c| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
        let bottom = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}
