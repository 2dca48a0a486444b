//! Single-precision raster container and its on-disk formats.
//!
//! The native `NPRT` format is a 24-byte little-endian header
//! (`magic`, `version`, `height`, `width`, `channels`, `reserved`) followed by
//! `f32` samples in row-major, channel-interleaved order. 8-bit PNG and
//! binary PGM are read and written for images and previews.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

pub const RASTER_MAGIC: [u8; 4] = *b"NPRT";
pub const RASTER_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Luminance weights applied to (R, G, B).
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Length {
                expected,
                found: data.len(),
            });
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Channels {
                expected: 1,
                found: channels,
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel raster from a generator over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sample of a single-channel raster.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn require_single_channel(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Channels {
                expected: 1,
                found: self.channels,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Window of an image: `size`x`size` pixels starting at (`top`, `left`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PatchRef {
    pub source: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchRef {
    /// Position class of the patch with respect to an artifact period.
    pub fn phase(&self, period: usize) -> (usize, usize) {
        (self.top % period, self.left % period)
    }
}

/// Copies the window described by `patch` out of `img` (any channel count).
pub fn extract_patch(img: &Raster, patch: &PatchRef) -> Result<Raster> {
    extract_window(img, patch.top, patch.left, patch.size, patch.size)
}

pub fn extract_window(
    img: &Raster,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Raster> {
    if top + height > img.height || left + width > img.width {
        return Err(Error::OutOfBounds {
            top,
            left,
            size: height.max(width),
            height: img.height,
            width: img.width,
        });
    }
    let ch = img.channels;
    let row_len = width * ch;
    let mut data = Vec::with_capacity(height * row_len);
    for r in top..top + height {
        let start = (r * img.width + left) * ch;
        data.extend_from_slice(&img.data[start..start + row_len]);
    }
    Ok(Raster {
        height,
        width,
        channels: ch,
        data,
    })
}

/// Converts a 3-channel raster to luminance; single-channel input is rejected.
pub fn to_luminance(img: &Raster) -> Result<Raster> {
    if img.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            found: img.channels,
        });
    }
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let (r, g, b) = (px[0], px[1], px[2]);
            let y = wr * r + wg * g + wb * b;
            // rounding can push the weighted sum a hair outside the inputs' range
            y.clamp(r.min(g).min(b), r.max(g).max(b))
        })
        .collect();
    Ok(Raster {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    })
}

/// Loads an 8-bit gray or RGB PNG/PGM, mapping byte `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Raster::new(h, w, 1, bytes_to_unit(buf.as_raw())),
        DynamicImage::ImageRgb8(buf) => Raster::new(h, w, 3, bytes_to_unit(buf.as_raw())),
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

/// Loads an image and converts it to a single luminance channel when needed.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Raster> {
    let img = load_image(path)?;
    if img.channels == 3 {
        to_luminance(&img)
    } else {
        Ok(img)
    }
}

fn bytes_to_unit(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| f32::from(b) / 255.0).collect()
}

fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an image-role raster as 8-bit PNG (or PGM when the extension is `pgm`).
pub fn save_image(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| unit_to_byte(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match img.channels {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, bytes).expect("buffer sized from raster"),
        ),
        _ => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w, h, bytes).expect("buffer sized from raster"),
        ),
    };
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("pnm") | Some("ppm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, format)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    write_atomic(path, &out.into_inner())
}

/// Encodes a raster in the `NPRT` binary format.
pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * r.data.len());
    out.extend_from_slice(&RASTER_MAGIC);
    for field in [
        RASTER_VERSION,
        r.height as u32,
        r.width as u32,
        r.channels as u32,
        0,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != RASTER_MAGIC {
        return Err(Error::BadMagic {
            expected: RASTER_MAGIC,
            found: magic,
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = field(1);
    if version != RASTER_VERSION {
        return Err(Error::Version(version));
    }
    let (height, width, channels) = (field(2) as usize, field(3) as usize, field(4) as usize);
    let expected = height * width * channels;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(Error::Length {
            expected,
            found: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Raster::new(height, width, channels, data)
}

pub fn save_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_raster(r))
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

/// Loads either an `NPRT` raster or an 8-bit image, by extension.
pub fn load_any(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("nprt") => load_raster(path),
        _ => load_gray(path),
    }
}

/// Color anchors of the preview colormap, dark to bright.
const COLORMAP: [[f32; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.33, 0.06, 0.42],
    [0.80, 0.22, 0.28],
    [0.98, 0.62, 0.10],
    [1.0, 1.0, 0.85],
];

/// Maps `t` in [0, 1] through the preview colormap.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f32;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f32;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    [0, 1, 2].map(|k| ((a[k] + (b[k] - a[k]) * f) * 255.0).round() as u8)
}

/// Min-max normalizes a single-channel map and writes it as an RGB PNG.
///
/// A constant map has no usable range and is rendered as uniform mid-gray.
pub fn render_heatmap_png(h: &Raster, path: impl AsRef<Path>) -> Result<()> {
    h.require_single_channel()?;
    let (lo, hi) = h.min_max();
    let buf: RgbImage = if !(hi > lo) {
        ImageBuffer::from_pixel(h.width as u32, h.height as u32, Rgb([128, 128, 128]))
    } else {
        let span = hi - lo;
        ImageBuffer::from_fn(h.width as u32, h.height as u32, |x, y| {
            Rgb(colormap((h.get(y as usize, x as usize) - lo) / span))
        })
    };
    let path = path.as_ref();
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    write_atomic(path, &out.into_inner())
}

/// Writes a binary mask as an 8-bit PNG with values 0/255.
pub fn save_mask_png(mask: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: GrayImage = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) > 0.5 { 255 } else { 0 }])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    write_atomic(path, &out.into_inner())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
