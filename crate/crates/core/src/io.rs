//! File formats: PNG/PPM images, PFM float maps and the `DHZW` tensor archive.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image, Raster, ScalarMap};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Loads an RGB image. PNG (8/16-bit) and PPM are scaled by their maximum
/// code value; `.pfm` files are read as linear floats and must lie in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if extension(path) == "pfm" {
        let pfm = read_pfm(path)?;
        return match pfm.channels {
            3 => Image::new(pfm.height, pfm.width, pfm.data),
            1 => Image::new(
                pfm.height,
                pfm.width,
                pfm.data.iter().flat_map(|&v| [v; 3]).collect(),
            ),
            _ => unreachable!(),
        };
    }
    let decoded = image::open(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match &decoded {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        _ => decoded
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
    };
    Image::new(h, w, data)
}

/// Loads a single-channel map; colour inputs are reduced with the channel mean.
pub fn load_scalar_map(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    if extension(path) == "pfm" {
        let pfm = read_pfm(path)?;
        return match pfm.channels {
            1 => ScalarMap::new(pfm.height, pfm.width, pfm.data),
            _ => ScalarMap::new(
                pfm.height,
                pfm.width,
                pfm.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
            ),
        };
    }
    let img = load_image(path)?;
    ScalarMap::from_clamped(img.height(), img.width(), img.channel_mean())
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

/// Saves a 1- or 3-channel raster. The format follows the extension:
/// `.png` (8-bit), `.ppm`/`.pgm` (binary, 8-bit) or `.pfm` (lossless float).
pub fn save_raster<const C: usize>(raster: &Raster<C>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = raster.dims();
    if extension(path) == "pfm" {
        return write_pfm(path, h, w, C, raster.as_slice());
    }
    let bytes: Vec<u8> = raster.as_slice().iter().map(|&v| quantize8(v)).collect();
    let result = match C {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches dimensions")
            .save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches dimensions")
            .save(path),
        _ => return Err(Error::invalid(format!("cannot save {C}-channel raster"))),
    };
    result.map_err(codec_err(path))
}

/// Saves a boolean mask as an 8-bit grayscale PNG (255 = set).
pub fn save_mask(mask: &[bool], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::invalid("mask length does not match dimensions"))?
        .save(path)
        .map_err(codec_err(path))
}

/// Raw contents of a PFM file, rows stored top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a PFM (`Pf` grayscale or `PF` colour) of either endianness.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Pfm> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason);

    let mut pos = 0;
    let channels = match read_token(&bytes, &mut pos).as_deref() {
        Some("Pf") => 1,
        Some("PF") => 3,
        _ => return Err(bad("missing Pf/PF magic")),
    };
    let mut number = |what: &str| -> Result<String> {
        read_token(&bytes, &mut pos).ok_or_else(|| bad(&format!("missing {what}")))
    };
    let width: usize = number("width")?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = number("height")?.parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = number("scale")?.parse().map_err(|_| bad("bad scale"))?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(bad("degenerate header"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let count = width * height * channels;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < count * 4 {
        return Err(bad("truncated payload"));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; count];
    let row_len = width * channels;
    for (i, chunk) in payload[..count * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // PFM stores the bottom row first.
        let row = height - 1 - i / row_len;
        data[row * row_len + i % row_len] = v;
    }
    Ok(Pfm {
        height,
        width,
        channels,
        data,
    })
}

/// Writes a little-endian PFM; `data` is row-major, top row first.
pub fn write_pfm(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    channels: usize,
    data: &[f32],
) -> Result<()> {
    let path = path.as_ref();
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::invalid("PFM supports 1 or 3 channels")),
    };
    if data.len() != height * width * channels {
        return Err(Error::invalid("PFM payload length does not match dimensions"));
    }
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    write!(out, "{magic}\n{width} {height}\n-1.0\n").expect("write to vec");
    let row_len = width * channels;
    for row in data.chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let pfm = read_pfm(path)?;
    if pfm.channels != 1 {
        return Err(Error::format(path, "depth maps must be single-channel PFM"));
    }
    DepthMap::new(pfm.height, pfm.width, pfm.data)
}

pub fn save_depth(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    write_pfm(path, depth.height(), depth.width(), 1, depth.as_slice())
}

/// Magic bytes opening every tensor archive.
pub const ARCHIVE_MAGIC: &[u8; 4] = b"DHZW";
/// Current archive format version.
pub const ARCHIVE_VERSION: u32 = 1;

/// One named tensor inside an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// An ordered collection of named `f32` tensors.
///
/// Layout (all integers little-endian `u32`): magic `DHZW`, version, entry
/// count, then for each entry the name length and UTF-8 bytes, the number of
/// dimensions, each dimension, and the raw little-endian `f32` payload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<ArchiveEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "entry {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate archive entry {name}")));
        }
        self.entries.push(ArchiveEntry {
            name,
            dims: dims.iter().map(|&d| d as u32).collect(),
            data,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Looks up an entry and checks its shape.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("archive has no entry {name}")))?;
        let found: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
        if found != dims {
            return Err(Error::invalid(format!(
                "archive entry {name} has shape {found:?}, expected {dims:?}"
            )));
        }
        Ok(&entry.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader { rest: bytes };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err("bad magic, not a DHZW archive".into());
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(format!("unsupported archive version {version}"));
        }
        let count = r.u32()? as usize;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| "entry name is not UTF-8".to_string())?
                .to_string();
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let len = dims.iter().map(|&d| d as usize).product::<usize>();
            let payload = r.take(len.checked_mul(4).ok_or("entry too large")?)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if archive.get(&name).is_some() {
                return Err(format!("duplicate entry {name}"));
            }
            archive.entries.push(ArchiveEntry { name, dims, data });
        }
        if !r.rest.is_empty() {
            return Err(format!("{} trailing bytes after last entry", r.rest.len()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

struct ByteReader<'a> {
    rest: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.rest.len() < n {
            return Err("unexpected end of archive".into());
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
