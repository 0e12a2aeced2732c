//! 8-bit grayscale PNG and binary PGM (P5) reading and writing.
//!
//! Pixel values map to `[0, 1]` as `byte / 255`; writing rounds
//! `255 · v` half-to-even so files are stable across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width · height` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Png,
    Pgm,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(Format::Png),
            Some("pgm") => Ok(Format::Pgm),
            _ => Err(Error::Image {
                path: path.to_path_buf(),
                reason: "unknown extension (expected .png or .pgm)".into(),
            }),
        }
    }
}

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "GrayImage::new",
                format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len()),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Quantizes a tensor holding one `H × W` plane (any leading extents of
    /// size one). Values outside `[0, 1]` are rejected.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() < 2 || shape[..shape.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::shape(
                "GrayImage::from_tensor",
                format!("expected a single H×W plane, got {shape:?}"),
            ));
        }
        let (height, width) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let pixels = tensor
            .data()
            .iter()
            .map(|&v| quantize(v))
            .collect::<Result<Vec<u8>>>()?;
        GrayImage::new(width, height, pixels)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.pixels.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
        .expect("pixel count checked at construction")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"\x89PNG") {
            decode_png(path, &bytes)
        } else if bytes.starts_with(b"P5") {
            decode_pgm(path, &bytes)
        } else {
            Err(image_err(path, "neither a PNG nor a binary PGM (P5) file"))
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = match Format::from_path(path)? {
            Format::Png => encode_png(self.width, self.height, png::ColorType::Grayscale, &self.pixels)
                .map_err(|e| image_err(path, e))?,
            Format::Pgm => {
                let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
                out.extend_from_slice(&self.pixels);
                out
            }
        };
        write_bytes(path, &bytes)
    }
}

/// `round(255 · v)` with ties to even.
pub fn quantize(v: f32) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!(
            "pixel value {v} outside [0, 1]; clamp before saving"
        )));
    }
    Ok((f64::from(v) * 255.0).round_ties_even() as u8)
}

/// Loads an image as a `[1, 1, H, W]` tensor in `[0, 1]`.
pub fn load(path: &Path) -> Result<Tensor> {
    Ok(GrayImage::read(path)?.to_tensor())
}

/// Saves a single-plane tensor in `[0, 1]`; the format follows the extension.
pub fn save(tensor: &Tensor, path: &Path) -> Result<()> {
    GrayImage::from_tensor(tensor)?.write(path)
}

/// Writes an 8-bit RGB PNG (`pixels` holds `width · height · 3` bytes).
pub fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::shape(
            "write_rgb_png",
            format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, pixels.len()),
        ));
    }
    let bytes =
        encode_png(width, height, png::ColorType::Rgb, pixels).map_err(|e| image_err(path, e))?;
    write_bytes(path, &bytes)
}

/// Reads an 8-bit RGB PNG back as `(width, height, pixels)`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (info, pixels) = decode_png_raw(path, &bytes)?;
    if info.0 != png::ColorType::Rgb || info.1 != png::BitDepth::Eight {
        return Err(image_err(path, "expected 8-bit RGB"));
    }
    Ok((info.2, info.3, pixels))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    pixels: &[u8],
) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(pixels).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

type PngInfo = (png::ColorType, png::BitDepth, usize, usize);

fn decode_png_raw(path: &Path, bytes: &[u8]) -> Result<(PngInfo, Vec<u8>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| image_err(path, format!("malformed PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "PNG too large"))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, format!("malformed PNG: {e}")))?;
    buf.truncate(frame.buffer_size());
    let info = (
        frame.color_type,
        frame.bit_depth,
        frame.width as usize,
        frame.height as usize,
    );
    Ok((info, buf))
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let ((color, depth, width, height), pixels) = decode_png_raw(path, bytes)?;
    if color != png::ColorType::Grayscale {
        return Err(image_err(
            path,
            format!("color type {color:?} rejected; only 8-bit grayscale is supported"),
        ));
    }
    if depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {depth:?}")));
    }
    GrayImage::new(width, height, pixels).map_err(|e| image_err(path, e.to_string()))
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 2;
    let mut next_field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(image_err(path, "truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| image_err(path, "malformed PGM header"))
    };
    let width = next_field()?;
    let height = next_field()?;
    let maxval = next_field()?;
    if maxval != 255 {
        return Err(image_err(path, format!("unsupported PGM maxval {maxval} (need 255)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(image_err(path, "malformed PGM header"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(image_err(
            path,
            format!("expected {} pixel bytes, found {}", width * height, data.len()),
        ));
    }
    GrayImage::new(width, height, data.to_vec())
}
