use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::IoError;
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }
}

const PNG_SIGNATURE: [u8; 8] = [137, 80, 78, 71, 13, 10, 26, 10];

/// Reads an 8/16-bit grayscale PNG or a PGM (`P5`/`P2`) and maps samples to
/// `[0, 1]` by the format's maximum value.
pub fn load_image(path: impl AsRef<Path>) -> Result<(Image, BitDepth), IoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| IoError::file(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        decode_pgm(path, &bytes)
    } else if bytes.starts_with(b"P3") || bytes.starts_with(b"P6") {
        Err(IoError::Color {
            path: path.into(),
            kind: "PPM".into(),
        })
    } else {
        Err(IoError::Unsupported {
            path: path.into(),
            msg: "expected a PNG or PGM file".into(),
        })
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<(Image, BitDepth), IoError> {
    let malformed = |e: png::DecodingError| IoError::Malformed {
        path: path.into(),
        format: "PNG",
        msg: e.to_string(),
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(malformed)?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    match info.color_type {
        png::ColorType::Grayscale => {}
        other => {
            return Err(IoError::Color {
                path: path.into(),
                kind: format!("{other:?}"),
            })
        }
    }
    let depth = match info.bit_depth {
        png::BitDepth::Eight => BitDepth::Eight,
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        other => {
            return Err(IoError::Unsupported {
                path: path.into(),
                msg: format!("{other:?} bit grayscale"),
            })
        }
    };
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(malformed)?;
    let raw = &buf[..frame.buffer_size()];
    let max = depth.max() as f64;
    let data: Vec<f32> = match depth {
        BitDepth::Eight => raw.iter().map(|v| (*v as f64 / max) as f32).collect(),
        BitDepth::Sixteen => raw
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / max) as f32)
            .collect(),
    };
    let image = Image::new(h, w, data).map_err(|e| IoError::Malformed {
        path: path.into(),
        format: "PNG",
        msg: e.to_string(),
    })?;
    Ok((image, depth))
}

/// Header tokens of a PNM file, skipping `#` comments.
struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn next_token(&mut self) -> Option<&str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (start < self.pos).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or(""))
    }

    fn number(&mut self) -> Option<u32> {
        self.next_token()?.parse().ok()
    }
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<(Image, BitDepth), IoError> {
    let bad = |msg: &str| IoError::Malformed {
        path: path.into(),
        format: "PGM",
        msg: msg.into(),
    };
    let binary = bytes[1] == b'5';
    let mut t = Tokens { bytes, pos: 2 };
    let w = t.number().ok_or_else(|| bad("missing width"))? as usize;
    let h = t.number().ok_or_else(|| bad("missing height"))? as usize;
    let maxval = t.number().ok_or_else(|| bad("missing maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let n = w * h;
    let mut samples = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = t.pos + 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let raster = bytes.get(start..start + n * width).ok_or_else(|| bad("truncated raster"))?;
        if width == 1 {
            samples.extend(raster.iter().map(|v| *v as u32));
        } else {
            samples.extend(raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32));
        }
    } else {
        for _ in 0..n {
            samples.push(t.number().ok_or_else(|| bad("truncated raster"))?);
        }
    }
    if samples.iter().any(|v| *v > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    let depth = if maxval <= 255 { BitDepth::Eight } else { BitDepth::Sixteen };
    let data = samples
        .iter()
        .map(|v| (*v as f64 / maxval as f64) as f32)
        .collect();
    let image = Image::new(h, w, data).map_err(|e| bad(&e.to_string()))?;
    Ok((image, depth))
}

fn quantize(img: &Image, depth: BitDepth, path: &Path) -> Vec<u32> {
    let max = depth.max() as f64;
    let mut clamped = 0usize;
    let q = img
        .data()
        .iter()
        .map(|v| {
            let mut x = *v as f64;
            if !(0.0..=1.0).contains(&x) {
                clamped += 1;
                x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
            }
            (x * max + 0.5).floor() as u32
        })
        .collect();
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} out-of-range pixel values", path.display());
    }
    q
}

/// Writes a grayscale PNG or binary PGM, chosen by extension. Values are
/// clamped to `[0, 1]` and rounded half up.
pub fn save_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<(), IoError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let q = quantize(img, depth, path);
    let raster: Vec<u8> = match depth {
        BitDepth::Eight => q.iter().map(|v| *v as u8).collect(),
        BitDepth::Sixteen => q.iter().flat_map(|v| (*v as u16).to_be_bytes()).collect(),
    };
    let file = File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut out = BufWriter::new(file);
    match ext.as_str() {
        "png" => {
            let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(match depth {
                BitDepth::Eight => png::BitDepth::Eight,
                BitDepth::Sixteen => png::BitDepth::Sixteen,
            });
            let encode_err = |e: png::EncodingError| IoError::Malformed {
                path: path.into(),
                format: "PNG",
                msg: e.to_string(),
            };
            let mut writer = enc.write_header().map_err(encode_err)?;
            writer.write_image_data(&raster).map_err(encode_err)?;
            writer.finish().map_err(encode_err)?;
        }
        "pgm" => {
            write!(out, "P5\n{} {}\n{}\n", img.width(), img.height(), depth.max())
                .and_then(|_| out.write_all(&raster))
                .map_err(|e| IoError::file(path, e))?;
        }
        _ => {
            return Err(IoError::Unsupported {
                path: path.into(),
                msg: "output extension must be .png or .pgm".into(),
            })
        }
    }
    out.flush().map_err(|e| IoError::file(path, e))
}

/// Image files in a directory, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>, IoError> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| IoError::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "pgm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}
