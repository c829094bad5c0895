//! Binary 8-bit graymaps (P5) and pixmaps (P6).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::map::{quantize, Map};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raw {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            detail: detail.into(),
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
            .ok_or_else(|| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                detail: format!("{what} out of range"),
            })
    }
}

pub fn parse(bytes: &[u8], path: &Path) -> Result<Raw> {
    let mut c = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maximum value")?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(c.err(format!("maximum value {maxval} is not 8-bit")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte before pixel data")),
    }
    let needed = width * height * channels;
    let available = bytes.len() - c.pos;
    if available < needed {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            detail: format!("truncated pixel data: need {needed} bytes, found {available}"),
        });
    }
    let mut pixels = bytes[c.pos..c.pos + needed].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            if *p as usize > maxval {
                return Err(c.err(format!("pixel value {p} exceeds maximum {maxval}")));
            }
            *p = ((*p as usize * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(Raw {
        channels,
        width,
        height,
        pixels,
    })
}

fn read(path: &Path) -> Result<Raw> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, path)
}

/// Reads a P5 file as a map with values in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Map> {
    let raw = read(path)?;
    if raw.channels != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: "expected a graymap (P5)".into(),
        });
    }
    Map::new(
        raw.height,
        raw.width,
        raw.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

/// Reads a P6 file as a `(3, H, W)` tensor with values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let raw = read(path)?;
    if raw.channels != 3 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: "expected a pixmap (P6)".into(),
        });
    }
    let n = raw.width * raw.height;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raw.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, raw.height, raw.width], data)
}

pub fn encode_gray(map: &Map) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "encode_rgb",
            format!("expected (3, H, W), got {:?}", image.shape()),
        ));
    };
    if c != 3 {
        return Err(Error::shape("encode_rgb", format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..n {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * n + i]));
        }
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_gray(path: &Path, map: &Map) -> Result<()> {
    write_bytes(path, &encode_gray(map))
}

pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &encode_rgb(image)?)
}

/// Files in `dir` with extension `ext`, keyed by file stem.
pub fn list_images(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}
