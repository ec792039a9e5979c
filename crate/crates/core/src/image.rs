//! 8-bit RGB images, conversion to model tensors, and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// `[3, H, W]` tensor with values in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            self.data[p * 3 + c] as f32 / 127.5 - 1.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are clamped to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::contract(format!(
                "expected a [3, H, W] tensor, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let hw = h * w;
        let src = t.data();
        let mut data = vec![0u8; hw * 3];
        for c in 0..3 {
            for p in 0..hw {
                let v = src[c * hw + p].clamp(-1.0, 1.0);
                data[p * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// Places images side by side with a `gap`-pixel white separator.
    pub fn hstack(images: &[&RgbImage], gap: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::contract("hstack of zero images"));
        };
        let h = first.height;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::contract("hstack needs equal heights"));
        }
        let w = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Self::filled(w, h, [255; 3]);
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                for x in 0..img.width {
                    out.put(x0 + x, y, img.pixel(x, y));
                }
            }
            x0 += img.width + gap;
        }
        Ok(out)
    }

    /// Stacks equal-width rows vertically with a `gap`-pixel white separator.
    pub fn vstack(images: &[&RgbImage], gap: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::contract("vstack of zero images"));
        };
        let w = first.width;
        if images.iter().any(|i| i.width != w) {
            return Err(Error::contract("vstack needs equal widths"));
        }
        let h = images.iter().map(|i| i.height).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Self::filled(w, h, [255; 3]);
        let mut y0 = 0;
        for img in images {
            let start = y0 * w * 3;
            out.data[start..start + img.data.len()].copy_from_slice(&img.data);
            y0 += img.height + gap;
        }
        Ok(out)
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Self::filled(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.put(x, y, self.pixel(x / factor, y / factor));
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut p = HeaderParser { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::Parse {
                offset: 0,
                reason: "missing P6 magic".into(),
            });
        }
        p.pos = 2;
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval_at = p.pos;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Unsupported(format!(
                "PPM maxval {maxval} at byte {maxval_at}; only 255 is supported"
            )));
        }
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => {
                return Err(Error::Parse {
                    offset: p.pos,
                    reason: "expected a single whitespace byte before pixel data".into(),
                })
            }
        }
        let need = width * height * 3;
        let body = &bytes[p.pos..];
        if body.len() < need {
            return Err(Error::Parse {
                offset: bytes.len(),
                reason: format!("pixel data truncated: need {need} bytes, have {}", body.len()),
            });
        }
        Self::new(width, height, body[..need].to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderParser<'_> {
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
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                reason: format!("expected decimal {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::Parse {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}
