//! Binary PPM (P6, maxval 255) images and padding to codec-legal sizes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "{width}×{height} RGB image needs {} samples, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "ppm",
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| malformed(format!("{what} out of range")))
    }
}

pub fn load_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::BadMagic);
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero dimension"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => {}
        _ => return Err(malformed("missing separator after maxval")),
    }
    let start = h.pos + 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| malformed("dimensions overflow"))?;
    let data = bytes
        .get(start..start + n)
        .ok_or(Error::TruncatedPayload)?
        .to_vec();
    if bytes.len() > start + n {
        return Err(Error::TrailingBytes);
    }
    ImageBuffer::new(width, height, data)
}

/// Canonical P6 encoding: `P6\n<w> <h>\n255\n` then the samples.
pub fn save_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    load_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    fs::write(path, save_ppm(img))?;
    Ok(())
}

/// `1×3×H×W` tensor with values `sample / 255`.
pub fn to_tensor(img: &ImageBuffer) -> Tensor {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.data[3 * p + c] as f64 / 255.0
    })
}

/// Inverse of [`to_tensor`]: clamps to `[0, 1]` and rounds half up.
pub fn to_image(t: &Tensor) -> Result<ImageBuffer> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::shape("to_image", t.shape(), &[1, 3, h, w]));
    }
    let mut data = vec![0u8; 3 * h * w];
    for (i, &v) in t.data().iter().enumerate() {
        let (c, p) = (i / (h * w), i % (h * w));
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        data[3 * p + c] = (v * 255.0 + 0.5).floor() as u8;
    }
    ImageBuffer::new(w, h, data)
}

/// Replicate-pads the bottom and right edges up to the next multiple of
/// `multiple`; returns the padded tensor and the original `(h, w)`.
pub fn pad_to_multiple(t: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    if multiple == 0 {
        return Err(Error::invalid("padding multiple must be positive"));
    }
    let (b, c, h, w) = t.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape(t.shape().to_vec()));
    }
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok((t.clone(), (h, w)));
    }
    let src = t.data();
    let out = Tensor::from_fn(&[b, c, ph, pw], |i| {
        let plane = i / (ph * pw);
        let y = (i / pw) % ph;
        let x = i % pw;
        src[(plane * h + y.min(h - 1)) * w + x.min(w - 1)]
    });
    Ok((out, (h, w)))
}

/// Top-left `h × w` region.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, th, tw) = t.dims4()?;
    if h > th || w > tw || h == 0 || w == 0 {
        return Err(Error::invalid(format!("cannot crop {th}×{tw} to {h}×{w}")));
    }
    if (h, w) == (th, tw) {
        return Ok(t.clone());
    }
    let src = t.data();
    Ok(Tensor::from_fn(&[b, c, h, w], |i| {
        let plane = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        src[(plane * th + y) * tw + x]
    }))
}
