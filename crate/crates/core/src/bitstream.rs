//! `GRNB` compressed-image streams.
//!
//! ```text
//! offset size
//!      0    4  magic "GRNB"
//!      4    2  version
//!      6    4  original width
//!     10    4  original height
//!     14    4  padded width
//!     18    4  padded height
//!     22    2  iterations
//!     24    2  code channels
//!     26    1  mode (0 one_shot, 1 additive)
//!     27   32  SHA-256 of the model checkpoint
//!     59       payload, one byte-aligned block per iteration
//! ```
//!
//! Multi-byte fields are little-endian. Each payload block packs the ±1 codes
//! of one iteration channel-major then row-major, `+1` as bit 1, most
//! significant bit first, zero-padded to a whole byte.

use crate::codec::{ReconstructionMode, DOWNSAMPLING};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"GRNB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 59;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub original_width: u32,
    pub original_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub iterations: u16,
    pub code_channels: u16,
    pub mode: ReconstructionMode,
    pub model_digest: [u8; 32],
}

impl BitstreamHeader {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Malformed {
            what: "bitstream header",
            detail,
        };
        let (pw, ph) = (self.padded_width as usize, self.padded_height as usize);
        if pw == 0 || ph == 0 || pw % DOWNSAMPLING != 0 || ph % DOWNSAMPLING != 0 {
            return Err(bad(format!("padded dims {pw}×{ph} not a positive multiple of {DOWNSAMPLING}")));
        }
        if self.original_width == 0
            || self.original_height == 0
            || self.original_width > self.padded_width
            || self.original_height > self.padded_height
        {
            return Err(bad(format!(
                "original dims {}×{} do not fit padded {pw}×{ph}",
                self.original_width, self.original_height
            )));
        }
        if self.iterations == 0 {
            return Err(bad("zero iterations".into()));
        }
        if self.code_channels == 0 {
            return Err(bad("zero code channels".into()));
        }
        Ok(())
    }

    /// Code plane `(height, width)`.
    pub fn code_plane(&self) -> (usize, usize) {
        (
            self.padded_height as usize / DOWNSAMPLING,
            self.padded_width as usize / DOWNSAMPLING,
        )
    }

    pub fn code_shape(&self) -> [usize; 4] {
        let (h, w) = self.code_plane();
        [1, self.code_channels as usize, h, w]
    }

    pub fn bits_per_iteration(&self) -> usize {
        let (h, w) = self.code_plane();
        h * w * self.code_channels as usize
    }

    pub fn bytes_per_iteration(&self) -> usize {
        self.bits_per_iteration().div_ceil(8)
    }

    /// Total stream length for this header.
    pub fn stream_len(&self) -> usize {
        HEADER_LEN + self.iterations as usize * self.bytes_per_iteration()
    }

    /// Rate over the padded image.
    pub fn bits_per_pixel(&self) -> f64 {
        bits_per_pixel(self.iterations as usize, self.code_channels as usize)
    }

    /// Payload bits per original (unpadded) pixel, alignment padding excluded.
    pub fn bits_per_original_pixel(&self) -> f64 {
        let bits = self.iterations as f64 * self.bits_per_iteration() as f64;
        bits / (self.original_width as f64 * self.original_height as f64)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.original_width,
            self.original_height,
            self.padded_width,
            self.padded_height,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.iterations.to_le_bytes());
        out.extend_from_slice(&self.code_channels.to_le_bytes());
        out.push(self.mode.as_u8());
        out.extend_from_slice(&self.model_digest);
    }
}

/// Raw rate in bits per pixel: every code location covers a 16×16 block.
pub fn bits_per_pixel(iterations: usize, code_channels: usize) -> f64 {
    (iterations * code_channels) as f64 / (DOWNSAMPLING * DOWNSAMPLING) as f64
}

fn pack(codes: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let start = out.len();
    out.resize(start + codes.len().div_ceil(8), 0);
    for (i, &v) in codes.data().iter().enumerate() {
        if v == 1.0 {
            out[start + i / 8] |= 0x80 >> (i % 8);
        } else if v != -1.0 {
            return Err(Error::invalid(format!("code value {v} is not ±1")));
        }
    }
    Ok(())
}

fn unpack(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape, data)
}

pub fn write_bitstream(header: &BitstreamHeader, codes: &[Tensor]) -> Result<Vec<u8>> {
    header.validate()?;
    if codes.len() != header.iterations as usize {
        return Err(Error::invalid(format!(
            "header declares {} iterations, got {} code tensors",
            header.iterations,
            codes.len()
        )));
    }
    let want = header.code_shape();
    let mut out = Vec::with_capacity(header.stream_len());
    header.encode(&mut out);
    for c in codes {
        if c.shape() != want {
            return Err(Error::shape("bitstream codes", c.shape(), &want));
        }
        pack(c, &mut out)?;
    }
    debug_assert_eq!(out.len(), header.stream_len());
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<BitstreamHeader> {
    let mut r = Reader::new(bytes);
    match r.take(4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(Error::BadMagic),
        None if bytes.len() < 4 && MAGIC.starts_with(bytes) => return Err(Error::TruncatedHeader),
        None => return Err(Error::BadMagic),
    }
    let version = r.u16().ok_or(Error::TruncatedHeader)?;
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let mut u32 = || r.u32().ok_or(Error::TruncatedHeader);
    let (original_width, original_height) = (u32()?, u32()?);
    let (padded_width, padded_height) = (u32()?, u32()?);
    let iterations = r.u16().ok_or(Error::TruncatedHeader)?;
    let code_channels = r.u16().ok_or(Error::TruncatedHeader)?;
    let mode = ReconstructionMode::from_u8(r.u8().ok_or(Error::TruncatedHeader)?)?;
    let model_digest = r.array::<32>().ok_or(Error::TruncatedHeader)?;
    let header = BitstreamHeader {
        original_width,
        original_height,
        padded_width,
        padded_height,
        iterations,
        code_channels,
        mode,
        model_digest,
    };
    header.validate()?;
    Ok(header)
}

pub fn read_bitstream(bytes: &[u8]) -> Result<(BitstreamHeader, Vec<Tensor>)> {
    let header = read_header(bytes)?;
    let per = header.bytes_per_iteration();
    let mut r = Reader::new(&bytes[HEADER_LEN..]);
    let shape = header.code_shape();
    let mut codes = Vec::with_capacity(header.iterations as usize);
    for _ in 0..header.iterations {
        let block = r.take(per).ok_or(Error::TruncatedPayload)?;
        codes.push(unpack(block, &shape)?);
    }
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes);
    }
    Ok((header, codes))
}
