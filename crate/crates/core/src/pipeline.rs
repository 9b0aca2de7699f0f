//! Image-to-stream and stream-to-image paths used by the tools.

use crate::bitstream::{read_bitstream, write_bitstream, BitstreamHeader};
use crate::codec::{compress, decompress, CodecModel, ReconstructionMode, DOWNSAMPLING};
use crate::dataio::{crop, pad_to_multiple};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compresses a `1×3×H×W` image. `digest` identifies the checkpoint.
pub fn encode_image(
    model: &CodecModel,
    digest: [u8; 32],
    image: &Tensor,
    iterations: usize,
    mode: ReconstructionMode,
) -> Result<(BitstreamHeader, Vec<u8>)> {
    if iterations == 0 || iterations > u16::MAX as usize {
        return Err(Error::invalid(format!(
            "iterations must be in 1..=65535, got {iterations}"
        )));
    }
    let (padded, (h, w)) = pad_to_multiple(image, DOWNSAMPLING)?;
    let (b, _, ph, pw) = padded.dims4()?;
    if b != 1 {
        return Err(Error::invalid("encode takes one image at a time"));
    }
    let dims = [w, h, pw, ph];
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::invalid("image dimensions exceed u32"));
    }
    let trace = compress(model, &padded, iterations, mode)?;
    let header = BitstreamHeader {
        original_width: w as u32,
        original_height: h as u32,
        padded_width: pw as u32,
        padded_height: ph as u32,
        iterations: iterations as u16,
        code_channels: model.config.code_channels as u16,
        mode,
        model_digest: digest,
    };
    let bytes = write_bitstream(&header, &trace.codes)?;
    Ok((header, bytes))
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: BitstreamHeader,
    /// Cropped to the original dimensions.
    pub image: Tensor,
    /// Iterations actually decoded.
    pub iterations: usize,
    /// Whether the stream names the checkpoint `digest` passed in.
    pub digest_matches: bool,
}

/// Decodes the first `iterations` passes of a stream (all when `None`).
/// A model mismatch is an error under `strict`, otherwise reported through
/// [`Decoded::digest_matches`].
pub fn decode_stream(
    model: &CodecModel,
    digest: [u8; 32],
    bytes: &[u8],
    iterations: Option<usize>,
    strict: bool,
) -> Result<Decoded> {
    let (header, codes) = read_bitstream(bytes)?;
    let digest_matches = header.model_digest == digest;
    if strict && !digest_matches {
        return Err(Error::invalid("stream was encoded with a different model checkpoint"));
    }
    if header.code_channels as usize != model.config.code_channels {
        return Err(Error::invalid(format!(
            "stream has {} code channels, model expects {}",
            header.code_channels, model.config.code_channels
        )));
    }
    let k = iterations.unwrap_or(codes.len());
    if k == 0 || k > codes.len() {
        return Err(Error::invalid(format!(
            "cannot decode {k} iterations from a stream of {}",
            codes.len()
        )));
    }
    let recon = decompress(model, &codes[..k], header.mode)?;
    let image = crop(&recon, header.original_height as usize, header.original_width as usize)?;
    Ok(Decoded {
        header,
        image,
        iterations: k,
        digest_matches,
    })
}
