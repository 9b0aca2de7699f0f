//! Iterative residual coding.
//!
//! Each iteration encodes what is still missing from the reconstruction:
//!
//! ```text
//! b_t  = Bin(Enc_t(r_{t-1}))
//! x̂_t = Dec_t(b_t) + γ·x̂_{t-1}      (γ = 0 one-shot, γ = 1 additive)
//! r_t  = x − x̂_t,   r_0 = x,   x̂_0 = 0
//! ```
//!
//! Images live in `[0, 1]`. The first encoder pass sees `x − 0.5`; later
//! passes see the raw residual. In one-shot mode the decoder's tanh output is
//! an offset from 0.5. Reconstructions are clamped to `[0, 1]` before the
//! residual is taken; residuals themselves are not clamped.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, model_digest, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ArchitectureConfig, ReconstructionMode, DOWNSAMPLING};
pub use model::{
    build_model, expected_shapes, CodecModel, DecoderCache, EncoderCache, ModelGrads, Param,
    ParamKind, ParamMut, Quantizer, FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::layers::LstmState;
use crate::tensor::Tensor;

/// One encoder and one decoder pass, each threading its own recurrent state.
pub trait StepCodec {
    type EncoderState;
    type DecoderState;

    fn encoder_state(&self, batch: usize, h: usize, w: usize) -> Result<Self::EncoderState>;

    /// Initial decoder state for codes shaped like `codes`.
    fn decoder_state(&self, codes: &Tensor) -> Result<Self::DecoderState>;

    fn encode_step(
        &self,
        input: &Tensor,
        state: &Self::EncoderState,
        quantizer: &mut Quantizer<'_>,
    ) -> Result<(Tensor, Self::EncoderState)>;

    fn decode_step(
        &self,
        codes: &Tensor,
        state: &Self::DecoderState,
    ) -> Result<(Tensor, Self::DecoderState)>;
}

impl StepCodec for CodecModel {
    type EncoderState = Vec<LstmState>;
    type DecoderState = Vec<LstmState>;

    fn encoder_state(&self, batch: usize, h: usize, w: usize) -> Result<Vec<LstmState>> {
        self.encoder_zero_states(batch, h, w)
    }

    fn decoder_state(&self, codes: &Tensor) -> Result<Vec<LstmState>> {
        let (b, _, h, w) = codes.dims4()?;
        Ok(self.decoder_zero_states(b, h, w))
    }

    fn encode_step(
        &self,
        input: &Tensor,
        state: &Vec<LstmState>,
        quantizer: &mut Quantizer<'_>,
    ) -> Result<(Tensor, Vec<LstmState>)> {
        let (codes, next, _) = self.encode_forward(input, state, quantizer)?;
        Ok((codes, next))
    }

    fn decode_step(&self, codes: &Tensor, state: &Vec<LstmState>) -> Result<(Tensor, Vec<LstmState>)> {
        let (out, next, _) = self.decode_forward(codes, state)?;
        Ok((out, next))
    }
}

/// Everything produced by a `compress` run, one entry per iteration.
#[derive(Clone, Debug)]
pub struct IterationTrace {
    pub mode: ReconstructionMode,
    /// `x`, which is also `r_0`.
    pub original: Tensor,
    pub codes: Vec<Tensor>,
    /// Raw decoder outputs `Dec(b_t)`.
    pub decoded: Vec<Tensor>,
    /// `x̂_1 … x̂_T`
    pub reconstructions: Vec<Tensor>,
    /// `r_1 … r_T`
    pub residuals: Vec<Tensor>,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.codes.len()
    }

    /// `r_t` for `t` in `0..=T`.
    pub fn residual(&self, t: usize) -> &Tensor {
        if t == 0 {
            &self.original
        } else {
            &self.residuals[t - 1]
        }
    }

    /// `x̂_t` for `t` in `0..=T`; `x̂_0` is all zeros.
    pub fn reconstruction(&self, t: usize) -> Tensor {
        if t == 0 {
            Tensor::zeros(self.original.shape())
        } else {
            self.reconstructions[t - 1].clone()
        }
    }

    pub fn final_reconstruction(&self) -> &Tensor {
        self.reconstructions.last().expect("trace has at least one iteration")
    }
}

/// Encoder input at iteration `t` (1-based).
pub(crate) fn encoder_input(t: usize, image: &Tensor, prev_residual: &Tensor) -> Tensor {
    if t == 1 {
        image.add_scalar(-0.5)
    } else {
        prev_residual.clone()
    }
}

/// Pre-clamp reconstruction for iteration `t` given the decoder output.
pub(crate) fn unclamped_reconstruction(
    mode: ReconstructionMode,
    prev: Option<&Tensor>,
    decoded: &Tensor,
) -> Result<Tensor> {
    match (mode, prev) {
        (ReconstructionMode::OneShot, _) => Ok(decoded.add_scalar(0.5)),
        (ReconstructionMode::Additive, Some(prev)) => prev.add(decoded),
        (ReconstructionMode::Additive, None) => Tensor::zeros(decoded.shape()).add(decoded),
    }
}

fn check_image(image: &Tensor, iterations: usize) -> Result<(usize, usize, usize)> {
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let (b, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    if h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 {
        return Err(Error::invalid(format!(
            "image dims {h}×{w} not divisible by {DOWNSAMPLING}; pad first"
        )));
    }
    Ok((b, h, w))
}

/// Runs `iterations` encode/decode rounds with the inference binarizer.
pub fn compress<C: StepCodec>(
    codec: &C,
    image: &Tensor,
    iterations: usize,
    mode: ReconstructionMode,
) -> Result<IterationTrace> {
    compress_with(codec, image, iterations, mode, &mut Quantizer::sign())
}

pub fn compress_with<C: StepCodec>(
    codec: &C,
    image: &Tensor,
    iterations: usize,
    mode: ReconstructionMode,
    quantizer: &mut Quantizer<'_>,
) -> Result<IterationTrace> {
    let (batch, h, w) = check_image(image, iterations)?;
    let mut enc_state = codec.encoder_state(batch, h, w)?;
    let mut dec_state = None;
    let mut trace = IterationTrace {
        mode,
        original: image.clone(),
        codes: Vec::with_capacity(iterations),
        decoded: Vec::with_capacity(iterations),
        reconstructions: Vec::with_capacity(iterations),
        residuals: Vec::with_capacity(iterations),
    };
    for t in 1..=iterations {
        let input = encoder_input(t, image, trace.residual(t - 1));
        let (codes, next_enc) = codec.encode_step(&input, &enc_state, quantizer)?;
        enc_state = next_enc;
        let state = match dec_state.take() {
            Some(s) => s,
            None => codec.decoder_state(&codes)?,
        };
        let (decoded, next_dec) = codec.decode_step(&codes, &state)?;
        dec_state = Some(next_dec);
        let recon = unclamped_reconstruction(mode, trace.reconstructions.last(), &decoded)?
            .clamp(0.0, 1.0);
        trace.residuals.push(image.sub(&recon)?);
        trace.reconstructions.push(recon);
        trace.decoded.push(decoded);
        trace.codes.push(codes);
    }
    Ok(trace)
}

/// Reconstruction after decoding every code tensor in `codes`, in order.
pub fn decompress<C: StepCodec>(
    codec: &C,
    codes: &[Tensor],
    mode: ReconstructionMode,
) -> Result<Tensor> {
    let first = codes
        .first()
        .ok_or_else(|| Error::invalid("no code iterations to decode"))?;
    let mut state = codec.decoder_state(first)?;
    let mut recon: Option<Tensor> = None;
    for c in codes {
        let (decoded, next) = codec.decode_step(c, &state)?;
        state = next;
        recon = Some(unclamped_reconstruction(mode, recon.as_ref(), &decoded)?.clamp(0.0, 1.0));
    }
    Ok(recon.expect("at least one iteration"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Encoder and decoder that pass their input straight through.
    struct Passthrough;

    impl StepCodec for Passthrough {
        type EncoderState = ();
        type DecoderState = ();

        fn encoder_state(&self, _: usize, _: usize, _: usize) -> Result<()> {
            Ok(())
        }

        fn decoder_state(&self, _: &Tensor) -> Result<()> {
            Ok(())
        }

        fn encode_step(&self, input: &Tensor, _: &(), _: &mut Quantizer<'_>) -> Result<(Tensor, ())> {
            Ok((input.clone(), ()))
        }

        fn decode_step(&self, codes: &Tensor, _: &()) -> Result<(Tensor, ())> {
            Ok((codes.clone(), ()))
        }
    }

    /// Decoder that always proposes `x̂ = 0` in one-shot mode.
    struct Blind;

    impl StepCodec for Blind {
        type EncoderState = ();
        type DecoderState = ();

        fn encoder_state(&self, _: usize, _: usize, _: usize) -> Result<()> {
            Ok(())
        }

        fn decoder_state(&self, _: &Tensor) -> Result<()> {
            Ok(())
        }

        fn encode_step(&self, input: &Tensor, _: &(), _: &mut Quantizer<'_>) -> Result<(Tensor, ())> {
            Ok((input.clone(), ()))
        }

        fn decode_step(&self, codes: &Tensor, _: &()) -> Result<(Tensor, ())> {
            Ok((Tensor::full(codes.shape(), -0.5), ()))
        }
    }

    fn dyadic_image() -> Tensor {
        Tensor::from_fn(&[1, 3, 16, 32], |i| ((i * 37) % 257) as f64 / 256.0)
    }

    #[test]
    fn identity_codec_reconstructs_in_one_iteration() {
        let x = dyadic_image();
        let trace = compress(&Passthrough, &x, 1, ReconstructionMode::OneShot).unwrap();
        assert_eq!(trace.reconstructions[0], x);
        assert_eq!(trace.residuals[0].max_abs(), 0.0);
    }

    #[test]
    fn blind_decoder_leaves_residual_at_x() {
        let x = dyadic_image();
        let trace = compress(&Blind, &x, 4, ReconstructionMode::OneShot).unwrap();
        for t in 0..=4 {
            assert_eq!(trace.residual(t), &x);
        }
        assert_eq!(trace.reconstruction(0).max_abs(), 0.0);
    }

    #[test]
    fn trace_invariants_hold_exactly() {
        let x = dyadic_image();
        for mode in [ReconstructionMode::OneShot, ReconstructionMode::Additive] {
            let trace = compress(&Passthrough, &x, 3, mode).unwrap();
            assert_eq!(trace.residual(0), &x);
            for t in 1..=3 {
                assert_eq!(trace.residual(t), &x.sub(&trace.reconstruction(t)).unwrap());
            }
            assert_eq!(
                &decompress(&Passthrough, &trace.codes, mode).unwrap(),
                trace.final_reconstruction()
            );
        }
    }

    #[test]
    fn additive_accumulates() {
        let x = dyadic_image();
        let trace = compress(&Passthrough, &x, 3, ReconstructionMode::Additive).unwrap();
        for t in 1..=3 {
            let want = trace
                .reconstruction(t - 1)
                .add(&trace.decoded[t - 1])
                .unwrap()
                .clamp(0.0, 1.0);
            assert_eq!(trace.reconstruction(t), want);
        }
    }

    #[test]
    fn argument_errors() {
        let x = dyadic_image();
        assert!(compress(&Passthrough, &x, 0, ReconstructionMode::OneShot).is_err());
        let odd = Tensor::zeros(&[1, 3, 20, 32]);
        assert!(compress(&Passthrough, &odd, 1, ReconstructionMode::OneShot).is_err());
        assert!(decompress(&Passthrough, &[], ReconstructionMode::OneShot).is_err());
    }
}
