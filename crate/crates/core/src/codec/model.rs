//! Learnable parameters of the codec and the per-iteration encoder/decoder
//! passes, with the activations needed to backpropagate through them.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ArchitectureConfig, DOWNSAMPLING};
use crate::error::{Error, Result};
use crate::layers::{
    binarize, binarize_backward, conv2d_backward, conv2d_forward, conv_lstm_backward,
    conv_lstm_step_cached, depth_to_space, depth_to_space_backward, gdn_backward, gdn_forward,
    igdn_backward, igdn_forward, BinarizeMode, ConvGrads, ConvParams, GdnGrads, GdnParams,
    LstmCache, LstmGrads, LstmParams, LstmState,
};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u16 = 1;

const INPUT_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    GdnBeta,
    GdnGamma,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub analysis: ConvParams,
    pub analysis_gdn: Option<GdnParams>,
    pub front: ConvParams,
    pub cells: Vec<LstmParams>,
    pub binarizer: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub synthesis: ConvParams,
    pub synthesis_igdn: Option<GdnParams>,
    pub cells: Vec<LstmParams>,
    pub output: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub config: ArchitectureConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Gradients laid out exactly like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Quantizer applied to the binarizer's tanh output.
pub struct Quantizer<'a> {
    mode: BinarizeMode,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Quantizer<'a> {
    pub fn sign() -> Self {
        Quantizer {
            mode: BinarizeMode::InferenceSign,
            rng: None,
        }
    }

    pub fn stochastic(rng: &'a mut dyn RngCore) -> Self {
        Quantizer {
            mode: BinarizeMode::TrainStochastic,
            rng: Some(rng),
        }
    }

    /// Differentiable stand-in for gradient checks; codes are not ±1.
    pub fn identity() -> Self {
        Quantizer {
            mode: BinarizeMode::Identity,
            rng: None,
        }
    }

    pub fn mode(&self) -> BinarizeMode {
        self.mode
    }

    pub fn apply(&mut self, pre_codes: &Tensor) -> Result<Tensor> {
        let rng = self.rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        binarize(pre_codes, self.mode, rng)
    }
}

pub struct EncoderCache {
    input: Tensor,
    analysis_out: Tensor,
    front_in: Tensor,
    cells: Vec<LstmCache>,
    code_in: Tensor,
    pre_codes: Tensor,
}

pub struct DecoderCache {
    codes: Tensor,
    synthesis_out: Tensor,
    cells: Vec<LstmCache>,
    output_in: Tensor,
    output: Tensor,
}

fn glorot_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize, stride: usize) -> ConvParams {
    let limit = (6.0 / ((in_ch + out_ch) * k * k) as f64).sqrt();
    let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| rng.gen_range(-limit..limit));
    ConvParams {
        weight,
        bias: Tensor::zeros(&[out_ch]),
        stride,
        padding: k / 2,
    }
}

fn glorot_lstm(rng: &mut ChaCha8Rng, in_ch: usize, hidden: usize, stride: usize) -> LstmParams {
    LstmParams {
        input_conv: glorot_conv(rng, 4 * hidden, in_ch, INPUT_KERNEL, stride),
        hidden_conv: glorot_conv(rng, 4 * hidden, hidden, 1, 1),
    }
}

fn check_hw(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 {
        return Err(Error::invalid(format!(
            "image dims {h}×{w} must be positive multiples of {DOWNSAMPLING}"
        )));
    }
    Ok(())
}

pub fn build_model(config: &ArchitectureConfig, seed: u64) -> Result<CodecModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let a = config.analysis_channels;
    let eh = config.encoder_hidden;
    let encoder = EncoderParams {
        analysis: glorot_conv(rng, a, 3, 3, 1),
        analysis_gdn: config.use_gdn.then(|| GdnParams::identity_init(a)),
        front: glorot_conv(rng, a, a, 3, 2),
        cells: vec![
            glorot_lstm(rng, a, eh[0], 2),
            glorot_lstm(rng, eh[0], eh[1], 2),
            glorot_lstm(rng, eh[1], eh[2], 2),
        ],
        binarizer: glorot_conv(rng, config.code_channels, eh[2], 1, 1),
    };
    let inputs = config.decoder_inputs();
    let decoder = DecoderParams {
        synthesis: glorot_conv(rng, config.synthesis_channels, config.code_channels, 1, 1),
        synthesis_igdn: config
            .use_gdn
            .then(|| GdnParams::identity_init(config.synthesis_channels)),
        cells: (0..4)
            .map(|k| glorot_lstm(rng, inputs[k], config.decoder_hidden[k], 1))
            .collect(),
        output: glorot_conv(rng, 3, config.output_in_channels(), 3, 1),
    };
    let mut model = CodecModel {
        config: config.clone(),
        encoder,
        decoder,
    };
    // Stored checkpoints hold f32; a fresh model must survive a save/load
    // cycle unchanged.
    for p in model.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    Ok(model)
}

/// Parameter shapes in declaration order, without allocating a model.
pub fn expected_shapes(config: &ArchitectureConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<Vec<usize>>, o: usize, i: usize, k: usize| {
        out.push(vec![o, i, k, k]);
        out.push(vec![o]);
    };
    let gdn = |out: &mut Vec<Vec<usize>>, c: usize| {
        if config.use_gdn {
            out.push(vec![c]);
            out.push(vec![c, c]);
        }
    };
    let a = config.analysis_channels;
    conv(&mut out, a, 3, 3);
    gdn(&mut out, a);
    conv(&mut out, a, a, 3);
    let enc_in = [a, config.encoder_hidden[0], config.encoder_hidden[1]];
    for (&i, &h) in enc_in.iter().zip(&config.encoder_hidden) {
        conv(&mut out, 4 * h, i, INPUT_KERNEL);
        conv(&mut out, 4 * h, h, 1);
    }
    conv(&mut out, config.code_channels, config.encoder_hidden[2], 1);
    conv(&mut out, config.synthesis_channels, config.code_channels, 1);
    gdn(&mut out, config.synthesis_channels);
    for (&i, &h) in config.decoder_inputs().iter().zip(&config.decoder_hidden) {
        conv(&mut out, 4 * h, i, INPUT_KERNEL);
        conv(&mut out, 4 * h, h, 1);
    }
    conv(&mut out, 3, config.output_in_channels(), 3);
    out
}

type Visitor<'a, 'f> = &'f mut dyn FnMut(String, ParamKind, &'a Tensor);
type VisitorMut<'a, 'f> = &'f mut dyn FnMut(String, ParamKind, &'a mut Tensor);

fn visit_conv<'a>(p: &'a ConvParams, name: &str, f: Visitor<'a, '_>) {
    f(format!("{name}.weight"), ParamKind::ConvWeight, &p.weight);
    f(format!("{name}.bias"), ParamKind::ConvBias, &p.bias);
}

fn visit_conv_mut<'a>(p: &'a mut ConvParams, name: &str, f: VisitorMut<'a, '_>) {
    f(format!("{name}.weight"), ParamKind::ConvWeight, &mut p.weight);
    f(format!("{name}.bias"), ParamKind::ConvBias, &mut p.bias);
}

fn visit_gdn<'a>(p: &'a Option<GdnParams>, name: &str, f: Visitor<'a, '_>) {
    if let Some(p) = p {
        f(format!("{name}.beta"), ParamKind::GdnBeta, &p.beta);
        f(format!("{name}.gamma"), ParamKind::GdnGamma, &p.gamma);
    }
}

fn visit_gdn_mut<'a>(p: &'a mut Option<GdnParams>, name: &str, f: VisitorMut<'a, '_>) {
    if let Some(p) = p {
        f(format!("{name}.beta"), ParamKind::GdnBeta, &mut p.beta);
        f(format!("{name}.gamma"), ParamKind::GdnGamma, &mut p.gamma);
    }
}

fn visit_cells<'a>(cells: &'a [LstmParams], name: &str, f: Visitor<'a, '_>) {
    for (k, c) in cells.iter().enumerate() {
        visit_conv(&c.input_conv, &format!("{name}.{k}.input"), f);
        visit_conv(&c.hidden_conv, &format!("{name}.{k}.hidden"), f);
    }
}

fn visit_cells_mut<'a>(cells: &'a mut [LstmParams], name: &str, f: VisitorMut<'a, '_>) {
    for (k, c) in cells.iter_mut().enumerate() {
        visit_conv_mut(&mut c.input_conv, &format!("{name}.{k}.input"), f);
        visit_conv_mut(&mut c.hidden_conv, &format!("{name}.{k}.hidden"), f);
    }
}

fn visit_all<'a>(enc: &'a EncoderParams, dec: &'a DecoderParams, f: Visitor<'a, '_>) {
    visit_conv(&enc.analysis, "encoder.analysis", f);
    visit_gdn(&enc.analysis_gdn, "encoder.analysis_gdn", f);
    visit_conv(&enc.front, "encoder.front", f);
    visit_cells(&enc.cells, "encoder.cell", f);
    visit_conv(&enc.binarizer, "encoder.binarizer", f);
    visit_conv(&dec.synthesis, "decoder.synthesis", f);
    visit_gdn(&dec.synthesis_igdn, "decoder.synthesis_igdn", f);
    visit_cells(&dec.cells, "decoder.cell", f);
    visit_conv(&dec.output, "decoder.output", f);
}

fn visit_all_mut<'a>(enc: &'a mut EncoderParams, dec: &'a mut DecoderParams, f: VisitorMut<'a, '_>) {
    visit_conv_mut(&mut enc.analysis, "encoder.analysis", f);
    visit_gdn_mut(&mut enc.analysis_gdn, "encoder.analysis_gdn", f);
    visit_conv_mut(&mut enc.front, "encoder.front", f);
    visit_cells_mut(&mut enc.cells, "encoder.cell", f);
    visit_conv_mut(&mut enc.binarizer, "encoder.binarizer", f);
    visit_conv_mut(&mut dec.synthesis, "decoder.synthesis", f);
    visit_gdn_mut(&mut dec.synthesis_igdn, "decoder.synthesis_igdn", f);
    visit_cells_mut(&mut dec.cells, "decoder.cell", f);
    visit_conv_mut(&mut dec.output, "decoder.output", f);
}

/// A named parameter tensor, in declaration order.
pub struct Param<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor,
}

fn add_conv(dst: &mut ConvParams, g: &ConvGrads) -> Result<()> {
    dst.weight.add_assign(&g.weight)?;
    dst.bias.add_assign(&g.bias)
}

fn add_gdn(dst: &mut Option<GdnParams>, g: &GdnGrads) -> Result<()> {
    let dst = dst
        .as_mut()
        .ok_or_else(|| Error::invalid("gradient for an absent GDN layer"))?;
    dst.beta.add_assign(&g.beta)?;
    dst.gamma.add_assign(&g.gamma)
}

fn add_lstm(dst: &mut LstmParams, g: &LstmGrads) -> Result<()> {
    add_conv(&mut dst.input_conv, &g.input_conv)?;
    add_conv(&mut dst.hidden_conv, &g.hidden_conv)
}

impl ModelGrads {
    pub fn params(&self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        visit_all(&self.encoder, &self.decoder, &mut |name, kind, tensor| {
            out.push(Param { name, kind, tensor })
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        visit_all_mut(&mut self.encoder, &mut self.decoder, &mut |name, kind, tensor| {
            out.push(ParamMut { name, kind, tensor })
        });
        out
    }

    pub fn scale(&mut self, k: f64) {
        for p in self.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

impl CodecModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = expected_shapes(&self.config);
        let have = self.params();
        if want.len() != have.len() {
            return Err(Error::invalid(format!(
                "model holds {} parameter tensors, config needs {}",
                have.len(),
                want.len()
            )));
        }
        for (w, h) in want.iter().zip(&have) {
            if w[..] != *h.tensor.shape() {
                return Err(Error::shape("model parameter", h.tensor.shape(), w));
            }
            if !h.tensor.all_finite() {
                return Err(Error::NonFinite(h.name.clone()));
            }
        }
        for gdn in [&self.encoder.analysis_gdn, &self.decoder.synthesis_igdn]
            .into_iter()
            .flatten()
        {
            gdn.validate()?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        visit_all(&self.encoder, &self.decoder, &mut |name, kind, tensor| {
            out.push(Param { name, kind, tensor })
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        visit_all_mut(&mut self.encoder, &mut self.decoder, &mut |name, kind, tensor| {
            out.push(ParamMut { name, kind, tensor })
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        let mut g = ModelGrads {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        };
        for p in g.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    /// Clamps every GDN/iGDN parameter back into its feasible set.
    pub fn project_gdn(&mut self) {
        for gdn in [&mut self.encoder.analysis_gdn, &mut self.decoder.synthesis_igdn]
            .into_iter()
            .flatten()
        {
            gdn.project();
        }
    }

    pub fn encoder_zero_states(&self, batch: usize, h: usize, w: usize) -> Result<Vec<LstmState>> {
        check_hw(h, w)?;
        Ok(self
            .encoder
            .cells
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let s = 4 << k;
                LstmState::zeros(batch, c.hidden_channels(), h / s, w / s)
            })
            .collect())
    }

    /// Decoder states for a code plane of `ch × cw` locations.
    pub fn decoder_zero_states(&self, batch: usize, ch: usize, cw: usize) -> Vec<LstmState> {
        self.decoder
            .cells
            .iter()
            .enumerate()
            .map(|(k, c)| LstmState::zeros(batch, c.hidden_channels(), ch << k, cw << k))
            .collect()
    }

    pub fn encode_forward(
        &self,
        input: &Tensor,
        states: &[LstmState],
        quantizer: &mut Quantizer<'_>,
    ) -> Result<(Tensor, Vec<LstmState>, EncoderCache)> {
        let (_, c, h, w) = input.dims4()?;
        if c != 3 {
            return Err(Error::shape("encode_step input", input.shape(), &[0, 3, h, w]));
        }
        check_hw(h, w)?;
        if states.len() != self.encoder.cells.len() {
            return Err(Error::invalid("encoder needs one state per cell"));
        }
        let enc = &self.encoder;
        let analysis_out = conv2d_forward(input, &enc.analysis)?;
        let front_in = match &enc.analysis_gdn {
            Some(gdn) => gdn_forward(&analysis_out, gdn)?,
            None => analysis_out.clone(),
        };
        let mut x = conv2d_forward(&front_in, &enc.front)?;
        let mut next_states = Vec::with_capacity(states.len());
        let mut caches = Vec::with_capacity(states.len());
        for (cell, state) in enc.cells.iter().zip(states) {
            let (h, s, cache) = conv_lstm_step_cached(&x, state, cell)?;
            next_states.push(s);
            caches.push(cache);
            x = h;
        }
        let pre_codes = conv2d_forward(&x, &enc.binarizer)?.tanh();
        let codes = quantizer.apply(&pre_codes)?;
        Ok((
            codes,
            next_states,
            EncoderCache {
                input: input.clone(),
                analysis_out,
                front_in,
                cells: caches,
                code_in: x,
                pre_codes,
            },
        ))
    }

    /// Gradients through one encoder pass. `grad_states` are the gradients
    /// w.r.t. the states this pass produced. Returns the gradient w.r.t. the
    /// encoder input and w.r.t. the states the pass consumed.
    pub fn encode_backward(
        &self,
        cache: &EncoderCache,
        grad_codes: &Tensor,
        grad_states: &[LstmState],
        grads: &mut ModelGrads,
    ) -> Result<(Tensor, Vec<LstmState>)> {
        let enc = &self.encoder;
        let g_pre = binarize_backward(grad_codes);
        let g_conv = g_pre.zip_with(&cache.pre_codes, "tanh backward", |g, p| g * (1.0 - p * p))?;
        let (mut g_x, gb) = conv2d_backward(&g_conv, &cache.code_in, &enc.binarizer)?;
        add_conv(&mut grads.encoder.binarizer, &gb)?;

        let mut prev_grads = vec![None; enc.cells.len()];
        for k in (0..enc.cells.len()).rev() {
            let (gx, gs, gp) = conv_lstm_backward(&g_x, &grad_states[k], &cache.cells[k], &enc.cells[k])?;
            add_lstm(&mut grads.encoder.cells[k], &gp)?;
            prev_grads[k] = Some(gs);
            g_x = gx;
        }

        let (g_front_in, gf) = conv2d_backward(&g_x, &cache.front_in, &enc.front)?;
        add_conv(&mut grads.encoder.front, &gf)?;
        let g_analysis = match &enc.analysis_gdn {
            Some(gdn) => {
                let (g, gg) = gdn_backward(&g_front_in, &cache.analysis_out, gdn)?;
                add_gdn(&mut grads.encoder.analysis_gdn, &gg)?;
                g
            }
            None => g_front_in,
        };
        let (g_input, ga) = conv2d_backward(&g_analysis, &cache.input, &enc.analysis)?;
        add_conv(&mut grads.encoder.analysis, &ga)?;
        Ok((g_input, prev_grads.into_iter().map(Option::unwrap).collect()))
    }

    pub fn decode_forward(
        &self,
        codes: &Tensor,
        states: &[LstmState],
    ) -> Result<(Tensor, Vec<LstmState>, DecoderCache)> {
        let (_, c, _, _) = codes.dims4()?;
        if c != self.config.code_channels {
            return Err(Error::shape(
                "decode_step codes",
                codes.shape(),
                &[0, self.config.code_channels, 0, 0],
            ));
        }
        if states.len() != self.decoder.cells.len() {
            return Err(Error::invalid("decoder needs one state per cell"));
        }
        let dec = &self.decoder;
        let synthesis_out = conv2d_forward(codes, &dec.synthesis)?;
        let mut x = match &dec.synthesis_igdn {
            Some(igdn) => igdn_forward(&synthesis_out, igdn)?,
            None => synthesis_out.clone(),
        };
        let mut next_states = Vec::with_capacity(states.len());
        let mut caches = Vec::with_capacity(states.len());
        for (cell, state) in dec.cells.iter().zip(states) {
            let (h, s, cache) = conv_lstm_step_cached(&x, state, cell)?;
            next_states.push(s);
            caches.push(cache);
            x = depth_to_space(&h, 2)?;
        }
        let output = conv2d_forward(&x, &dec.output)?.tanh();
        Ok((
            output.clone(),
            next_states,
            DecoderCache {
                codes: codes.clone(),
                synthesis_out,
                cells: caches,
                output_in: x,
                output,
            },
        ))
    }

    /// Gradients through one decoder pass; returns the gradient w.r.t. the
    /// codes and w.r.t. the consumed states.
    pub fn decode_backward(
        &self,
        cache: &DecoderCache,
        grad_output: &Tensor,
        grad_states: &[LstmState],
        grads: &mut ModelGrads,
    ) -> Result<(Tensor, Vec<LstmState>)> {
        let dec = &self.decoder;
        let g = grad_output.zip_with(&cache.output, "tanh backward", |g, y| g * (1.0 - y * y))?;
        let (mut g_x, go) = conv2d_backward(&g, &cache.output_in, &dec.output)?;
        add_conv(&mut grads.decoder.output, &go)?;

        let mut prev_grads = vec![None; dec.cells.len()];
        for k in (0..dec.cells.len()).rev() {
            let g_h = depth_to_space_backward(&g_x, 2)?;
            let (gx, gs, gp) = conv_lstm_backward(&g_h, &grad_states[k], &cache.cells[k], &dec.cells[k])?;
            add_lstm(&mut grads.decoder.cells[k], &gp)?;
            prev_grads[k] = Some(gs);
            g_x = gx;
        }

        let g_synth = match &dec.synthesis_igdn {
            Some(igdn) => {
                let (g, gg) = igdn_backward(&g_x, &cache.synthesis_out, igdn)?;
                add_gdn(&mut grads.decoder.synthesis_igdn, &gg)?;
                g
            }
            None => g_x,
        };
        let (g_codes, gs) = conv2d_backward(&g_synth, &cache.codes, &dec.synthesis)?;
        add_conv(&mut grads.decoder.synthesis, &gs)?;
        Ok((g_codes, prev_grads.into_iter().map(Option::unwrap).collect()))
    }
}
