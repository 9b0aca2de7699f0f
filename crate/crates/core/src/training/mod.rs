//! Training: L1 residual objective, full-unroll backpropagation and Adam.

mod adam;
mod loss;
mod patches;

pub use adam::{adam_step, adam_update, AdamConfig, OptimizerState};
pub use loss::{l1_loss, l1_loss_grad, l1_residual_loss, LossNorm};
pub use patches::{crop_patch, sample_patches, PatchBatch, PatchOrigin};

use std::time::Instant;

use rand::RngCore;

use crate::codec::{
    encoder_input, unclamped_reconstruction, CodecModel, DecoderCache, EncoderCache, ModelGrads,
    Quantizer, ReconstructionMode, DOWNSAMPLING,
};
use crate::error::{Error, Result};
use crate::layers::LstmState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    /// Patches drawn per epoch; one epoch is `ceil(patches_per_epoch / batch_size)` steps.
    pub patches_per_epoch: usize,
    /// Overrides the epoch arithmetic when set.
    pub steps: Option<usize>,
    pub iterations: usize,
    pub loss_weight: f64,
    pub loss_norm: LossNorm,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stochastic binarization during training; off means the sign binarizer.
    pub stochastic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: adam.learning_rate,
            batch_size: 16,
            patch_size: 32,
            epochs: 10,
            patches_per_epoch: 1600,
            steps: None,
            iterations: 8,
            loss_weight: 1.0,
            loss_norm: LossNorm::Mean,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            stochastic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("epochs", self.epochs),
            ("patches_per_epoch", self.patches_per_epoch),
            ("iterations", self.iterations),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.patch_size % DOWNSAMPLING != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of {DOWNSAMPLING}"
            )));
        }
        let reals = [
            ("lr", self.learning_rate),
            ("loss_weight", self.loss_weight),
            ("eps", self.eps),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * self.patches_per_epoch.div_ceil(self.batch_size))
    }
}

struct Step {
    enc: EncoderCache,
    dec: DecoderCache,
    /// Reconstruction before clamping.
    unclamped: Tensor,
}

/// Loss and parameter gradients for one batch, backpropagating through all
/// `iterations` passes. The binarizer is straight-through.
pub fn loss_and_grads(
    model: &CodecModel,
    batch: &Tensor,
    iterations: usize,
    beta: f64,
    norm: LossNorm,
    quantizer: &mut Quantizer<'_>,
) -> Result<(f64, ModelGrads)> {
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let mode = model.config.mode;
    let (b, _, h, w) = batch.dims4()?;
    let mut enc_states = model.encoder_zero_states(b, h, w)?;
    let mut dec_states = model.decoder_zero_states(b, h / DOWNSAMPLING, w / DOWNSAMPLING);
    let mut steps = Vec::with_capacity(iterations);
    let mut recons: Vec<Tensor> = Vec::with_capacity(iterations);
    let mut residuals: Vec<Tensor> = Vec::with_capacity(iterations);

    for t in 1..=iterations {
        let prev_r = residuals.last().unwrap_or(batch);
        let input = encoder_input(t, batch, prev_r);
        let (codes, es, enc) = model.encode_forward(&input, &enc_states, quantizer)?;
        let (decoded, ds, dec) = model.decode_forward(&codes, &dec_states)?;
        enc_states = es;
        dec_states = ds;
        let unclamped = unclamped_reconstruction(mode, recons.last(), &decoded)?;
        let recon = unclamped.clamp(0.0, 1.0);
        residuals.push(batch.sub(&recon)?);
        recons.push(recon);
        steps.push(Step { enc, dec, unclamped });
    }

    let loss = l1_loss(&residuals, beta, norm)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let g_res = l1_loss_grad(&residuals, beta, norm)?;

    let mut grads = model.zero_grads();
    let mut g_enc: Vec<LstmState> = enc_states.iter().map(LstmState::zeros_like).collect();
    let mut g_dec: Vec<LstmState> = dec_states.iter().map(LstmState::zeros_like).collect();
    // dL/dx̂_t arriving from later iterations.
    let mut carry = Tensor::zeros(batch.shape());

    for t in (1..=iterations).rev() {
        let step = &steps[t - 1];
        // r_t = x − x̂_t
        let g_recon = carry.sub(&g_res[t - 1])?;
        let g_z = g_recon.zip_with(&step.unclamped, "clamp backward", |g, z| {
            if z > 0.0 && z < 1.0 {
                g
            } else {
                0.0
            }
        })?;
        let (g_codes, gd) = model.decode_backward(&step.dec, &g_z, &g_dec, &mut grads)?;
        g_dec = gd;
        let (g_input, ge) = model.encode_backward(&step.enc, &g_codes, &g_enc, &mut grads)?;
        g_enc = ge;

        carry = match mode {
            ReconstructionMode::Additive => g_z,
            ReconstructionMode::OneShot => Tensor::zeros(batch.shape()),
        };
        if t >= 2 {
            // input_t = r_{t−1} = x − x̂_{t−1}
            carry = carry.sub(&g_input)?;
        }
    }
    Ok((loss, grads))
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut CodecModel,
    batch: &Tensor,
    state: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut quantizer = if config.stochastic {
        Quantizer::stochastic(rng)
    } else {
        Quantizer::sign()
    };
    let (loss, grads) = loss_and_grads(
        model,
        batch,
        config.iterations,
        config.loss_weight,
        config.loss_norm,
        &mut quantizer,
    )?;
    adam_step(model, &grads, state, &config.adam())?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Trains on random patches of `images` for `config.total_steps()` steps.
/// All randomness comes from one generator seeded with `config.seed`.
pub fn train(
    model: &mut CodecModel,
    images: &[Tensor],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    use rand::SeedableRng;

    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(model);
    let start = Instant::now();
    let total = config.total_steps();
    let mut log = Vec::with_capacity(total);
    for step in 1..=total {
        let batch = sample_patches(images, config.batch_size, config.patch_size, &mut rng)?;
        let loss = train_step(model, &batch.patches, &mut state, config, &mut rng)?;
        let rec = StepRecord {
            step,
            loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_model, compress_with, ArchitectureConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: ReconstructionMode) -> CodecModel {
        let cfg = ArchitectureConfig {
            patch_size: 64,
            analysis_channels: 3,
            encoder_hidden: [3, 4, 4],
            code_channels: 2,
            synthesis_channels: 4,
            decoder_hidden: [8, 8, 8, 8],
            use_gdn: true,
            mode,
            iterations: 2,
        };
        let mut m = build_model(&cfg, 5).unwrap();
        // Larger weights so the gradient signal is not vanishingly small.
        for p in m.params_mut() {
            if p.name.ends_with("weight") {
                *p.tensor = p.tensor.scale(2.0);
            }
        }
        m
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::from_fn(&[1, 3, 64, 64], |_| rng.gen_range(0.05..0.95))
    }

    fn loss_of(m: &CodecModel, x: &Tensor, norm: LossNorm) -> Result<f64> {
        let trace = compress_with(m, x, 2, m.config.mode, &mut Quantizer::identity())?;
        l1_residual_loss(&trace, 1.0, norm)
    }

    #[test]
    fn forward_loss_matches_compress() {
        let m = tiny(ReconstructionMode::Additive);
        let x = image(1);
        let (loss, _) = loss_and_grads(&m, &x, 2, 1.0, LossNorm::Mean, &mut Quantizer::identity()).unwrap();
        assert_eq!(loss, loss_of(&m, &x, LossNorm::Mean).unwrap());
        assert!(loss >= 0.0);
    }

    /// Central difference of the unrolled loss in one parameter entry. The
    /// loss is piecewise smooth (L1 and clamp), so a stencil that straddles
    /// a kink is detected by disagreeing one-sided differences and retried
    /// with a smaller step. `None` if every step straddles a kink.
    fn probe_fd(m: &CodecModel, x: &Tensor, pi: usize, k: usize) -> Option<f64> {
        let f0 = loss_of(m, x, LossNorm::Sum).unwrap();
        let mut eps = 1e-6;
        for _ in 0..4 {
            let at = |d: f64| {
                let mut mm = m.clone();
                mm.params_mut()[pi].tensor.data_mut()[k] += d;
                loss_of(&mm, x, LossNorm::Sum).unwrap()
            };
            let (fp, fm) = (at(eps), at(-eps));
            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            if (fwd - bwd).abs() / 1f64.max(fwd.abs()) < 1e-4 {
                return Some((fp - fm) / (2.0 * eps));
            }
            eps /= 10.0;
        }
        None
    }

    #[test]
    fn unroll_gradient_matches_finite_differences() {
        let x = image(2);
        for mode in [ReconstructionMode::OneShot, ReconstructionMode::Additive] {
            let m = tiny(mode);
            let (_, grads) =
                loss_and_grads(&m, &x, 2, 1.0, LossNorm::Sum, &mut Quantizer::identity()).unwrap();
            let analytic = grads.params();
            let (mut checked, mut total) = (0, 0);
            for (pi, p) in m.params().iter().enumerate() {
                let n = p.tensor.len();
                for &k in &[0, n / 2, n - 1] {
                    total += 1;
                    let Some(fd) = probe_fd(&m, &x, pi, k) else { continue };
                    checked += 1;
                    let a = analytic[pi].tensor.data()[k];
                    let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
                    assert!(rel < 1e-4, "{mode} {}[{k}]: analytic {a}, fd {fd}", p.name);
                }
            }
            assert!(checked * 10 >= total * 9, "{mode}: only {checked}/{total} probes smooth");
        }
    }

    #[test]
    fn seeded_steps_are_reproducible() {
        let run = || {
            let mut m = tiny(ReconstructionMode::OneShot);
            let cfg = TrainConfig {
                batch_size: 2,
                patch_size: 64,
                iterations: 2,
                learning_rate: 0.01,
                ..TrainConfig::default()
            };
            let mut st = OptimizerState::new(&m);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let batch = Tensor::stack_batch(&[image(3), image(4)]).unwrap();
            let losses: Vec<f64> = (0..3)
                .map(|_| train_step(&mut m, &batch, &mut st, &cfg, &mut rng).unwrap())
                .collect();
            (losses, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn config_checks() {
        let d = TrainConfig::default();
        d.validate().unwrap();
        assert_eq!(d.learning_rate, 0.0005);
        assert_eq!(d.batch_size, 16);
        assert_eq!(d.total_steps(), 1000);
        assert_eq!(TrainConfig { steps: Some(7), ..d.clone() }.total_steps(), 7);
        assert!(TrainConfig { patch_size: 24, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..d }.validate().is_err());
    }
}
