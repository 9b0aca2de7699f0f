//! Convolutional LSTM cell.
//!
//! `gates = conv_in(x) + conv_hidden(h_prev)` is split along channels into
//! four equal groups in the fixed order `[f, i, g, o]`, then
//!
//! ```text
//! f, i, o = σ(·)      g = tanh(·)
//! c = f ⊙ c_prev + i ⊙ g
//! h = o ⊙ tanh(c)
//! ```

use super::conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4·hidden × in_ch × K × K`, any stride.
    pub input_conv: ConvParams,
    /// `4·hidden × hidden × 1 × 1`, stride 1.
    pub hidden_conv: ConvParams,
}

/// Hidden and memory tensors of one cell. Also used for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub input_conv: ConvGrads,
    pub hidden_conv: ConvGrads,
}

impl LstmGrads {
    pub fn zeros_like(p: &LstmParams) -> Self {
        LstmGrads {
            input_conv: ConvGrads::zeros_like(&p.input_conv),
            hidden_conv: ConvGrads::zeros_like(&p.hidden_conv),
        }
    }

    pub fn accumulate(&mut self, other: &LstmGrads) -> Result<()> {
        self.input_conv.accumulate(&other.input_conv)?;
        self.hidden_conv.accumulate(&other.hidden_conv)
    }
}

/// Forward activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize, h: usize, w: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden, h, w]),
            c: Tensor::zeros(&[batch, hidden, h, w]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmState {
            h: Tensor::zeros(self.h.shape()),
            c: Tensor::zeros(self.c.shape()),
        }
    }
}

impl LstmParams {
    pub fn new(input_conv: ConvParams, hidden_conv: ConvParams) -> Result<Self> {
        let p = LstmParams {
            input_conv,
            hidden_conv,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(in_ch: usize, hidden: usize, kernel: usize, stride: usize) -> Self {
        LstmParams {
            input_conv: ConvParams::zeros(4 * hidden, in_ch, kernel, stride, kernel / 2),
            hidden_conv: ConvParams::zeros(4 * hidden, hidden, 1, 1, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.input_conv.validate()?;
        self.hidden_conv.validate()?;
        let gates = self.input_conv.out_channels();
        if gates % 4 != 0 || gates != self.hidden_conv.out_channels() {
            return Err(Error::invalid(format!(
                "lstm gate channels {gates} / {} must match and divide by 4",
                self.hidden_conv.out_channels()
            )));
        }
        if self.hidden_conv.in_channels() != gates / 4 {
            return Err(Error::invalid("lstm hidden conv must read the hidden state"));
        }
        if self.hidden_conv.stride != 1 {
            return Err(Error::invalid("lstm hidden conv must have stride 1"));
        }
        Ok(())
    }

    pub fn hidden_channels(&self) -> usize {
        self.input_conv.out_channels() / 4
    }

    /// State shape for a `batch × C × h × w` input.
    pub fn zero_state(&self, batch: usize, h: usize, w: usize) -> Result<LstmState> {
        let (oh, ow) = self.input_conv.output_hw(h, w)?;
        Ok(LstmState::zeros(batch, self.hidden_channels(), oh, ow))
    }
}

pub fn conv_lstm_step(x: &Tensor, state: &LstmState, p: &LstmParams) -> Result<(Tensor, LstmState)> {
    let (h, next, _) = conv_lstm_step_cached(x, state, p)?;
    Ok((h, next))
}

pub fn conv_lstm_step_cached(
    x: &Tensor,
    state: &LstmState,
    p: &LstmParams,
) -> Result<(Tensor, LstmState, LstmCache)> {
    state.h.check_same_shape(&state.c, "lstm state")?;
    let from_input = conv2d_forward(x, &p.input_conv)?;
    let (b, gc, gh, gw) = from_input.dims4()?;
    let hidden = gc / 4;
    let expected = [b, hidden, gh, gw];
    if state.h.shape() != expected {
        return Err(Error::shape("conv_lstm_step state", state.h.shape(), &expected));
    }
    let gates = from_input.add(&conv2d_forward(&state.h, &p.hidden_conv)?)?;

    let plane = hidden * gh * gw;
    let n = b * plane;
    let (mut f, mut i, mut g, mut o) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut h = vec![0.0; n];
    for bi in 0..b {
        let z = &gates.data()[bi * 4 * plane..(bi + 1) * 4 * plane];
        for k in 0..plane {
            let at = bi * plane + k;
            f[at] = sigmoid(z[k]);
            i[at] = sigmoid(z[plane + k]);
            g[at] = z[2 * plane + k].tanh();
            o[at] = sigmoid(z[3 * plane + k]);
            c[at] = f[at] * state.c.data()[at] + i[at] * g[at];
            tanh_c[at] = c[at].tanh();
            h[at] = o[at] * tanh_c[at];
        }
    }
    let h = Tensor::new(&expected, h)?;
    let next = LstmState {
        h: h.clone(),
        c: Tensor::new(&expected, c)?,
    };
    let cache = LstmCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        f,
        i,
        g,
        o,
        tanh_c,
    };
    Ok((h, next, cache))
}

/// Backward through one step.
///
/// `grad_h` is the gradient reaching the cell output from the layer above;
/// `grad_next` carries the gradients with respect to this step's `(h, c)`
/// arriving from the following time step. Both contributions are summed.
/// Returns the gradients for `x`, for the previous state, and for the
/// parameters.
pub fn conv_lstm_backward(
    grad_h: &Tensor,
    grad_next: &LstmState,
    cache: &LstmCache,
    p: &LstmParams,
) -> Result<(Tensor, LstmState, LstmGrads)> {
    let shape = cache.c_prev.shape();
    for (t, name) in [
        (grad_h, "conv_lstm_backward grad_h"),
        (&grad_next.h, "conv_lstm_backward grad_next.h"),
        (&grad_next.c, "conv_lstm_backward grad_next.c"),
    ] {
        if t.shape() != shape {
            return Err(Error::shape("conv_lstm_backward", t.shape(), shape));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let (b, hidden, gh, gw) = cache.c_prev.dims4()?;
    let plane = hidden * gh * gw;
    let mut d_gates = vec![0.0; b * 4 * plane];
    let mut d_c_prev = vec![0.0; b * plane];
    for bi in 0..b {
        let dz = &mut d_gates[bi * 4 * plane..(bi + 1) * 4 * plane];
        for k in 0..plane {
            let at = bi * plane + k;
            let (f, i, g, o, tc) = (cache.f[at], cache.i[at], cache.g[at], cache.o[at], cache.tanh_c[at]);
            let dh = grad_h.data()[at] + grad_next.h.data()[at];
            let dc = grad_next.c.data()[at] + dh * o * (1.0 - tc * tc);
            dz[k] = dc * cache.c_prev.data()[at] * f * (1.0 - f);
            dz[plane + k] = dc * g * i * (1.0 - i);
            dz[2 * plane + k] = dc * i * (1.0 - g * g);
            dz[3 * plane + k] = dh * tc * o * (1.0 - o);
            d_c_prev[at] = dc * f;
        }
    }
    let d_gates = Tensor::new(&[b, 4 * hidden, gh, gw], d_gates)?;
    let (grad_x, input_conv) = conv2d_backward(&d_gates, &cache.x, &p.input_conv)?;
    let (grad_h_prev, hidden_conv) = conv2d_backward(&d_gates, &cache.h_prev, &p.hidden_conv)?;
    Ok((
        grad_x,
        LstmState {
            h: grad_h_prev,
            c: Tensor::new(shape, d_c_prev)?,
        },
        LstmGrads {
            input_conv,
            hidden_conv,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn random_params(in_ch: usize, hidden: usize, stride: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        LstmParams::new(
            ConvParams::new(
                random(&[4 * hidden, in_ch, 3, 3], 0.5, rng),
                random(&[4 * hidden], 0.5, rng),
                stride,
                1,
            )
            .unwrap(),
            ConvParams::new(
                random(&[4 * hidden, hidden, 1, 1], 0.5, rng),
                random(&[4 * hidden], 0.5, rng),
                1,
                0,
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_zero_state() {
        let p = LstmParams::zeros(2, 3, 3, 1);
        let s = LstmState::zeros(1, 3, 4, 4);
        let (h, next) = conv_lstm_step(&Tensor::full(&[1, 2, 4, 4], 0.7), &s, &p).unwrap();
        assert_eq!(h.max_abs(), 0.0);
        assert_eq!(next.c.max_abs(), 0.0);
    }

    #[test]
    fn zero_weights_carried_memory() {
        let p = LstmParams::zeros(2, 3, 3, 1);
        let s = LstmState {
            h: Tensor::zeros(&[1, 3, 2, 2]),
            c: Tensor::full(&[1, 3, 2, 2], 2.0),
        };
        let (h, next) = conv_lstm_step(&Tensor::full(&[1, 2, 2, 2], -0.3), &s, &p).unwrap();
        assert!(next.c.data().iter().all(|&c| c == 1.0));
        let want = 0.5 * 1f64.tanh();
        assert!((want - 0.3807970).abs() < 1e-7);
        assert!(h.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn strided_state_shape() {
        let p = LstmParams::zeros(64, 256, 3, 2);
        let s = p.zero_state(16, 16, 16).unwrap();
        assert_eq!(s.h.shape(), &[16, 256, 8, 8]);
        let (h, next) = conv_lstm_step(&Tensor::zeros(&[16, 64, 16, 16]), &s, &p).unwrap();
        assert_eq!(h.shape(), &[16, 256, 8, 8]);
        assert_eq!(next.c.shape(), &[16, 256, 8, 8]);
    }

    #[test]
    fn rejects_bad_state_and_params() {
        let p = LstmParams::zeros(2, 3, 3, 1);
        let s = LstmState::zeros(1, 3, 3, 3);
        assert!(conv_lstm_step(&Tensor::zeros(&[1, 2, 4, 4]), &s, &p).is_err());
        let mut bad = p.clone();
        bad.hidden_conv.stride = 2;
        assert!(bad.validate().is_err());
        let bad = LstmParams {
            input_conv: ConvParams::zeros(8, 2, 3, 1, 1),
            hidden_conv: ConvParams::zeros(12, 3, 1, 1, 0),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(2, 2, 2, &mut rng);
        let x = random(&[1, 2, 4, 4], 1.0, &mut rng);
        let s = LstmState {
            h: random(&[1, 2, 2, 2], 1.0, &mut rng),
            c: random(&[1, 2, 2, 2], 1.0, &mut rng),
        };
        assert_eq!(conv_lstm_step(&x, &s, &p).unwrap(), conv_lstm_step(&x, &s, &p).unwrap());
    }

    /// Weighted sum of both outputs of a step, so every backward input is exercised.
    fn step_loss(x: &Tensor, s: &LstmState, p: &LstmParams, wh: &Tensor, wc: &Tensor) -> Result<f64> {
        let (h, next) = conv_lstm_step(x, s, p)?;
        Ok(h.mul(wh)?.sum() + next.c.mul(wc)?.sum())
    }

    fn with_weight(p: &LstmParams, which: usize, t: &Tensor) -> LstmParams {
        let mut q = p.clone();
        match which {
            0 => q.input_conv.weight = t.clone(),
            1 => q.input_conv.bias = t.clone(),
            2 => q.hidden_conv.weight = t.clone(),
            _ => q.hidden_conv.bias = t.clone(),
        }
        q
    }

    #[test]
    fn single_step_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let stride = if seed % 2 == 0 { 1 } else { 2 };
            let p = random_params(2, 2, stride, &mut rng);
            let x = random(&[1, 2, 4, 4], 1.0, &mut rng);
            let s0 = p.zero_state(1, 4, 4).unwrap();
            let s = LstmState {
                h: random(s0.h.shape(), 1.0, &mut rng),
                c: random(s0.c.shape(), 1.0, &mut rng),
            };
            let wh = random(s.h.shape(), 1.0, &mut rng);
            let wc = random(s.h.shape(), 1.0, &mut rng);
            let (_, _, cache) = conv_lstm_step_cached(&x, &s, &p).unwrap();
            let grad_next = LstmState { h: Tensor::zeros(s.h.shape()), c: wc.clone() };
            let (gx, gs, gp) = conv_lstm_backward(&wh, &grad_next, &cache, &p).unwrap();

            let fx = finite_difference_grad(|t| step_loss(t, &s, &p, &wh, &wc), &x, 1e-5).unwrap();
            let fh = finite_difference_grad(
                |t| step_loss(&x, &LstmState { h: t.clone(), c: s.c.clone() }, &p, &wh, &wc),
                &s.h,
                1e-5,
            )
            .unwrap();
            let fc = finite_difference_grad(
                |t| step_loss(&x, &LstmState { h: s.h.clone(), c: t.clone() }, &p, &wh, &wc),
                &s.c,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&gx, &fx).unwrap() < 1e-5, "seed {seed} x");
            assert!(max_relative_error(&gs.h, &fh).unwrap() < 1e-5, "seed {seed} h");
            assert!(max_relative_error(&gs.c, &fc).unwrap() < 1e-5, "seed {seed} c");

            let analytic = [
                &gp.input_conv.weight,
                &gp.input_conv.bias,
                &gp.hidden_conv.weight,
                &gp.hidden_conv.bias,
            ];
            let current = [
                &p.input_conv.weight,
                &p.input_conv.bias,
                &p.hidden_conv.weight,
                &p.hidden_conv.bias,
            ];
            for which in 0..4 {
                let fd = finite_difference_grad(
                    |t| step_loss(&x, &s, &with_weight(&p, which, t), &wh, &wc),
                    current[which],
                    1e-5,
                )
                .unwrap();
                assert!(
                    max_relative_error(analytic[which], &fd).unwrap() < 1e-5,
                    "seed {seed} param {which}"
                );
            }
        }
    }

    #[test]
    fn two_steps_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let p = random_params(2, 2, 2, &mut rng);
            let x1 = random(&[1, 2, 4, 4], 1.0, &mut rng);
            let x2 = random(&[1, 2, 4, 4], 1.0, &mut rng);
            let s0 = p.zero_state(1, 4, 4).unwrap();
            let w1 = random(s0.h.shape(), 1.0, &mut rng);
            let w2 = random(s0.h.shape(), 1.0, &mut rng);

            let unrolled = |x1: &Tensor, p: &LstmParams| -> Result<f64> {
                let (h1, s1) = conv_lstm_step(x1, &s0, p)?;
                let (h2, _) = conv_lstm_step(&x2, &s1, p)?;
                Ok(h1.mul(&w1)?.sum() + h2.mul(&w2)?.sum())
            };

            let (_, s1, c1) = conv_lstm_step_cached(&x1, &s0, &p).unwrap();
            let (_, _, c2) = conv_lstm_step_cached(&x2, &s1, &p).unwrap();
            let (_, g1, mut gp) = conv_lstm_backward(&w2, &s0.zeros_like(), &c2, &p).unwrap();
            let (gx1, _, gp1) = conv_lstm_backward(&w1, &g1, &c1, &p).unwrap();
            gp.accumulate(&gp1).unwrap();

            let fx = finite_difference_grad(|t| unrolled(t, &p), &x1, 1e-5).unwrap();
            assert!(max_relative_error(&gx1, &fx).unwrap() < 1e-5, "seed {seed} x1");
            let fw = finite_difference_grad(
                |t| unrolled(&x1, &with_weight(&p, 2, t)),
                &p.hidden_conv.weight,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&gp.hidden_conv.weight, &fw).unwrap() < 1e-5, "seed {seed}");
            let fw = finite_difference_grad(
                |t| unrolled(&x1, &with_weight(&p, 0, t)),
                &p.input_conv.weight,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&gp.input_conv.weight, &fw).unwrap() < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_params(2, 2, 1, &mut rng);
        let x = random(&[1, 2, 3, 3], 1.0, &mut rng);
        let s = p.zero_state(1, 3, 3).unwrap();
        let (_, _, cache) = conv_lstm_step_cached(&x, &s, &p).unwrap();
        let (gx, gs, gp) = conv_lstm_backward(&Tensor::zeros(s.h.shape()), &s, &cache, &p).unwrap();
        let total = gx.max_abs()
            + gs.h.max_abs()
            + gs.c.max_abs()
            + gp.input_conv.weight.max_abs()
            + gp.input_conv.bias.max_abs()
            + gp.hidden_conv.weight.max_abs()
            + gp.hidden_conv.bias.max_abs();
        assert_eq!(total, 0.0);
    }
}
