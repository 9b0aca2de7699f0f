//! Finite-difference verification of every hand-written backward pass.
//!
//! Each op is checked on small random problems, one per seed. The scalar
//! objective is `Σ y ⊙ w` for a random upstream `w`, so the analytic
//! gradients come from calling the backward pass with `w` as the incoming
//! gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, conv_lstm_backward, conv_lstm_step, conv_lstm_step_cached,
    gdn_backward, gdn_forward, igdn_backward, igdn_forward, ConvParams, GdnParams, LstmParams,
    LstmState,
};
use crate::tensor::{finite_difference_grad, max_relative_error, Tensor};
use crate::training::{l1_loss, l1_loss_grad, LossNorm};

/// Every checked op, in report order.
pub const OPS: [&str; 6] = [
    "conv2d_backward",
    "gdn_backward",
    "igdn_backward",
    "conv_lstm_backward",
    "conv_lstm_bptt2",
    "l1_loss_backward",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random problems per op.
    pub seeds: usize,
    pub tolerance: f64,
    pub eps: f64,
    /// Name of an op whose analytic gradient is deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            seeds: 20,
            tolerance: 1e-5,
            eps: 1e-5,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Analytic and numeric gradients for one input of one problem.
type Pair = (Tensor, Tensor);

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn dot(y: &Tensor, w: &Tensor) -> Result<f64> {
    Ok(y.mul(w)?.sum())
}

fn conv_problem(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<Pair>> {
    let in_ch = rng.gen_range(1..=3);
    let out_ch = rng.gen_range(1..=3);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = rng.gen_range(1..=2);
    let batch = rng.gen_range(1..=2);
    let p = ConvParams::new(
        random(&[out_ch, in_ch, k, k], 1.0, rng),
        random(&[out_ch], 1.0, rng),
        stride,
        k / 2,
    )?;
    let x = random(&[batch, in_ch, 5, 5], 1.0, rng);
    let y = conv2d_forward(&x, &p)?;
    let w = random(y.shape(), 1.0, rng);
    let (gx, gp) = conv2d_backward(&w, &x, &p)?;
    let fx = finite_difference_grad(|t| dot(&conv2d_forward(t, &p)?, &w), &x, eps)?;
    let fw = finite_difference_grad(
        |t| dot(&conv2d_forward(&x, &ConvParams { weight: t.clone(), ..p.clone() })?, &w),
        &p.weight,
        eps,
    )?;
    let fb = finite_difference_grad(
        |t| dot(&conv2d_forward(&x, &ConvParams { bias: t.clone(), ..p.clone() })?, &w),
        &p.bias,
        eps,
    )?;
    Ok(vec![(gx, fx), (gp.weight, fw), (gp.bias, fb)])
}

fn gdn_problem(rng: &mut ChaCha8Rng, eps: f64, inverse: bool) -> Result<Vec<Pair>> {
    let c = rng.gen_range(1..=4);
    let p = GdnParams::new(
        Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)),
        Tensor::from_fn(&[c, c], |_| rng.gen_range(0.0..0.5)),
    )?;
    let x = random(&[1, c, 3, 3], 2.0, rng);
    let w = random(x.shape(), 1.0, rng);
    let fwd = |x: &Tensor, p: &GdnParams| {
        if inverse {
            igdn_forward(x, p)
        } else {
            gdn_forward(x, p)
        }
    };
    let (gx, gp) = if inverse {
        igdn_backward(&w, &x, &p)?
    } else {
        gdn_backward(&w, &x, &p)?
    };
    let fx = finite_difference_grad(|t| dot(&fwd(t, &p)?, &w), &x, eps)?;
    let fb = finite_difference_grad(
        |t| dot(&fwd(&x, &GdnParams { beta: t.clone(), ..p.clone() })?, &w),
        &p.beta,
        eps,
    )?;
    let fg = finite_difference_grad(
        |t| dot(&fwd(&x, &GdnParams { gamma: t.clone(), ..p.clone() })?, &w),
        &p.gamma,
        eps,
    )?;
    Ok(vec![(gx, fx), (gp.beta, fb), (gp.gamma, fg)])
}

fn lstm_params(in_ch: usize, hidden: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<LstmParams> {
    LstmParams::new(
        ConvParams::new(
            random(&[4 * hidden, in_ch, 3, 3], 0.5, rng),
            random(&[4 * hidden], 0.5, rng),
            stride,
            1,
        )?,
        ConvParams::new(
            random(&[4 * hidden, hidden, 1, 1], 0.5, rng),
            random(&[4 * hidden], 0.5, rng),
            1,
            0,
        )?,
    )
}

/// Replaces parameter tensor `which` (input weight, input bias, hidden
/// weight, hidden bias).
fn with_param(p: &LstmParams, which: usize, t: &Tensor) -> LstmParams {
    let mut q = p.clone();
    *match which {
        0 => &mut q.input_conv.weight,
        1 => &mut q.input_conv.bias,
        2 => &mut q.hidden_conv.weight,
        _ => &mut q.hidden_conv.bias,
    } = t.clone();
    q
}

fn lstm_param_list(p: &LstmParams) -> [&Tensor; 4] {
    [
        &p.input_conv.weight,
        &p.input_conv.bias,
        &p.hidden_conv.weight,
        &p.hidden_conv.bias,
    ]
}

fn lstm_problem(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<Pair>> {
    let stride = rng.gen_range(1..=2);
    let p = lstm_params(2, 2, stride, rng)?;
    let x = random(&[1, 2, 4, 4], 1.0, rng);
    let s0 = p.zero_state(1, 4, 4)?;
    let s = LstmState {
        h: random(s0.h.shape(), 1.0, rng),
        c: random(s0.c.shape(), 1.0, rng),
    };
    let wh = random(s.h.shape(), 1.0, rng);
    let wc = random(s.c.shape(), 1.0, rng);
    let objective = |x: &Tensor, s: &LstmState, p: &LstmParams| -> Result<f64> {
        let (h, next) = conv_lstm_step(x, s, p)?;
        Ok(dot(&h, &wh)? + dot(&next.c, &wc)?)
    };

    let (_, _, cache) = conv_lstm_step_cached(&x, &s, &p)?;
    let grad_next = LstmState {
        h: Tensor::zeros(s.h.shape()),
        c: wc.clone(),
    };
    let (gx, gs, gp) = conv_lstm_backward(&wh, &grad_next, &cache, &p)?;

    let mut pairs = vec![
        (gx, finite_difference_grad(|t| objective(t, &s, &p), &x, eps)?),
        (
            gs.h,
            finite_difference_grad(
                |t| objective(&x, &LstmState { h: t.clone(), c: s.c.clone() }, &p),
                &s.h,
                eps,
            )?,
        ),
        (
            gs.c,
            finite_difference_grad(
                |t| objective(&x, &LstmState { h: s.h.clone(), c: t.clone() }, &p),
                &s.c,
                eps,
            )?,
        ),
    ];
    let analytic = [
        gp.input_conv.weight,
        gp.input_conv.bias,
        gp.hidden_conv.weight,
        gp.hidden_conv.bias,
    ];
    for (which, (a, cur)) in analytic.into_iter().zip(lstm_param_list(&p)).enumerate() {
        let fd = finite_difference_grad(|t| objective(&x, &s, &with_param(&p, which, t)), cur, eps)?;
        pairs.push((a, fd));
    }
    Ok(pairs)
}

fn bptt_problem(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<Pair>> {
    let p = lstm_params(2, 2, 2, rng)?;
    let x1 = random(&[1, 2, 4, 4], 1.0, rng);
    let x2 = random(&[1, 2, 4, 4], 1.0, rng);
    let s0 = p.zero_state(1, 4, 4)?;
    let w1 = random(s0.h.shape(), 1.0, rng);
    let w2 = random(s0.h.shape(), 1.0, rng);
    let unrolled = |x1: &Tensor, p: &LstmParams| -> Result<f64> {
        let (h1, s1) = conv_lstm_step(x1, &s0, p)?;
        let (h2, _) = conv_lstm_step(&x2, &s1, p)?;
        Ok(dot(&h1, &w1)? + dot(&h2, &w2)?)
    };

    let (_, s1, c1) = conv_lstm_step_cached(&x1, &s0, &p)?;
    let (_, _, c2) = conv_lstm_step_cached(&x2, &s1, &p)?;
    let (_, g1, mut gp) = conv_lstm_backward(&w2, &s0.zeros_like(), &c2, &p)?;
    let (gx1, _, gp1) = conv_lstm_backward(&w1, &g1, &c1, &p)?;
    gp.accumulate(&gp1)?;

    let mut pairs = vec![(gx1, finite_difference_grad(|t| unrolled(t, &p), &x1, eps)?)];
    let analytic = [
        gp.input_conv.weight,
        gp.input_conv.bias,
        gp.hidden_conv.weight,
        gp.hidden_conv.bias,
    ];
    for (which, (a, cur)) in analytic.into_iter().zip(lstm_param_list(&p)).enumerate() {
        let fd = finite_difference_grad(|t| unrolled(&x1, &with_param(&p, which, t)), cur, eps)?;
        pairs.push((a, fd));
    }
    Ok(pairs)
}

fn loss_problem(rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<Pair>> {
    let iterations = rng.gen_range(1..=3);
    let norm = if rng.gen_bool(0.5) { LossNorm::Sum } else { LossNorm::Mean };
    let beta = rng.gen_range(0.5..2.0);
    // keep residuals away from the kink at zero
    let residuals: Vec<Tensor> = (0..iterations)
        .map(|_| {
            Tensor::from_fn(&[1, 3, 2, 2], |_| {
                let m = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
        })
        .collect();
    let grads = l1_loss_grad(&residuals, beta, norm)?;
    let mut pairs = Vec::with_capacity(iterations);
    for (t, g) in grads.into_iter().enumerate() {
        let fd = finite_difference_grad(
            |x| {
                let mut r = residuals.clone();
                r[t] = x.clone();
                l1_loss(&r, beta, norm)
            },
            &residuals[t],
            eps,
        )?;
        pairs.push((g, fd));
    }
    Ok(pairs)
}

fn corrupt(pairs: &mut [Pair]) {
    if let Some((a, _)) = pairs.first_mut() {
        *a = a.map(|v| v * 1.01 + 1e-3);
    }
}

/// Runs the check for one op.
pub fn check_op(op: &str, config: &GradcheckConfig) -> Result<OpReport> {
    let index = OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::invalid(format!("unknown op {op:?}")))?;
    let name = OPS[index];
    let mut worst: f64 = 0.0;
    for s in 0..config.seeds {
        let seed = config
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add((index as u64) << 32 | s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = config.eps;
        let mut pairs = match index {
            0 => conv_problem(&mut rng, eps)?,
            1 => gdn_problem(&mut rng, eps, false)?,
            2 => gdn_problem(&mut rng, eps, true)?,
            3 => lstm_problem(&mut rng, eps)?,
            4 => bptt_problem(&mut rng, eps)?,
            _ => loss_problem(&mut rng, eps)?,
        };
        if config.fault.as_deref() == Some(name) {
            corrupt(&mut pairs);
        }
        for (a, fd) in &pairs {
            let e = max_relative_error(a, fd)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
    }
    Ok(OpReport {
        op: name,
        seeds: config.seeds,
        max_relative_error: worst,
        passed: worst < config.tolerance,
    })
}

/// Checks every op in [`OPS`] once.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<Vec<OpReport>> {
    if config.seeds == 0 {
        return Err(Error::invalid("gradcheck needs at least one seed"));
    }
    if !(config.tolerance > 0.0) || !(config.eps > 0.0) {
        return Err(Error::invalid("tolerance and eps must be positive"));
    }
    if let Some(f) = &config.fault {
        if !OPS.contains(&f.as_str()) {
            return Err(Error::invalid(format!("unknown op {f:?} for fault injection")));
        }
    }
    OPS.iter().map(|op| check_op(op, config)).collect()
}
