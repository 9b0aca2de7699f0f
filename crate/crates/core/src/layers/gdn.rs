//! Generalized divisive normalization and its decoder-side counterpart.
//!
//! At every spatial position, with `norm_i = beta_i + Σ_j gamma_ij · x_j²`:
//!
//! * GDN:  `y_i = x_i / sqrt(norm_i)`
//! * iGDN: `y_i = x_i · sqrt(norm_i)`
//!
//! iGDN with the same parameters is not the pointwise inverse of GDN; each
//! side learns its own `beta`/`gamma`.

use super::gemm::{matmul, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    /// `C`
    pub beta: Tensor,
    /// `C × C`, row `i` weights the squared inputs feeding channel `i`.
    pub gamma: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdnGrads {
    pub beta: Tensor,
    pub gamma: Tensor,
}

impl GdnGrads {
    pub fn zeros_like(p: &GdnParams) -> Self {
        GdnGrads {
            beta: Tensor::zeros(p.beta.shape()),
            gamma: Tensor::zeros(p.gamma.shape()),
        }
    }

    pub fn accumulate(&mut self, other: &GdnGrads) -> Result<()> {
        self.beta.add_assign(&other.beta)?;
        self.gamma.add_assign(&other.gamma)
    }
}

impl GdnParams {
    pub fn new(beta: Tensor, gamma: Tensor) -> Result<Self> {
        let p = GdnParams { beta, gamma };
        p.validate()?;
        Ok(p)
    }

    /// `beta = 1`, `gamma = 0.1 · I`.
    pub fn identity_init(channels: usize) -> Self {
        GdnParams {
            beta: Tensor::full(&[channels], 1.0),
            gamma: Tensor::from_fn(&[channels, channels], |i| {
                if i / channels == i % channels {
                    0.1
                } else {
                    0.0
                }
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.beta.len();
        if self.beta.shape() != [c] || self.gamma.shape() != [c, c] {
            return Err(Error::shape("gdn parameters", self.beta.shape(), self.gamma.shape()));
        }
        if self.beta.data().iter().any(|&b| !(b >= BETA_FLOOR)) {
            return Err(Error::invalid(format!("gdn beta must be >= {BETA_FLOOR}")));
        }
        if self.gamma.data().iter().any(|&g| !(g >= 0.0)) {
            return Err(Error::invalid("gdn gamma must be non-negative"));
        }
        Ok(())
    }

    /// Clamps `beta` to the floor and `gamma` to non-negative values.
    pub fn project(&mut self) {
        for b in self.beta.data_mut() {
            *b = b.max(BETA_FLOOR);
        }
        for g in self.gamma.data_mut() {
            *g = g.max(0.0);
        }
    }

    fn check_input(&self, x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(op, x.shape(), self.beta.shape()));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("{op} input")));
        }
        Ok((b, c, h * w))
    }

    /// `beta_i + Σ_j gamma_ij x_j²` for one batch element laid out `C × P`.
    fn norm(&self, x: &[f64], c: usize, p: usize) -> Vec<f64> {
        let squares: Vec<f64> = x.iter().map(|v| v * v).collect();
        let mut norm = vec![0.0; c * p];
        for (i, row) in norm.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = self.beta.data()[i]);
        }
        matmul(
            Mat::new(self.gamma.data(), c, c),
            Mat::new(&squares, c, p),
            &mut norm,
            true,
        );
        norm
    }
}

fn forward(x: &Tensor, p: &GdnParams, inverse: bool) -> Result<Tensor> {
    let op = if inverse { "igdn_forward" } else { "gdn_forward" };
    let (batch, c, plane) = p.check_input(x, op)?;
    let mut out = Vec::with_capacity(x.len());
    for xb in x.data().chunks_exact(c * plane).take(batch) {
        let norm = p.norm(xb, c, plane);
        out.extend(xb.iter().zip(&norm).map(|(&v, &n)| {
            if inverse {
                v * n.sqrt()
            } else {
                v / n.sqrt()
            }
        }));
    }
    Tensor::new(x.shape(), out)
}

fn backward(
    grad_out: &Tensor,
    saved: &Tensor,
    p: &GdnParams,
    inverse: bool,
) -> Result<(Tensor, GdnGrads)> {
    let op = if inverse { "igdn_backward" } else { "gdn_backward" };
    let (batch, c, plane) = p.check_input(saved, op)?;
    saved.check_same_shape(grad_out, op)?;

    let mut grad_x = Vec::with_capacity(saved.len());
    let mut grad_beta = vec![0.0; c];
    let mut grad_gamma = vec![0.0; c * c];
    let mut coupled = vec![0.0; c * plane];
    // GDN:  a = g·x·norm^-3/2, dx = g/√norm − x·(γᵀa), dβ = −½Σa, dγ = −½ a·(x²)ᵀ
    // iGDN: a = g·x/√norm,     dx = g·√norm + x·(γᵀa), dβ = ½Σa,  dγ = ½ a·(x²)ᵀ
    let (sign, half) = if inverse { (1.0, 0.5) } else { (-1.0, -0.5) };
    for b in 0..batch {
        let xs = &saved.data()[b * c * plane..(b + 1) * c * plane];
        let gs = &grad_out.data()[b * c * plane..(b + 1) * c * plane];
        let norm = p.norm(xs, c, plane);
        let a: Vec<f64> = xs
            .iter()
            .zip(gs)
            .zip(&norm)
            .map(|((&x, &g), &n)| {
                let r = n.sqrt();
                if inverse {
                    g * x / r
                } else {
                    g * x / (n * r)
                }
            })
            .collect();
        matmul(
            Mat::new(p.gamma.data(), c, c).t(),
            Mat::new(&a, c, plane),
            &mut coupled,
            false,
        );
        grad_x.extend(xs.iter().zip(gs).zip(&norm).zip(&coupled).map(
            |(((&x, &g), &n), &k)| {
                let direct = if inverse { g * n.sqrt() } else { g / n.sqrt() };
                direct + sign * x * k
            },
        ));
        for (i, row) in a.chunks_exact(plane).enumerate() {
            grad_beta[i] += half * row.iter().sum::<f64>();
        }
        let squares: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let scaled: Vec<f64> = a.iter().map(|v| v * half).collect();
        matmul(
            Mat::new(&scaled, c, plane),
            Mat::new(&squares, c, plane).t(),
            &mut grad_gamma,
            true,
        );
    }
    Ok((
        Tensor::new(saved.shape(), grad_x)?,
        GdnGrads {
            beta: Tensor::new(&[c], grad_beta)?,
            gamma: Tensor::new(&[c, c], grad_gamma)?,
        },
    ))
}

pub fn gdn_forward(w: &Tensor, p: &GdnParams) -> Result<Tensor> {
    forward(w, p, false)
}

pub fn gdn_backward(grad_out: &Tensor, saved_w: &Tensor, p: &GdnParams) -> Result<(Tensor, GdnGrads)> {
    backward(grad_out, saved_w, p, false)
}

pub fn igdn_forward(u_hat: &Tensor, p: &GdnParams) -> Result<Tensor> {
    forward(u_hat, p, true)
}

pub fn igdn_backward(
    grad_out: &Tensor,
    saved_u_hat: &Tensor,
    p: &GdnParams,
) -> Result<(Tensor, GdnGrads)> {
    backward(grad_out, saved_u_hat, p, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(beta: f64, gamma: f64) -> GdnParams {
        GdnParams::new(Tensor::scalar(beta), Tensor::new(&[1, 1], vec![gamma]).unwrap()).unwrap()
    }

    fn pixel(v: f64) -> Tensor {
        Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap()
    }

    fn random_params(c: usize, rng: &mut ChaCha8Rng) -> GdnParams {
        GdnParams::new(
            Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)),
            Tensor::from_fn(&[c, c], |_| rng.gen_range(0.0..0.5)),
        )
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(gdn_forward(&pixel(6.0), &scalar_params(4.0, 0.0)).unwrap().data(), &[3.0]);
        let y = gdn_forward(&pixel(3.0), &scalar_params(1.0, 1.0)).unwrap();
        assert!((y.data()[0] - 0.9486833).abs() < 1e-7);

        let w = Tensor::new(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let p = GdnParams::new(
            Tensor::full(&[2], 1.0),
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let y = gdn_forward(&w, &p).unwrap();
        assert!((y.data()[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(igdn_forward(&pixel(3.0), &scalar_params(4.0, 0.0)).unwrap().data(), &[6.0]);
        let y = igdn_forward(&pixel(0.9486833), &scalar_params(1.0, 1.0)).unwrap();
        assert!((y.data()[0] - 1.3076697).abs() < 1e-6);
        assert_eq!(igdn_forward(&pixel(0.0), &scalar_params(2.0, 3.0)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn degenerate_gamma_is_channel_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(-3.0..3.0));
        let beta = Tensor::new(&[3], vec![0.5, 2.0, 7.0]).unwrap();
        let p = GdnParams::new(beta.clone(), Tensor::zeros(&[3, 3])).unwrap();
        let y = gdn_forward(&w, &p).unwrap();
        let z = igdn_forward(&w, &p).unwrap();
        for (i, (&a, (&b, &c))) in w.data().iter().zip(y.data().iter().zip(z.data())).enumerate() {
            let beta_c = beta.data()[(i / 16) % 3];
            assert!((b - a / beta_c.sqrt()).abs() < 1e-12);
            assert!((c - a * beta_c.sqrt()).abs() < 1e-12);
        }

        let g = Tensor::from_fn(w.shape(), |i| (i as f64).cos());
        let (gw, _) = gdn_backward(&g, &w, &p).unwrap();
        let (gu, _) = igdn_backward(&g, &w, &p).unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            let beta_c = beta.data()[(i / 16) % 3];
            assert_eq!(gw.data()[i], gv / beta_c.sqrt());
            assert_eq!(gu.data()[i], gv * beta_c.sqrt());
        }
    }

    fn check_backward(inverse: bool) {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = random_params(3, &mut rng);
            let x = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.gen_range(-2.0..2.0));
            let up = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
            let fwd = |x: &Tensor, p: &GdnParams| forward(x, p, inverse);
            let loss = |y: Tensor| y.mul(&up).unwrap().sum();
            let (gx, gp) = backward(&up, &x, &p, inverse).unwrap();

            let fx = finite_difference_grad(|t| Ok(loss(fwd(t, &p)?)), &x, 1e-5).unwrap();
            let fb = finite_difference_grad(
                |b| Ok(loss(fwd(&x, &GdnParams { beta: b.clone(), ..p.clone() })?)),
                &p.beta,
                1e-5,
            )
            .unwrap();
            let fg = finite_difference_grad(
                |g| Ok(loss(fwd(&x, &GdnParams { gamma: g.clone(), ..p.clone() })?)),
                &p.gamma,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&gx, &fx).unwrap() < 1e-5, "seed {seed}");
            assert!(max_relative_error(&gp.beta, &fb).unwrap() < 1e-5, "seed {seed}");
            assert!(max_relative_error(&gp.gamma, &fg).unwrap() < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn gdn_backward_matches_finite_differences() {
        check_backward(false);
    }

    #[test]
    fn igdn_backward_matches_finite_differences() {
        check_backward(true);
    }

    #[test]
    fn zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(2, &mut rng);
        let x = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        for inverse in [false, true] {
            let (gx, gp) = backward(&Tensor::zeros(x.shape()), &x, &p, inverse).unwrap();
            assert_eq!(gx.max_abs() + gp.beta.max_abs() + gp.gamma.max_abs(), 0.0);
        }
    }

    #[test]
    fn projection_and_validation() {
        let mut p = GdnParams {
            beta: Tensor::new(&[2], vec![-0.3, 2.0]).unwrap(),
            gamma: Tensor::new(&[2, 2], vec![0.1, -0.2, 0.0, 0.4]).unwrap(),
        };
        assert!(p.validate().is_err());
        p.project();
        assert_eq!(p.beta.data(), &[BETA_FLOOR, 2.0]);
        assert_eq!(p.gamma.data(), &[0.1, 0.0, 0.0, 0.4]);
        assert!(p.validate().is_ok());
        assert!(GdnParams::identity_init(4).validate().is_ok());
    }

    #[test]
    fn rejects_nan_and_wrong_channels() {
        let p = GdnParams::identity_init(2);
        assert!(gdn_forward(&Tensor::full(&[1, 2, 1, 1], f64::NAN), &p).is_err());
        assert!(gdn_forward(&Tensor::zeros(&[1, 3, 1, 1]), &p).is_err());
    }
}
