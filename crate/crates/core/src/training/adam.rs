use crate::codec::{CodecModel, ModelGrads};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &CodecModel) -> Self {
        Self::for_shapes(model.params().iter().map(|p| p.tensor.shape()))
    }

    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let zeros: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over parallel lists of named parameters
/// and gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_update(
    params: &mut [(&str, &mut Tensor)],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        p.check_same_shape(g, "adam gradient")?;
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Adam over every model parameter, then GDN feasibility projection.
pub fn adam_step(
    model: &mut CodecModel,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    {
        let grad_params = grads.params();
        let grad_refs: Vec<&Tensor> = grad_params.iter().map(|p| p.tensor).collect();
        let mut params = model.params_mut();
        let mut named: Vec<(&str, &mut Tensor)> = params
            .iter_mut()
            .map(|p| (p.name.as_str(), &mut *p.tensor))
            .collect();
        adam_update(&mut named, &grad_refs, state, cfg)?;
    }
    model.project_gdn();
    Ok(())
}
