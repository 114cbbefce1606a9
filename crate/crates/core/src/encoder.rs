//! Dynamic encoder: a GRU whose state pre-activations aggregate neighbours
//! through the normalized operator, followed by a reparameterized Gaussian
//! latent per user and step.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::apply_traced;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{LinearOperator, Tape, Tensor, Var};

/// Encoder parameters recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w_hu: Var,
    pub w_hr: Var,
    pub w_hm: Var,
    pub w_xu: Var,
    pub w_xr: Var,
    pub w_xm: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
}

impl EncoderVars {
    pub fn record(tape: &mut Tape, params: &ModelParams) -> Self {
        let ids = &params.ids;
        let s = &params.store;
        EncoderVars {
            w_hu: tape.param(s, ids.w_hu),
            w_hr: tape.param(s, ids.w_hr),
            w_hm: tape.param(s, ids.w_hm),
            w_xu: tape.param(s, ids.w_xu),
            w_xr: tape.param(s, ids.w_xr),
            w_xm: tape.param(s, ids.w_xm),
            w_mu: tape.param(s, ids.w_mu),
            b_mu: tape.param(s, ids.b_mu),
            w_logvar: tape.param(s, ids.w_logvar),
            b_logvar: tape.param(s, ids.b_logvar),
        }
    }
}

/// One recurrent update:
///
/// ```text
/// G_u = σ(L̂ᵏ h W_hu + x W_xu)
/// G_r = σ(L̂ᵏ h W_hr + x W_xr)
/// h̃   = tanh(L̂ᵏ (G_r ⊙ h) W_hm + x W_xm)
/// h'  = G_u ⊙ h̃ + (1 − G_u) ⊙ h
/// ```
pub fn gru_step(
    tape: &mut Tape,
    h_prev: Var,
    x_prev: Var,
    op: &Arc<dyn LinearOperator>,
    hops: usize,
    v: &EncoderVars,
) -> Result<Var> {
    let (hd, xd) = (tape.value(h_prev).dims(), tape.value(x_prev).dims());
    if hd != xd {
        return Err(Error::shape(
            "gru_step",
            tape.value(h_prev).shape(),
            tape.value(x_prev).shape(),
        ));
    }
    if hops == 0 {
        return Err(Error::invalid("gru_step needs at least one graph convolution"));
    }
    let conv_h = apply_traced(tape, op, h_prev, hops)?;

    let a = tape.matmul(conv_h, v.w_hu)?;
    let b = tape.matmul(x_prev, v.w_xu)?;
    let pre_u = tape.add(a, b)?;
    let gate_u = tape.sigmoid(pre_u);

    let a = tape.matmul(conv_h, v.w_hr)?;
    let b = tape.matmul(x_prev, v.w_xr)?;
    let pre_r = tape.add(a, b)?;
    let gate_r = tape.sigmoid(pre_r);

    let reset = tape.mul(gate_r, h_prev)?;
    let conv_reset = apply_traced(tape, op, reset, hops)?;
    let a = tape.matmul(conv_reset, v.w_hm)?;
    let b = tape.matmul(x_prev, v.w_xm)?;
    let pre_m = tape.add(a, b)?;
    let candidate = tape.tanh(pre_m);

    let keep = tape.one_minus(gate_u);
    let new_part = tape.mul(gate_u, candidate)?;
    let old_part = tape.mul(keep, h_prev)?;
    tape.add(new_part, old_part)
}

/// Untraced convenience wrapper around [`gru_step`].
pub fn gru_step_values(
    h_prev: &Tensor,
    x_prev: &Tensor,
    op: &Arc<dyn LinearOperator>,
    hops: usize,
    params: &ModelParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = EncoderVars::record(&mut tape, params);
    let h = tape.constant(h_prev.clone());
    let x = tape.constant(x_prev.clone());
    let out = gru_step(&mut tape, h, x, op, hops, &v)?;
    Ok(tape.value(out).clone())
}

/// Latent Gaussian and its sample, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
    pub sigma: Var,
    pub z: Var,
}

/// `μ = h W_μ + b_μ`, `σ = exp(½(h W_lv + b_lv))`, `z = μ + ε ⊙ σ`.
/// With `eps = None` the sample is the mean itself.
pub fn sample(tape: &mut Tape, h: Var, v: &EncoderVars, eps: Option<&Tensor>) -> Result<LatentVars> {
    let hw = tape.matmul(h, v.w_mu)?;
    let mu = tape.add_row(hw, v.b_mu)?;
    let hw = tape.matmul(h, v.w_logvar)?;
    let logvar = tape.add_row(hw, v.b_logvar)?;
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let z = match eps {
        Some(e) => {
            if !e.same_shape(tape.value(mu)) {
                return Err(Error::shape("sample", e.shape(), tape.value(mu).shape()));
            }
            let e = tape.constant(e.clone());
            let noise = tape.mul(e, sigma)?;
            tape.add(mu, noise)?
        }
        None => mu,
    };
    Ok(LatentVars {
        mu,
        logvar,
        sigma,
        z,
    })
}

/// `½ Σ (μ² + e^{lv} − lv − 1)`, the KL divergence to a unit normal.
pub fn kl_traced(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.offset(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}

/// `Σ ½(μ² + σ² − 2 ln σ − 1)` over all entries.
pub fn kl_to_prior(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if !mu.same_shape(sigma) {
        return Err(Error::shape("kl_to_prior", mu.shape(), sigma.shape()));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        if !(s > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {s}")));
        }
        total += 0.5 * (m * m + s * s - 2.0 * s.ln() - 1.0);
    }
    Ok(total)
}

/// Everything the encoder reads besides its parameters.
#[derive(Clone, Debug)]
pub struct EncoderInputs {
    pub op: Arc<dyn LinearOperator>,
    /// `stimuli[s]` holds what each user forwarded during step `s`.
    pub stimuli: Vec<Tensor>,
    /// All training-period stimuli pooled, used by the static ablation.
    pub pooled: Tensor,
}

impl EncoderInputs {
    pub fn n_users(&self) -> usize {
        self.pooled.rows()
    }
}

/// Per-step latents recorded on a tape.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub steps: Vec<LatentVars>,
    /// Sum of per-step KL terms, absent for the deterministic ablation.
    pub kl: Option<Var>,
}

/// Produces latents for steps `0..n_latent`. `h⁽⁰⁾ = 0`; step `t ≥ 1` consumes
/// `stimuli[t − 1]`. `eps[t]` is the noise for step `t` (`None` → posterior mean).
pub fn rollout(
    tape: &mut Tape,
    inputs: &EncoderInputs,
    v: &EncoderVars,
    config: &ModelConfig,
    n_latent: usize,
    eps: &[Option<Tensor>],
) -> Result<Rollout> {
    if n_latent == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if inputs.stimuli.len() + 1 < n_latent {
        return Err(Error::invalid(format!(
            "rollout over {n_latent} steps needs {} stimuli matrices, have {}",
            n_latent - 1,
            inputs.stimuli.len()
        )));
    }
    let n = inputs.n_users();
    let d = config.d;
    let hops = config.conv_layers;
    let deterministic = config.ablations.deterministic;
    let noise = |t: usize| -> Option<&Tensor> {
        if deterministic {
            None
        } else {
            eps.get(t).and_then(Option::as_ref)
        }
    };

    let mut steps = Vec::with_capacity(n_latent);
    if config.ablations.static_encoder {
        let x = tape.constant(inputs.pooled.clone());
        let conv = apply_traced(tape, &inputs.op, x, hops)?;
        let pre = tape.matmul(conv, v.w_xm)?;
        let h = tape.tanh(pre);
        for t in 0..n_latent {
            steps.push(sample(tape, h, v, noise(t))?);
        }
    } else {
        let mut h = tape.constant(Tensor::zeros(n, d));
        steps.push(sample(tape, h, v, noise(0))?);
        for t in 1..n_latent {
            let x = tape.constant(inputs.stimuli[t - 1].clone());
            h = gru_step(tape, h, x, &inputs.op, hops, v)?;
            steps.push(sample(tape, h, v, noise(t))?);
        }
    }

    let kl = if deterministic {
        None
    } else {
        let mut total: Option<Var> = None;
        for s in &steps {
            let k = kl_traced(tape, s.mu, s.logvar)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, k)?,
                None => k,
            });
        }
        total
    };
    Ok(Rollout { steps, kl })
}
