//! Finite-difference checks of every traced building block on 5-user fixtures.

use dydiff::decoder::{
    candidate_logits, cascade_representation, content_projection, hetero_attention, project,
    self_attention, DecoderVars,
};
use dydiff::encoder::{gru_step, kl_traced, sample, EncoderVars};
use dydiff::graph::NormalizedOperator;
use dydiff::model::{Ablations, ModelParams};
use dydiff::numerics::{grad_check, traced, GradCheckReport, ParamStore, Tape, Var};
use dydiff::training::{epoch_seed, total_objective, warp_weights, ObjectiveConfig};
use dydiff::Result;

use super::{fixture, random_tensor, with_store, Fixture};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TOL_OBJECTIVE: f64 = 1e-3;
const N: usize = 5;
const D: usize = 4;

fn base(seed: u64) -> Fixture {
    fixture(N, 4, D, seed, Ablations::default())
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(out).dims();
    let w = tape.constant(random_tensor(r, c, seed));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(model: &ModelParams, tol: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ModelParams) -> Result<Var>,
{
    let m = model.clone();
    let f = traced(move |tape: &mut Tape, store: &ParamStore| build(tape, &with_store(&m, store)));
    grad_check(f, &model.store, H, tol)
}

pub fn gru_step_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let op = NormalizedOperator::build(&fx.corpus.graph).shared();
    let h0 = random_tensor(N, D, seed + 1);
    let x0 = random_tensor(N, D, seed + 2);
    check(&fx.model, TOL, move |tape, m| {
        let v = EncoderVars::record(tape, m);
        let h = tape.constant(h0.clone());
        let x = tape.constant(x0.clone());
        let out = gru_step(tape, h, x, &op, 2, &v)?;
        weighted_sum(tape, out, seed + 3)
    })
}

pub fn kl_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let h0 = random_tensor(N, D, seed + 1);
    check(&fx.model, TOL, move |tape, m| {
        let v = EncoderVars::record(tape, m);
        let h = tape.constant(h0.clone());
        let lat = sample(tape, h, &v, None)?;
        kl_traced(tape, lat.mu, lat.logvar)
    })
}

pub fn project_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let z0 = random_tensor(N, D, seed + 1);
    check(&fx.model, TOL, move |tape, m| {
        let v = DecoderVars::record(tape, m);
        let z = tape.constant(z0.clone());
        let (vs, vr) = project(tape, z, &v)?;
        let a = weighted_sum(tape, vs, seed + 2)?;
        let b = weighted_sum(tape, vr, seed + 3)?;
        tape.add(a, b)
    })
}

pub fn self_attention_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let z0 = random_tensor(4, D, seed + 1);
    check(&fx.model, TOL, move |tape, m| {
        let v = DecoderVars::record(tape, m);
        let z = tape.constant(z0.clone());
        let (vs, vr) = project(tape, z, &v)?;
        let (out, _) = self_attention(tape, vs, vr, true)?;
        weighted_sum(tape, out, seed + 2)
    })
}

pub fn hetero_attention_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let z0 = random_tensor(3, D, seed + 1);
    let content = random_tensor(1, D, seed + 2).into_data();
    check(&fx.model, TOL, move |tape, m| {
        let v = DecoderVars::record(tape, m);
        let z = tape.constant(z0.clone());
        let (vs, _) = project(tape, z, &v)?;
        let vc = content_projection(tape, &content, &v)?;
        let (o, _) = hetero_attention(tape, vc, Some(vs))?;
        weighted_sum(tape, o, seed + 3)
    })
}

pub fn likelihood_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let z_seq = random_tensor(3, D, seed + 1);
    let z_cand = random_tensor(N, D, seed + 2);
    let content = random_tensor(1, D, seed + 3).into_data();
    check(&fx.model, TOL, move |tape, m| {
        let v = DecoderVars::record(tape, m);
        let zs = tape.constant(z_seq.clone());
        let rep = cascade_representation(tape, zs, &content, &v, &m.config.ablations)?;
        let zc = tape.constant(z_cand.clone());
        let logits = candidate_logits(tape, rep.o, zc, &v)?;
        let p = tape.sigmoid(logits);
        weighted_sum(tape, p, seed + 4)
    })
}

/// WARP over sigmoid scores, with ranks fixed at the unperturbed point.
pub fn warp_report(seed: u64) -> Result<GradCheckReport> {
    let fx = base(seed);
    let z_seq = random_tensor(2, D, seed + 1);
    let z_pos = random_tensor(2, D, seed + 2);
    let z_neg = random_tensor(N, D, seed + 3);
    let content = random_tensor(1, D, seed + 4).into_data();
    let margin = 0.3;
    let scores = |tape: &mut Tape, m: &ModelParams| -> Result<(Var, Var)> {
        let v = DecoderVars::record(tape, m);
        let zs = tape.constant(z_seq.clone());
        let rep = cascade_representation(tape, zs, &content, &v, &m.config.ablations)?;
        let zp = tape.constant(z_pos.clone());
        let zn = tape.constant(z_neg.clone());
        let lp = candidate_logits(tape, rep.o, zp, &v)?;
        let ln = candidate_logits(tape, rep.o, zn, &v)?;
        Ok((tape.sigmoid(lp), tape.sigmoid(ln)))
    };
    let mut tape = Tape::new();
    let (pp, pn) = scores(&mut tape, &fx.model)?;
    let weights: Vec<f64> = warp_weights(tape.value(pp).data(), tape.value(pn).data())
        .into_iter()
        .map(|(_, w)| w)
        .collect();
    check(&fx.model, TOL, move |tape, m| {
        let (pp, pn) = scores(tape, m)?;
        tape.hinge_pairs(pp, pn, &weights, margin)
    })
}

pub fn objective_report(seed: u64, ablations: Ablations) -> Result<GradCheckReport> {
    let fx = fixture(N, 4, D, seed, ablations);
    let cfg = ObjectiveConfig {
        neg_pool_size: 3,
        ..ObjectiveConfig::default()
    };
    let es = epoch_seed(seed, 0);
    let store = fx.model.store.clone();
    let (data, model) = (fx.data, fx.model);
    let f = move |store: &ParamStore| {
        let obj = total_objective(&data, &with_store(&model, store), &cfg, es)?;
        Ok((obj.total, obj.grads))
    };
    grad_check(f, &store, H, TOL_OBJECTIVE)
}

/// Every check in order, with the tolerance it must meet.
pub fn all_reports(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("gru_step", gru_step_report(seed)?),
        ("kl_to_prior", kl_report(seed)?),
        ("project", project_report(seed)?),
        ("self_attention", self_attention_report(seed)?),
        ("hetero_attention", hetero_attention_report(seed)?),
        ("likelihood", likelihood_report(seed)?),
        ("warp_loss", warp_report(seed)?),
        ("total_objective", objective_report(seed, Ablations::default())?),
    ])
}
