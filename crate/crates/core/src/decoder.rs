//! Dual attention decoder.
//!
//! A cascade's users are projected into sender and receiver states, denoised
//! by causal self-attention over their predecessors (with sinusoidal position
//! terms in the logits), and merged with the projected content vector by a
//! content-anchored attention into one cascade vector `o`. A candidate's
//! forwarding likelihood is `σ(⟨o, v_R⟩)`.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graph::UserId;
use crate::model::{Ablations, ModelParams};
use crate::numerics::{sigmoid, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w_s: Var,
    pub w_r: Var,
    pub w_c: Var,
    pub b_c: Var,
}

impl DecoderVars {
    pub fn record(tape: &mut Tape, params: &ModelParams) -> Self {
        let ids = &params.ids;
        let s = &params.store;
        let w_s = tape.param(s, ids.w_s);
        let w_r = if ids.w_r == ids.w_s {
            w_s
        } else {
            tape.param(s, ids.w_r)
        };
        DecoderVars {
            w_s,
            w_r,
            w_c: tape.param(s, ids.w_c),
            b_c: tape.param(s, ids.b_c),
        }
    }
}

/// Sender and receiver states `(z·W_S, z·W_R)`.
pub fn project(tape: &mut Tape, z: Var, v: &DecoderVars) -> Result<(Var, Var)> {
    let vs = tape.matmul(z, v.w_s)?;
    let vr = tape.matmul(z, v.w_r)?;
    Ok((vs, vr))
}

/// Sinusoidal encoding of position `k`: coordinates `(2i, 2i+1)` hold
/// `(sin, cos)(k / 10000^{2i/dim})`.
pub fn positional_encoding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding needs an even dimension, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Rows `PE(1), …, PE(len)`.
pub fn positional_matrix(len: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * dim);
    for k in 1..=len {
        data.extend(positional_encoding(k, dim)?);
    }
    Tensor::matrix(len, dim, data)
}

/// Causal self-attention over a forwarding sequence.
///
/// Row `k` of the output is `Σ_{i≤k} w_ki v_i^S` with
/// `w_k· = softmax_i ⟨v_i^S + PE(i), v_k^R + PE(k)⟩`. Returns the denoised rows
/// and the `K × K` weight matrix (zero above the diagonal).
pub fn self_attention(tape: &mut Tape, vs: Var, vr: Var, with_positions: bool) -> Result<(Var, Var)> {
    let (k, d) = tape.value(vs).dims();
    if tape.value(vr).dims() != (k, d) {
        return Err(Error::shape("self_attention", tape.value(vs).shape(), tape.value(vr).shape()));
    }
    if k == 0 {
        return Err(Error::Empty("self_attention"));
    }
    let (keys, queries) = if with_positions {
        let pe = tape.constant(positional_matrix(k, d)?);
        (tape.add(vs, pe)?, tape.add(vr, pe)?)
    } else {
        (vs, vr)
    };
    let logits = tape.matmul_nt(queries, keys)?;
    let weights = tape.causal_softmax(logits)?;
    let out = tape.lower_tri_matmul(weights, vs)?;
    Ok((out, weights))
}

/// Content-anchored attention: logits `[⟨v_c,v_c⟩, ⟨v_1,v_c⟩, …]` share one
/// softmax; `o = α_c v_c + Σ α_k v_k`. Returns `(o, α)` with `α` of width `K+1`.
pub fn hetero_attention(tape: &mut Tape, vc: Var, seq: Option<Var>) -> Result<(Var, Var)> {
    let rows = match seq {
        Some(v) if tape.value(v).rows() > 0 => tape.concat_rows(&[vc, v])?,
        _ => vc,
    };
    let logits = tape.matmul_nt(vc, rows)?;
    let alpha = tape.row_softmax(logits)?;
    let o = tape.matmul(alpha, rows)?;
    Ok((o, alpha))
}

/// `v_c = c·W_C + b_C`.
pub fn content_projection(tape: &mut Tape, content: &[f64], v: &DecoderVars) -> Result<Var> {
    let c = tape.constant(Tensor::row_vector(content.to_vec()));
    let cw = tape.matmul(c, v.w_c)?;
    tape.add_row(cw, v.b_c)
}

/// The cascade vector and the attention weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct CascadeVars {
    pub o: Var,
    /// `1 × (K+1)` content-then-sequence weights, absent without the second attention.
    pub alpha: Option<Var>,
    /// `K × K` self-attention weights, absent for empty sequences or without the first attention.
    pub self_weights: Option<Var>,
}

/// Builds `o` for a cascade whose observed users' latents are the rows of `z_seq`.
pub fn cascade_representation(
    tape: &mut Tape,
    z_seq: Var,
    content: &[f64],
    v: &DecoderVars,
    ablations: &Ablations,
) -> Result<CascadeVars> {
    let k = tape.value(z_seq).rows();
    let mut self_weights = None;
    let denoised = if k == 0 {
        None
    } else {
        let (vs, vr) = project(tape, z_seq, v)?;
        if ablations.remove_first_attention {
            Some(vs)
        } else {
            let (out, w) = self_attention(tape, vs, vr, true)?;
            self_weights = Some(w);
            Some(out)
        }
    };
    if ablations.remove_second_attention {
        let o = match denoised {
            Some(seq) => tape.mean_rows(seq),
            None => tape.constant(Tensor::zeros(1, tape.value(v.w_s).cols())),
        };
        return Ok(CascadeVars {
            o,
            alpha: None,
            self_weights,
        });
    }
    let vc = content_projection(tape, content, v)?;
    let (o, alpha) = hetero_attention(tape, vc, denoised)?;
    Ok(CascadeVars {
        o,
        alpha: Some(alpha),
        self_weights,
    })
}

/// `⟨o, z_c W_R⟩` for each candidate row of `z_cands`, as a `1 × m` row.
pub fn candidate_logits(tape: &mut Tape, o: Var, z_cands: Var, v: &DecoderVars) -> Result<Var> {
    let q = tape.matmul_nt(o, v.w_r)?;
    tape.matmul_nt(q, z_cands)
}

/// `σ(⟨o, v_R⟩)` with the logit clamped to ±30.
pub fn likelihood(o: &[f64], v_r: &[f64]) -> Result<f64> {
    if o.len() != v_r.len() {
        return Err(Error::shape("likelihood", &[o.len()], &[v_r.len()]));
    }
    Ok(sigmoid(o.iter().zip(v_r).map(|(a, b)| a * b).sum()))
}

/// Plain-value view of a cascade representation.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeRepresentation {
    pub o: Vec<f64>,
    pub alpha_c: f64,
    pub alpha_k: Vec<f64>,
}

pub fn represent(
    params: &ModelParams,
    z: &Tensor,
    content: &[f64],
    observed: &[UserId],
) -> Result<CascadeRepresentation> {
    let mut tape = Tape::new();
    let v = DecoderVars::record(&mut tape, params);
    let z_seq = tape.constant(z.gather_rows(observed));
    let rep = cascade_representation(&mut tape, z_seq, content, &v, &params.config.ablations)?;
    let (alpha_c, alpha_k) = match rep.alpha {
        Some(a) => {
            let a = tape.value(a).data();
            (a[0], a[1..].to_vec())
        }
        None => (0.0, vec![1.0 / observed.len().max(1) as f64; observed.len()]),
    };
    Ok(CascadeRepresentation {
        o: tape.value(rep.o).data().to_vec(),
        alpha_c,
        alpha_k,
    })
}

/// Candidates sorted by descending likelihood, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub users: Vec<UserId>,
    pub scores: Vec<f64>,
}

/// Sorts `(user, score)` pairs by descending score then ascending id.
pub fn sort_scored(mut scored: Vec<(UserId, f64)>) -> Ranking {
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1) {
        Some(Ordering::Equal) | None => a.0.cmp(&b.0),
        Some(o) => o,
    });
    let (users, scores) = scored.into_iter().unzip();
    Ranking { users, scores }
}

/// Scores every user outside `observed` against the cascade and ranks them.
pub fn rank_candidates(
    params: &ModelParams,
    z: &Tensor,
    content: &[f64],
    observed: &[UserId],
) -> Result<Ranking> {
    let n = z.rows();
    if let Some(&bad) = observed.iter().find(|&&u| u >= n) {
        return Err(Error::invalid(format!("observed user {bad} outside {n} users")));
    }
    let seen: HashSet<UserId> = observed.iter().copied().collect();
    let candidates: Vec<UserId> = (0..n).filter(|u| !seen.contains(u)).collect();
    if candidates.is_empty() {
        return Err(Error::Empty("rank_candidates: candidate set"));
    }
    let mut tape = Tape::new();
    let v = DecoderVars::record(&mut tape, params);
    let z_seq = tape.constant(z.gather_rows(observed));
    let rep = cascade_representation(&mut tape, z_seq, content, &v, &params.config.ablations)?;
    let z_c = tape.constant(z.gather_rows(&candidates));
    let logits = candidate_logits(&mut tape, rep.o, z_c, &v)?;
    let scores = tape.value(logits).data().iter().map(|&l| sigmoid(l));
    Ok(sort_scored(candidates.iter().copied().zip(scores).collect()))
}
