//! Variational WARP objective and the full-batch training loop.
//!
//! One objective evaluation rolls the encoder over every training step on a
//! single tape, scores each training cascade on its own small tape (whose
//! latent rows are tape inputs), then runs the encoder backward seeded with
//! the summed latent gradients plus the KL and L2 terms.

use std::collections::HashSet;

use log::debug;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{seed_split, stimuli_over, Corpus};
use crate::decoder::{candidate_logits, cascade_representation, DecoderVars};
use crate::encoder::{rollout, EncoderInputs, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{NormalizedOperator, UserId};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Gradients, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// KL weight β.
    pub beta: f64,
    /// L2 weight on encoder parameters.
    pub lambda1: f64,
    /// L2 weight on decoder parameters.
    pub lambda2: f64,
    /// WARP margin λ_m.
    pub margin: f64,
    /// The objective is summed over all users and cascades, so useful rates are small.
    pub lr: f64,
    pub epochs: usize,
    pub neg_pool_size: usize,
    pub seed: u64,
    /// Fraction of each training cascade treated as the observed prefix.
    pub train_seed_pct: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 10.0,
            lambda1: 0.5,
            lambda2: 0.5,
            margin: 0.1,
            lr: 2e-5,
            epochs: 100,
            neg_pool_size: 256,
            seed: 0,
            train_seed_pct: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("margin", self.margin),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.neg_pool_size == 0 {
            return Err(Error::invalid("neg_pool_size must be >= 1"));
        }
        if !(0.0..=0.5).contains(&self.train_seed_pct) {
            return Err(Error::invalid("train_seed_pct must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// `L(k) = Σ_{i=1}^{k} 1/i`.
pub fn harmonic(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / i as f64).sum()
}

/// `1 + |{negatives scoring strictly above score}|`.
pub fn rank_of(score: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&n| n > score).count()
}

/// Per-positive `(rank, L(rank)/rank)`.
pub fn warp_weights(positives: &[f64], negatives: &[f64]) -> Vec<(usize, f64)> {
    positives
        .iter()
        .map(|&p| {
            let r = rank_of(p, negatives);
            (r, harmonic(r) / r as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairLossRecord {
    pub positive: UserId,
    pub negative: UserId,
    pub pair_loss: f64,
    pub rank_of_positive: usize,
}

/// Every positive/negative pair with its hinge value and the positive's rank.
pub fn pair_records(
    positives: &[(UserId, f64)],
    negatives: &[(UserId, f64)],
    margin: f64,
) -> Vec<PairLossRecord> {
    let neg_scores: Vec<f64> = negatives.iter().map(|n| n.1).collect();
    let mut out = Vec::with_capacity(positives.len() * negatives.len());
    for &(pu, ps) in positives {
        let rank = rank_of(ps, &neg_scores);
        for &(nu, ns) in negatives {
            out.push(PairLossRecord {
                positive: pu,
                negative: nu,
                pair_loss: (margin - ps + ns).max(0.0),
                rank_of_positive: rank,
            });
        }
    }
    out
}

/// `Σ_{u+} [Σ_{u−} L(rank(u+)) · max(0, λ_m − p(u+) + p(u−))] / rank(u+)`.
pub fn warp_loss(positives: &[f64], negatives: &[f64], margin: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Empty("warp_loss: positives"));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("warp_loss: negatives"));
    }
    let weights = warp_weights(positives, negatives);
    Ok(positives
        .iter()
        .zip(&weights)
        .map(|(&p, &(_, w))| {
            let inner: f64 = negatives.iter().map(|&n| (margin - p + n).max(0.0)).sum();
            w * inner
        })
        .sum())
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut x = base
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const STREAM_EPOCH: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, STREAM_EPOCH, epoch as u64)
}

/// Standard normal `n × d` noise for latent step `step` of an epoch.
pub fn step_noise(epoch_seed: u64, step: usize, n: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, STREAM_NOISE, step as u64));
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(n, d, data).expect("n × d")
}

/// Seed used to draw negatives for training cascade `index` in an epoch.
pub fn negatives_seed(epoch_seed: u64, index: usize) -> u64 {
    derive_seed(epoch_seed, STREAM_NEGATIVES, index as u64)
}

/// Uniform sample without replacement from users outside `members`, ascending.
pub fn sample_negatives(
    members: &[UserId],
    n_users: usize,
    pool_size: usize,
    seed: u64,
) -> Result<Vec<UserId>> {
    if pool_size == 0 {
        return Err(Error::invalid("pool_size must be >= 1"));
    }
    let excluded: HashSet<UserId> = members.iter().copied().collect();
    let eligible: Vec<UserId> = (0..n_users).filter(|u| !excluded.contains(u)).collect();
    if eligible.is_empty() {
        return Err(Error::Empty("sample_negatives: no eligible users"));
    }
    if pool_size >= eligible.len() {
        return Ok(eligible);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<UserId> = index::sample(&mut rng, eligible.len(), pool_size)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// A training cascade split into observed prefix and positives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainCascade {
    pub step: usize,
    pub observed: Vec<UserId>,
    pub positives: Vec<UserId>,
    pub content: Vec<f64>,
}

impl TrainCascade {
    pub fn members(&self) -> Vec<UserId> {
        self.observed.iter().chain(&self.positives).copied().collect()
    }
}

/// Fixed per-corpus inputs to the objective.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub inputs: EncoderInputs,
    pub cascades: Vec<TrainCascade>,
    pub n_users: usize,
    pub n_steps: usize,
}

impl TrainingData {
    /// Builds encoder inputs and training cascades from an embedded corpus.
    pub fn prepare(corpus: &Corpus, model: &ModelConfig, train_seed_pct: f64) -> Result<Self> {
        let d = corpus
            .embedding_dim()
            .ok_or_else(|| Error::invalid("corpus is empty"))?;
        if d != model.d {
            return Err(Error::invalid(format!(
                "corpus embeddings have dimension {d}, model expects {}",
                model.d
            )));
        }
        let n_steps = corpus.n_steps;
        let op = if model.ablations.remove_conv {
            NormalizedOperator::identity(corpus.n_users())
        } else {
            NormalizedOperator::build(&corpus.graph)
        };
        let stimuli = (0..n_steps - 1)
            .map(|s| stimuli_over(corpus, |t| t == s))
            .collect::<Result<Vec<_>>>()?;
        let pooled = stimuli_over(corpus, |t| t + 1 < n_steps)?;
        let mut cascades = Vec::new();
        for &i in &corpus.splits.train {
            let c = &corpus.cascades[i];
            let (observed, positives) = seed_split(&c.user_ids(), train_seed_pct)?;
            if positives.is_empty() {
                continue;
            }
            cascades.push(TrainCascade {
                step: c.time_step,
                observed,
                positives,
                content: c.content_vec.clone(),
            });
        }
        Ok(TrainingData {
            inputs: EncoderInputs {
                op: op.shared(),
                stimuli,
                pooled,
            },
            cascades,
            n_users: corpus.n_users(),
            n_steps,
        })
    }

    /// Latent steps covered by training cascades: `0..T−1`.
    pub fn n_train_latents(&self) -> usize {
        self.n_steps - 1
    }
}

/// Ranking loss of one cascade with its gradients.
pub struct CascadeLoss {
    pub value: f64,
    /// Decoder parameter gradients.
    pub grads: Gradients,
    /// Latent rows the loss touched, in the order of `grad_rows`.
    pub rows: Vec<UserId>,
    pub grad_rows: Tensor,
}

/// WARP loss of a cascade given the step's latents and a negative pool.
pub fn cascade_loss(
    model: &ModelParams,
    z: &Tensor,
    cascade: &TrainCascade,
    negatives: &[UserId],
    margin: f64,
) -> Result<CascadeLoss> {
    let k = cascade.observed.len();
    let p = cascade.positives.len();
    let q = negatives.len();
    let rows: Vec<UserId> = cascade
        .observed
        .iter()
        .chain(&cascade.positives)
        .chain(negatives)
        .copied()
        .collect();

    let mut tape = Tape::new();
    let v = DecoderVars::record(&mut tape, model);
    let zr = tape.input(z.gather_rows(&rows));
    let z_seq = tape.gather_rows(zr, &(0..k).collect::<Vec<_>>())?;
    let rep = cascade_representation(&mut tape, z_seq, &cascade.content, &v, &model.config.ablations)?;
    let z_pos = tape.gather_rows(zr, &(k..k + p).collect::<Vec<_>>())?;
    let z_neg = tape.gather_rows(zr, &(k + p..k + p + q).collect::<Vec<_>>())?;
    let lp = candidate_logits(&mut tape, rep.o, z_pos, &v)?;
    let ln = candidate_logits(&mut tape, rep.o, z_neg, &v)?;
    let pp = tape.sigmoid(lp);
    let pn = tape.sigmoid(ln);
    let weights: Vec<f64> = warp_weights(tape.value(pp).data(), tape.value(pn).data())
        .into_iter()
        .map(|(_, w)| w)
        .collect();
    let loss = tape.hinge_pairs(pp, pn, &weights, margin)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let grad_rows = grads
        .take_input(zr)
        .unwrap_or_else(|| Tensor::zeros(rows.len(), z.cols()));
    Ok(CascadeLoss {
        value,
        grads,
        rows,
        grad_rows,
    })
}

/// One evaluation of the full objective with all parameter gradients.
pub struct ObjectiveValue {
    pub total: f64,
    pub ranking: f64,
    pub kl: f64,
    pub reg: f64,
    pub grads: Gradients,
}

/// `Σ_j L_j^DIFF + β Σ_t KL_t + λ1‖φ‖² + λ2‖θ‖²` for the given epoch seed.
pub fn total_objective(
    data: &TrainingData,
    model: &ModelParams,
    cfg: &ObjectiveConfig,
    epoch_seed: u64,
) -> Result<ObjectiveValue> {
    let n = data.n_users;
    let d = model.d();
    let n_latent = data.n_train_latents();
    let deterministic = model.config.ablations.deterministic;

    let mut tape = Tape::new();
    let ev = EncoderVars::record(&mut tape, model);
    let eps: Vec<Option<Tensor>> = (0..n_latent)
        .map(|t| (!deterministic).then(|| step_noise(epoch_seed, t, n, d)))
        .collect();
    let roll = rollout(&mut tape, &data.inputs, &ev, &model.config, n_latent, &eps)?;

    let mut dz: Vec<Tensor> = (0..n_latent).map(|_| Tensor::zeros(n, d)).collect();
    let mut grads = Gradients::default();
    let mut ranking = 0.0;
    for (j, c) in data.cascades.iter().enumerate() {
        let negatives = sample_negatives(
            &c.members(),
            n,
            cfg.neg_pool_size,
            negatives_seed(epoch_seed, j),
        )?;
        let z = tape.value(roll.steps[c.step].z);
        let cl = cascade_loss(model, z, c, &negatives, cfg.margin)?;
        ranking += cl.value;
        grads.merge_params(&cl.grads);
        let acc = &mut dz[c.step];
        for (r, &u) in cl.rows.iter().enumerate() {
            for (dst, g) in acc.row_mut(u).iter_mut().zip(cl.grad_rows.row(r)) {
                *dst += g;
            }
        }
    }

    // KL and L2 terms live on the encoder tape.
    let mut enc_terms = Vec::new();
    let kl = match roll.kl {
        Some(k) => {
            enc_terms.push(tape.scale(k, cfg.beta));
            tape.value(k).item()?
        }
        None => 0.0,
    };
    let mut reg = 0.0;
    for (ids, lambda) in [
        (model.ids.encoder().to_vec(), cfg.lambda1),
        (model.ids.decoder(), cfg.lambda2),
    ] {
        for id in ids {
            let w = tape.param(&model.store, id);
            let sq = tape.sum_squares(w);
            reg += lambda * tape.value(sq).item()?;
            enc_terms.push(tape.scale(sq, lambda));
        }
    }
    let mut seeds = Vec::with_capacity(enc_terms.len() + n_latent);
    for t in enc_terms {
        seeds.push((t, Tensor::scalar(1.0)));
    }
    for (step, g) in roll.steps.iter().zip(dz) {
        seeds.push((step.z, g));
    }
    let enc_grads = tape.backward_seeded(seeds)?;
    grads.merge_params(&enc_grads);

    Ok(ObjectiveValue {
        total: ranking + cfg.beta * kl + reg,
        ranking,
        kl,
        reg,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub ranking: f64,
    pub kl: f64,
    pub reg: f64,
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub trace: Vec<EpochStats>,
}

/// Epochs of stalled relative improvement (< 1e-5) tolerated before stopping.
pub const PATIENCE: usize = 5;
const MIN_REL_IMPROVEMENT: f64 = 1e-5;

/// Full-batch SGD from `model` for up to `cfg.epochs` epochs.
pub fn train(data: &TrainingData, mut model: ModelParams, cfg: &ObjectiveConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut stalled = 0;
    for epoch in 0..cfg.epochs {
        let obj = total_objective(data, &model, cfg, epoch_seed(cfg.seed, epoch))?;
        if !obj.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        debug!(
            "epoch {epoch}: total {:.4} ranking {:.4} kl {:.4} reg {:.4}",
            obj.total, obj.ranking, obj.kl, obj.reg
        );
        if let Some(prev) = trace.last().map(|s: &EpochStats| s.total) {
            let rel = (prev - obj.total) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < MIN_REL_IMPROVEMENT {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        trace.push(EpochStats {
            epoch,
            total: obj.total,
            ranking: obj.ranking,
            kl: obj.kl,
            reg: obj.reg,
        });
        if stalled >= PATIENCE {
            break;
        }
        model.store.zero_grad();
        model.store.accumulate(&obj.grads);
        if model.store.iter().any(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        model.store.sgd_step(cfg.lr);
    }
    Ok(TrainOutcome { model, trace })
}

/// Posterior-mean latents for the final (prediction) step.
pub fn prediction_latents(data: &TrainingData, model: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ev = EncoderVars::record(&mut tape, model);
    let roll = rollout(&mut tape, &data.inputs, &ev, &model.config, data.n_steps, &[])?;
    let last = roll.steps.last().expect("n_steps >= 2");
    Ok(tape.value(last.mu).clone())
}
