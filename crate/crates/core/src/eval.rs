//! Retrieval metrics, baseline rankers, and the seed-percentage protocol.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{seed_split, Cascade, Corpus};
use crate::decoder::rank_candidates;
use crate::error::{Error, Result};
use crate::graph::UserId;
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::training::{derive_seed, prediction_latents, TrainingData};

pub const DEFAULT_KS: [usize; 3] = [10, 50, 100];
/// "Initial" (0) through half the cascade revealed.
pub const SEED_PCT_SWEEP: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrediction {
    pub cascade_id: String,
    /// Candidates by descending score.
    pub ranked: Vec<UserId>,
    pub hidden: HashSet<UserId>,
}

impl RankedPrediction {
    fn hits(&self, k: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, u)| (i + 1, self.hidden.contains(u)))
    }
}

/// `|top-K ∩ hidden| / |hidden|`; `None` when nothing is hidden.
pub fn recall_at_k(pred: &RankedPrediction, k: usize) -> Option<f64> {
    if pred.hidden.is_empty() {
        return None;
    }
    let hits = pred.hits(k).filter(|(_, h)| *h).count();
    Some(hits as f64 / pred.hidden.len() as f64)
}

/// Truncated average precision with denominator `min(|hidden|, K)`.
pub fn average_precision_at_k(pred: &RankedPrediction, k: usize) -> Option<f64> {
    if pred.hidden.is_empty() || k == 0 {
        return None;
    }
    let mut found = 0usize;
    let mut total = 0.0;
    for (r, hit) in pred.hits(k) {
        if hit {
            found += 1;
            total += found as f64 / r as f64;
        }
    }
    Some(total / pred.hidden.len().min(k) as f64)
}

/// Mean AP@K over predictions with a non-empty hidden set (0 if there are none).
pub fn map_at_k(preds: &[RankedPrediction], k: usize) -> f64 {
    mean(preds.iter().filter_map(|p| average_precision_at_k(p, k)))
}

pub fn mean_recall_at_k(preds: &[RankedPrediction], k: usize) -> f64 {
    mean(preds.iter().filter_map(|p| recall_at_k(p, k)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeMetrics {
    pub cascade_id: String,
    pub map: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed_pct: f64,
    pub map: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub n_cascades: usize,
    pub n_skipped: usize,
    #[serde(skip)]
    pub per_cascade: Vec<CascadeMetrics>,
}

impl MetricReport {
    pub fn from_predictions(seed_pct: f64, preds: &[RankedPrediction], ks: &[usize]) -> Self {
        let scored: Vec<&RankedPrediction> = preds.iter().filter(|p| !p.hidden.is_empty()).collect();
        let per_cascade: Vec<CascadeMetrics> = scored
            .iter()
            .map(|p| CascadeMetrics {
                cascade_id: p.cascade_id.clone(),
                map: ks
                    .iter()
                    .filter_map(|&k| average_precision_at_k(p, k).map(|v| (k, v)))
                    .collect(),
                recall: ks
                    .iter()
                    .filter_map(|&k| recall_at_k(p, k).map(|v| (k, v)))
                    .collect(),
            })
            .collect();
        MetricReport {
            seed_pct,
            map: ks.iter().map(|&k| (k, map_at_k(preds, k))).collect(),
            recall: ks.iter().map(|&k| (k, mean_recall_at_k(preds, k))).collect(),
            n_cascades: scored.len(),
            n_skipped: preds.len() - scored.len(),
            per_cascade,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// What a ranker sees for one evaluation cascade.
pub struct Query<'a> {
    /// Position of the cascade in the evaluated split.
    pub index: usize,
    pub cascade: &'a Cascade,
    pub observed: &'a [UserId],
    pub hidden: &'a [UserId],
}

pub trait Ranker {
    /// All users except `observed`, best first.
    fn rank(&self, query: &Query<'_>) -> Result<Vec<UserId>>;
}

fn candidates(n_users: usize, observed: &[UserId]) -> Result<Vec<UserId>> {
    let seen: HashSet<UserId> = observed.iter().copied().collect();
    let out: Vec<UserId> = (0..n_users).filter(|u| !seen.contains(u)).collect();
    if out.is_empty() {
        return Err(Error::Empty("ranker: candidate set"));
    }
    Ok(out)
}

/// Seeded uniform shuffle of the candidates, independent per query index.
#[derive(Clone, Debug)]
pub struct RandomRanker {
    pub n_users: usize,
    pub seed: u64,
}

impl Ranker for RandomRanker {
    fn rank(&self, q: &Query<'_>) -> Result<Vec<UserId>> {
        let mut c = candidates(self.n_users, q.observed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 3, q.index as u64));
        c.shuffle(&mut rng);
        Ok(c)
    }
}

/// Descending training-set forwarding count, ascending id on ties.
#[derive(Clone, Debug)]
pub struct PopularityRanker {
    order: Vec<UserId>,
}

impl PopularityRanker {
    pub fn new(corpus: &Corpus) -> Self {
        Self::from_counts(&corpus.training_counts())
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        let mut order: Vec<UserId> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        PopularityRanker { order }
    }
}

impl Ranker for PopularityRanker {
    fn rank(&self, q: &Query<'_>) -> Result<Vec<UserId>> {
        let seen: HashSet<UserId> = q.observed.iter().copied().collect();
        let out: Vec<UserId> = self.order.iter().copied().filter(|u| !seen.contains(u)).collect();
        if out.is_empty() {
            return Err(Error::Empty("ranker: candidate set"));
        }
        Ok(out)
    }
}

/// Ranks the hidden users first (ascending id), then everyone else.
#[derive(Clone, Debug)]
pub struct OracleRanker {
    pub n_users: usize,
}

impl Ranker for OracleRanker {
    fn rank(&self, q: &Query<'_>) -> Result<Vec<UserId>> {
        let hidden: HashSet<UserId> = q.hidden.iter().copied().collect();
        let (mut first, rest): (Vec<UserId>, Vec<UserId>) = candidates(self.n_users, q.observed)?
            .into_iter()
            .partition(|u| hidden.contains(u));
        first.extend(rest);
        Ok(first)
    }
}

/// A trained model with its posterior-mean prediction-step latents.
#[derive(Clone, Debug)]
pub struct ModelRanker {
    pub params: ModelParams,
    pub z: Tensor,
}

impl ModelRanker {
    pub fn new(params: ModelParams, data: &TrainingData) -> Result<Self> {
        let z = prediction_latents(data, &params)?;
        Ok(ModelRanker { params, z })
    }
}

impl Ranker for ModelRanker {
    fn rank(&self, q: &Query<'_>) -> Result<Vec<UserId>> {
        Ok(rank_candidates(&self.params, &self.z, &q.cascade.content_vec, q.observed)?.users)
    }
}

/// Ranks every cascade in `split` after revealing the first `seed_pct` of it.
pub fn predict_split(
    ranker: &dyn Ranker,
    corpus: &Corpus,
    split: &[usize],
    seed_pct: f64,
) -> Result<Vec<RankedPrediction>> {
    split
        .iter()
        .enumerate()
        .map(|(index, &ci)| {
            let cascade = &corpus.cascades[ci];
            let (observed, hidden) = seed_split(&cascade.user_ids(), seed_pct)?;
            let ranked = ranker.rank(&Query {
                index,
                cascade,
                observed: &observed,
                hidden: &hidden,
            })?;
            Ok(RankedPrediction {
                cascade_id: cascade.id.clone(),
                ranked,
                hidden: hidden.into_iter().collect(),
            })
        })
        .collect()
}

pub fn evaluate(
    ranker: &dyn Ranker,
    corpus: &Corpus,
    split: &[usize],
    seed_pct: f64,
    ks: &[usize],
) -> Result<MetricReport> {
    let preds = predict_split(ranker, corpus, split, seed_pct)?;
    Ok(MetricReport::from_predictions(seed_pct, &preds, ks))
}

pub fn sweep(
    ranker: &dyn Ranker,
    corpus: &Corpus,
    split: &[usize],
    seed_pcts: &[f64],
    ks: &[usize],
) -> Result<Vec<MetricReport>> {
    seed_pcts
        .iter()
        .map(|&p| evaluate(ranker, corpus, split, p, ks))
        .collect()
}
