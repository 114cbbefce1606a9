//! Synthetic social graphs and cascade corpora with planted, drifting interests.
//!
//! Interests follow a retain / social / noise recurrence on the unit sphere;
//! each cascade picks a topic near some user's current interest and recruits
//! the users whose interests align with it.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{bucket_by_timestep, filter_cascades, write_cascades, Cascade, FilterConfig};
use crate::embed::normalize;
use crate::error::{Error, Result};
use crate::graph::{SocialGraph, UserId};
use crate::training::derive_seed;

/// Length of one generated time step in timestamp units (one day of seconds).
pub const STEP_SECONDS: f64 = 86_400.0;
const FORWARD_GAP: f64 = 60.0;
const MAX_RECRUIT_PASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_communities: usize,
    pub d_latent: usize,
    pub n_steps: usize,
    /// γ: weight on a user's own previous interest.
    pub drift_retain: f64,
    /// δ: weight on the mean interest of the user and their influencers.
    pub drift_social: f64,
    /// η: weight on fresh unit-norm noise.
    pub drift_noise: f64,
    pub cascades_per_step: usize,
    pub cascade_len: usize,
    /// Expected number of influencers per user.
    pub mean_degree: f64,
    /// Expected fraction of a user's influencers from their own community.
    pub homophily: f64,
    /// Spread of initial interests around the community centroid.
    pub interest_spread: f64,
    /// Spread of a cascade topic around the interest of its originating user.
    pub topic_spread: f64,
    /// Sharpness of the logistic acceptance on affinity.
    pub acceptance_sharpness: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 500,
            n_communities: 4,
            d_latent: 16,
            n_steps: 6,
            drift_retain: 0.8,
            drift_social: 0.15,
            drift_noise: 0.05,
            cascades_per_step: 100,
            cascade_len: 15,
            mean_degree: 8.0,
            homophily: 0.8,
            interest_spread: 0.6,
            topic_spread: 0.3,
            acceptance_sharpness: 8.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (g, d, e) = (self.drift_retain, self.drift_social, self.drift_noise);
        if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&d) {
            return Err(Error::invalid("drift_retain and drift_social must lie in [0, 1]"));
        }
        if g + d > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "drift_retain + drift_social must be <= 1, got {}",
                g + d
            )));
        }
        if !(e >= 0.0) {
            return Err(Error::invalid("drift_noise must be >= 0"));
        }
        if self.n_users < 2 || self.n_communities == 0 || self.n_communities > self.n_users {
            return Err(Error::invalid("need n_users >= 2 and 1 <= n_communities <= n_users"));
        }
        if self.d_latent == 0 {
            return Err(Error::invalid("d_latent must be >= 1"));
        }
        if self.n_steps < 2 {
            return Err(Error::invalid("n_steps must be >= 2"));
        }
        if self.cascade_len < 10 || self.cascade_len > self.n_users {
            return Err(Error::invalid(format!(
                "cascade_len must lie in [10, n_users], got {}",
                self.cascade_len
            )));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(Error::invalid("homophily must lie in [0, 1]"));
        }
        for (name, v) in [
            ("interest_spread", self.interest_spread),
            ("topic_spread", self.topic_spread),
            ("acceptance_sharpness", self.acceptance_sharpness),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        let (p_in, p_out) = self.edge_probabilities()?;
        if p_in > 1.0 || p_out > 1.0 {
            return Err(Error::invalid(format!(
                "mean_degree {} is too dense for this graph (p_in {p_in:.3}, p_out {p_out:.3})",
                self.mean_degree
            )));
        }
        Ok(())
    }

    /// Community of each user (round-robin).
    pub fn community(&self, u: UserId) -> usize {
        u % self.n_communities
    }

    /// `(p_in, p_out)` giving `mean_degree` expected influencers, a `homophily`
    /// fraction of them from the same community.
    pub fn edge_probabilities(&self) -> Result<(f64, f64)> {
        if !(self.mean_degree >= 1.0) {
            return Err(Error::invalid(format!(
                "mean_degree must be >= 1, got {}",
                self.mean_degree
            )));
        }
        let n = self.n_users;
        let same: usize = (0..n).map(|u| self.same_community_count(u)).sum();
        let same = same as f64 / n as f64;
        let diff = (n - 1) as f64 - same;
        let k = self.mean_degree;
        let p_in = if same > 0.0 { self.homophily * k / same } else { 0.0 };
        let p_out = if diff > 0.0 { (1.0 - self.homophily) * k / diff } else { 0.0 };
        Ok((p_in, p_out))
    }

    fn same_community_count(&self, u: UserId) -> usize {
        let c = self.community(u);
        let members = (self.n_users - c).div_ceil(self.n_communities);
        members - 1
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 100 + stream, 0))
    }
}

/// Directed community graph with independent Bernoulli edges.
pub fn gen_graph(cfg: &GenConfig) -> Result<SocialGraph> {
    cfg.validate()?;
    let (p_in, p_out) = cfg.edge_probabilities()?;
    let mut rng = cfg.rng(0);
    let mut edges = Vec::new();
    for src in 0..cfg.n_users {
        for dst in 0..cfg.n_users {
            if src == dst {
                continue;
            }
            let p = if cfg.community(src) == cfg.community(dst) {
                p_in
            } else {
                p_out
            };
            if p > 0.0 && rng.random::<f64>() < p {
                edges.push((src, dst));
            }
        }
    }
    SocialGraph::new(cfg.n_users, edges)
}

fn unit_noise(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// `Z[t][u]`: unit-norm interests per step.
pub fn gen_interests(cfg: &GenConfig, graph: &SocialGraph) -> Result<Vec<Vec<Vec<f64>>>> {
    cfg.validate()?;
    let d = cfg.d_latent;
    let mut rng = cfg.rng(1);
    let centroids: Vec<Vec<f64>> = (0..cfg.n_communities).map(|_| unit_noise(&mut rng, d)).collect();
    let z0: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|u| {
            let noise = unit_noise(&mut rng, d);
            let mut v: Vec<f64> = centroids[cfg.community(u)]
                .iter()
                .zip(&noise)
                .map(|(c, e)| c + cfg.interest_spread * e)
                .collect();
            normalize(&mut v);
            v
        })
        .collect();
    let influencers = graph.influencers();
    let mut out = vec![z0];
    for _ in 1..cfg.n_steps {
        let prev = out.last().expect("z0");
        let next = (0..cfg.n_users)
            .map(|u| {
                let group: Vec<UserId> = std::iter::once(u).chain(influencers[u].iter().copied()).collect();
                let noise = unit_noise(&mut rng, d);
                let mut v: Vec<f64> = (0..d)
                    .map(|k| {
                        let social = group.iter().map(|&w| prev[w][k]).sum::<f64>() / group.len() as f64;
                        cfg.drift_retain * prev[u][k] + cfg.drift_social * social + cfg.drift_noise * noise[k]
                    })
                    .collect();
                normalize(&mut v);
                v
            })
            .collect();
        out.push(next);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tokens `t<k><p|n>` repeated in proportion to each dominant coordinate.
pub fn topic_text(topic: &[f64]) -> String {
    let mut tokens = Vec::new();
    for (k, &x) in topic.iter().enumerate() {
        let reps = (x.abs() * 10.0).round() as usize;
        let sign = if x >= 0.0 { 'p' } else { 'n' };
        for _ in 0..reps {
            tokens.push(format!("t{k}{sign}"));
        }
    }
    tokens.join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTruth {
    pub id: String,
    pub step: usize,
    pub topic: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub communities: Vec<usize>,
    /// `interests[t][u]`.
    pub interests: Vec<Vec<Vec<f64>>>,
    pub cascades: Vec<CascadeTruth>,
}

/// Recruits users for one topic by descending affinity with logistic acceptance.
fn recruit(
    rng: &mut ChaCha8Rng,
    interests: &[Vec<f64>],
    topic: &[f64],
    target: usize,
    sharpness: f64,
) -> Option<Vec<UserId>> {
    let mut ranked: Vec<(UserId, f64)> = interests
        .iter()
        .enumerate()
        .map(|(u, z)| (u, dot(z, topic)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut taken = vec![false; interests.len()];
    let mut members = Vec::with_capacity(target);
    for _ in 0..MAX_RECRUIT_PASSES {
        for &(u, a) in &ranked {
            if members.len() == target {
                return Some(members);
            }
            if taken[u] {
                continue;
            }
            let p = 1.0 / (1.0 + (-sharpness * a).exp());
            if rng.random::<f64>() < p {
                taken[u] = true;
                members.push(u);
            }
        }
    }
    (members.len() == target).then_some(members)
}

/// Cascades per step (before filtering) and their true topics.
pub fn gen_cascades(
    cfg: &GenConfig,
    interests: &[Vec<Vec<f64>>],
) -> Result<(Vec<Cascade>, Vec<CascadeTruth>)> {
    cfg.validate()?;
    let mut rng = cfg.rng(2);
    let mut cascades = Vec::new();
    let mut truth = Vec::new();
    for (t, z) in interests.iter().enumerate() {
        for j in 0..cfg.cascades_per_step {
            let origin = rng.random_range(0..cfg.n_users);
            let noise = unit_noise(&mut rng, cfg.d_latent);
            let mut topic: Vec<f64> = z[origin]
                .iter()
                .zip(&noise)
                .map(|(a, e)| a + cfg.topic_spread * e)
                .collect();
            normalize(&mut topic);
            let id = format!("s{t}-c{j}");
            let Some(members) = recruit(&mut rng, z, &topic, cfg.cascade_len, cfg.acceptance_sharpness) else {
                warn!("cascade {id}: could not recruit {} users, dropped", cfg.cascade_len);
                continue;
            };
            // Starts sit in a narrow band mid-step, far from bucket edges even
            // when filtering removes the earliest or latest cascades.
            let start = (t as f64 + 0.45 + 0.1 * j as f64 / cfg.cascades_per_step as f64) * STEP_SECONDS;
            let users = members
                .iter()
                .enumerate()
                .map(|(k, &u)| (u, start + k as f64 * FORWARD_GAP + rng.random_range(0.0..0.5 * FORWARD_GAP)))
                .collect();
            let mut c = Cascade::new(id.clone(), topic_text(&topic), users);
            c.time_step = t;
            cascades.push(c);
            truth.push(CascadeTruth { id, step: t, topic });
        }
    }
    Ok((cascades, truth))
}

/// A generated corpus, already filtered at the default thresholds.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub graph: SocialGraph,
    pub cascades: Vec<Cascade>,
    pub truth: GroundTruth,
}

pub fn generate(cfg: &GenConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let graph = gen_graph(cfg)?;
    let interests = gen_interests(cfg, &graph)?;
    let (raw, topics) = gen_cascades(cfg, &interests)?;
    let n_raw = raw.len();
    let cascades = filter_cascades(raw, cfg.n_steps, FilterConfig::default());
    if cascades.len() < n_raw {
        warn!("filtering kept {} of {n_raw} generated cascades", cascades.len());
    }
    if cascades.is_empty() {
        return Err(Error::invalid("no generated cascade survives filtering; raise cascades_per_step"));
    }
    let steps = bucket_by_timestep(&cascades, cfg.n_steps)?;
    if let Some((c, s)) = cascades.iter().zip(&steps).find(|(c, s)| c.time_step != **s) {
        return Err(Error::invalid(format!(
            "cascade {} generated at step {} buckets to step {s}",
            c.id, c.time_step
        )));
    }
    let kept: std::collections::HashSet<&str> = cascades.iter().map(|c| c.id.as_str()).collect();
    let truth = GroundTruth {
        communities: (0..cfg.n_users).map(|u| cfg.community(u)).collect(),
        interests,
        cascades: topics.into_iter().filter(|c| kept.contains(c.id.as_str())).collect(),
    };
    Ok(SyntheticCorpus {
        graph,
        cascades,
        truth,
    })
}

pub const EDGES_FILE: &str = "edges.tsv";
pub const CASCADES_FILE: &str = "cascades.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const CONFIG_FILE: &str = "gen_config.json";

/// Writes edges, cascades, ground truth, and the config into `dir`.
pub fn write_corpus(dir: &Path, cfg: &GenConfig, corpus: &SyntheticCorpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    corpus.graph.write_edges(&dir.join(EDGES_FILE))?;
    write_cascades(&dir.join(CASCADES_FILE), &corpus.cascades)?;
    fs::write(dir.join(TRUTH_FILE), serde_json::to_string(&corpus.truth)?)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}
