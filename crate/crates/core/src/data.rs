//! Cascade corpus: parsing, time-step bucketing, filtering, splits, and the
//! per-step recent-stimuli matrices fed to the encoder.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed;
use crate::error::{Error, Result};
use crate::graph::{SocialGraph, UserId};
use crate::numerics::Tensor;

/// A content item and the time-ordered users who forwarded it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub id: String,
    pub text: String,
    /// Precomputed embedding overriding `text`, when supplied.
    pub vec: Option<Vec<f64>>,
    /// Unit-norm (or zero) content embedding; empty until [`Corpus::embed`] runs.
    pub content_vec: Vec<f64>,
    /// `(user, timestamp in seconds)`, ascending by timestamp, no repeated user.
    pub users: Vec<(UserId, f64)>,
    pub time_step: usize,
}

impl Cascade {
    pub fn new(id: impl Into<String>, text: impl Into<String>, users: Vec<(UserId, f64)>) -> Self {
        let mut c = Cascade {
            id: id.into(),
            text: text.into(),
            vec: None,
            content_vec: Vec::new(),
            users,
            time_step: 0,
        };
        c.canonicalize();
        c
    }

    /// Sorts users by timestamp (stable) and keeps each user's first appearance.
    fn canonicalize(&mut self) {
        self.users.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut seen = HashSet::new();
        self.users.retain(|(u, _)| seen.insert(*u));
    }

    pub fn user_ids(&self) -> Vec<UserId> {
        self.users.iter().map(|(u, _)| *u).collect()
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<f64> {
        self.users.first().map(|u| u.1)
    }
}

#[derive(Serialize, Deserialize)]
struct CascadeRecord {
    id: String,
    #[serde(default)]
    text: String,
    users: Vec<(UserId, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vec: Option<Vec<f64>>,
}

pub fn parse_cascades(text: &str, source_name: &str) -> Result<Vec<Cascade>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CascadeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let mut c = Cascade::new(rec.id, rec.text, rec.users);
        c.vec = rec.vec;
        out.push(c);
    }
    Ok(out)
}

pub fn load_cascades(path: &Path) -> Result<Vec<Cascade>> {
    let text = fs::read_to_string(path)?;
    parse_cascades(&text, &path.display().to_string())
}

pub fn write_cascades(path: &Path, cascades: &[Cascade]) -> Result<()> {
    let mut buf = Vec::new();
    for c in cascades {
        let rec = CascadeRecord {
            id: c.id.clone(),
            text: c.text.clone(),
            users: c.users.clone(),
            vec: c.vec.clone(),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.write_all(b"\n")?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Assigns each cascade a step in `0..n_steps` by its first timestamp.
///
/// The span `[min, max]` of first timestamps is cut into `n_steps` equal
/// half-open intervals; the last interval is closed on the right.
pub fn bucket_by_timestep(cascades: &[Cascade], n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 2 {
        return Err(Error::invalid(format!("need at least 2 time steps, got {n_steps}")));
    }
    let firsts = cascades
        .iter()
        .map(|c| {
            c.first_timestamp()
                .ok_or_else(|| Error::invalid(format!("cascade {} has no users", c.id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let lo = firsts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = firsts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::invalid("degenerate time span: all cascades share one timestamp"));
    }
    let span = hi - lo;
    Ok(firsts
        .iter()
        .map(|&ts| {
            let step = ((ts - lo) * n_steps as f64 / span).floor() as usize;
            step.min(n_steps - 1)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Users with fewer records across the corpus are removed.
    pub min_user_records: usize,
    /// Cascades shorter than this are removed.
    pub min_cascade_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_user_records: 10,
            min_cascade_len: 10,
        }
    }
}

/// Removes sparse users, short cascades, and final-step users never seen in
/// earlier steps, repeating until nothing changes. Cascades must already carry
/// their `time_step`.
pub fn filter_cascades(mut cascades: Vec<Cascade>, n_steps: usize, cfg: FilterConfig) -> Vec<Cascade> {
    let last = n_steps.saturating_sub(1);
    loop {
        let before: usize = cascades.iter().map(Cascade::len).sum::<usize>() + cascades.len();

        let mut counts: BTreeMap<UserId, usize> = BTreeMap::new();
        for c in &cascades {
            for (u, _) in &c.users {
                *counts.entry(*u).or_default() += 1;
            }
        }
        for c in &mut cascades {
            c.users.retain(|(u, _)| counts[u] >= cfg.min_user_records);
        }
        cascades.retain(|c| c.len() >= cfg.min_cascade_len.max(1));

        let seen: HashSet<UserId> = cascades
            .iter()
            .filter(|c| c.time_step < last)
            .flat_map(|c| c.users.iter().map(|(u, _)| *u))
            .collect();
        for c in cascades.iter_mut().filter(|c| c.time_step == last) {
            c.users.retain(|(u, _)| seen.contains(u));
        }
        cascades.retain(|c| c.len() >= cfg.min_cascade_len.max(1));

        let after: usize = cascades.iter().map(Cascade::len).sum::<usize>() + cascades.len();
        if after == before {
            return cascades;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    /// Cascades at steps `0..T-1`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_steps: usize,
    pub filter: FilterConfig,
    /// Seeds the random validation/test partition of the final step.
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_steps: 6,
            filter: FilterConfig::default(),
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub graph: SocialGraph,
    pub cascades: Vec<Cascade>,
    pub n_steps: usize,
    pub splits: Splits,
}

impl Corpus {
    /// Validates, buckets, filters, and splits raw cascades.
    pub fn build(graph: SocialGraph, raw: Vec<Cascade>, cfg: CorpusConfig) -> Result<Corpus> {
        let mut raw = raw;
        for c in &raw {
            if let Some((u, _)) = c.users.iter().find(|(u, _)| *u >= graph.n_users()) {
                return Err(Error::invalid(format!(
                    "cascade {} references user {u} outside the graph ({} users)",
                    c.id,
                    graph.n_users()
                )));
            }
        }
        let steps = bucket_by_timestep(&raw, cfg.n_steps)?;
        for (c, s) in raw.iter_mut().zip(steps) {
            c.time_step = s;
        }
        let cascades = filter_cascades(raw, cfg.n_steps, cfg.filter);
        if cascades.is_empty() {
            return Err(Error::invalid("corpus is empty after filtering"));
        }
        Ok(Corpus::from_filtered(graph, cascades, cfg.n_steps, cfg.split_seed))
    }

    /// Wraps already-bucketed cascades without filtering; splits the final step 1:3.
    pub fn from_filtered(graph: SocialGraph, cascades: Vec<Cascade>, n_steps: usize, split_seed: u64) -> Corpus {
        let last = n_steps - 1;
        let train = (0..cascades.len())
            .filter(|&i| cascades[i].time_step < last)
            .collect();
        let mut final_step: Vec<usize> = (0..cascades.len())
            .filter(|&i| cascades[i].time_step == last)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        final_step.shuffle(&mut rng);
        let n_val = (final_step.len() as f64 / 4.0).round() as usize;
        let mut val = final_step[..n_val].to_vec();
        let mut test = final_step[n_val..].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        Corpus {
            graph,
            cascades,
            n_steps,
            splits: Splits { train, val, test },
        }
    }

    pub fn load(edges: &Path, cascades: &Path, cfg: CorpusConfig) -> Result<Corpus> {
        let graph = crate::graph::load_edges(edges)?;
        let raw = load_cascades(cascades)?;
        Corpus::build(graph, raw, cfg)
    }

    pub fn n_users(&self) -> usize {
        self.graph.n_users()
    }

    /// Fills every cascade's `content_vec` at dimension `d`.
    pub fn embed(&mut self, d: usize) -> Result<()> {
        for c in &mut self.cascades {
            c.content_vec = match &c.vec {
                Some(v) => {
                    if v.len() != d {
                        return Err(Error::invalid(format!(
                            "cascade {} vector has dimension {}, expected {d}",
                            c.id,
                            v.len()
                        )));
                    }
                    let mut v = v.clone();
                    embed::normalize(&mut v);
                    v
                }
                None => embed::embed_text(&c.text, d)?,
            };
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.cascades.first().map(|c| c.content_vec.len())
    }

    pub fn cascades_at(&self, step: usize) -> impl Iterator<Item = &Cascade> {
        self.cascades.iter().filter(move |c| c.time_step == step)
    }

    /// Number of records per user across training-step cascades.
    pub fn training_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_users()];
        for &i in &self.splits.train {
            for (u, _) in &self.cascades[i].users {
                counts[*u] += 1;
            }
        }
        counts
    }
}

/// Row `i` is the renormalized mean content vector of the cascades at steps
/// selected by `include` that user `i` forwarded; zero when there are none.
pub fn stimuli_over(corpus: &Corpus, include: impl Fn(usize) -> bool) -> Result<Tensor> {
    let d = corpus
        .embedding_dim()
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::invalid("corpus has not been embedded"))?;
    let mut x = Tensor::zeros(corpus.n_users(), d);
    for c in corpus.cascades.iter().filter(|c| include(c.time_step)) {
        for (u, _) in &c.users {
            for (dst, v) in x.row_mut(*u).iter_mut().zip(&c.content_vec) {
                *dst += v;
            }
        }
    }
    for i in 0..corpus.n_users() {
        embed::normalize(x.row_mut(i));
    }
    Ok(x)
}

/// Encoder input for step `t`: what each user forwarded during step `t − 1`.
pub fn recent_stimuli(corpus: &Corpus, t: usize) -> Result<Tensor> {
    if t == 0 || t >= corpus.n_steps {
        return Err(Error::invalid(format!(
            "recent stimuli need 1 <= t < {}, got {t}",
            corpus.n_steps
        )));
    }
    stimuli_over(corpus, |s| s + 1 == t)
}

/// Splits a sequence into the first `⌈pct·K⌉` observed users and the hidden rest.
pub fn seed_split(users: &[UserId], seed_pct: f64) -> Result<(Vec<UserId>, Vec<UserId>)> {
    if !(0.0..=0.5).contains(&seed_pct) {
        return Err(Error::invalid(format!("seed_pct must lie in [0, 0.5], got {seed_pct}")));
    }
    // The epsilon keeps products like 0.3·10 from rounding up past an integer.
    let n_obs = ((seed_pct * users.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_obs = n_obs.min(users.len());
    Ok((users[..n_obs].to_vec(), users[n_obs..].to_vec()))
}
