//! Fixtures and a plain-loop re-implementation of the objective used as an
//! oracle for the tape-based code.

#![allow(dead_code)]

pub mod gradients;

use dydiff::data::{Cascade, Corpus};
use dydiff::graph::{SocialGraph, UserId};
use dydiff::model::{Ablations, ModelConfig, ModelParams};
use dydiff::numerics::{ParamStore, Tensor};
use dydiff::training::{negatives_seed, sample_negatives, step_noise, ObjectiveConfig, TrainingData};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_STEPS: usize = 3;

pub struct Fixture {
    pub corpus: Corpus,
    pub data: TrainingData,
    pub model: ModelParams,
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// A random graph and `n_train` training cascades spread over steps 0 and 1,
/// plus one final-step cascade, all with random unit content vectors.
pub fn corpus(n_users: usize, n_train: usize, d: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for a in 0..n_users {
        for b in 0..n_users {
            if a != b && rng.random_bool(0.3) {
                edges.push((a, b));
            }
        }
    }
    let graph = SocialGraph::new(n_users, edges).unwrap();
    let mut cascades = Vec::new();
    for j in 0..=n_train {
        let len = rng.random_range(2..=(n_users - 1).min(6));
        let mut users: Vec<UserId> = (0..n_users).collect();
        users.shuffle(&mut rng);
        users.truncate(len);
        let mut c = Cascade::new(
            format!("c{j}"),
            "",
            users.iter().enumerate().map(|(i, &u)| (u, i as f64)).collect(),
        );
        c.time_step = if j == n_train { N_STEPS - 1 } else { j % (N_STEPS - 1) };
        c.content_vec = unit_vector(&mut rng, d);
        cascades.push(c);
    }
    Corpus::from_filtered(graph, cascades, N_STEPS, seed)
}

/// Perturbs every parameter (biases included) so no gradient is trivially zero.
pub fn jitter(model: &mut ModelParams, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in model.store.value_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

pub fn fixture(n_users: usize, n_train: usize, d: usize, seed: u64, ablations: Ablations) -> Fixture {
    let corpus = corpus(n_users, n_train, d, seed);
    let cfg = ModelConfig {
        d,
        conv_layers: 1,
        ablations,
    };
    let data = TrainingData::prepare(&corpus, &cfg, 0.5).unwrap();
    let mut model = ModelParams::init(cfg, seed).unwrap();
    jitter(&mut model, seed ^ 0x5eed, 0.3);
    Fixture { corpus, data, model }
}

pub fn with_store(model: &ModelParams, store: &ParamStore) -> ModelParams {
    ModelParams {
        store: store.clone(),
        ..model.clone()
    }
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Scalar oracle

type Mat = Vec<Vec<f64>>;

fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.value(store.id(name).unwrap());
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn rows_times(m: &Mat, w: &Mat) -> Mat {
    m.iter().map(|r| vecmat(r, w)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-30.0, 30.0)).exp())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Dense `D^{-1/2}(A + I)D^{-1/2}` where row `i` collects the users influencing `i`.
pub fn dense_operator(graph: &SocialGraph, identity: bool) -> Mat {
    let n = graph.n_users();
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if !identity {
        for &(src, dst) in graph.edges() {
            a[dst][src] = 1.0;
        }
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect()
}

fn conv(op: &Mat, h: &Mat, hops: usize) -> Mat {
    let mut out = h.clone();
    for _ in 0..hops {
        out = op
            .iter()
            .map(|row| {
                let mut acc = vec![0.0; h[0].len()];
                for (j, &w) in row.iter().enumerate() {
                    for (a, b) in acc.iter_mut().zip(&out[j]) {
                        *a += w * b;
                    }
                }
                acc
            })
            .collect();
    }
    out
}

fn stimuli(corpus: &Corpus, include: impl Fn(usize) -> bool, d: usize) -> Mat {
    let mut x = vec![vec![0.0; d]; corpus.n_users()];
    for c in corpus.cascades.iter().filter(|c| include(c.time_step)) {
        for &(u, _) in &c.users {
            for (a, b) in x[u].iter_mut().zip(&c.content_vec) {
                *a += b;
            }
        }
    }
    x.into_iter().map(unit).collect()
}

pub fn pe(k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = k as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

pub struct OracleLatents {
    pub mu: Vec<Mat>,
    pub z: Vec<Mat>,
    pub kl: f64,
}

/// Latents for steps `0..n_latent`; `noise_seed = None` uses the posterior mean.
pub fn oracle_latents(corpus: &Corpus, model: &ModelParams, n_latent: usize, noise_seed: Option<u64>) -> OracleLatents {
    let s = &model.store;
    let cfg = model.config;
    let (n, d, hops) = (corpus.n_users(), cfg.d, cfg.conv_layers);
    let op = dense_operator(&corpus.graph, cfg.ablations.remove_conv);
    let (w_hu, w_hr, w_hm) = (mat(s, "w_hu"), mat(s, "w_hr"), mat(s, "w_hm"));
    let (w_xu, w_xr, w_xm) = (mat(s, "w_xu"), mat(s, "w_xr"), mat(s, "w_xm"));
    let (w_mu, b_mu) = (mat(s, "w_mu"), mat(s, "b_mu").remove(0));
    let (w_lv, b_lv) = (mat(s, "w_logvar"), mat(s, "b_logvar").remove(0));
    let t_last = corpus.n_steps - 1;

    let mut hs: Vec<Mat> = Vec::new();
    if cfg.ablations.static_encoder {
        let pooled = stimuli(corpus, |t| t < t_last, d);
        let h: Mat = rows_times(&conv(&op, &pooled, hops), &w_xm)
            .into_iter()
            .map(|r| r.into_iter().map(f64::tanh).collect())
            .collect();
        hs = vec![h; n_latent];
    } else {
        let mut h = vec![vec![0.0; d]; n];
        hs.push(h.clone());
        for t in 1..n_latent {
            let x = stimuli(corpus, |s| s + 1 == t, d);
            let ch = conv(&op, &h, hops);
            let mut reset = vec![vec![0.0; d]; n];
            let mut gu = vec![vec![0.0; d]; n];
            for i in 0..n {
                let (a, b) = (vecmat(&ch[i], &w_hu), vecmat(&x[i], &w_xu));
                let (c, e) = (vecmat(&ch[i], &w_hr), vecmat(&x[i], &w_xr));
                for j in 0..d {
                    gu[i][j] = sig(a[j] + b[j]);
                    reset[i][j] = sig(c[j] + e[j]) * h[i][j];
                }
            }
            let cr = conv(&op, &reset, hops);
            let mut next = vec![vec![0.0; d]; n];
            for i in 0..n {
                let (a, b) = (vecmat(&cr[i], &w_hm), vecmat(&x[i], &w_xm));
                for j in 0..d {
                    let cand = (a[j] + b[j]).tanh();
                    next[i][j] = gu[i][j] * cand + (1.0 - gu[i][j]) * h[i][j];
                }
            }
            h = next;
            hs.push(h.clone());
        }
    }

    let mut out = OracleLatents {
        mu: Vec::new(),
        z: Vec::new(),
        kl: 0.0,
    };
    for (t, h) in hs.iter().enumerate() {
        let eps = noise_seed
            .filter(|_| !cfg.ablations.deterministic)
            .map(|seed| step_noise(seed, t, n, d));
        let mut mu = vec![vec![0.0; d]; n];
        let mut z = vec![vec![0.0; d]; n];
        for i in 0..n {
            let m = vecmat(&h[i], &w_mu);
            let l = vecmat(&h[i], &w_lv);
            for j in 0..d {
                let mu_ij = m[j] + b_mu[j];
                let lv = l[j] + b_lv[j];
                let sigma = (0.5 * lv).clamp(-30.0, 30.0).exp();
                mu[i][j] = mu_ij;
                z[i][j] = match &eps {
                    Some(e) => mu_ij + e.get(i, j) * sigma,
                    None => mu_ij,
                };
                if !cfg.ablations.deterministic {
                    out.kl += 0.5 * (mu_ij * mu_ij + lv.clamp(-30.0, 30.0).exp() - lv - 1.0);
                }
            }
        }
        out.mu.push(mu);
        out.z.push(z);
    }
    out
}

/// Cascade vector `o` for observed users with latents `z`.
pub fn oracle_representation(model: &ModelParams, z: &Mat, observed: &[UserId], content: &[f64]) -> Vec<f64> {
    let s = &model.store;
    let ab = model.config.ablations;
    let d = model.config.d;
    let w_s = mat(s, "w_s");
    let w_r = if ab.tied_weights { w_s.clone() } else { mat(s, "w_r") };
    let vs: Mat = observed.iter().map(|&u| vecmat(&z[u], &w_s)).collect();
    let vr: Mat = observed.iter().map(|&u| vecmat(&z[u], &w_r)).collect();
    let k = observed.len();
    let seq: Mat = if ab.remove_first_attention {
        vs.clone()
    } else {
        (0..k)
            .map(|q| {
                let query: Vec<f64> = vr[q].iter().zip(pe(q + 1, d)).map(|(a, b)| a + b).collect();
                let logits: Vec<f64> = (0..=q)
                    .map(|i| {
                        let key: Vec<f64> = vs[i].iter().zip(pe(i + 1, d)).map(|(a, b)| a + b).collect();
                        dot(&query, &key)
                    })
                    .collect();
                let w = softmax(&logits);
                let mut out = vec![0.0; d];
                for (i, wi) in w.iter().enumerate() {
                    for j in 0..d {
                        out[j] += wi * vs[i][j];
                    }
                }
                out
            })
            .collect()
    };
    if ab.remove_second_attention {
        let mut o = vec![0.0; d];
        for r in &seq {
            for j in 0..d {
                o[j] += r[j] / k as f64;
            }
        }
        return o;
    }
    let b_c = mat(s, "b_c").remove(0);
    let vc: Vec<f64> = vecmat(content, &mat(s, "w_c")).iter().zip(&b_c).map(|(a, b)| a + b).collect();
    let mut rows = vec![vc.clone()];
    rows.extend(seq);
    let alpha = softmax(&rows.iter().map(|r| dot(&vc, r)).collect::<Vec<_>>());
    let mut o = vec![0.0; d];
    for (a, r) in alpha.iter().zip(&rows) {
        for j in 0..d {
            o[j] += a * r[j];
        }
    }
    o
}

pub fn oracle_score(model: &ModelParams, o: &[f64], z_u: &[f64]) -> f64 {
    let name = if model.config.ablations.tied_weights { "w_s" } else { "w_r" };
    sig(dot(o, &vecmat(z_u, &mat(&model.store, name))))
}

fn oracle_warp(pos: &[f64], neg: &[f64], margin: f64) -> f64 {
    let mut total = 0.0;
    for &p in pos {
        let mut rank = 1;
        for &q in neg {
            if q > p {
                rank += 1;
            }
        }
        let l: f64 = (1..=rank).map(|i| 1.0 / i as f64).sum();
        let inner: f64 = neg.iter().map(|&q| (margin - p + q).max(0.0)).sum();
        total += l * inner / rank as f64;
    }
    total
}

/// The full objective recomputed scalar by scalar.
pub fn oracle_objective(corpus: &Corpus, model: &ModelParams, cfg: &ObjectiveConfig, epoch_seed: u64) -> f64 {
    let n = corpus.n_users();
    let lat = oracle_latents(corpus, model, corpus.n_steps - 1, Some(epoch_seed));
    let mut ranking = 0.0;
    let mut j = 0;
    for &ci in &corpus.splits.train {
        let c = &corpus.cascades[ci];
        let users = c.user_ids();
        let n_obs = ((cfg.train_seed_pct * users.len() as f64) - 1e-9).ceil() as usize;
        let (observed, positives) = users.split_at(n_obs);
        if positives.is_empty() {
            continue;
        }
        let negs = sample_negatives(&users, n, cfg.neg_pool_size, negatives_seed(epoch_seed, j)).unwrap();
        j += 1;
        let z = &lat.z[c.time_step];
        let o = oracle_representation(model, z, observed, &c.content_vec);
        let pos: Vec<f64> = positives.iter().map(|&u| oracle_score(model, &o, &z[u])).collect();
        let neg: Vec<f64> = negs.iter().map(|&u| oracle_score(model, &o, &z[u])).collect();
        ranking += oracle_warp(&pos, &neg, cfg.margin);
    }
    let sq = |name: &str| -> f64 { mat(&model.store, name).iter().flatten().map(|x| x * x).sum() };
    let enc: f64 = ["w_hu", "w_hr", "w_hm", "w_xu", "w_xr", "w_xm", "w_mu", "b_mu", "w_logvar", "b_logvar"]
        .iter()
        .map(|n| sq(n))
        .sum();
    let mut dec_names = vec!["w_s", "w_c", "b_c"];
    if !model.config.ablations.tied_weights {
        dec_names.push("w_r");
    }
    let dec: f64 = dec_names.iter().map(|n| sq(n)).sum();
    ranking + cfg.beta * lat.kl + cfg.lambda1 * enc + cfg.lambda2 * dec
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}
