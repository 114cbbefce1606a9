//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults, then the `--config` file, then each
//! `--set key=value` in order, then the dedicated command flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dydiff::data::{CorpusConfig, FilterConfig};
use dydiff::model::{Ablations, ModelConfig};
use dydiff::synthgen::GenConfig;
use dydiff::training::ObjectiveConfig;
use dydiff::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Empty means `runs/<command>-<unix seconds>`.
    pub out_dir: String,
    /// Empty means `<data_dir>/..`; resolved per command.
    pub checkpoint: String,

    pub n_steps: usize,
    pub min_user_records: usize,
    pub min_cascade_len: usize,
    pub split_seed: u64,

    pub d: usize,
    pub conv_layers: usize,
    pub ablations: Ablations,

    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_m: f64,
    pub lr: f64,
    pub epochs: usize,
    pub neg_pool_size: usize,
    pub train_seed_pct: f64,
    pub seed: u64,

    pub ks: Vec<usize>,
    pub seed_pcts: Vec<f64>,
    /// `none`, `random`, `popularity`, or `oracle`.
    pub baseline: String,
    pub top_m: usize,

    pub gen: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::default();
        let obj = ObjectiveConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: String::new(),
            checkpoint: String::new(),
            n_steps: corpus.n_steps,
            min_user_records: corpus.filter.min_user_records,
            min_cascade_len: corpus.filter.min_cascade_len,
            split_seed: corpus.split_seed,
            d: model.d,
            conv_layers: model.conv_layers,
            ablations: model.ablations,
            beta: obj.beta,
            lambda1: obj.lambda1,
            lambda2: obj.lambda2,
            lambda_m: obj.margin,
            lr: obj.lr,
            epochs: obj.epochs,
            neg_pool_size: obj.neg_pool_size,
            train_seed_pct: obj.train_seed_pct,
            seed: obj.seed,
            ks: dydiff::eval::DEFAULT_KS.to_vec(),
            seed_pcts: vec![0.5],
            baseline: "none".into(),
            top_m: 10,
            gen: GenConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::invalid(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let g = &mut self.gen;
        match key.trim() {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = v.to_string(),
            "checkpoint" => self.checkpoint = v.to_string(),
            "n_steps" => self.n_steps = parse(key, v)?,
            "min_user_records" => self.min_user_records = parse(key, v)?,
            "min_cascade_len" => self.min_cascade_len = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "conv_layers" => self.conv_layers = parse(key, v)?,
            "ablations" => self.ablations = Ablations::parse_list(v)?,
            "beta" => self.beta = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "lambda_m" => self.lambda_m = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "neg_pool_size" => self.neg_pool_size = parse(key, v)?,
            "train_seed_pct" => self.train_seed_pct = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ks" => self.ks = parse_list(key, v)?,
            "seed_pcts" => self.seed_pcts = parse_list(key, v)?,
            "baseline" => self.baseline = v.to_string(),
            "top_m" => self.top_m = parse(key, v)?,
            "gen.n_users" => g.n_users = parse(key, v)?,
            "gen.n_communities" => g.n_communities = parse(key, v)?,
            "gen.d_latent" => g.d_latent = parse(key, v)?,
            "gen.drift_retain" => g.drift_retain = parse(key, v)?,
            "gen.drift_social" => g.drift_social = parse(key, v)?,
            "gen.drift_noise" => g.drift_noise = parse(key, v)?,
            "gen.cascades_per_step" => g.cascades_per_step = parse(key, v)?,
            "gen.cascade_len" => g.cascade_len = parse(key, v)?,
            "gen.mean_degree" => g.mean_degree = parse(key, v)?,
            "gen.homophily" => g.homophily = parse(key, v)?,
            "gen.interest_spread" => g.interest_spread = parse(key, v)?,
            "gen.topic_spread" => g.topic_spread = parse(key, v)?,
            "gen.acceptance_sharpness" => g.acceptance_sharpness = parse(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Parses a config document: `key = value` lines, `#` comments, blank lines.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let g = &self.gen;
        vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("n_steps", self.n_steps.to_string()),
            ("min_user_records", self.min_user_records.to_string()),
            ("min_cascade_len", self.min_cascade_len.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("d", self.d.to_string()),
            ("conv_layers", self.conv_layers.to_string()),
            ("ablations", self.ablations.to_list()),
            ("beta", self.beta.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda_m", self.lambda_m.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("neg_pool_size", self.neg_pool_size.to_string()),
            ("train_seed_pct", self.train_seed_pct.to_string()),
            ("seed", self.seed.to_string()),
            ("ks", join(&self.ks)),
            ("seed_pcts", join(&self.seed_pcts)),
            ("baseline", self.baseline.clone()),
            ("top_m", self.top_m.to_string()),
            ("gen.n_users", g.n_users.to_string()),
            ("gen.n_communities", g.n_communities.to_string()),
            ("gen.d_latent", g.d_latent.to_string()),
            ("gen.drift_retain", g.drift_retain.to_string()),
            ("gen.drift_social", g.drift_social.to_string()),
            ("gen.drift_noise", g.drift_noise.to_string()),
            ("gen.cascades_per_step", g.cascades_per_step.to_string()),
            ("gen.cascade_len", g.cascade_len.to_string()),
            ("gen.mean_degree", g.mean_degree.to_string()),
            ("gen.homophily", g.homophily.to_string()),
            ("gen.interest_spread", g.interest_spread.to_string()),
            ("gen.topic_spread", g.topic_spread.to_string()),
            ("gen.acceptance_sharpness", g.acceptance_sharpness.to_string()),
        ]
    }

    /// The resolved configuration in the same format the parser reads.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_steps: self.n_steps,
            filter: FilterConfig {
                min_user_records: self.min_user_records,
                min_cascade_len: self.min_cascade_len,
            },
            split_seed: self.split_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            conv_layers: self.conv_layers,
            ablations: self.ablations,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta: self.beta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            margin: self.lambda_m,
            lr: self.lr,
            epochs: self.epochs,
            neg_pool_size: self.neg_pool_size,
            seed: self.seed,
            train_seed_pct: self.train_seed_pct,
        }
    }

    /// Generator settings; the step count and seed are shared with the run.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_steps: self.n_steps,
            seed: self.seed,
            ..self.gen.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::invalid("ks must list positive cutoffs"));
        }
        if self.seed_pcts.is_empty() {
            return Err(Error::invalid("seed_pcts must not be empty"));
        }
        if let Some(p) = self.seed_pcts.iter().find(|p| !(0.0..=0.5).contains(*p)) {
            return Err(Error::invalid(format!("seed_pct {p} outside [0, 0.5]")));
        }
        if !["none", "random", "popularity", "oracle"].contains(&self.baseline.as_str()) {
            return Err(Error::invalid(format!(
                "baseline must be none, random, popularity, or oracle; got {:?}",
                self.baseline
            )));
        }
        if self.top_m == 0 {
            return Err(Error::invalid("top_m must be >= 1"));
        }
        Ok(())
    }
}
