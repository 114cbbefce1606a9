//! Model configuration, ablation switches, and the named parameter set.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Architectural ablations. All `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// One graph convolution over all training-period stimuli, no recurrence.
    pub static_encoder: bool,
    /// Identity propagation operator (no social influence).
    pub remove_conv: bool,
    /// Sender states used directly, without self-attention.
    pub remove_first_attention: bool,
    /// Cascade vector is the mean of the denoised users; content ignored.
    pub remove_second_attention: bool,
    /// Sender and receiver projections share one matrix.
    pub tied_weights: bool,
    /// Posterior mean only (ε ≡ 0) and no KL term.
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    StaticEncoder,
    RemoveConv,
    RemoveFirstAttention,
    RemoveSecondAttention,
    TiedWeights,
    Deterministic,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::StaticEncoder,
        Ablation::RemoveConv,
        Ablation::RemoveFirstAttention,
        Ablation::RemoveSecondAttention,
        Ablation::TiedWeights,
        Ablation::Deterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::StaticEncoder => "static-encoder",
            Ablation::RemoveConv => "remove-conv",
            Ablation::RemoveFirstAttention => "remove-first-attention",
            Ablation::RemoveSecondAttention => "remove-second-attention",
            Ablation::TiedWeights => "tied",
            Ablation::Deterministic => "deterministic",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::invalid(format!("unknown ablation {s:?}; expected one of {names:?}"))
            })
    }
}

impl Ablations {
    pub fn with(mut self, a: Ablation) -> Self {
        *self.flag_mut(a) = true;
        self
    }

    fn flag_mut(&mut self, a: Ablation) -> &mut bool {
        match a {
            Ablation::StaticEncoder => &mut self.static_encoder,
            Ablation::RemoveConv => &mut self.remove_conv,
            Ablation::RemoveFirstAttention => &mut self.remove_first_attention,
            Ablation::RemoveSecondAttention => &mut self.remove_second_attention,
            Ablation::TiedWeights => &mut self.tied_weights,
            Ablation::Deterministic => &mut self.deterministic,
        }
    }

    pub fn is_set(&self, a: Ablation) -> bool {
        let mut copy = *self;
        *copy.flag_mut(a)
    }

    pub fn active(&self) -> Vec<Ablation> {
        Ablation::ALL.into_iter().filter(|a| self.is_set(*a)).collect()
    }

    /// Comma-separated ablation names; empty or `none` means the full model.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut out = Ablations::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            out = out.with(part.parse()?);
        }
        Ok(out)
    }

    pub fn to_list(&self) -> String {
        let names: Vec<_> = self.active().iter().map(|a| a.name()).collect();
        if names.is_empty() {
            "none".to_string()
        } else {
            names.join(",")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of hidden states, latents, and content embeddings.
    pub d: usize,
    /// Number of operator applications per graph convolution.
    pub conv_layers: usize,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            conv_layers: 1,
            ablations: Ablations::default(),
        }
    }
}

/// Handles into the parameter store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamIds {
    pub w_hu: ParamId,
    pub w_hr: ParamId,
    pub w_hm: ParamId,
    pub w_xu: ParamId,
    pub w_xr: ParamId,
    pub w_xm: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_logvar: ParamId,
    pub b_logvar: ParamId,
    pub w_s: ParamId,
    /// Equal to `w_s` under the tied ablation.
    pub w_r: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
}

impl ParamIds {
    pub fn encoder(&self) -> [ParamId; 10] {
        [
            self.w_hu,
            self.w_hr,
            self.w_hm,
            self.w_xu,
            self.w_xr,
            self.w_xm,
            self.w_mu,
            self.b_mu,
            self.w_logvar,
            self.b_logvar,
        ]
    }

    pub fn decoder(&self) -> Vec<ParamId> {
        let mut out = vec![self.w_s];
        if self.w_r != self.w_s {
            out.push(self.w_r);
        }
        out.extend([self.w_c, self.b_c]);
        out
    }
}

const MATRICES: [&str; 8] = ["w_hu", "w_hr", "w_hm", "w_xu", "w_xr", "w_xm", "w_mu", "w_logvar"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl ModelParams {
    /// Weights uniform in `[-1/√d, 1/√d]` drawn in a fixed order; biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let d = config.d;
        if d < 2 || d % 2 != 0 {
            return Err(Error::invalid(format!("d must be even and >= 2, got {d}")));
        }
        if config.conv_layers == 0 {
            return Err(Error::invalid("conv_layers must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let uniform = |rng: &mut ChaCha8Rng| {
            let data = (0..d * d).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::matrix(d, d, data).expect("square shape")
        };
        let mut store = ParamStore::new();
        let mut m = Vec::new();
        for name in MATRICES {
            m.push(store.add(name, uniform(&mut rng))?);
        }
        let b_mu = store.add("b_mu", Tensor::zeros(1, d))?;
        let b_logvar = store.add("b_logvar", Tensor::zeros(1, d))?;
        let w_s = store.add("w_s", uniform(&mut rng))?;
        let w_r = if config.ablations.tied_weights {
            w_s
        } else {
            store.add("w_r", uniform(&mut rng))?
        };
        let w_c = store.add("w_c", uniform(&mut rng))?;
        let b_c = store.add("b_c", Tensor::zeros(1, d))?;
        let ids = ParamIds {
            w_hu: m[0],
            w_hr: m[1],
            w_hm: m[2],
            w_xu: m[3],
            w_xr: m[4],
            w_xm: m[5],
            w_mu: m[6],
            b_mu,
            w_logvar: m[7],
            b_logvar,
            w_s,
            w_r,
            w_c,
            b_c,
        };
        Ok(ModelParams { config, store, ids })
    }

    /// Rebuilds the id table from a store whose names follow [`ModelParams::init`].
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let w_s = get("w_s")?;
        let w_r = if config.ablations.tied_weights {
            if store.id("w_r").is_some() {
                return Err(Error::invalid("tied model must not carry w_r"));
            }
            w_s
        } else {
            get("w_r")?
        };
        let ids = ParamIds {
            w_hu: get("w_hu")?,
            w_hr: get("w_hr")?,
            w_hm: get("w_hm")?,
            w_xu: get("w_xu")?,
            w_xr: get("w_xr")?,
            w_xm: get("w_xm")?,
            w_mu: get("w_mu")?,
            b_mu: get("b_mu")?,
            w_logvar: get("w_logvar")?,
            b_logvar: get("b_logvar")?,
            w_s,
            w_r,
            w_c: get("w_c")?,
            b_c: get("b_c")?,
        };
        let d = config.d;
        for (_, p) in store.iter() {
            let (r, c) = p.value.dims();
            let ok = c == d && (r == d || (r == 1 && p.name.starts_with("b_")));
            if !ok {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, incompatible with d = {d}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(ModelParams { config, store, ids })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }
}
