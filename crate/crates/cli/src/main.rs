mod config;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use serde::Deserialize;

use config::RunConfig;
use dydiff::data::Corpus;
use dydiff::decoder::rank_candidates;
use dydiff::eval::{self, ModelRanker, OracleRanker, PopularityRanker, RandomRanker, Ranker};
use dydiff::model::ModelParams;
use dydiff::synthgen;
use dydiff::training::{self, prediction_latents, TrainingData};
use dydiff::{checkpoint, embed, Error};

const PRECEDENCE: &str = "\
Configuration precedence (later wins): built-in defaults, the --config file,
each --set KEY=VALUE in order, then the command's own flags. Config files hold
one `key = value` per line; `#` starts a comment; unknown keys are rejected.
The fully resolved configuration is written to <out_dir>/config.txt.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.";

#[derive(Parser, Debug)]
#[command(name = "dydiff", version, about = "Diffusion prediction with dynamic latent user interests", after_help = PRECEDENCE)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic graph and cascade corpus.
    GenSynth {
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus the per-epoch loss trace.
    Train {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Comma-separated ablations, e.g. `static-encoder,tied`.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint or a baseline on the test split.
    Eval {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// random, popularity, or oracle instead of a checkpoint.
        #[arg(long)]
        baseline: Option<String>,
        /// Comma-separated seed percentages, e.g. `0,0.1,0.5`.
        #[arg(long)]
        seed_pcts: Option<String>,
    },
    /// Rank likely next forwarders for a cascade prefix.
    Predict {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        /// JSON `{"text", "vec"?, "users"}`; `-` or absent reads stdin.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        top: Option<usize>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for s in &cli.sets {
        cfg.set_pair(s)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    match &cli.command {
        Command::GenSynth { out, seed } => {
            flags.extend(out.clone().map(|v| ("out_dir", v)));
            flags.extend(seed.map(|v| ("seed", v.to_string())));
        }
        Command::Train {
            data,
            out,
            epochs,
            seed,
            lr,
            ablation,
        } => {
            flags.extend(data.clone().map(|v| ("data_dir", v)));
            flags.extend(out.clone().map(|v| ("out_dir", v)));
            flags.extend(epochs.map(|v| ("epochs", v.to_string())));
            flags.extend(seed.map(|v| ("seed", v.to_string())));
            flags.extend(lr.map(|v| ("lr", v.to_string())));
            flags.extend(ablation.clone().map(|v| ("ablations", v)));
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            baseline,
            seed_pcts,
        } => {
            flags.extend(data.clone().map(|v| ("data_dir", v)));
            flags.extend(checkpoint.clone().map(|v| ("checkpoint", v)));
            flags.extend(out.clone().map(|v| ("out_dir", v)));
            flags.extend(baseline.clone().map(|v| ("baseline", v)));
            flags.extend(seed_pcts.clone().map(|v| ("seed_pcts", v)));
        }
        Command::Predict {
            data,
            checkpoint,
            top,
            ..
        } => {
            flags.extend(data.clone().map(|v| ("data_dir", v)));
            flags.extend(checkpoint.clone().map(|v| ("checkpoint", v)));
            flags.extend(top.map(|v| ("top_m", v.to_string())));
        }
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and echoes the resolved configuration into it.
fn prepare_out_dir(cfg: &mut RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    if cfg.out_dir.is_empty() {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        cfg.out_dir = format!("runs/{command}-{secs}");
    }
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir).map_err(Error::from).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.render()).map_err(Error::from)?;
    Ok(dir)
}

fn load_corpus(cfg: &RunConfig, d: usize) -> anyhow::Result<Corpus> {
    let edges = cfg.data_dir.join(synthgen::EDGES_FILE);
    let cascades = cfg.data_dir.join(synthgen::CASCADES_FILE);
    let mut corpus = Corpus::load(&edges, &cascades, cfg.corpus_config())
        .with_context(|| format!("loading corpus from {}", cfg.data_dir.display()))?;
    corpus.embed(d)?;
    Ok(corpus)
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<ModelParams> {
    if cfg.checkpoint.is_empty() {
        return Err(Error::invalid("a checkpoint is required (--checkpoint or checkpoint = ...)").into());
    }
    let path = Path::new(&cfg.checkpoint);
    Ok(checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn cmd_gen_synth(mut cfg: RunConfig) -> anyhow::Result<()> {
    let gen = cfg.gen_config();
    gen.validate()?;
    let corpus = synthgen::generate(&gen)?;
    let dir = prepare_out_dir(&mut cfg, "gen-synth")?;
    synthgen::write_corpus(&dir, &gen, &corpus)?;
    println!(
        "wrote {} cascades over {} users and {} edges to {}",
        corpus.cascades.len(),
        corpus.graph.n_users(),
        corpus.graph.edges().len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(mut cfg: RunConfig) -> anyhow::Result<()> {
    let model_cfg = cfg.model_config();
    let obj = cfg.objective();
    let corpus = load_corpus(&cfg, model_cfg.d)?;
    let data = TrainingData::prepare(&corpus, &model_cfg, obj.train_seed_pct)?;
    let init = ModelParams::init(model_cfg, cfg.seed)?;
    let dir = prepare_out_dir(&mut cfg, "train")?;
    info!(
        "training on {} cascades, {} users, {} steps",
        data.cascades.len(),
        data.n_users,
        data.n_steps
    );
    let outcome = training::train(&data, init, &obj)?;

    let mut trace = String::from("epoch\ttotal\tranking\tkl\treg\n");
    for s in &outcome.trace {
        trace.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", s.epoch, s.total, s.ranking, s.kl, s.reg));
    }
    fs::write(dir.join("losses.tsv"), trace).map_err(Error::from)?;
    let ckpt = dir.join("checkpoint.jsonl");
    checkpoint::save(&ckpt, &outcome.model)?;
    println!("trained {} epochs; checkpoint {}", outcome.trace.len(), ckpt.display());
    if let Some(last) = outcome.trace.last() {
        println!("final loss {}", last.total);
    }
    if !corpus.splits.val.is_empty() {
        let ranker = ModelRanker::new(outcome.model, &data)?;
        let pct = cfg.train_seed_pct;
        let report = eval::evaluate(&ranker, &corpus, &corpus.splits.val, pct, &[10])?;
        println!("validation MAP@10 {} (seed_pct {pct})", report.map[&10]);
    }
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig) -> anyhow::Result<()> {
    let params = match cfg.baseline.as_str() {
        "none" => Some(load_checkpoint(&cfg)?),
        _ => None,
    };
    let d = params.as_ref().map_or(cfg.d, ModelParams::d);
    let corpus = load_corpus(&cfg, d)?;
    let ranker: Box<dyn Ranker> = match (&params, cfg.baseline.as_str()) {
        (Some(p), _) => {
            let data = TrainingData::prepare(&corpus, &p.config, cfg.train_seed_pct)?;
            Box::new(ModelRanker::new(p.clone(), &data)?)
        }
        (None, "random") => Box::new(RandomRanker {
            n_users: corpus.n_users(),
            seed: cfg.seed,
        }),
        (None, "popularity") => Box::new(PopularityRanker::new(&corpus)),
        (None, "oracle") => Box::new(OracleRanker {
            n_users: corpus.n_users(),
        }),
        (None, other) => bail!(Error::invalid(format!("unknown baseline {other}"))),
    };
    let dir = prepare_out_dir(&mut cfg, "eval")?;
    for &pct in &cfg.seed_pcts {
        let report = eval::evaluate(ranker.as_ref(), &corpus, &corpus.splits.test, pct, &cfg.ks)?;
        let path = dir.join(format!("report_seed{pct}.json"));
        fs::write(&path, report.to_json()? + "\n").map_err(Error::from)?;
        let fmt = |m: &std::collections::BTreeMap<usize, f64>| {
            m.iter().map(|(k, v)| format!("@{k}={v:.4}")).collect::<Vec<_>>().join(" ")
        };
        println!(
            "seed_pct {pct}: MAP {} | Recall {} | {} cascades, {} skipped",
            fmt(&report.map),
            fmt(&report.recall),
            report.n_cascades,
            report.n_skipped
        );
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictInput {
    #[serde(default)]
    text: String,
    vec: Option<Vec<f64>>,
    users: Vec<usize>,
}

fn cmd_predict(cfg: RunConfig, input: Option<&Path>) -> anyhow::Result<()> {
    let params = load_checkpoint(&cfg)?;
    let d = params.d();
    let raw = match input {
        Some(p) if p != Path::new("-") => fs::read_to_string(p)
            .map_err(Error::from)
            .with_context(|| format!("reading {}", p.display()))?,
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).map_err(Error::from)?;
            s
        }
    };
    let query: PredictInput = serde_json::from_str(&raw).map_err(|e| Error::invalid(format!("bad prediction input: {e}")))?;
    let corpus = load_corpus(&cfg, d)?;
    let n = corpus.n_users();
    let unknown: Vec<usize> = query.users.iter().copied().filter(|&u| u >= n).collect();
    if !unknown.is_empty() {
        bail!(Error::invalid(format!("unknown user ids {unknown:?} (corpus has {n} users)")));
    }
    let content = match query.vec {
        Some(mut v) => {
            if v.len() != d {
                bail!(Error::invalid(format!("vec has dimension {}, model expects {d}", v.len())));
            }
            embed::normalize(&mut v);
            v
        }
        None => embed::embed_text(&query.text, d)?,
    };
    let data = TrainingData::prepare(&corpus, &params.config, cfg.train_seed_pct)?;
    let z = prediction_latents(&data, &params)?;
    let ranking = rank_candidates(&params, &z, &content, &query.users)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (i, (u, s)) in ranking.users.iter().zip(&ranking.scores).take(cfg.top_m).enumerate() {
        writeln!(out, "{}\t{u}\t{s:.9}", i + 1).map_err(Error::from)?;
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFiniteLoss { .. } | Error::NonDeterministic { .. } | Error::Io(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| match &cli.command {
        Command::GenSynth { .. } => cmd_gen_synth(cfg),
        Command::Train { .. } => cmd_train(cfg),
        Command::Eval { .. } => cmd_eval(cfg),
        Command::Predict { input, .. } => cmd_predict(cfg, input.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
