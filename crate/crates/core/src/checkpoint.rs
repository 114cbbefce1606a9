//! Line-JSON checkpoints: a header line, then one line per named parameter.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every value bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT: &str = "dydiff-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct ParamLine {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub fn to_string(params: &ModelParams) -> Result<String> {
    let mut out = Vec::new();
    write_to(&mut out, params)?;
    Ok(String::from_utf8(out).expect("json is utf-8"))
}

fn write_to(w: &mut impl Write, params: &ModelParams) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: params.config,
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for (_, p) in params.store.iter() {
        let line = ParamLine {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().to_vec(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_to(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let r = BufReader::new(fs::File::open(path)?);
    let name = path.display().to_string();
    let lines = r.lines().collect::<std::io::Result<Vec<_>>>()?;
    parse_lines(lines.iter().map(String::as_str), &name)
}

pub fn from_str(text: &str) -> Result<ModelParams> {
    parse_lines(text.lines(), "<checkpoint>")
}

fn parse_lines<'a>(mut lines: impl Iterator<Item = &'a str>, source: &str) -> Result<ModelParams> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        source_name: source.to_string(),
        line,
        msg,
    };
    let first = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(parse_err(1, format!("unexpected format {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }
    let mut store = ParamStore::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: ParamLine =
            serde_json::from_str(line).map_err(|e| parse_err(i + 2, format!("bad parameter line: {e}")))?;
        let t = Tensor::new(p.shape, p.values).map_err(|e| parse_err(i + 2, e.to_string()))?;
        store.add(p.name, t).map_err(|e| parse_err(i + 2, e.to_string()))?;
    }
    ModelParams::from_store(header.config, store)
}
