//! Plain-text model checkpoints.
//!
//! ```text
//! bst-checkpoint 1
//! config {"kind":"bst",...}
//! tensor emb.item 2001 16
//! 1.25e-2 -3.1e-1 ...
//! ...
//! end
//! ```
//!
//! Values are written in shortest round-trip form, so a reloaded model
//! predicts bit-for-bit what the saved one did.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Params;
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "bst-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn encode(model: &Model) -> Result<String> {
    let config = serde_json::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\nconfig {config}\n");
    for (name, t) in model.params.iter() {
        writeln!(out, "tensor {name} {} {}", t.rows(), t.cols()).expect("string write");
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v:e}").expect("string write");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    Ok(out)
}

/// Stored config and tensors, without checking them against each other.
pub fn decode(text: &str) -> Result<(ModelConfig, Params)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v == FORMAT_VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported checkpoint version {v}, expected {FORMAT_VERSION}"))),
        _ => return Err(bad("not a checkpoint file".into())),
    }
    let config_line = lines.next().ok_or_else(|| bad("truncated before config".into()))?;
    let json = config_line
        .strip_prefix("config ")
        .ok_or_else(|| bad("missing config line".into()))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| bad(format!("config: {e}")))?;

    let mut params = Params::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("truncated: missing `end`".into()))?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let [tag, name, rows, cols] = fields[..] else {
            return Err(bad(format!("malformed tensor header `{line}`")));
        };
        if tag != "tensor" {
            return Err(bad(format!("malformed tensor header `{line}`")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{line}`")));
        let (rows, cols) = (dim(rows)?, dim(cols)?);
        let body = lines
            .next()
            .ok_or_else(|| bad(format!("truncated in tensor `{name}`")))?;
        let data = body
            .split_ascii_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        if data.len() != rows * cols {
            return Err(bad(format!(
                "tensor `{name}` has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        params.insert(name, Tensor::from_vec(rows, cols, data)?)?;
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (config, params) = decode(&fs::read_to_string(path)?)?;
    Model::from_params(config, params)
}

/// Loads tensors into the architecture described by `config`, ignoring the
/// stored config. Shape mismatches name the offending tensor.
pub fn load_checkpoint_as(path: &Path, config: ModelConfig) -> Result<Model> {
    let (_, params) = decode(&fs::read_to_string(path)?)?;
    Model::from_params(config, params)
}
