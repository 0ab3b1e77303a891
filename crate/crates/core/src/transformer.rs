//! Multi-head self-attention and the post-norm residual block.
//!
//! ```text
//! head_i = softmax(E Wq_i (E Wk_i)^T / sqrt(d_head)) E Wv_i
//! S      = Concat(head_1..head_h) Wh
//! S'     = LayerNorm(X + Dropout(S))
//! F      = LayerNorm(S' + Dropout(LeakyReLU(S' W1 + b1) W2 + b2))
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::expect_param;
use crate::graph::{Graph, ParamId, Params, Var};
use crate::tensor::{xavier_uniform, Mode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub eps: f64,
    /// Number of stacked blocks.
    pub blocks: usize,
}

impl BlockConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            d_ff: 4 * d_model,
            dropout: 0.1,
            leaky_slope: 0.01,
            eps: 1e-8,
            blocks: 1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(invalid("d_ff must be positive"));
        }
        if self.blocks == 0 {
            return Err(invalid("at least one block is required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(invalid(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        if self.eps <= 0.0 {
            return Err(invalid("layer-norm eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Parameter handles of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub wh: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

enum ParamInit {
    Xavier,
    Zeros,
    Ones,
}

fn block_shapes(prefix: &str, cfg: &BlockConfig) -> Vec<(String, (usize, usize), ParamInit)> {
    let (d, dh, dff) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
    let mut shapes = Vec::new();
    for h in 0..cfg.heads {
        for w in ["wq", "wk", "wv"] {
            shapes.push((format!("{prefix}.head{h}.{w}"), (d, dh), ParamInit::Xavier));
        }
    }
    shapes.push((format!("{prefix}.wh"), (cfg.heads * dh, d), ParamInit::Xavier));
    shapes.push((format!("{prefix}.ffn.w1"), (d, dff), ParamInit::Xavier));
    shapes.push((format!("{prefix}.ffn.b1"), (1, dff), ParamInit::Zeros));
    shapes.push((format!("{prefix}.ffn.w2"), (dff, d), ParamInit::Xavier));
    shapes.push((format!("{prefix}.ffn.b2"), (1, d), ParamInit::Zeros));
    shapes.push((format!("{prefix}.ln1.gain"), (1, d), ParamInit::Ones));
    shapes.push((format!("{prefix}.ln1.bias"), (1, d), ParamInit::Zeros));
    shapes.push((format!("{prefix}.ln2.gain"), (1, d), ParamInit::Ones));
    shapes.push((format!("{prefix}.ln2.bias"), (1, d), ParamInit::Zeros));
    shapes
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(prefix: &str, cfg: &BlockConfig, params: &mut Params, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ids = block_shapes(prefix, cfg)
            .into_iter()
            .map(|(name, (r, c), init)| {
                let t = match init {
                    ParamInit::Xavier => xavier_uniform(r, c, rng),
                    ParamInit::Zeros => Tensor::zeros(r, c),
                    ParamInit::Ones => Tensor::filled(r, c, 1.0),
                };
                params.insert(name, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(cfg, ids))
    }

    pub fn bind(prefix: &str, cfg: &BlockConfig, params: &Params) -> Result<Self> {
        cfg.validate()?;
        let ids = block_shapes(prefix, cfg)
            .into_iter()
            .map(|(name, shape, _)| expect_param(params, &name, shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(cfg, ids))
    }

    fn from_ids(cfg: &BlockConfig, ids: Vec<ParamId>) -> Self {
        let heads = ids[..3 * cfg.heads]
            .chunks(3)
            .map(|c| HeadParams {
                wq: c[0],
                wk: c[1],
                wv: c[2],
            })
            .collect();
        let rest = &ids[3 * cfg.heads..];
        Self {
            heads,
            wh: rest[0],
            w1: rest[1],
            b1: rest[2],
            w2: rest[3],
            b2: rest[4],
            ln1_gain: rest[5],
            ln1_bias: rest[6],
            ln2_gain: rest[7],
            ln2_bias: rest[8],
        }
    }
}

/// Row-attention weights `softmax(Q K^T / sqrt(d_head))` with masked key
/// columns excluded. `key_mask[j]` is `true` for live positions.
pub fn attention_weights(g: &mut Graph<'_>, q: Var, k: Var, key_mask: &[bool]) -> Result<Var> {
    let (lq, dh) = g.value(q).shape();
    let lk = g.value(k).rows();
    if g.value(k).cols() != dh || key_mask.len() != lk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: g.value(q).shape(),
            right: g.value(k).shape(),
        });
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(invalid("attention needs at least one unmasked position"));
    }
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let full_mask: Vec<bool> = (0..lq).flat_map(|_| key_mask.iter().copied()).collect();
    g.softmax_rows(scores, Some(&full_mask))
}

pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
    let w = attention_weights(g, q, k, key_mask)?;
    g.matmul(w, v)
}

/// `Concat(head_1..head_h) Wh` over the rows of `e`.
pub fn multi_head(g: &mut Graph<'_>, e: Var, block: &BlockParams, key_mask: &[bool]) -> Result<Var> {
    let mut heads = Vec::with_capacity(block.heads.len());
    for h in &block.heads {
        let (wq, wk, wv) = (g.param(h.wq), g.param(h.wk), g.param(h.wv));
        let q = g.matmul(e, wq)?;
        let k = g.matmul(e, wk)?;
        let v = g.matmul(e, wv)?;
        heads.push(scaled_dot_attention(g, q, k, v, key_mask)?);
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wh = g.param(block.wh);
    g.matmul(concat, wh)
}

pub fn transformer_block<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    x: Var,
    block: &BlockParams,
    cfg: &BlockConfig,
    key_mask: &[bool],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let s = multi_head(g, x, block, key_mask)?;
    let s = g.dropout(s, cfg.dropout, mode, rng)?;
    let res = g.add(x, s)?;
    let (gain, bias) = (g.param(block.ln1_gain), g.param(block.ln1_bias));
    let s1 = g.layer_norm(res, gain, bias, cfg.eps)?;

    let (w1, b1, w2, b2) = (g.param(block.w1), g.param(block.b1), g.param(block.w2), g.param(block.b2));
    let h = g.matmul(s1, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.leaky_relu(h, cfg.leaky_slope)?;
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    let h = g.dropout(h, cfg.dropout, mode, rng)?;
    let res = g.add(s1, h)?;
    let (gain, bias) = (g.param(block.ln2_gain), g.param(block.ln2_bias));
    g.layer_norm(res, gain, bias, cfg.eps)
}

pub fn stack_blocks<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    e: Var,
    blocks: &[BlockParams],
    cfg: &BlockConfig,
    key_mask: &[bool],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(invalid("stack_blocks needs at least one block"));
    }
    blocks
        .iter()
        .try_fold(e, |x, b| transformer_block(g, x, b, cfg, key_mask, mode, rng))
}
