//! Full CTR predictors sharing one embedding layer and one MLP head.
//!
//! | kind       | MLP input                                                        |
//! |------------|------------------------------------------------------------------|
//! | `Bst`      | flattened transformer output (padding rows zeroed) ⊕ other       |
//! | `Wdl`      | other ⊕ target embedding                                         |
//! | `WdlSeq`   | mean history (item ⊕ category) ⊕ target ⊕ other                  |
//! | `DinLite`  | target-attention pooled history ⊕ target ⊕ other                 |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{
    embed_other_graph, expect_param, index_other, index_sequence, EmbeddingTables, Example,
    FeatureSchema, OtherIndices, SequenceIndices,
};
use crate::graph::{Graph, ParamId, Params, Var};
use crate::tensor::{xavier_uniform, Mode, Tensor};
use crate::transformer::{stack_blocks, BlockConfig, BlockParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bst,
    Wdl,
    WdlSeq,
    DinLite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Wdl, ModelKind::WdlSeq, ModelKind::DinLite, ModelKind::Bst];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bst => "bst",
            ModelKind::Wdl => "wdl",
            ModelKind::WdlSeq => "wdl_seq",
            ModelKind::DinLite => "din_lite",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self, blocks: usize) -> String {
        match self {
            ModelKind::Bst => format!("BST(b={blocks})"),
            ModelKind::Wdl => "WDL".to_string(),
            ModelKind::WdlSeq => "WDL(+Seq)".to_string(),
            ModelKind::DinLite => "DIN".to_string(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bst" => Ok(ModelKind::Bst),
            "wdl" => Ok(ModelKind::Wdl),
            "wdl_seq" | "wdl+seq" | "wdl(+seq)" => Ok(ModelKind::WdlSeq),
            "din_lite" | "din" => Ok(ModelKind::DinLite),
            _ => Err(Error::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub schema: FeatureSchema,
    pub block: BlockConfig,
    pub mlp_hidden: [usize; 3],
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, schema: FeatureSchema, heads: usize) -> Self {
        let block = BlockConfig::new(schema.d_model(), heads);
        Self {
            kind,
            schema,
            block,
            mlp_hidden: [128, 64, 32],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.block.validate()?;
        if self.block.d_model != self.schema.d_model() {
            return Err(invalid(format!(
                "block d_model {} differs from item+category+position widths {}",
                self.block.d_model,
                self.schema.d_model()
            )));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(invalid("MLP hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn mlp_input_width(&self) -> usize {
        let s = &self.schema;
        match self.kind {
            ModelKind::Bst => s.seq_rows() * s.d_model() + s.d_other(),
            ModelKind::Wdl => s.d_other() + s.d_model(),
            ModelKind::WdlSeq => s.d_item() + s.d_model() + s.d_other(),
            ModelKind::DinLite => 2 * s.d_model() + s.d_other(),
        }
    }
}

/// Pre-computed table lookups for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub seq: SequenceIndices,
    pub other: OtherIndices,
    pub label: f64,
}

pub fn prepare(example: &Example, schema: &FeatureSchema) -> Result<Prepared> {
    Ok(Prepared {
        seq: index_sequence(example, schema)?,
        other: index_other(example, schema)?,
        label: example.label as f64,
    })
}

pub fn prepare_all(examples: &[Example], schema: &FeatureSchema) -> Result<Vec<Prepared>> {
    examples.par_iter().map(|e| prepare(e, schema)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub hidden: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

fn mlp_shapes(input: usize, hidden: &[usize; 3]) -> Vec<(String, (usize, usize))> {
    let mut shapes = Vec::new();
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        shapes.push((format!("mlp.l{i}.w"), (width, h)));
        shapes.push((format!("mlp.l{i}.b"), (1, h)));
        width = h;
    }
    shapes.push(("mlp.out.w".to_string(), (width, 1)));
    shapes.push(("mlp.out.b".to_string(), (1, 1)));
    shapes
}

impl MlpParams {
    fn from_ids(ids: &[ParamId]) -> Self {
        Self {
            hidden: ids[..6].chunks(2).map(|c| (c[0], c[1])).collect(),
            out_w: ids[6],
            out_b: ids[7],
        }
    }
}

const DIN_PARAM: &str = "din.bilinear";

/// Parameters plus the handles each forward pass needs.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub tables: EmbeddingTables,
    pub blocks: Vec<BlockParams>,
    pub din: Option<ParamId>,
    pub mlp: MlpParams,
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        let tables = EmbeddingTables::init(&config.schema, &mut params, &mut rng)?;
        let mut blocks = Vec::new();
        if config.kind == ModelKind::Bst {
            for b in 0..config.block.blocks {
                blocks.push(BlockParams::init(&format!("block{b}"), &config.block, &mut params, &mut rng)?);
            }
        }
        let din = if config.kind == ModelKind::DinLite {
            let d = config.schema.d_model();
            Some(params.insert(DIN_PARAM, xavier_uniform(d, d, &mut rng))?)
        } else {
            None
        };
        let mlp_ids = mlp_shapes(config.mlp_input_width(), &config.mlp_hidden)
            .into_iter()
            .map(|(name, (r, c))| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(r, c)
                } else {
                    xavier_uniform(r, c, &mut rng)
                };
                params.insert(name, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            tables,
            blocks,
            din,
            mlp: MlpParams::from_ids(&mlp_ids),
        })
    }

    /// Wraps an existing parameter store, checking that it holds exactly
    /// the tensors `config` calls for.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let tables = EmbeddingTables::bind(&config.schema, &params)?;
        let mut blocks = Vec::new();
        if config.kind == ModelKind::Bst {
            for b in 0..config.block.blocks {
                blocks.push(BlockParams::bind(&format!("block{b}"), &config.block, &params)?);
            }
        }
        let din = if config.kind == ModelKind::DinLite {
            let d = config.schema.d_model();
            Some(expect_param(&params, DIN_PARAM, (d, d))?)
        } else {
            None
        };
        let mlp_ids = mlp_shapes(config.mlp_input_width(), &config.mlp_hidden)
            .into_iter()
            .map(|(name, shape)| expect_param(&params, &name, shape))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            config,
            params,
            tables,
            blocks,
            din,
            mlp: MlpParams::from_ids(&mlp_ids),
        };
        let fresh = Model::init(model.config.clone())?;
        if fresh.params.len() != model.params.len() {
            let extra = model
                .params
                .iter()
                .map(|(n, _)| n)
                .find(|n| fresh.params.get(n).is_none())
                .unwrap_or("?");
            return Err(invalid(format!("unexpected tensor `{extra}` for this model config")));
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn prepare(&self, example: &Example) -> Result<Prepared> {
        prepare(example, &self.config.schema)
    }

    /// Click probability as a `1 x 1` node on `g`, which must be built over
    /// `self.params`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        p: &Prepared,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match self.config.kind {
            ModelKind::Bst => bst_forward(self, g, p, mode, rng),
            ModelKind::Wdl => wdl_forward(self, g, p, mode, rng),
            ModelKind::WdlSeq => wdl_seq_forward(self, g, p, mode, rng),
            ModelKind::DinLite => din_lite_forward(self, g, p, mode, rng),
        }
    }

    /// Eval-mode probability for already-indexed features.
    pub fn predict_prepared(&self, p: &Prepared) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        // Eval mode never draws from the stream.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, p, Mode::Eval, &mut rng)?;
        Ok(g.value(out).get(0, 0))
    }

    /// Eval-mode click probability.
    pub fn predict(&self, example: &Example) -> Result<f64> {
        self.predict_prepared(&self.prepare(example)?)
    }

    /// Order-preserving batch prediction.
    pub fn predict_batch(&self, examples: &[Example]) -> Result<Vec<f64>> {
        examples.par_iter().map(|e| self.predict(e)).collect()
    }

    pub fn predict_batch_prepared(&self, prepared: &[Prepared]) -> Result<Vec<f64>> {
        prepared.par_iter().map(|p| self.predict_prepared(p)).collect()
    }
}

/// Three LeakyReLU hidden layers, one logit, sigmoid.
pub fn mlp_head<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    z: Var,
    mlp: &MlpParams,
    block: &BlockConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let mut h = z;
    for &(w, b) in &mlp.hidden {
        let (w, b) = (g.param(w), g.param(b));
        h = g.matmul(h, w)?;
        h = g.add_row(h, b)?;
        h = g.leaky_relu(h, block.leaky_slope)?;
        h = g.dropout(h, block.dropout, mode, rng)?;
    }
    let (w, b) = (g.param(mlp.out_w), g.param(mlp.out_b));
    let logit = g.matmul(h, w)?;
    let logit = g.add_row(logit, b)?;
    Ok(g.sigmoid(logit))
}

/// Embeds the listed sequence slots, in the given order.
fn embed_selected(
    g: &mut Graph<'_>,
    tables: &EmbeddingTables,
    seq: &SequenceIndices,
    slots: &[usize],
    with_position: bool,
) -> Result<Var> {
    let pick = |v: &[usize]| slots.iter().map(|&s| v[s]).collect::<Vec<_>>();
    let item = g.param(tables.item);
    let cat = g.param(tables.category);
    let mut parts = vec![g.gather(item, &pick(&seq.items))?, g.gather(cat, &pick(&seq.categories))?];
    if with_position {
        let pos = g.param(tables.position);
        parts.push(g.gather(pos, &pick(&seq.buckets))?);
    }
    g.concat_cols(&parts)
}

fn target_row(g: &mut Graph<'_>, tables: &EmbeddingTables, seq: &SequenceIndices) -> Result<Var> {
    embed_selected(g, tables, seq, &[seq.history_len()], true)
}

/// Real history slots in a canonical content order, so that pooled
/// summaries do not depend on the order events were listed in.
fn canonical_history(seq: &SequenceIndices, with_position: bool) -> Vec<usize> {
    let mut slots: Vec<usize> = (0..seq.history_len()).filter(|&s| seq.mask[s]).collect();
    slots.sort_by_key(|&s| {
        let bucket = if with_position { seq.buckets[s] } else { 0 };
        (seq.items[s], seq.categories[s], bucket)
    });
    slots
}

pub fn bst_forward<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph<'_>,
    p: &Prepared,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let e = crate::features::embed_sequence_graph(g, &model.tables, &p.seq)?;
    let o = stack_blocks(g, e, &model.blocks, &model.config.block, &p.seq.mask, mode, rng)?;
    // padded query rows never reach the head
    let keep: Vec<f64> = p.seq.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let o = g.scale_rows(o, &keep)?;
    let flat = g.flatten(o);
    let other = embed_other_graph(g, &model.tables, &p.other)?;
    let z = g.concat_cols(&[flat, other])?;
    mlp_head(g, z, &model.mlp, &model.config.block, mode, rng)
}

pub fn wdl_forward<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph<'_>,
    p: &Prepared,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let other = embed_other_graph(g, &model.tables, &p.other)?;
    let target = target_row(g, &model.tables, &p.seq)?;
    let z = g.concat_cols(&[other, target])?;
    mlp_head(g, z, &model.mlp, &model.config.block, mode, rng)
}

/// Mean of the real history rows (item ⊕ category), zeros if none.
pub fn mean_history(g: &mut Graph<'_>, tables: &EmbeddingTables, schema: &FeatureSchema, seq: &SequenceIndices) -> Result<Var> {
    let slots = canonical_history(seq, false);
    if slots.is_empty() {
        return Ok(g.input(Tensor::zeros(1, schema.d_item())));
    }
    let h = embed_selected(g, tables, seq, &slots, false)?;
    let w = g.input(Tensor::filled(1, slots.len(), 1.0 / slots.len() as f64));
    g.matmul(w, h)
}

pub fn wdl_seq_forward<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph<'_>,
    p: &Prepared,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let mean = mean_history(g, &model.tables, &model.config.schema, &p.seq)?;
    let target = target_row(g, &model.tables, &p.seq)?;
    let other = embed_other_graph(g, &model.tables, &p.other)?;
    let z = g.concat_cols(&[mean, target, other])?;
    mlp_head(g, z, &model.mlp, &model.config.block, mode, rng)
}

/// Target-attention pooling: weights `softmax(e_i A e_t^T)` over real
/// history rows. Returns `(pooled, weights)`; `weights` is `None` for an
/// empty history, in which case `pooled` is a zero row.
pub fn din_pool(model: &Model, g: &mut Graph<'_>, seq: &SequenceIndices, target: Var) -> Result<(Var, Option<Var>)> {
    let a = model
        .din
        .ok_or_else(|| invalid("model has no target-attention matrix"))?;
    let slots = canonical_history(seq, true);
    if slots.is_empty() {
        let zeros = g.input(Tensor::zeros(1, model.config.schema.d_model()));
        return Ok((zeros, None));
    }
    let h = embed_selected(g, &model.tables, seq, &slots, true)?;
    let a = g.param(a);
    let ha = g.matmul(h, a)?;
    let tt = g.transpose(target);
    let scores = g.matmul(ha, tt)?;
    let scores = g.transpose(scores);
    let w = g.softmax_rows(scores, None)?;
    Ok((g.matmul(w, h)?, Some(w)))
}

pub fn din_lite_forward<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph<'_>,
    p: &Prepared,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let target = target_row(g, &model.tables, &p.seq)?;
    let (pooled, _) = din_pool(model, g, &p.seq, target)?;
    let other = embed_other_graph(g, &model.tables, &p.other)?;
    let z = g.concat_cols(&[pooled, target, other])?;
    mlp_head(g, z, &model.mlp, &model.config.block, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert_eq!("WDL+Seq".parse::<ModelKind>().unwrap(), ModelKind::WdlSeq);
        assert!(matches!("gru4rec".parse::<ModelKind>(), Err(Error::UnknownKind(_))));
        assert_eq!(ModelKind::Bst.label(2), "BST(b=2)");
    }
}
