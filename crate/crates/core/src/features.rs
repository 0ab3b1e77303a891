//! Raw examples, the feature schema, and the embedding layer.
//!
//! An [`Example`] is turned into integer lookups once ([`SequenceIndices`],
//! [`OtherIndices`]) and those lookups are embedded on a [`Graph`]. The
//! behavior sequence becomes an `(n+1) x d_model` matrix whose rows are
//! `item ⊕ category ⊕ position-bucket` embeddings, with the target item
//! appended as the last row at time delta zero. Everything else (user,
//! item-side, context and hashed cross features) is concatenated into one
//! "other features" row.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, ParamId, Params, Var};
use crate::seed;
use crate::tensor::{xavier_uniform, Tensor};

/// Reserved id for padding and out-of-vocabulary values in every table.
pub const PAD_ID: u32 = 0;

/// Names accepted by [`Example::field_value`] besides the `other` map.
pub const TARGET_ITEM_FIELD: &str = "item_id";
pub const TARGET_CATEGORY_FIELD: &str = "category_id";
pub const USER_FIELD: &str = "user_id";

const CROSS_HASH_SEED: u64 = 0x6372_6f73_735f_6964;

/// One clicked item in a user's history, or the candidate item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BehaviorEvent {
    #[serde(rename = "item")]
    pub item_id: u32,
    #[serde(rename = "cat")]
    pub category_id: u32,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

impl BehaviorEvent {
    pub const PADDING: BehaviorEvent = BehaviorEvent {
        item_id: PAD_ID,
        category_id: PAD_ID,
        timestamp: 0,
    };

    pub fn new(item_id: u32, category_id: u32, timestamp: i64) -> Self {
        Self {
            item_id,
            category_id,
            timestamp,
        }
    }

    pub fn is_padding(&self) -> bool {
        self.item_id == PAD_ID
    }
}

/// One labeled impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: u32,
    #[serde(rename = "other")]
    pub other: BTreeMap<String, u32>,
    pub history: Vec<BehaviorEvent>,
    /// Candidate item; its timestamp is the request time.
    pub target: BehaviorEvent,
    #[serde(deserialize_with = "binary_label")]
    pub label: u8,
}

fn binary_label<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u8, D::Error> {
    let v = u8::deserialize(d)?;
    if v > 1 {
        return Err(serde::de::Error::custom(format!("label must be 0 or 1, got {v}")));
    }
    Ok(v)
}

impl Example {
    pub fn request_time(&self) -> i64 {
        self.target.timestamp
    }

    /// Categorical value of a named field. `item_id` and `category_id`
    /// refer to the target item, `user_id` to the user.
    pub fn field_value(&self, name: &str) -> Option<u32> {
        match name {
            TARGET_ITEM_FIELD => Some(self.target.item_id),
            TARGET_CATEGORY_FIELD => Some(self.target.category_id),
            USER_FIELD => Some(self.user_id),
            _ => self.other.get(name).copied(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(invalid(format!("label must be 0 or 1, got {}", self.label)));
        }
        let t = self.request_time();
        if t < 0 {
            return Err(invalid(format!("negative request time {t}")));
        }
        for e in &self.history {
            if e.timestamp < 0 {
                return Err(invalid(format!("negative click time {}", e.timestamp)));
            }
            position_delta(t, e.timestamp)?;
        }
        Ok(())
    }
}

/// Vocabulary size and embedding width of one table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub vocab: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab: usize,
    pub width: usize,
}

/// Hashed conjunction of two categorical fields, e.g. `age * item_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSpec {
    pub left: String,
    pub right: String,
    pub table_size: usize,
    pub width: usize,
}

impl CrossSpec {
    pub fn name(&self) -> String {
        format!("{}*{}", self.left, self.right)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub item: TableSpec,
    pub category: TableSpec,
    pub position_buckets: usize,
    pub position_width: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub crosses: Vec<CrossSpec>,
}

impl FeatureSchema {
    /// Width of one sequence row: item ⊕ category ⊕ position.
    pub fn d_model(&self) -> usize {
        self.item.width + self.category.width + self.position_width
    }

    /// Width of one history row without the position slice.
    pub fn d_item(&self) -> usize {
        self.item.width + self.category.width
    }

    pub fn d_other(&self) -> usize {
        self.fields.iter().map(|f| f.width).sum::<usize>()
            + self.crosses.iter().map(|c| c.width).sum::<usize>()
    }

    /// Number of rows in the embedded sequence (history slots + target).
    pub fn seq_rows(&self) -> usize {
        self.max_seq_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let tables = [("item_id", self.item), ("category_id", self.category)];
        for (name, t) in tables {
            if t.vocab < 2 || t.width == 0 {
                return Err(invalid(format!(
                    "table `{name}` needs vocab >= 2 and width > 0, got {t:?}"
                )));
            }
        }
        if self.position_buckets < 2 {
            return Err(invalid("at least two position buckets are required"));
        }
        if self.position_width == 0 {
            return Err(invalid("position width must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(invalid("max sequence length must be at least 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.fields {
            if f.vocab < 2 || f.width == 0 {
                return Err(invalid(format!(
                    "field `{}` needs vocab >= 2 and width > 0",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(invalid(format!("field `{}` declared twice", f.name)));
            }
        }
        for c in &self.crosses {
            if c.table_size < 2 || c.width == 0 {
                return Err(invalid(format!(
                    "cross `{}` needs table_size >= 2 and width > 0",
                    c.name()
                )));
            }
        }
        Ok(())
    }
}

/// `pos(v_i) = t(v_t) - t(v_i)`: seconds between the click and the request.
pub fn position_delta(t_request: i64, t_click: i64) -> Result<u64> {
    if t_click > t_request {
        return Err(Error::FutureEvent {
            request: t_request,
            click: t_click,
        });
    }
    Ok(t_request.abs_diff(t_click))
}

/// `floor(log2(delta + 1))`, clamped to `[0, buckets - 1]`.
pub fn bucketize_position(delta: u64, buckets: usize) -> usize {
    let v = delta.saturating_add(1);
    let log = (63 - v.leading_zeros()) as usize;
    log.min(buckets.saturating_sub(1))
}

/// Order-sensitive hash of a value pair into `[1, table_size)`.
pub fn hash_cross(a: u32, b: u32, table_size: usize) -> usize {
    let slots = table_size.max(2) as u64 - 1;
    1 + (seed::derive(CROSS_HASH_SEED, &[a as u64, b as u64]) % slots) as usize
}

/// A history cut or padded to exactly `n` slots, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedHistory {
    pub events: Vec<BehaviorEvent>,
    /// `true` exactly on real events.
    pub mask: Vec<bool>,
}

impl PaddedHistory {
    pub fn real_events(&self) -> impl Iterator<Item = &BehaviorEvent> {
        self.events.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(e, _)| e)
    }
}

/// Keeps the `n` most recent events and left-pads shorter histories so the
/// latest click always sits next to the target slot. Events carrying the
/// reserved padding id are treated as padding, which makes the operation
/// idempotent on its own output.
pub fn pad_truncate(history: &[BehaviorEvent], n: usize) -> PaddedHistory {
    let mut real: Vec<BehaviorEvent> = history.iter().copied().filter(|e| !e.is_padding()).collect();
    real.sort_by_key(|e| e.timestamp);
    let keep = real.len().min(n);
    let kept = &real[real.len() - keep..];
    let pad = n - keep;
    let mut events = vec![BehaviorEvent::PADDING; pad];
    events.extend_from_slice(kept);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, keep));
    PaddedHistory { events, mask }
}

/// Table rows for every sequence slot: `n` history slots then the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceIndices {
    pub items: Vec<usize>,
    pub categories: Vec<usize>,
    pub buckets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Ids that fell outside their vocabulary and were mapped to row 0.
    pub oov: usize,
}

impl SequenceIndices {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of history slots (everything but the target).
    pub fn history_len(&self) -> usize {
        self.items.len() - 1
    }

    pub fn real_history(&self) -> usize {
        self.mask[..self.history_len()].iter().filter(|&&m| m).count()
    }
}

fn lookup(id: u32, vocab: usize, oov: &mut usize) -> usize {
    let id = id as usize;
    if id < vocab {
        id
    } else {
        *oov += 1;
        0
    }
}

pub fn index_sequence(example: &Example, schema: &FeatureSchema) -> Result<SequenceIndices> {
    let n = schema.max_seq_len;
    let padded = pad_truncate(&example.history, n);
    let t_request = example.request_time();
    let mut idx = SequenceIndices {
        items: Vec::with_capacity(n + 1),
        categories: Vec::with_capacity(n + 1),
        buckets: Vec::with_capacity(n + 1),
        mask: Vec::with_capacity(n + 1),
        oov: 0,
    };
    for (e, &real) in padded.events.iter().zip(&padded.mask) {
        if real {
            let delta = position_delta(t_request, e.timestamp)?;
            idx.items.push(lookup(e.item_id, schema.item.vocab, &mut idx.oov));
            idx.categories
                .push(lookup(e.category_id, schema.category.vocab, &mut idx.oov));
            idx.buckets.push(bucketize_position(delta, schema.position_buckets));
        } else {
            idx.items.push(0);
            idx.categories.push(0);
            idx.buckets.push(0);
        }
        idx.mask.push(real);
    }
    let t = example.target;
    idx.items.push(lookup(t.item_id, schema.item.vocab, &mut idx.oov));
    idx.categories
        .push(lookup(t.category_id, schema.category.vocab, &mut idx.oov));
    idx.buckets.push(bucketize_position(0, schema.position_buckets));
    idx.mask.push(true);
    Ok(idx)
}

/// Table rows for the "other features": one per field, then one per cross.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OtherIndices {
    pub rows: Vec<usize>,
    pub oov: usize,
}

pub fn index_other(example: &Example, schema: &FeatureSchema) -> Result<OtherIndices> {
    let mut oov = 0;
    let mut rows = Vec::with_capacity(schema.fields.len() + schema.crosses.len());
    let value = |name: &str| {
        example
            .field_value(name)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    };
    for f in &schema.fields {
        rows.push(lookup(value(&f.name)?, f.vocab, &mut oov));
    }
    for c in &schema.crosses {
        rows.push(hash_cross(value(&c.left)?, value(&c.right)?, c.table_size));
    }
    Ok(OtherIndices { rows, oov })
}

/// Parameter handles of every embedding table. Row 0 of each is the
/// padding/unknown row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub category: ParamId,
    pub position: ParamId,
    pub fields: Vec<ParamId>,
    pub crosses: Vec<ParamId>,
}

impl EmbeddingTables {
    fn table_shapes(schema: &FeatureSchema) -> Vec<(String, (usize, usize))> {
        let mut shapes = vec![
            ("emb.item".to_string(), (schema.item.vocab, schema.item.width)),
            (
                "emb.category".to_string(),
                (schema.category.vocab, schema.category.width),
            ),
            (
                "emb.position".to_string(),
                (schema.position_buckets, schema.position_width),
            ),
        ];
        for f in &schema.fields {
            shapes.push((format!("emb.field.{}", f.name), (f.vocab, f.width)));
        }
        for c in &schema.crosses {
            shapes.push((format!("emb.cross.{}", c.name()), (c.table_size, c.width)));
        }
        shapes
    }

    pub fn init<R: Rng + ?Sized>(schema: &FeatureSchema, params: &mut Params, rng: &mut R) -> Result<Self> {
        schema.validate()?;
        let ids = Self::table_shapes(schema)
            .into_iter()
            .map(|(name, (r, c))| params.insert(name, xavier_uniform(r, c, rng)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(schema, ids))
    }

    /// Re-binds handles in an existing store, checking every shape.
    pub fn bind(schema: &FeatureSchema, params: &Params) -> Result<Self> {
        let ids = Self::table_shapes(schema)
            .into_iter()
            .map(|(name, shape)| expect_param(params, &name, shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(schema, ids))
    }

    fn from_ids(schema: &FeatureSchema, ids: Vec<ParamId>) -> Self {
        let nf = schema.fields.len();
        Self {
            item: ids[0],
            category: ids[1],
            position: ids[2],
            fields: ids[3..3 + nf].to_vec(),
            crosses: ids[3 + nf..].to_vec(),
        }
    }
}

pub(crate) fn expect_param(params: &Params, name: &str, shape: (usize, usize)) -> Result<ParamId> {
    let id = params.id(name)?;
    let found = params.tensor(id).shape();
    if found != shape {
        return Err(Error::TensorShape {
            name: name.to_string(),
            found,
            expected: shape,
        });
    }
    Ok(id)
}

/// Embeds the sequence slots in `slots` as `item ⊕ category [⊕ position]`.
pub fn embed_slots(
    g: &mut Graph<'_>,
    tables: &EmbeddingTables,
    idx: &SequenceIndices,
    slots: std::ops::Range<usize>,
    with_position: bool,
) -> Result<Var> {
    let item = g.param(tables.item);
    let cat = g.param(tables.category);
    let mut parts = vec![
        g.gather(item, &idx.items[slots.clone()])?,
        g.gather(cat, &idx.categories[slots.clone()])?,
    ];
    if with_position {
        let pos = g.param(tables.position);
        parts.push(g.gather(pos, &idx.buckets[slots])?);
    }
    g.concat_cols(&parts)
}

/// The full `(n+1) x d_model` sequence matrix.
pub fn embed_sequence_graph(g: &mut Graph<'_>, tables: &EmbeddingTables, idx: &SequenceIndices) -> Result<Var> {
    embed_slots(g, tables, idx, 0..idx.len(), true)
}

/// The `1 x d_other` row of field and cross embeddings.
pub fn embed_other_graph(g: &mut Graph<'_>, tables: &EmbeddingTables, idx: &OtherIndices) -> Result<Var> {
    let mut parts = Vec::with_capacity(idx.rows.len());
    for (&table, &row) in tables.fields.iter().chain(&tables.crosses).zip(&idx.rows) {
        let t = g.param(table);
        parts.push(g.gather(t, &[row])?);
    }
    if parts.is_empty() {
        return Ok(g.input(Tensor::zeros(1, 0)));
    }
    g.concat_cols(&parts)
}

/// Embedded sequence outside of any training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding {
    pub matrix: Tensor,
    pub mask: Vec<bool>,
    pub oov: usize,
}

pub fn embed_sequence(
    example: &Example,
    params: &Params,
    tables: &EmbeddingTables,
    schema: &FeatureSchema,
) -> Result<SequenceEmbedding> {
    let idx = index_sequence(example, schema)?;
    let mut g = Graph::new(params);
    let e = embed_sequence_graph(&mut g, tables, &idx)?;
    Ok(SequenceEmbedding {
        matrix: g.value(e).clone(),
        mask: idx.mask,
        oov: idx.oov,
    })
}

pub fn embed_other_features(
    example: &Example,
    params: &Params,
    tables: &EmbeddingTables,
    schema: &FeatureSchema,
) -> Result<Tensor> {
    let idx = index_other(example, schema)?;
    let mut g = Graph::new(params);
    let v = embed_other_graph(&mut g, tables, &idx)?;
    Ok(g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(item: u32, cat: u32, ts: i64) -> BehaviorEvent {
        BehaviorEvent::new(item, cat, ts)
    }

    pub(crate) fn small_schema() -> FeatureSchema {
        FeatureSchema {
            item: TableSpec { vocab: 20, width: 4 },
            category: TableSpec { vocab: 6, width: 2 },
            position_buckets: 12,
            position_width: 2,
            max_seq_len: 5,
            fields: vec![
                FieldSpec {
                    name: "gender".into(),
                    vocab: 3,
                    width: 4,
                },
                FieldSpec {
                    name: "city".into(),
                    vocab: 10,
                    width: 4,
                },
                FieldSpec {
                    name: "age".into(),
                    vocab: 9,
                    width: 8,
                },
            ],
            crosses: vec![],
        }
    }

    fn example(history: Vec<BehaviorEvent>) -> Example {
        let mut other = BTreeMap::new();
        other.insert("gender".to_string(), 1);
        other.insert("city".to_string(), 4);
        other.insert("age".to_string(), 3);
        Example {
            user_id: 7,
            other,
            history,
            target: ev(9, 3, 1000),
            label: 1,
        }
    }

    #[test]
    fn position_delta_cases() {
        assert_eq!(position_delta(100, 100).unwrap(), 0);
        assert_eq!(position_delta(1000, 400).unwrap(), 600);
        assert_eq!(position_delta(5, 0).unwrap(), 5);
        assert!(matches!(
            position_delta(5, 6),
            Err(Error::FutureEvent { request: 5, click: 6 })
        ));
    }

    #[test]
    fn bucket_cases() {
        assert_eq!(bucketize_position(0, 12), 0);
        assert_eq!(bucketize_position(1, 12), 1);
        assert_eq!(bucketize_position(600, 12), 9);
        assert_eq!(bucketize_position(1 << 40, 12), 11);
        assert_eq!(bucketize_position(u64::MAX, 12), 11);
        // brute force against the float definition
        for d in 0..5000u64 {
            let expect = ((d as f64 + 1.0).log2().floor() as usize).min(11);
            assert_eq!(bucketize_position(d, 12), expect, "delta {d}");
        }
    }

    #[test]
    fn buckets_are_monotone() {
        let mut last = 0;
        for d in (0..1_000_000u64).step_by(97) {
            let b = bucketize_position(d, 12);
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn cross_hash_is_deterministic_and_order_sensitive() {
        assert_eq!(hash_cross(3, 17, 1000), hash_cross(3, 17, 1000));
        let differs = (0..50u32).filter(|&i| hash_cross(i, i + 1, 1 << 20) != hash_cross(i + 1, i, 1 << 20)).count();
        assert!(differs >= 49);
        for a in 0..200 {
            let h = hash_cross(a, a * 7, 2);
            assert_eq!(h, 1);
            let h = hash_cross(a, 3, 10);
            assert!((1..10).contains(&h));
        }
    }

    #[test]
    fn cross_hash_collisions_match_birthday_bound() {
        // Occupancy oracle: throwing n balls into m bins leaves E[empty] =
        // m(1-1/m)^n with the classical variance formula.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table = 1000usize;
        let m = (table - 1) as f64;
        let n = 10_000usize;
        let mut pairs = std::collections::HashSet::new();
        while pairs.len() < n {
            pairs.insert((rng.random::<u32>(), rng.random::<u32>()));
        }
        let mut seen = vec![false; table];
        for &(a, b) in &pairs {
            seen[hash_cross(a, b, table)] = true;
        }
        let occupied = seen.iter().filter(|&&s| s).count() as f64;
        let collisions = n as f64 - occupied;
        let nf = n as f64;
        let empty_mean = m * (1.0 - 1.0 / m).powf(nf);
        let empty_var = m * (m - 1.0) * (1.0 - 2.0 / m).powf(nf) + empty_mean - empty_mean * empty_mean;
        let expected_collisions = nf - (m - empty_mean);
        assert!(
            (collisions - expected_collisions).abs() <= 3.0 * empty_var.sqrt() + 1e-9,
            "collisions {collisions}, expected {expected_collisions} ± {}",
            3.0 * empty_var.sqrt()
        );
    }

    #[test]
    fn pad_truncate_cases() {
        let h3 = vec![ev(1, 1, 10), ev(2, 1, 20), ev(3, 2, 30)];
        let p = pad_truncate(&h3, 5);
        assert_eq!(p.mask, vec![false, false, true, true, true]);
        assert_eq!(&p.events[2..], &h3[..]);
        assert!(p.events[..2].iter().all(BehaviorEvent::is_padding));

        let h7: Vec<_> = (1..=7).map(|i| ev(i, 1, i as i64 * 10)).collect();
        let p = pad_truncate(&h7, 5);
        assert_eq!(p.mask, vec![true; 5]);
        assert_eq!(p.events, h7[2..].to_vec());

        let h5: Vec<_> = (1..=5).map(|i| ev(i, 1, i as i64)).collect();
        let p = pad_truncate(&h5, 5);
        assert_eq!(p.events, h5);
        assert_eq!(p.mask, vec![true; 5]);

        let p = pad_truncate(&[], 3);
        assert_eq!(p.mask, vec![false; 3]);
    }

    #[test]
    fn pad_truncate_keeps_latest_even_if_unsorted() {
        let h = vec![ev(5, 1, 50), ev(1, 1, 10), ev(9, 1, 90), ev(3, 1, 30)];
        let p = pad_truncate(&h, 2);
        assert_eq!(p.events, vec![ev(5, 1, 50), ev(9, 1, 90)]);
    }

    #[test]
    fn sequence_shape_and_padding_rows() {
        let schema = small_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let tables = EmbeddingTables::init(&schema, &mut params, &mut rng).unwrap();
        let ex = example(vec![ev(4, 2, 400), ev(4, 2, 400), ev(5, 1, 999)]);
        let se = embed_sequence(&ex, &params, &tables, &schema).unwrap();
        assert_eq!(se.matrix.shape(), (6, schema.d_model()));
        assert_eq!(se.mask, vec![false, false, true, true, true, true]);
        // identical (item, category, bucket) produce identical rows
        assert_eq!(se.matrix.row(2), se.matrix.row(3));
        // padding rows are the row-0 concatenation
        let pad: Vec<f64> = [
            params.tensor(tables.item).row(0),
            params.tensor(tables.category).row(0),
            params.tensor(tables.position).row(0),
        ]
        .concat();
        assert_eq!(se.matrix.row(0), &pad[..]);
        assert_eq!(se.matrix.row(1), &pad[..]);

        let empty = embed_sequence(&example(vec![]), &params, &tables, &schema).unwrap();
        assert_eq!(empty.mask, vec![false, false, false, false, false, true]);
    }

    #[test]
    fn out_of_vocabulary_ids_map_to_row_zero() {
        let schema = small_schema();
        let ex = example(vec![ev(500, 2, 10), ev(3, 99, 20)]);
        let idx = index_sequence(&ex, &schema).unwrap();
        assert_eq!(idx.oov, 2);
        assert_eq!(idx.items[3], 0);
        assert_eq!(idx.categories[4], 0);
        assert!(idx.mask[3] && idx.mask[4]);
    }

    #[test]
    fn future_click_is_rejected() {
        let schema = small_schema();
        let ex = example(vec![ev(1, 1, 5000)]);
        assert!(matches!(index_sequence(&ex, &schema), Err(Error::FutureEvent { .. })));
    }

    #[test]
    fn other_features_shape_and_locality() {
        let schema = small_schema();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        let tables = EmbeddingTables::init(&schema, &mut params, &mut rng).unwrap();
        let ex = example(vec![]);
        let a = embed_other_features(&ex, &params, &tables, &schema).unwrap();
        assert_eq!(a.shape(), (1, 16));
        assert_eq!(a, embed_other_features(&ex.clone(), &params, &tables, &schema).unwrap());

        let mut ex2 = ex.clone();
        ex2.other.insert("city".into(), 7);
        let b = embed_other_features(&ex2, &params, &tables, &schema).unwrap();
        // city occupies columns 4..8
        for c in 0..16 {
            let changed = a.get(0, c) != b.get(0, c);
            assert_eq!(changed, (4..8).contains(&c), "column {c}");
        }

        let mut missing = ex.clone();
        missing.other.remove("age");
        let err = embed_other_features(&missing, &params, &tables, &schema).unwrap_err();
        assert!(matches!(err, Error::MissingField(ref f) if f == "age"));
    }

    #[test]
    fn cross_features_use_target_fields() {
        let mut schema = small_schema();
        schema.crosses.push(CrossSpec {
            left: "age".into(),
            right: "item_id".into(),
            table_size: 50,
            width: 3,
        });
        let ex = example(vec![]);
        let idx = index_other(&ex, &schema).unwrap();
        assert_eq!(idx.rows.len(), 4);
        assert_eq!(idx.rows[3], hash_cross(3, 9, 50));
        assert_eq!(schema.d_other(), 19);
    }

    #[test]
    fn label_must_be_binary() {
        let line = r#"{"user_id":1,"other":{},"history":[],"target":{"item":1,"cat":1,"ts":5},"label":2}"#;
        assert!(serde_json::from_str::<Example>(line).is_err());
    }
}
