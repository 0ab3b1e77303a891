//! Seeded generator of behavior-sequence CTR data, and JSONL I/O.
//!
//! Categories follow a Markov chain. A population-level transition matrix
//! is drawn with Dirichlet(α) rows and each user blends it with a private
//! Dirichlet(α) chain. A history is a walk on the user's chain with
//! increasing timestamps. The candidate's category is either the chain's
//! next step from the latest click ("in pattern") or the next step from a
//! uniformly chosen category. Its click
//! probability is
//!
//! ```text
//! q = sigmoid(β · (Σ_k w_k · P_u[c_(last-k) → c_target] - τ)),   w_k ∝ exp(-λ k)
//! ```
//!
//! so recent clicks dominate and the signal depends on order, not only on
//! the bag of categories. Observed labels are Bernoulli(q) flipped with
//! probability η. Train and test users are disjoint.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{BehaviorEvent, CrossSpec, Example, FeatureSchema, FieldSpec, TableSpec};
use crate::seed;
use crate::tensor::sigmoid;

pub const GENDERS: usize = 2;
pub const AGE_BANDS: usize = 8;
pub const MATCH_TYPES: usize = 4;
pub const DISPLAY_POSITIONS: usize = 10;
pub const PAGES: usize = 5;

const WORLD_STREAM: u64 = 1;
const USER_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub impressions_per_user: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_cities: usize,
    pub n_shops: usize,
    pub n_tags: usize,
    pub min_history: usize,
    pub max_history: usize,
    /// Upper end of the log-uniform gap between consecutive clicks, seconds.
    pub max_gap_secs: u64,
    /// Dirichlet concentration of transition rows (α).
    pub alpha: f64,
    /// Weight of the user's private chain against the population chain.
    pub personalization: f64,
    /// Recency decay λ of the pattern-match weights.
    pub recency: f64,
    /// Logit slope β.
    pub signal: f64,
    /// Logit offset τ.
    pub threshold: f64,
    /// Share of candidates continuing the history rather than a random category.
    pub in_pattern_rate: f64,
    /// Draw other candidates' categories uniformly instead of as a chain
    /// step from a random category.
    pub uniform_decoys: bool,
    /// Label flip probability η.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train_size: 50_000,
            test_size: 10_000,
            impressions_per_user: 5,
            n_items: 2_000,
            n_categories: 20,
            n_cities: 50,
            n_shops: 200,
            n_tags: 100,
            min_history: 1,
            max_history: 12,
            max_gap_secs: 1024,
            alpha: 0.1,
            personalization: 0.2,
            recency: 0.7,
            signal: 20.0,
            threshold: 0.15,
            in_pattern_rate: 0.5,
            uniform_decoys: false,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("n_cities", self.n_cities),
            ("n_shops", self.n_shops),
            ("n_tags", self.n_tags),
            ("max_gap_secs", self.max_gap_secs as usize),
        ];
        for (name, v) in counts {
            if v < 2 {
                return Err(invalid(format!("{name} must be at least 2, got {v}")));
            }
        }
        if self.n_items < self.n_categories {
            return Err(invalid("every category needs at least one item: n_items < n_categories"));
        }
        if self.train_size == 0 || self.test_size == 0 || self.impressions_per_user == 0 {
            return Err(invalid("train_size, test_size and impressions_per_user must be positive"));
        }
        if self.min_history > self.max_history {
            return Err(invalid(format!(
                "min_history {} exceeds max_history {}",
                self.min_history, self.max_history
            )));
        }
        if self.max_history == 0 {
            return Err(invalid("max_history must be at least 1"));
        }
        if !(self.noise >= 0.0 && self.noise < 0.5) {
            return Err(invalid(format!("label noise {} outside [0, 0.5)", self.noise)));
        }
        if !(self.recency > 0.0) {
            return Err(invalid(format!("recency weight {} must be positive", self.recency)));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid(format!("alpha {} must be positive", self.alpha)));
        }
        for (name, v) in [
            ("personalization", self.personalization),
            ("in_pattern_rate", self.in_pattern_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !self.signal.is_finite() || !self.threshold.is_finite() {
            return Err(invalid("signal and threshold must be finite"));
        }
        Ok(())
    }

    pub fn train_users(&self) -> usize {
        self.train_size.div_ceil(self.impressions_per_user)
    }

    pub fn test_users(&self) -> usize {
        self.test_size.div_ceil(self.impressions_per_user)
    }
}

/// Embedding layout used to derive a [`FeatureSchema`] that covers every
/// id a [`GenConfig`] can emit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaLayout {
    pub item_width: usize,
    pub category_width: usize,
    pub position_width: usize,
    pub position_buckets: usize,
    pub max_seq_len: usize,
    pub field_width: usize,
    pub cross_width: usize,
    pub cross_table_size: usize,
}

impl Default for SchemaLayout {
    fn default() -> Self {
        Self {
            item_width: 16,
            category_width: 8,
            position_width: 8,
            position_buckets: 12,
            max_seq_len: 20,
            field_width: 4,
            cross_width: 8,
            cross_table_size: 1000,
        }
    }
}

/// Field names and vocabularies emitted by the generator.
pub fn generated_fields(gen: &GenConfig) -> Vec<(&'static str, usize)> {
    vec![
        ("gender", GENDERS),
        ("age", AGE_BANDS),
        ("city", gen.n_cities),
        ("shop_id", gen.n_shops),
        ("tag", gen.n_tags),
        ("match_type", MATCH_TYPES),
        ("display_position", DISPLAY_POSITIONS),
        ("page_no", PAGES),
    ]
}

pub fn schema_for(gen: &GenConfig, layout: &SchemaLayout) -> FeatureSchema {
    let fields = generated_fields(gen)
        .into_iter()
        .map(|(name, n)| FieldSpec {
            name: name.to_string(),
            vocab: n + 1,
            width: layout.field_width,
        })
        .collect();
    let crosses = [("age", "item_id"), ("gender", "category_id")]
        .into_iter()
        .map(|(l, r)| CrossSpec {
            left: l.to_string(),
            right: r.to_string(),
            table_size: layout.cross_table_size,
            width: layout.cross_width,
        })
        .collect();
    FeatureSchema {
        item: TableSpec {
            vocab: gen.n_items + 1,
            width: layout.item_width,
        },
        category: TableSpec {
            vocab: gen.n_categories + 1,
            width: layout.category_width,
        },
        position_buckets: layout.position_buckets,
        position_width: layout.position_width,
        max_seq_len: layout.max_seq_len,
        fields,
        crosses,
    }
}

/// Generator-side state behind one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    /// Click probability before label noise.
    pub clean_prob: f64,
    pub pattern_match: f64,
    pub in_pattern: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedDataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub train_latent: Vec<Latent>,
    pub test_latent: Vec<Latent>,
}

impl GeneratedDataset {
    pub fn into_dataset(self) -> Dataset {
        Dataset {
            train: self.train,
            test: self.test,
        }
    }
}

pub fn generate_dataset(gen: &GenConfig) -> Result<Dataset> {
    Ok(generate_with_latent(gen)?.into_dataset())
}

struct World {
    chain: Vec<Vec<f64>>,
    items_by_category: Vec<Vec<u32>>,
    item_shop: Vec<u32>,
    item_tag: Vec<u32>,
}

pub fn generate_with_latent(gen: &GenConfig) -> Result<GeneratedDataset> {
    gen.validate()?;
    let world = build_world(gen)?;
    let mut out = GeneratedDataset::default();
    let train_users = gen.train_users() as u32;
    for user in 1..=train_users {
        for (e, l) in user_impressions(gen, &world, user)? {
            out.train.push(e);
            out.train_latent.push(l);
        }
    }
    for user in train_users + 1..=train_users + gen.test_users() as u32 {
        for (e, l) in user_impressions(gen, &world, user)? {
            out.test.push(e);
            out.test_latent.push(l);
        }
    }
    out.train.truncate(gen.train_size);
    out.train_latent.truncate(gen.train_size);
    out.test.truncate(gen.test_size);
    out.test_latent.truncate(gen.test_size);
    Ok(out)
}

/// Dirichlet(α) draw that stays well defined for tiny α by sampling
/// `ln Gamma(α)` as `ln Gamma(α + 1) + ln(U) / α`.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| invalid(format!("gamma({alpha}): {e}")))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn build_world(gen: &GenConfig) -> Result<World> {
    let mut rng = seed::rng(gen.seed, &[WORLD_STREAM]);
    let c = gen.n_categories;
    let chain = (0..c)
        .map(|_| sample_dirichlet(gen.alpha, c, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    // the first n_categories items cover every category once
    let mut items_by_category = vec![Vec::new(); c];
    let mut item_shop = vec![0u32; gen.n_items + 1];
    let mut item_tag = vec![0u32; gen.n_items + 1];
    for item in 1..=gen.n_items {
        let cat = if item <= c { item - 1 } else { rng.random_range(0..c) };
        items_by_category[cat].push(item as u32);
        item_shop[item] = rng.random_range(1..=gen.n_shops) as u32;
        item_tag[item] = rng.random_range(1..=gen.n_tags) as u32;
    }
    Ok(World {
        chain,
        items_by_category,
        item_shop,
        item_tag,
    })
}

fn user_impressions(gen: &GenConfig, world: &World, user: u32) -> Result<Vec<(Example, Latent)>> {
    let mut rng = seed::rng(gen.seed, &[USER_STREAM, user as u64]);
    let c = gen.n_categories;
    let rho = gen.personalization;
    let chain: Vec<Vec<f64>> = world
        .chain
        .iter()
        .map(|row| {
            let own = sample_dirichlet(gen.alpha, c, &mut rng)?;
            Ok(row.iter().zip(own).map(|(g, o)| (1.0 - rho) * g + rho * o).collect())
        })
        .collect::<Result<_>>()?;
    let gender = rng.random_range(1..=GENDERS) as u32;
    let age = rng.random_range(1..=AGE_BANDS) as u32;
    let city = rng.random_range(1..=gen.n_cities) as u32;

    let log_max_gap = (gen.max_gap_secs as f64).ln();
    let gap = |rng: &mut rand_chacha::ChaCha8Rng| -> i64 {
        (rng.random::<f64>() * log_max_gap).exp().floor().max(1.0) as i64
    };
    let pick_item = |cat: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let items = &world.items_by_category[cat];
        items[rng.random_range(0..items.len())]
    };

    let mut out = Vec::with_capacity(gen.impressions_per_user);
    for _ in 0..gen.impressions_per_user {
        let len = rng.random_range(gen.min_history..=gen.max_history);
        let mut ts: i64 = rng.random_range(0..1_000_000);
        let mut cats = Vec::with_capacity(len);
        let mut history = Vec::with_capacity(len);
        let mut cat = rng.random_range(0..c);
        for k in 0..len {
            if k > 0 {
                cat = sample_index(&chain[cat], &mut rng);
                ts += gap(&mut rng);
            }
            cats.push(cat);
            history.push(BehaviorEvent::new(pick_item(cat, &mut rng), cat as u32 + 1, ts));
        }
        let request = ts + gap(&mut rng);

        let in_pattern = !cats.is_empty() && rng.random::<f64>() < gen.in_pattern_rate;
        let target_cat = if in_pattern {
            sample_index(&chain[*cats.last().expect("nonempty")], &mut rng)
        } else if gen.uniform_decoys {
            rng.random_range(0..c)
        } else {
            // decoy: a chain step from an unrelated category, so popularity
            // alone does not separate the two kinds of candidate
            let from = rng.random_range(0..c);
            sample_index(&chain[from], &mut rng)
        };
        let target_item = pick_item(target_cat, &mut rng);

        let pattern_match = recency_match(&cats, target_cat, &chain, gen.recency);
        let clean_prob = sigmoid(gen.signal * (pattern_match - gen.threshold));
        let mut label = rng.random::<f64>() < clean_prob;
        if rng.random::<f64>() < gen.noise {
            label = !label;
        }

        let mut other = BTreeMap::new();
        other.insert("gender".to_string(), gender);
        other.insert("age".to_string(), age);
        other.insert("city".to_string(), city);
        other.insert("shop_id".to_string(), world.item_shop[target_item as usize]);
        other.insert("tag".to_string(), world.item_tag[target_item as usize]);
        other.insert("match_type".to_string(), rng.random_range(1..=MATCH_TYPES) as u32);
        other.insert(
            "display_position".to_string(),
            rng.random_range(1..=DISPLAY_POSITIONS) as u32,
        );
        other.insert("page_no".to_string(), rng.random_range(1..=PAGES) as u32);

        out.push((
            Example {
                user_id: user,
                other,
                history,
                target: BehaviorEvent::new(target_item, target_cat as u32 + 1, request),
                label: u8::from(label),
            },
            Latent {
                clean_prob,
                pattern_match,
                in_pattern,
            },
        ));
    }
    Ok(out)
}

/// `Σ_k w_k P[c_(last-k) → target]` with `w_k ∝ exp(-λ k)` normalized over
/// the available history. Zero for an empty history.
pub fn recency_match(cats: &[usize], target: usize, chain: &[Vec<f64>], recency: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &c) in cats.iter().rev().enumerate() {
        let w = (-recency * k as f64).exp();
        num += w * chain[c][target];
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn write_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        let line = serde_json::to_string(e).map_err(|err| invalid(err.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line).map_err(|err| Error::Parse {
            line: i + 1,
            message: err.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}
