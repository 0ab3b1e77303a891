#![allow(dead_code)]

use bst_core::models::{ModelConfig, ModelKind};
use bst_core::synth::{generate_dataset, schema_for, GenConfig, SchemaLayout};
use bst_core::Example;

pub fn tiny_gen() -> GenConfig {
    GenConfig {
        train_size: 200,
        test_size: 50,
        n_items: 30,
        n_categories: 5,
        n_cities: 4,
        n_shops: 5,
        n_tags: 4,
        max_history: 8,
        ..GenConfig::default()
    }
}

/// d_model = 4 + 2 + 2 = 8, n = 5.
pub fn tiny_layout() -> SchemaLayout {
    SchemaLayout {
        item_width: 4,
        category_width: 2,
        position_width: 2,
        max_seq_len: 5,
        field_width: 2,
        cross_width: 2,
        cross_table_size: 40,
        ..SchemaLayout::default()
    }
}

pub fn tiny_config(kind: ModelKind, blocks: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, schema_for(&tiny_gen(), &tiny_layout()), 2);
    cfg.block.blocks = blocks;
    cfg.mlp_hidden = [16, 8, 4];
    cfg.seed = 7;
    cfg
}

pub fn tiny_examples() -> Vec<Example> {
    generate_dataset(&tiny_gen()).unwrap().train
}

/// An example whose history is shorter than the sequence length.
pub fn short_history_example() -> Example {
    tiny_examples()
        .into_iter()
        .find(|e| (2..5).contains(&e.history.len()))
        .expect("some short history")
}
