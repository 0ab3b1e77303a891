//! `bst`: generate synthetic data, train, evaluate and compare CTR models.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use bst_core::checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
use bst_core::gradcheck::grad_check;
use bst_core::models::{Model, ModelKind};
use bst_core::synth::{generate_dataset, read_jsonl, write_jsonl, Dataset, GenConfig, SchemaLayout};
use bst_core::train::{evaluate, train, EvalReport};
use bst_core::{Example, Mode};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "bst", version, about = "Behavior-sequence CTR models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// bst, wdl, wdl_seq or din_lite.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Transformer blocks (BST only).
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.jsonl, test.jsonl and a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and per-epoch loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Directory holding train.jsonl; defaults to the config's data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on test.jsonl and write metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also time single-request predictions.
        #[arg(long)]
        bench: bool,
    },
    /// Train every baseline and BST(b=1..3) over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Fixed dataset for every seed; otherwise each seed generates its own.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bench: bool,
        /// Exit nonzero unless BST(b=1) has the best mean AUC among WDL,
        /// WDL(+Seq) and BST(b=1).
        #[arg(long)]
        assert_ordering: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Check the configured model instead of the small built-in one.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Examples summed into the checked loss.
        #[arg(long, default_value_t = 4)]
        examples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, out } => {
            let cfg = RunConfig::load(common.config.as_deref())?.resolve(common.seed, None, None)?;
            cmd_gen(&cfg, &out)
        }
        Command::Train {
            common,
            model,
            data,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?.resolve(common.seed, model.model, model.blocks)?;
            cmd_train(&cfg, data.as_deref(), &out)
        }
        Command::Eval {
            common,
            model,
            checkpoint,
            data,
            out,
            bench,
        } => {
            let explicit = common.config.is_some() || model.model.is_some() || model.blocks.is_some();
            let cfg = RunConfig::load(common.config.as_deref())?.resolve(common.seed, model.model, model.blocks)?;
            cmd_eval(&cfg, explicit, &checkpoint, data.as_deref(), out.as_deref(), bench)
        }
        Command::Compare {
            common,
            data,
            out,
            bench,
            assert_ordering,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?.resolve(common.seed, None, None)?;
            cmd_compare(&cfg, data.as_deref(), &out, bench, assert_ordering)
        }
        Command::Gradcheck {
            common,
            model,
            full,
            step,
            tol,
            examples,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?.resolve(common.seed, None, model.blocks)?;
            cmd_gradcheck(&cfg, model.model, full, step, tol, examples)
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn data_dir<'a>(flag: Option<&'a Path>, cfg: &'a RunConfig) -> Result<&'a Path> {
    flag.or(cfg.data_dir.as_deref())
        .ok_or_else(|| anyhow!("no data directory: pass --data or set data_dir in the config"))
}

fn read_split(dir: &Path, split: &str) -> Result<Vec<Example>> {
    let path = dir.join(format!("{split}.jsonl"));
    read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = generate_dataset(&cfg.gen)?;
    create_dir(out)?;
    write_jsonl(&data.train, &out.join("train.jsonl"))?;
    write_jsonl(&data.test, &out.join("test.jsonl"))?;
    write_manifest(out, "gen", cfg)?;
    println!(
        "wrote {} train / {} test examples to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    let train_set = read_split(data_dir(data, cfg)?, "train")?;
    let model_cfg = cfg.selected_model()?;
    let label = model_cfg.kind.label(model_cfg.block.blocks);
    let outcome = train(model_cfg, &train_set, &cfg.train)?;
    create_dir(out)?;
    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        loss.push_str(&format!("{},{l:.8}\n", e + 1));
    }
    fs::write(out.join("loss.csv"), loss)?;
    write_manifest(out, "train", cfg)?;
    println!(
        "trained {label} on {} examples, final loss {:.5}",
        train_set.len(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    explicit: bool,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    bench: bool,
) -> Result<()> {
    let model = if explicit {
        load_checkpoint_as(checkpoint, cfg.selected_model()?)
    } else {
        load_checkpoint(checkpoint)
    }
    .with_context(|| format!("loading {}", checkpoint.display()))?;
    let test = read_split(data_dir(data, cfg)?, "test")?;
    let report = evaluate(&model, &test, bench.then(|| cfg.bench.into()))?;
    let label = model.kind().label(model.config.block.blocks);
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row(&label));
    print!("{csv}");
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&dir)?;
    fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

const COMPARE_ROWS: [(ModelKind, usize); 6] = [
    (ModelKind::Wdl, 1),
    (ModelKind::WdlSeq, 1),
    (ModelKind::DinLite, 1),
    (ModelKind::Bst, 1),
    (ModelKind::Bst, 2),
    (ModelKind::Bst, 3),
];

fn cmd_compare(cfg: &RunConfig, data: Option<&Path>, out: &Path, bench: bool, assert_ordering: bool) -> Result<()> {
    let fixed = match data.or(cfg.data_dir.as_deref()) {
        Some(dir) => Some(Dataset {
            train: read_split(dir, "train")?,
            test: read_split(dir, "test")?,
        }),
        None => None,
    };
    create_dir(out)?;
    let mut runs = fs::File::create(out.join("runs.csv"))?;
    writeln!(runs, "model,seed,auc,logloss,rt_mean_ms,rt_p95_ms,n")?;
    let mut auc_sums = [0.0; COMPARE_ROWS.len()];
    let mut rt_sums = [0.0; COMPARE_ROWS.len()];
    for k in 0..cfg.seeds {
        let seeded = cfg.clone().with_seed(cfg.seed + k)?;
        let generated;
        let dataset = match &fixed {
            Some(d) => d,
            None => {
                generated = generate_dataset(&seeded.gen)?;
                &generated
            }
        };
        for (r, &(kind, blocks)) in COMPARE_ROWS.iter().enumerate() {
            let model = train(seeded.model_config(kind, blocks)?, &dataset.train, &seeded.train)?.model;
            let report = evaluate(&model, &dataset.test, bench.then(|| cfg.bench.into()))?;
            let label = kind.label(blocks);
            let row = report.csv_row(&label);
            let (name, rest) = row.split_once(',').expect("csv row has columns");
            writeln!(runs, "{name},{},{rest}", seeded.seed)?;
            eprintln!("seed {} {label}: auc {:.4}", seeded.seed, report.auc);
            auc_sums[r] += report.auc;
            rt_sums[r] += report.rt_mean_ms.unwrap_or(0.0);
        }
    }
    let n = cfg.seeds as f64;
    let mut summary = String::from("model,offline_auc,average_rt_ms\n");
    for (r, &(kind, blocks)) in COMPARE_ROWS.iter().enumerate() {
        let rt = if bench { format!("{:.4}", rt_sums[r] / n) } else { String::new() };
        summary.push_str(&format!("{},{:.4},{rt}\n", kind.label(blocks), auc_sums[r] / n));
    }
    fs::write(out.join("summary.csv"), &summary)?;
    write_manifest(out, "compare", cfg)?;
    print!("{summary}");
    if assert_ordering {
        let (wdl, wdl_seq, bst) = (auc_sums[0], auc_sums[1], auc_sums[3]);
        if !(bst > wdl && bst > wdl_seq) {
            bail!(
                "ordering violated: BST(b=1) mean AUC {:.4} does not top WDL {:.4} and WDL(+Seq) {:.4}",
                bst / n,
                wdl / n,
                wdl_seq / n
            );
        }
    }
    Ok(())
}

/// d_model 8 (item 4, category 2, position 2), 2 heads, n = 5, MLP 16-8-4.
fn small_gradcheck_config(cfg: &RunConfig) -> RunConfig {
    let mut small = cfg.clone();
    small.gen = GenConfig {
        train_size: 8,
        test_size: 1,
        n_items: 30,
        n_categories: 5,
        n_cities: 4,
        n_shops: 5,
        n_tags: 4,
        max_history: 8,
        ..cfg.gen.clone()
    };
    small.layout = SchemaLayout {
        item_width: 4,
        category_width: 2,
        position_width: 2,
        max_seq_len: 5,
        field_width: 2,
        cross_width: 2,
        cross_table_size: 40,
        ..SchemaLayout::default()
    };
    small.schema = None;
    small.model.heads = 2;
    small.model.d_ff = None;
    small.model.mlp_hidden = [16, 8, 4];
    small
}

fn cmd_gradcheck(cfg: &RunConfig, kind: Option<ModelKind>, full: bool, step: f64, tol: f64, n_examples: usize) -> Result<()> {
    if n_examples == 0 {
        bail!("--examples must be at least 1");
    }
    let cfg = if full { cfg.clone() } else { small_gradcheck_config(cfg) };
    let kinds = match kind {
        Some(k) => vec![k],
        None => vec![ModelKind::Bst, ModelKind::Wdl, ModelKind::WdlSeq, ModelKind::DinLite],
    };
    let examples = generate_dataset(&cfg.gen)?.train;
    let mut failed = Vec::new();
    for kind in kinds {
        let mut model = Model::init(cfg.model_config(kind, cfg.model.blocks)?)?;
        let prepared = examples
            .iter()
            .take(n_examples)
            .map(|e| model.prepare(e))
            .collect::<bst_core::Result<Vec<_>>>()?;
        let mut params = std::mem::take(&mut model.params);
        let report = grad_check(&mut params, step, tol, |g| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut total = None;
            for p in &prepared {
                let prob = model.forward(g, p, Mode::Eval, &mut rng)?;
                let loss = g.bce(prob, &[p.label])?;
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss)?,
                });
            }
            Ok(total.expect("at least one example"))
        })?;
        let label = kind.label(cfg.model.blocks);
        let worst = report
            .worst()
            .map(|w| format!("{} [{}]: analytic {:.6e}, numeric {:.6e}", w.name, w.worst_index, w.analytic, w.numeric))
            .unwrap_or_else(|| "-".to_string());
        let status = if report.passed() { "ok" } else { "FAILED" };
        println!(
            "{label}: {status}, max relative error {:.3e} over {} entries (worst in {worst})",
            report.max_error(),
            report.entries()
        );
        if !report.passed() {
            failed.push(label);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
