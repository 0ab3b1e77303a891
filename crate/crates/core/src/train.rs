//! Mini-batch training with Adam, and offline evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_rt, RtStats};
use crate::error::{invalid, Result};
use crate::features::Example;
use crate::graph::{Gradients, Graph};
use crate::metrics::{auc, log_loss};
use crate::models::{prepare_all, Model, ModelConfig, Prepared};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;
use crate::tensor::Mode;

const SHUFFLE_STREAM: u64 = 11;
const DROPOUT_STREAM: u64 = 12;

/// Examples per gradient work unit. Partial sums are always combined in the
/// same order, so results do not depend on the number of threads.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 1,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        self.adam().validate()
    }
}

/// Trained model plus the mean training loss of each epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
}

pub fn train(config: ModelConfig, data: &[Example], tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    let mut model = Model::init(config)?;
    let prepared = prepare_all(data, &model.config.schema)?;
    let epoch_losses = fit(&mut model, &prepared, tc)?;
    Ok(TrainOutcome { model, epoch_losses })
}

/// Trains `model` in place on pre-indexed examples.
pub fn fit(model: &mut Model, data: &[Prepared], tc: &TrainConfig) -> Result<Vec<f64>> {
    tc.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let adam = tc.adam();
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = seed::rng(tc.seed, &[SHUFFLE_STREAM]);
    let mut losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let (grads, loss) = batch_gradients(model, data, batch, tc.seed, epoch as u64)?;
            total += loss;
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Mean BCE gradient over `batch` and the summed loss.
fn batch_gradients(model: &Model, data: &[Prepared], batch: &[usize], seed: u64, epoch: u64) -> Result<(Gradients, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .map(|ids| {
            let mut grads = Gradients::zeros_like(&model.params);
            let mut loss = 0.0;
            for &i in ids {
                let mut rng = seed::rng(seed, &[DROPOUT_STREAM, epoch, i as u64]);
                let mut g = Graph::new(&model.params);
                let p = model.forward(&mut g, &data[i], Mode::Train, &mut rng)?;
                let l = g.bce(p, &[data[i].label])?;
                loss += g.value(l).get(0, 0);
                g.backward_into(l, scale, &mut grads)?;
            }
            Ok((grads, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut grads, mut loss) = iter.next().expect("batch is nonempty");
    for (g, l) in iter {
        grads.add_scaled(&g, 1.0);
        loss += l;
    }
    Ok((grads, loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub rt_mean_ms: Option<f64>,
    pub rt_p95_ms: Option<f64>,
    pub n_examples: usize,
}

/// How many examples to time and how many passes over them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub examples: usize,
    pub repetitions: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,auc,logloss,rt_mean_ms,rt_p95_ms,n";

    pub fn csv_row(&self, model: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{model},{:.6},{:.6},{},{},{}",
            self.auc,
            self.logloss,
            opt(self.rt_mean_ms),
            opt(self.rt_p95_ms),
            self.n_examples
        )
    }
}

pub fn evaluate(model: &Model, data: &[Example], bench: Option<BenchOptions>) -> Result<EvalReport> {
    let scores = model.predict_batch(data)?;
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let rt: Option<RtStats> = match bench {
        Some(b) => {
            let n = b.examples.min(data.len());
            Some(bench_rt(model, &data[..n], b.repetitions)?)
        }
        None => None,
    };
    Ok(EvalReport {
        auc: auc(&scores, &labels)?,
        logloss: log_loss(&scores, &labels)?,
        rt_mean_ms: rt.as_ref().map(|r| r.mean_ms),
        rt_p95_ms: rt.as_ref().map(|r| r.p95_ms),
        n_examples: data.len(),
    })
}
