//! The training loop.
//!
//! Output directory layout:
//! - `train.jsonl`: one line per iteration, `{iter, lr, losses: {task: v}, total}`
//! - `run.cfg`: the config that produced the run
//! - `last_good.ckpt`: refreshed every `checkpoint_every` iterations and at the start
//! - `best.ckpt`: lowest validation loss seen at a checkpoint
//! - `final.ckpt`
//! - `summary.json`

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mtmamba_core::decoder::Model;
use mtmamba_core::io::save_checkpoint;
use mtmamba_core::tasks::task_loss;
use mtmamba_core::{DType, Element, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::data::{make_batch, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::optim::{poly_lr, AdamState, AdamW};

pub const LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "run.cfg";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_GOOD_CKPT: &str = "last_good.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

/// Stream of the batch-order generator; kept apart from the data streams.
const SHUFFLE_STREAM: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub parameters: usize,
    /// Weighted loss over the whole training split before the first step.
    pub initial_loss: f64,
    /// Same, after the last step.
    pub final_loss: f64,
    pub best_val_loss: Option<f64>,
    pub train_report: mtmamba_core::tasks::MetricReport,
    pub seconds: f64,
    pub out_dir: PathBuf,
}

impl TrainSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "iterations": self.iterations,
            "parameters": self.parameters,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "best_val_loss": self.best_val_loss,
            "train_metrics": self.train_report.to_json(),
            "seconds": self.seconds,
        })
    }
}

/// Trains with the config's element type on the configured or generated data.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = Dataset::for_config(cfg)?;
    match cfg.dtype {
        DType::F32 => train_with::<f32>(cfg, &data),
        DType::F64 => train_with::<f64>(cfg, &data),
    }
}

/// Yields training batches in a reshuffled order each pass over the split.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM);
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn train_with<T: Element>(cfg: &RunConfig, data: &Dataset) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let start = Instant::now();
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    cfg.save(out.join(CONFIG_FILE))?;
    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);

    let mut model = Model::<T>::new(cfg.model_config())?;
    let tasks = model.config.tasks.clone();
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut state = AdamState::new(&model.store);
    let mut order = BatchOrder::new(cfg.seed, data.train.len());

    let initial = evaluate(&model, &data.train, cfg.batch_size, &cfg.loss_weights)?;
    let last_good = out.join(LAST_GOOD_CKPT);
    save_checkpoint(&last_good, &model.store)?;
    let mut best_val: Option<f64> = None;

    for iter in 0..cfg.iterations {
        let lr = poly_lr(iter, cfg.iterations, cfg.lr, cfg.poly_power)?;
        let picked: Vec<&SyntheticSample> = order.next(cfg.batch_size).into_iter().map(|i| &data.train[i]).collect();
        let batch = make_batch::<T>(&picked, &tasks)?;

        let (task_losses, total) = {
            let graph = Graph::new();
            let ctx = model.ctx(&graph);
            let outs = model.forward(&ctx, graph.constant(batch.images))?;
            let mut total: Option<Var<T>> = None;
            let mut task_losses = Vec::with_capacity(tasks.len());
            for ((spec, out), (target, &w)) in tasks.iter().zip(outs).zip(batch.targets.iter().zip(&cfg.loss_weights)) {
                let l = task_loss(spec, out, target)?;
                task_losses.push(l.value().item().as_f64());
                let term = l.scale(T::lit(w));
                total = Some(match total {
                    None => term,
                    Some(acc) => acc.add(term)?,
                });
            }
            let total = total.expect("at least one task");
            let value = total.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iter,
                    last_good: Some(last_good),
                });
            }
            let grads = graph.backward(total)?;
            model.store.zero_grads();
            grads.accumulate_into(&mut model.store);
            (task_losses, value)
        };
        opt.step(&mut model.store, &mut state, lr)?;

        let mut losses = Map::new();
        for (spec, l) in tasks.iter().zip(&task_losses) {
            losses.insert(spec.name.clone(), json!(l));
        }
        let line = json!({ "iter": iter, "lr": lr, "losses": losses, "total": total });
        writeln!(log, "{line}")?;

        let done = iter + 1;
        if done % cfg.checkpoint_every.max(1) == 0 || done == cfg.iterations {
            log.flush()?;
            save_checkpoint(&last_good, &model.store)?;
            if !data.val.is_empty() {
                let v = evaluate(&model, &data.val, cfg.batch_size, &cfg.loss_weights)?.total;
                if best_val.map_or(true, |b| v < b) {
                    best_val = Some(v);
                    save_checkpoint(out.join(BEST_CKPT), &model.store)?;
                }
            }
        }
    }
    log.flush()?;
    save_checkpoint(out.join(FINAL_CKPT), &model.store)?;
    if best_val.is_none() {
        save_checkpoint(out.join(BEST_CKPT), &model.store)?;
    }

    let fin = evaluate(&model, &data.train, cfg.batch_size, &cfg.loss_weights)?;
    let summary = TrainSummary {
        iterations: cfg.iterations,
        parameters: model.num_parameters(),
        initial_loss: initial.total,
        final_loss: fin.total,
        best_val_loss: best_val,
        train_report: fin.report,
        seconds: start.elapsed().as_secs_f64(),
        out_dir: out.clone(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary.to_json())? + "\n")?;
    Ok(summary)
}

/// Reads `train.jsonl` back as parsed lines.
pub fn read_log(dir: impl AsRef<Path>) -> Result<Vec<Value>> {
    fs::read_to_string(dir.as_ref().join(LOG_FILE))?
        .lines()
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
