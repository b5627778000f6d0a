//! Metrics and mean losses over a split.

use mtmamba_core::autograd::Graph;
use mtmamba_core::decoder::Model;
use mtmamba_core::tasks::{delta_m, task_loss, MetricAccumulator, MetricReport};
use mtmamba_core::Element;
use rayon::prelude::*;

use crate::data::{make_batch, SyntheticSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per-task losses averaged over samples, in task order.
    pub losses: Vec<f64>,
    /// Loss-weighted sum of `losses`.
    pub total: f64,
}

struct Partial {
    accs: Vec<MetricAccumulator>,
    losses: Vec<f64>,
    samples: usize,
}

/// Runs the model over `samples` in batches of `batch_size`. Batches are
/// spread over the worker pool and merged in batch order, so the result does
/// not depend on the number of threads.
pub fn evaluate<T: Element>(model: &Model<T>, samples: &[SyntheticSample], batch_size: usize, weights: &[f64]) -> Result<Evaluation> {
    let tasks = &model.config.tasks;
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    if weights.len() != tasks.len() {
        return Err(Error::Config(format!("{} loss weights for {} tasks", weights.len(), tasks.len())));
    }
    let batch_size = batch_size.max(1);
    let partials: Vec<Partial> = samples
        .par_chunks(batch_size)
        .map(|chunk| -> Result<Partial> {
            let refs: Vec<&SyntheticSample> = chunk.iter().collect();
            let batch = make_batch::<T>(&refs, tasks)?;
            let preds = model.predict(&batch.images)?;
            let graph = Graph::no_grad();
            let mut accs = Vec::with_capacity(tasks.len());
            let mut losses = Vec::with_capacity(tasks.len());
            for ((spec, pred), target) in tasks.iter().zip(preds).zip(&batch.targets) {
                let mut acc = MetricAccumulator::new(spec);
                acc.update(&pred, target)?;
                accs.push(acc);
                let l = task_loss(spec, graph.constant(pred), target)?.value().item().as_f64();
                losses.push(l * chunk.len() as f64);
            }
            Ok(Partial {
                accs,
                losses,
                samples: chunk.len(),
            })
        })
        .collect::<Result<_>>()?;

    let mut parts = partials.into_iter();
    let mut acc = parts.next().expect("at least one batch");
    for p in parts {
        for (a, b) in acc.accs.iter_mut().zip(&p.accs) {
            a.merge(b)?;
        }
        for (a, b) in acc.losses.iter_mut().zip(&p.losses) {
            *a += b;
        }
        acc.samples += p.samples;
    }
    let mut report = MetricReport::new();
    for (spec, a) in tasks.iter().zip(&acc.accs) {
        report.push(spec.name.clone(), spec.metric, a.value()?);
    }
    let losses: Vec<f64> = acc.losses.iter().map(|l| l / acc.samples as f64).collect();
    let total = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok(Evaluation { report, losses, total })
}

/// Fills in `report.delta_m` against a baseline report.
pub fn with_baseline(mut report: MetricReport, baseline: &MetricReport) -> Result<MetricReport> {
    report.delta_m = Some(delta_m(&report, baseline)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use mtmamba_core::decoder::ModelConfig;
    use mtmamba_core::tasks::TaskSpec;

    fn tiny() -> (Model<f32>, Dataset) {
        let mut cfg = ModelConfig::new(vec![TaskSpec::segmentation("seg", 3).unwrap(), TaskSpec::depth("depth")]);
        cfg.base_width = 4;
        cfg.state_size = 2;
        (Model::new(cfg).unwrap(), Dataset::generate(1, 32, 32, 3, 5, 0).unwrap())
    }

    #[test]
    fn batching_does_not_change_the_result() {
        let (m, ds) = tiny();
        let w = [1.0, 1.0];
        let a = evaluate(&m, &ds.train, 1, &w).unwrap();
        let b = evaluate(&m, &ds.train, 2, &w).unwrap();
        let c = evaluate(&m, &ds.train, 5, &w).unwrap();
        for e in [&b, &c] {
            for (x, y) in a.losses.iter().zip(&e.losses) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
            }
            for ((_, x), (_, y)) in a.report.tasks.iter().zip(&e.report.tasks) {
                assert!((x.value - y.value).abs() <= 1e-5 * x.value.abs().max(1.0));
            }
        }
        assert!((a.total - a.losses.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn untrained_segmentation_loss_is_near_ln_k() {
        let (m, ds) = tiny();
        let e = evaluate(&m, &ds.train, 2, &[1.0, 0.0]).unwrap();
        assert!((e.losses[0] - 3f64.ln()).abs() < 0.5, "{}", e.losses[0]);
        assert_eq!(e.total, e.losses[0]);
    }
}
