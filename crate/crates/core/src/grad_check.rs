//! Central finite differences, the oracle for every adjoint in the crate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::blocks::{eval_plain, Ctx};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::ssm::ScanConfig;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + hᵢeᵢ) − f(x − hᵢeᵢ)) / 2hᵢ` with `hᵢ = step · max(1, |xᵢ|)`.
///
/// With `coords` set only those coordinates are evaluated and the rest of the
/// returned tensor is zero.
pub fn finite_difference_grad<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: T,
    coords: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    let two = T::lit(2.0);
    for &i in coords {
        let xi = x.data()[i];
        let h = step * xi.abs().max(T::one());
        probe.data_mut()[i] = xi + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = xi;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (two * h);
    }
    Ok(grad)
}

/// Fourth-order central differences,
/// `(8[f(x + h) − f(x − h)] − [f(x + 2h) − f(x − 2h)]) / 12h`, with the same
/// per-coordinate step rule as [`finite_difference_grad`]. Truncation error is
/// `O(h⁴)`, so a larger `h` can be used and round-off drops accordingly.
pub fn finite_difference_grad4<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: T,
    coords: &[usize],
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for &i in coords {
        let xi = x.data()[i];
        let h = step * xi.abs().max(T::one());
        let mut at = |k: f64| -> Result<T> {
            probe.data_mut()[i] = xi + T::lit(k) * h;
            let v = f(&probe)?;
            if !v.is_finite() {
                return Err(Error::Oracle(format!("non-finite evaluation at coordinate {i}")));
            }
            Ok(v)
        };
        let d1 = at(1.0)? - at(-1.0)?;
        let d2 = at(2.0)? - at(-2.0)?;
        probe.data_mut()[i] = xi;
        grad.data_mut()[i] = (T::lit(8.0) * d1 - d2) / (T::lit(12.0) * h);
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Up to `k` distinct coordinates out of `n`, sorted.
pub fn random_coords<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Result of comparing backpropagated gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name (or `input[i]`) and flat index of the worst coordinate.
    pub worst: String,
}

/// A graph computation under test: parameters come from the context, the
/// inputs are bound as leaves.
pub type ForwardFn<'a> =
    dyn for<'g> Fn(&Ctx<'g, '_, f64>, &[Var<'g, f64>]) -> Result<Vec<Var<'g, f64>>> + 'a;

/// Pins a closure to the higher-ranked signature of [`ForwardFn`].
pub fn forward_fn<F>(f: F) -> F
where
    F: for<'g, 's> Fn(&Ctx<'g, 's, f64>, &[Var<'g, f64>]) -> Result<Vec<Var<'g, f64>>>,
{
    f
}

/// Checks `d loss / d θ` for `k` random coordinates drawn uniformly over all
/// parameters in `store` and all `inputs`, where the loss is a fixed random
/// projection `Σ_o ⟨w_o, out_o⟩` of the outputs.
///
/// The oracle is [`finite_difference_grad4`] with relative step `step`.
/// Relative error is `|a − b| / max(|a|, |b|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    store: &ParamStore<f64>,
    scan: &ScanConfig,
    inputs: &[Tensor<f64>],
    forward: &ForwardFn<'_>,
    k: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_outputs = eval_plain(store, scan, |ctx| {
        let vars: Vec<_> = inputs.iter().map(|t| ctx.constant(t)).collect();
        Ok(forward(ctx, &vars)?.iter().map(|v| v.shape()).collect::<Vec<_>>())
    })?;
    let weights: Vec<Tensor<f64>> = probe_outputs.iter().map(|s| Tensor::randn(s, &mut rng)).collect();

    let loss_of = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        eval_plain(store, scan, |ctx| {
            let vars: Vec<_> = inputs.iter().map(|t| ctx.constant(t)).collect();
            let mut total = 0.0;
            for (o, w) in forward(ctx, &vars)?.into_iter().zip(&weights) {
                total += o.value().mul(w)?.sum();
            }
            Ok(total)
        })
    };

    // Backpropagated gradients.
    let g = Graph::new();
    let ctx = Ctx::new(&g, store, *scan);
    let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let pvars: Vec<_> = ids.iter().map(|&id| ctx.p(id)).collect();
    let mut loss = None;
    for (o, w) in forward(&ctx, &leaves)?.into_iter().zip(&weights) {
        let term = o.dot_const(w)?;
        loss = Some(match loss {
            None => term,
            Some(l) => Var::add(l, term)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Usage("forward produced no outputs".into()))?;
    let grads = g.backward(loss)?;

    // Flat coordinate space: parameters first, then inputs.
    let mut spans: Vec<(String, usize)> = ids.iter().map(|&id| (store.get(id).name.clone(), store.value(id).numel())).collect();
    spans.extend(inputs.iter().enumerate().map(|(i, t)| (format!("input[{i}]"), t.numel())));
    let total: usize = spans.iter().map(|s| s.1).sum();
    let coords = random_coords(total, k, &mut rng);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut start = 0;
    let mut ci = 0;
    for (slot, (name, n)) in spans.iter().enumerate() {
        let mine: Vec<usize> = coords[ci..].iter().take_while(|&&c| c < start + n).map(|&c| c - start).collect();
        ci += mine.len();
        if !mine.is_empty() {
            let (analytic, fd) = if slot < ids.len() {
                let id = ids[slot];
                let analytic = grads.wrt(pvars[slot]).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
                let mut perturbed = store.clone();
                let fd = finite_difference_grad4(
                    |t| {
                        perturbed.set_value(id, t.clone())?;
                        loss_of(&perturbed, inputs)
                    },
                    store.value(id),
                    step,
                    &mine,
                )?;
                (analytic, fd)
            } else {
                let i = slot - ids.len();
                let analytic = grads.wrt(leaves[i]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
                let mut xs = inputs.to_vec();
                let fd = finite_difference_grad4(
                    |t| {
                        xs[i] = t.clone();
                        loss_of(store, &xs)
                    },
                    &inputs[i],
                    step,
                    &mine,
                )?;
                (analytic, fd)
            };
            for &c in &mine {
                let e = relative_error(analytic.data()[c], fd.data()[c], floor);
                report.checked += 1;
                if e > report.max_rel_err || report.worst.is_empty() {
                    report.max_rel_err = e;
                    report.worst = format!("{name}[{c}]: backprop {:.6e} vs fd {:.6e}", analytic.data()[c], fd.data()[c]);
                }
            }
        }
        start += n;
    }
    Ok(report)
}
