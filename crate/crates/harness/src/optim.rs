//! AdamW with decoupled weight decay, and the polynomial learning-rate decay.

use mtmamba_core::{Element, ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for every parameter, in store order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

impl AdamW {
    /// One update of every parameter from its accumulated gradient. A
    /// parameter without a gradient only decays. Nothing is written unless
    /// every gradient is finite.
    pub fn step<T: Element>(&self, store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
        if state.m.len() != store.len() {
            return Err(Error::Config(format!("optimizer state has {} slots for {} parameters", state.m.len(), store.len())));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGrad(p.name.clone()));
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = 1.0 - lr * self.weight_decay;
        for (i, p) in store.iter_mut().enumerate() {
            let mut value = (*p.value).clone();
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            match &p.grad {
                Some(g) => {
                    let it = value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
                    for (((w, m), v), &g) in it {
                        let g = g.as_f64();
                        let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                        let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                        *m = T::lit(mn);
                        *v = T::lit(vn);
                        let update = (mn / c1) / ((vn / c2).sqrt() + self.eps);
                        *w = T::lit(w.as_f64() * decay - lr * update);
                    }
                }
                None => {
                    for w in value.data_mut() {
                        *w = T::lit(w.as_f64() * decay);
                    }
                }
            }
            p.value = value.into();
        }
        Ok(())
    }
}

/// `base · (1 − iter/total)^power` for `0 ≤ iter < total`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if iter >= total {
        return Err(Error::Schedule { iter, total });
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, g: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v)).unwrap();
        s.get_mut(id).grad = g.map(Tensor::scalar);
        s
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.iter().next().unwrap().1.value.item()
    }

    #[test]
    fn zero_grad_only_decays() {
        let opt = AdamW::default();
        let mut s = one_param(2.0, Some(0.0));
        let mut st = AdamState::new(&s);
        opt.step(&mut s, &mut st, 1e-2).unwrap();
        assert_eq!(value(&s), 2.0 * (1.0 - 1e-2 * 1e-5));
    }

    #[test]
    fn first_step_by_hand() {
        let opt = AdamW::default();
        let mut s = one_param(1.0, Some(1.0));
        let mut st = AdamState::new(&s);
        let lr = 1e-4;
        opt.step(&mut s, &mut st, lr).unwrap();
        // m = 0.1, v = 0.001; bias correction gives m̂ = v̂ = 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let want = 1.0 - lr * 1e-5 * 1.0 - lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((value(&s) - want).abs() < 1e-15, "{} vs {want}", value(&s));
    }

    #[test]
    fn constant_grad_steps_approach_lr_times_sign() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for g in [3.0, -0.01] {
            let mut s = one_param(0.0, Some(g));
            let mut st = AdamState::new(&s);
            let lr = 0.01;
            let mut last = 0.0;
            let mut step = 0.0;
            for _ in 0..2000 {
                opt.step(&mut s, &mut st, lr).unwrap();
                step = value(&s) - last;
                last = value(&s);
            }
            assert!((step + lr * g.signum()).abs() < 1e-6 * lr, "g={g}: last step {step}");
        }
    }

    #[test]
    fn non_finite_grad_names_the_parameter_and_leaves_values() {
        let mut s = one_param(1.0, Some(f64::NAN));
        let mut st = AdamState::new(&s);
        match AdamW::default().step(&mut s, &mut st, 0.1) {
            Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(value(&s), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule() {
        assert_eq!(poly_lr(0, 100, 1e-4, 0.9).unwrap(), 1e-4);
        let half = poly_lr(500, 1000, 1.0, 0.9).unwrap();
        assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 0.5359).abs() < 1e-4);
        let total = 100_000;
        let last = poly_lr(total - 1, total, 1.0, 0.9).unwrap();
        assert!((last / (1.0 / total as f64).powf(0.9) - 1.0).abs() < 1e-9);
        assert!(matches!(poly_lr(10, 10, 1.0, 0.9), Err(Error::Schedule { iter: 10, total: 10 })));
    }
}
