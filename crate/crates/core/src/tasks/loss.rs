use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{sigmoid, softplus};
use crate::tensor::{Element, Tensor};

use super::{Labels, LossKind, Target, TaskSpec, IGNORE_LABEL};

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn check_pixels<T: Element>(op: &'static str, pred: &Tensor<T>, labels: &Labels) -> Result<usize> {
    let (b, h, w, k) = pred.dims4(op)?;
    if [b, h, w] != labels.shape {
        return Err(Error::shape(op, format!("prediction {:?} vs labels {:?}", pred.shape(), labels.shape)));
    }
    Ok(k)
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &Labels) -> Result<LossValue<T>> {
    let k = check_pixels("cross_entropy", logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut probs = vec![0.0f64; k];
    for (p, &label) in labels.data.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes at pixel {p}")));
        }
        let row = &logits.data()[p * k..(p + 1) * k];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (q, &v) in probs.iter_mut().zip(row) {
            *q = (v.as_f64() - max).exp();
            z += *q;
        }
        total += z.ln() - (row[label].as_f64() - max);
        let g = &mut grad.data_mut()[p * k..(p + 1) * k];
        for (c, gc) in g.iter_mut().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            *gc = T::lit(probs[c] / z - onehot);
        }
        count += 1;
    }
    finish("cross_entropy", total, count, grad)
}

/// Binary cross-entropy on single-channel logits against 0/1 labels.
pub fn binary_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &Labels) -> Result<LossValue<T>> {
    let k = check_pixels("binary_cross_entropy", logits, labels)?;
    if k != 1 {
        return Err(Error::shape("binary_cross_entropy", format!("expected 1 channel, got {k}")));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (p, &label) in labels.data.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        if label > 1 {
            return Err(Error::Data(format!("binary label {label} at pixel {p}")));
        }
        let x = logits.data()[p].as_f64();
        let y = f64::from(label);
        // softplus(x) − x·y = −[y ln σ(x) + (1 − y) ln(1 − σ(x))]
        total += softplus(x) - x * y;
        grad.data_mut()[p] = T::lit(sigmoid(x) - y);
        count += 1;
    }
    finish("binary_cross_entropy", total, count, grad)
}

/// Mean `|pred − target|` over every channel of valid pixels.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<LossValue<T>> {
    pred.expect_same_shape(target, "l1_loss")?;
    let k = pred.channels();
    let pixels = pred.numel() / k;
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(Error::shape("l1_loss", format!("mask has {} entries for {pixels} pixels", m.len())));
        }
    }
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in 0..pixels {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for i in p * k..(p + 1) * k {
            let d = pred.data()[i].as_f64() - target.data()[i].as_f64();
            total += d.abs();
            grad.data_mut()[i] = T::lit(if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            });
            count += 1;
        }
    }
    finish("l1_loss", total, count, grad)
}

fn finish<T: Element>(op: &str, total: f64, count: usize, grad: Tensor<T>) -> Result<LossValue<T>> {
    if count == 0 {
        return Err(Error::Data(format!("{op}: no valid pixels")));
    }
    let n = T::lit(count as f64);
    Ok(LossValue {
        value: T::lit(total / count as f64),
        grad: grad.map(|g| g / n),
    })
}

/// The task's configured loss on a graph output.
pub fn task_loss<'g, T: Element>(spec: &TaskSpec, output: Var<'g, T>, target: &Target<T>) -> Result<Var<'g, T>> {
    let pred = output.value();
    let lv = match (spec.loss, target) {
        (LossKind::CrossEntropy, Target::Labels(l)) if spec.out_channels == 1 => binary_cross_entropy(&pred, l)?,
        (LossKind::CrossEntropy, Target::Labels(l)) => cross_entropy(&pred, l)?,
        (LossKind::L1, Target::Dense { values, mask }) => l1_loss(&pred, values, mask.as_deref())?,
        _ => {
            return Err(Error::Data(format!(
                "task '{}' ({} loss) got a mismatched target kind",
                spec.name, spec.loss
            )))
        }
    };
    let grad = lv.grad;
    Ok(output
        .graph()
        .custom(&[output], Tensor::scalar(lv.value), move |dy, _| vec![Some(grad.scale(dy.item()))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{finite_difference_grad, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(shape: [usize; 3], data: &[u8]) -> Labels {
        Labels::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = cross_entropy(&Tensor::<f64>::zeros(&[1, 2, 2, 4]), &labels([1, 2, 2], &[0, 1, 2, 3])).unwrap();
        assert!((l.value - 4f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let logits = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[0.0, 100.0, 0.0]).unwrap();
        let l = cross_entropy(&logits, &labels([1, 1, 1], &[1])).unwrap();
        assert!(l.value >= 0.0 && l.value < 1e-40);
    }

    #[test]
    fn matches_per_pixel_softmax_and_ignores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::<f64>::randn(&[1, 2, 2, 3], &mut rng).scale(3.0);
        let lab = labels([1, 2, 2], &[2, 0, 255, 1]);
        let got = cross_entropy(&logits, &lab).unwrap();
        let mut expect = 0.0;
        for (p, y) in [(0usize, 2usize), (1, 0), (3, 1)] {
            let row = &logits.data()[p * 3..p * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[y].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((got.value - expect).abs() <= 1e-12);
        let fd = finite_difference_grad(|t| Ok(cross_entropy(t, &lab)?.value), &logits, DEFAULT_STEP, None).unwrap();
        assert!(fd.sub(&got.grad).unwrap().max_abs() <= 1e-8);
        assert!(got.grad.data()[6..9].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn label_errors() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
        assert!(matches!(cross_entropy(&z, &labels([1, 1, 2], &[0, 3])), Err(Error::Data(_))));
        assert!(matches!(cross_entropy(&z, &labels([1, 1, 2], &[255, 255])), Err(Error::Data(_))));
        assert!(cross_entropy(&z, &labels([1, 2, 1], &[0, 0])).is_err());
    }

    #[test]
    fn bce_matches_closed_form_and_fd() {
        let logits = Tensor::<f64>::from_f64(&[1, 1, 3, 1], &[2.0, -1.0, 0.5]).unwrap();
        let lab = labels([1, 1, 3], &[1, 0, 255]);
        let got = binary_cross_entropy(&logits, &lab).unwrap();
        let expect = (-(sigmoid(2.0f64)).ln() - (1.0 - sigmoid(-1.0f64)).ln()) / 2.0;
        assert!((got.value - expect).abs() <= 1e-12);
        let fd = finite_difference_grad(|t| Ok(binary_cross_entropy(t, &lab)?.value), &logits, DEFAULT_STEP, None)
            .unwrap();
        assert!(fd.sub(&got.grad).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn l1_cases() {
        let t = Tensor::<f64>::randn(&[2, 3, 3, 1], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(l1_loss(&t, &t, None).unwrap().value, 0.0);
        let shifted = t.map(|v| v + 0.25);
        assert!((l1_loss(&shifted, &t, None).unwrap().value - 0.25).abs() <= 1e-12);
        assert!(matches!(l1_loss(&t, &t, Some(&[false; 18])), Err(Error::Data(_))));
    }

    #[test]
    fn l1_masked_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::<f64>::randn(&[1, 4, 4, 3], &mut rng);
        let t = Tensor::<f64>::randn(&[1, 4, 4, 3], &mut rng);
        let mask: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.6)).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for px in 0..16 {
            if mask[px] {
                for c in 0..3 {
                    sum += (p.data()[px * 3 + c] - t.data()[px * 3 + c]).abs();
                    n += 1;
                }
            }
        }
        let got = l1_loss(&p, &t, Some(&mask)).unwrap().value;
        assert!((got - sum / n as f64).abs() <= 1e-12);
    }
}
