use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::{Labels, Metric, Target, TaskSpec, IGNORE_LABEL};

/// Per-pixel argmax over the channel axis.
pub fn argmax_labels<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.channels();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Running state for one task's metric. Batches can be folded in with
/// [`update`](Self::update) and partial results combined with
/// [`merge`](Self::merge); all sums are exact or order-fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricAccumulator {
    /// `K × K` confusion matrix, row = ground truth, column = prediction.
    Miou { classes: usize, confusion: Vec<u64> },
    Rmse { sum_sq: f64, count: u64 },
    Merr { sum_deg: f64, count: u64 },
    F1 { tp: u64, fp: u64, fn_: u64 },
}

impl MetricAccumulator {
    pub fn new(spec: &TaskSpec) -> Self {
        match spec.metric {
            Metric::Miou => MetricAccumulator::Miou {
                classes: spec.out_channels,
                confusion: vec![0; spec.out_channels * spec.out_channels],
            },
            Metric::Rmse => MetricAccumulator::Rmse { sum_sq: 0.0, count: 0 },
            Metric::Merr => MetricAccumulator::Merr { sum_deg: 0.0, count: 0 },
            Metric::F1 => MetricAccumulator::F1 { tp: 0, fp: 0, fn_: 0 },
        }
    }

    pub fn update<T: Element>(&mut self, pred: &Tensor<T>, target: &Target<T>) -> Result<()> {
        match (self, target) {
            (MetricAccumulator::Miou { classes, confusion }, Target::Labels(gt)) => {
                check_labels(pred, gt)?;
                let pl = argmax_labels(pred);
                for (&p, &g) in pl.iter().zip(&gt.data) {
                    if g == IGNORE_LABEL {
                        continue;
                    }
                    if g as usize >= *classes {
                        return Err(Error::Data(format!("label {g} out of range for {classes} classes")));
                    }
                    confusion[g as usize * *classes + p as usize] += 1;
                }
            }
            (MetricAccumulator::Rmse { sum_sq, count }, Target::Dense { values, mask }) => {
                for_valid(pred, values, mask.as_deref(), |p, g| {
                    for (a, b) in p.iter().zip(g) {
                        let d = a.as_f64() - b.as_f64();
                        *sum_sq += d * d;
                        *count += 1;
                    }
                })?;
            }
            (MetricAccumulator::Merr { sum_deg, count }, Target::Dense { values, mask }) => {
                for_valid(pred, values, mask.as_deref(), |p, g| {
                    if let Some(angle) = angle_deg(p, g) {
                        *sum_deg += angle;
                        *count += 1;
                    }
                })?;
            }
            (MetricAccumulator::F1 { tp, fp, fn_ }, Target::Labels(gt)) => {
                check_labels(pred, gt)?;
                for (x, &g) in pred.data().iter().zip(&gt.data) {
                    if g == IGNORE_LABEL {
                        continue;
                    }
                    // sigmoid(x) > 0.5 exactly when x > 0
                    match (*x > T::zero(), g == 1) {
                        (true, true) => *tp += 1,
                        (true, false) => *fp += 1,
                        (false, true) => *fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            _ => return Err(Error::Data("metric got a mismatched target kind".into())),
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        match (self, other) {
            (MetricAccumulator::Miou { classes, confusion }, MetricAccumulator::Miou { classes: k2, confusion: c2 })
                if classes == k2 =>
            {
                confusion.iter_mut().zip(c2).for_each(|(a, b)| *a += b);
            }
            (MetricAccumulator::Rmse { sum_sq, count }, MetricAccumulator::Rmse { sum_sq: s, count: n }) => {
                *sum_sq += s;
                *count += n;
            }
            (MetricAccumulator::Merr { sum_deg, count }, MetricAccumulator::Merr { sum_deg: s, count: n }) => {
                *sum_deg += s;
                *count += n;
            }
            (MetricAccumulator::F1 { tp, fp, fn_ }, MetricAccumulator::F1 { tp: a, fp: b, fn_: c }) => {
                *tp += a;
                *fp += b;
                *fn_ += c;
            }
            _ => return Err(Error::Usage("merging accumulators of different metrics".into())),
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        match self {
            MetricAccumulator::Miou { classes, confusion } => Ok(miou_from_confusion(*classes, confusion)),
            MetricAccumulator::Rmse { sum_sq, count } => {
                if *count == 0 {
                    return Err(Error::Data("rmse: no valid pixels".into()));
                }
                Ok((sum_sq / *count as f64).sqrt())
            }
            MetricAccumulator::Merr { sum_deg, count } => {
                if *count == 0 {
                    return Err(Error::Data("merr: no valid pixels".into()));
                }
                Ok(sum_deg / *count as f64)
            }
            MetricAccumulator::F1 { tp, fp, fn_ } => Ok(f1_from_counts(*tp, *fp, *fn_)),
        }
    }
}

fn check_labels<T: Element>(pred: &Tensor<T>, gt: &Labels) -> Result<()> {
    let (b, h, w, _) = pred.dims4("metric")?;
    if [b, h, w] != gt.shape {
        return Err(Error::shape("metric", format!("prediction {:?} vs labels {:?}", pred.shape(), gt.shape)));
    }
    Ok(())
}

fn for_valid<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: Option<&[bool]>,
    mut f: impl FnMut(&[T], &[T]),
) -> Result<()> {
    pred.expect_same_shape(gt, "metric")?;
    let k = pred.channels();
    let pixels = pred.numel() / k;
    if mask.is_some_and(|m| m.len() != pixels) {
        return Err(Error::shape("metric", format!("mask length does not match {pixels} pixels")));
    }
    for p in 0..pixels {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        f(&pred.data()[p * k..(p + 1) * k], &gt.data()[p * k..(p + 1) * k]);
    }
    Ok(())
}

/// Angle between two vectors in degrees; `None` if either has zero norm.
fn angle_deg<T: Element>(p: &[T], g: &[T]) -> Option<f64> {
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    let (np, ng) = (norm(p), norm(g));
    if np == 0.0 || ng == 0.0 {
        return None;
    }
    let dot: f64 = p.iter().zip(g).map(|(a, b)| (a.as_f64() / np) * (b.as_f64() / ng)).sum();
    Some(dot.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Mean IoU over the classes that occur in the ground truth; 0 if none do.
fn miou_from_confusion(k: usize, confusion: &[u64]) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        let gt_total: u64 = confusion[c * k..(c + 1) * k].iter().sum();
        if gt_total == 0 {
            continue;
        }
        let tp = confusion[c * k + c];
        let pred_total: u64 = (0..k).map(|r| confusion[r * k + c]).sum();
        sum += tp as f64 / (gt_total + pred_total - tp) as f64;
        present += 1;
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

/// `2PR/(P+R)`; 1 when there is nothing to find and nothing was predicted.
fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn metric_miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut confusion = vec![0u64; classes * classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL || g as usize >= classes || p as usize >= classes {
            continue;
        }
        confusion[g as usize * classes + p as usize] += 1;
    }
    miou_from_confusion(classes, &confusion)
}

pub fn metric_rmse<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<f64> {
    let mut acc = MetricAccumulator::Rmse { sum_sq: 0.0, count: 0 };
    acc.update(pred, &Target::Dense { values: gt.clone(), mask: mask.map(<[bool]>::to_vec) })?;
    acc.value()
}

pub fn metric_merr<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<f64> {
    let mut acc = MetricAccumulator::Merr { sum_deg: 0.0, count: 0 };
    acc.update(pred, &Target::Dense { values: gt.clone(), mask: mask.map(<[bool]>::to_vec) })?;
    acc.value()
}

pub fn metric_f1<T: Element>(logits: &Tensor<T>, gt: &Labels) -> Result<f64> {
    let mut acc = MetricAccumulator::F1 { tp: 0, fp: 0, fn_: 0 };
    acc.update(logits, &Target::Labels(gt.clone()))?;
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn miou_extremes() {
        let gt = [0u8, 1, 1, 0, 255];
        assert_eq!(metric_miou(&gt, &gt, 2), 1.0);
        assert_eq!(metric_miou(&[1, 1, 1], &[0, 0, 0], 2), 0.0);
    }

    #[test]
    fn miou_hand_count() {
        #[rustfmt::skip]
        let gt = [0u8, 0, 0, 0,
                  0, 0, 1, 1,
                  0, 1, 1, 1,
                  1, 1, 1, 1];
        #[rustfmt::skip]
        let pred = [0u8, 0, 0, 1,
                    0, 1, 1, 1,
                    0, 0, 1, 1,
                    1, 1, 1, 0];
        // class 0: tp 5, fn 2, fp 2 → 5/9; class 1: tp 7, fn 2, fp 2 → 7/11
        let expect = (5.0 / 9.0 + 7.0 / 11.0) / 2.0;
        assert!((metric_miou(&pred, &gt, 2) - expect).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn miou_relabel_invariant(
            pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..64),
            perm in Just([0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let pp: Vec<u8> = pred.iter().map(|&c| perm[c as usize]).collect();
            let pg: Vec<u8> = gt.iter().map(|&c| perm[c as usize]).collect();
            let a = metric_miou(&pred, &gt, 4);
            let b = metric_miou(&pp, &pg, 4);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_angles() {
        let v = |x: &[f64]| Tensor::<f64>::from_f64(&[1, 1, 1, 3], x).unwrap();
        let n = v(&[0.0, 0.0, 2.0]);
        assert!(metric_merr(&n, &n, None).unwrap().abs() < 1e-12);
        assert!((metric_merr(&v(&[0.0, 0.0, -1.0]), &n, None).unwrap() - 180.0).abs() < 1e-9);
        assert!((metric_merr(&v(&[3.0, 0.0, 0.0]), &n, None).unwrap() - 90.0).abs() < 1e-9);
        // A zero-norm prediction is not a valid pixel.
        assert!(metric_merr(&v(&[0.0, 0.0, 0.0]), &n, None).is_err());
    }

    #[test]
    fn merr_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::<f64>::randn(&[2, 3, 3, 3], &mut rng);
        let g = Tensor::<f64>::randn(&[2, 3, 3, 3], &mut rng);
        let mut sum = 0.0;
        for px in 0..18 {
            let a = &p.data()[px * 3..px * 3 + 3];
            let b = &g.data()[px * 3..px * 3 + 3];
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            sum += cos.clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI;
        }
        assert!((metric_merr(&p, &g, None).unwrap() - sum / 18.0).abs() <= 1e-5);
    }

    #[test]
    fn rmse_constant_error() {
        let g = Tensor::<f64>::randn(&[1, 4, 4, 1], &mut ChaCha8Rng::seed_from_u64(5));
        let p = g.map(|v| v - 2.0);
        assert!((metric_rmse(&p, &g, None).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn f1_counts() {
        let logits = Tensor::<f64>::from_f64(&[1, 1, 5, 1], &[1.0, 2.0, -1.0, 3.0, -2.0]).unwrap();
        let gt = Labels::new([1, 1, 5], vec![1, 0, 1, 1, 0]).unwrap();
        // tp 2, fp 1, fn 1
        assert!((metric_f1(&logits, &gt).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let none = Labels::new([1, 1, 5], vec![0; 5]).unwrap();
        assert_eq!(metric_f1(&logits.map(|_| -1.0), &none).unwrap(), 1.0);
    }

    #[test]
    fn merge_equals_single_pass() {
        let spec = TaskSpec::depth("d");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Tensor::<f64>::randn(&[2, 2, 2, 1], &mut rng);
        let g = Tensor::<f64>::randn(&[2, 2, 2, 1], &mut rng);
        let mut whole = MetricAccumulator::new(&spec);
        whole.update(&p, &Target::Dense { values: g.clone(), mask: None }).unwrap();
        let half = |t: &Tensor<f64>, i: usize| Tensor::new(&[1, 2, 2, 1], t.data()[i * 4..i * 4 + 4].to_vec()).unwrap();
        let mut a = MetricAccumulator::new(&spec);
        let mut b = MetricAccumulator::new(&spec);
        a.update(&half(&p, 0), &Target::Dense { values: half(&g, 0), mask: None }).unwrap();
        b.update(&half(&p, 1), &Target::Dense { values: half(&g, 1), mask: None }).unwrap();
        a.merge(&b).unwrap();
        assert!((a.value().unwrap() - whole.value().unwrap()).abs() < 1e-15);
    }
}
