//! Dense prediction tasks: specs, output heads, losses and metrics.

mod loss;
mod metrics;
mod report;

pub use loss::{binary_cross_entropy, cross_entropy, l1_loss, task_loss, LossValue};
pub use metrics::{argmax_labels, metric_f1, metric_merr, metric_miou, metric_rmse, MetricAccumulator};
pub use report::{delta_m, MetricEntry, MetricReport};

use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::blocks::{eval_plain, Ctx, Linear, PatchExpand};
use crate::error::{Error, Result};
use crate::param::{ParamBuilder, ParamStore};
use crate::ssm::ScanConfig;
use crate::tensor::{Element, Tensor};

/// Segmentation label marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Segmentation,
    Depth,
    Normal,
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Softmax cross-entropy, or its binary form for single-channel outputs.
    CrossEntropy,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Miou,
    Rmse,
    Merr,
    F1,
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(TaskKind { Segmentation => "segmentation", Depth => "depth", Normal => "normal", Boundary => "boundary" });
str_enum!(LossKind { CrossEntropy => "cross_entropy", L1 => "l1" });
str_enum!(Metric { Miou => "miou", Rmse => "rmse", Merr => "merr", F1 => "f1" });

impl Metric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Miou | Metric::F1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub out_channels: usize,
    pub loss: LossKind,
    pub metric: Metric,
    pub higher_is_better: bool,
}

impl TaskSpec {
    /// Spec with the default loss and metric for `kind`. `classes` is only
    /// read for segmentation.
    pub fn new(name: impl Into<String>, kind: TaskKind, classes: usize) -> Result<Self> {
        let (out_channels, loss, metric) = match kind {
            TaskKind::Segmentation => {
                if !(2..IGNORE_LABEL as usize).contains(&classes) {
                    return Err(Error::Config(format!("segmentation needs 2..255 classes, got {classes}")));
                }
                (classes, LossKind::CrossEntropy, Metric::Miou)
            }
            TaskKind::Depth => (1, LossKind::L1, Metric::Rmse),
            TaskKind::Normal => (3, LossKind::L1, Metric::Merr),
            TaskKind::Boundary => (1, LossKind::CrossEntropy, Metric::F1),
        };
        Ok(TaskSpec {
            name: name.into(),
            kind,
            out_channels,
            loss,
            metric,
            higher_is_better: metric.higher_is_better(),
        })
    }

    pub fn segmentation(name: impl Into<String>, classes: usize) -> Result<Self> {
        Self::new(name, TaskKind::Segmentation, classes)
    }

    pub fn depth(name: impl Into<String>) -> Self {
        Self::new(name, TaskKind::Depth, 0).expect("depth spec")
    }

    pub fn normal(name: impl Into<String>) -> Self {
        Self::new(name, TaskKind::Normal, 0).expect("normal spec")
    }

    pub fn boundary(name: impl Into<String>) -> Self {
        Self::new(name, TaskKind::Boundary, 0).expect("boundary spec")
    }
}

/// Integer label map `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!("label map {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        Ok(Labels { shape, data })
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }
}

/// Ground truth for one task over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<T> {
    /// Class indices (segmentation) or 0/1 edges (boundary).
    Labels(Labels),
    /// Per-pixel values `[B, H, W, K]` with an optional per-pixel validity mask.
    Dense { values: Tensor<T>, mask: Option<Vec<bool>> },
}

/// `out_channels` prediction at input resolution from decoder features at 1/4 scale.
#[derive(Clone, Debug)]
pub struct Head {
    pub expand: PatchExpand,
    pub proj: Linear,
    pub channels: usize,
    pub out_channels: usize,
}

impl Head {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, out_channels: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Head {
                expand: PatchExpand::build_final(b, "expand", channels, channels)?,
                proj: Linear::build(b, "proj", channels, out_channels, true)?,
                channels,
                out_channels,
            })
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let up = self.expand.forward(ctx, z)?;
        self.proj.forward(ctx, up)
    }
}

pub fn head_forward<T: Element>(z: &Tensor<T>, head: &Head, store: &ParamStore<T>) -> Result<Tensor<T>> {
    eval_plain(store, &ScanConfig::default(), |ctx| Ok((*head.forward(ctx, ctx.constant(z))?.value()).clone()))
}
