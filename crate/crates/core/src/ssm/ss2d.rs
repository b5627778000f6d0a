//! Four-direction 2D selective scan.
//!
//! A `[B, H, W, C]` map is flattened into four token sequences, each scanned
//! by its own S6 head, restored to spatial order and summed.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::{s6, ScanConfig, SsmParams, SsmVars};

/// Traversal orders, in the fixed order their heads are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Left to right within a row, rows top to bottom.
    RowMajor,
    /// Reverse of `RowMajor`.
    RowMajorReversed,
    /// Top to bottom within a column, columns left to right.
    ColumnMajor,
    /// Reverse of `ColumnMajor`.
    ColumnMajorReversed,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowMajor,
        Direction::RowMajorReversed,
        Direction::ColumnMajor,
        Direction::ColumnMajorReversed,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Row-major pixel index of the `k`-th token in the given traversal.
pub fn scan_order(h: usize, w: usize, dir: Direction) -> Vec<usize> {
    let column_major = || (0..w).flat_map(move |j| (0..h).map(move |i| i * w + j));
    match dir {
        Direction::RowMajor => (0..h * w).collect(),
        Direction::RowMajorReversed => (0..h * w).rev().collect(),
        Direction::ColumnMajor => column_major().collect(),
        Direction::ColumnMajorReversed => {
            let mut v: Vec<usize> = column_major().collect();
            v.reverse();
            v
        }
    }
}

/// One direction of SS2D, returned in spatial layout `[B, H, W, C]`.
pub fn ss2d_direction<'g, T: Element>(
    z: Var<'g, T>,
    p: &SsmVars<'g, T>,
    dir: Direction,
    cfg: &ScanConfig,
) -> Result<Var<'g, T>> {
    let shape = z.shape();
    let [_, h, w, _] = shape[..] else {
        return Err(Error::shape("ss2d", format!("expected [B, H, W, C], got {shape:?}")));
    };
    scan_in_order(z, p, &scan_order(h, w, dir), cfg)
}

/// S6 over the pixels of `z` visited in `order` (row-major pixel indices),
/// with the result written back to each pixel's position.
pub fn scan_in_order<'g, T: Element>(
    z: Var<'g, T>,
    p: &SsmVars<'g, T>,
    order: &[usize],
    cfg: &ScanConfig,
) -> Result<Var<'g, T>> {
    let shape = z.shape();
    let [b, h, w, c] = shape[..] else {
        return Err(Error::shape("ss2d", format!("expected [B, H, W, C], got {shape:?}")));
    };
    let seq = z.reshape(&[b, h * w, c])?;
    let y = if order.iter().enumerate().all(|(i, &k)| i == k) {
        s6(seq, p, cfg)?
    } else {
        let inverse = crate::ops::invert_permutation(order);
        s6(seq.permute_tokens(order)?, p, cfg)?.permute_tokens(&inverse)?
    };
    y.reshape(&[b, h, w, c])
}

/// Sum of the four directional scans.
pub fn ss2d<'g, T: Element>(z: Var<'g, T>, heads: &[SsmVars<'g, T>; 4], cfg: &ScanConfig) -> Result<Var<'g, T>> {
    let shape = z.shape();
    let [_, h, w, _] = shape[..] else {
        return Err(Error::shape("ss2d", format!("expected [B, H, W, C], got {shape:?}")));
    };
    ss2d_with_orders(z, heads, &Direction::ALL.map(|d| scan_order(h, w, d)), cfg)
}

/// Four-head scan over arbitrary traversal orders, summed in head order.
pub fn ss2d_with_orders<'g, T: Element>(
    z: Var<'g, T>,
    heads: &[SsmVars<'g, T>; 4],
    orders: &[Vec<usize>; 4],
    cfg: &ScanConfig,
) -> Result<Var<'g, T>> {
    let mut acc = scan_in_order(z, &heads[0], &orders[0], cfg)?;
    for i in 1..4 {
        acc = acc.add(scan_in_order(z, &heads[i], &orders[i], cfg)?)?;
    }
    Ok(acc)
}

/// SS2D on plain tensors.
pub fn ss2d_forward<T: Element>(z: &Tensor<T>, heads: &[SsmParams<T>; 4], cfg: &ScanConfig) -> Result<Tensor<T>> {
    let g = Graph::no_grad();
    let zv = g.constant(z.clone());
    let vars = [0, 1, 2, 3].map(|i| heads[i].map(|t| g.constant(t.clone())));
    Ok((*ss2d(zv, &vars, cfg)?.value()).clone())
}
