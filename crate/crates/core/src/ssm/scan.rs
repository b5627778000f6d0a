//! Discretization and the linear recurrence `h_l = Ā_l ⊙ h_{l-1} + B̄_l x_l`,
//! `y_l = Σ_n C_l[n] h_l[n]`, with zero initial state.
//!
//! Two evaluation strategies share one coefficient interface:
//!
//! * naive: strict left-to-right recurrence, the correctness oracle;
//! * chunked: chunk summaries `(∏ Ā, local state)` are computed independently,
//!   joined left-to-right with the associative combine
//!   `(a₁, h₁) ∘ (a₂, h₂) = (a₁a₂, a₂h₁ + h₂)`, then each chunk is replayed
//!   from its true start state.
//!
//! The differentiable path ([`selective_scan`]) never materializes the
//! `[B, L, C, N]` discretized tensors; it evaluates `Ā = exp(ΔA)` and
//! `B̄ = ΔB` on the fly.

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Element, Tensor};

use super::{ScanConfig, ScanMode};

/// Associative combine on `(decay, state)` pairs.
pub type Combine<T> = fn((T, T), (T, T)) -> (T, T);

pub fn combine<T: Element>(left: (T, T), right: (T, T)) -> (T, T) {
    (left.0 * right.0, right.0 * left.1 + right.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub ch: usize,
    pub state: usize,
}

impl ScanDims {
    fn cn(&self) -> usize {
        self.ch * self.state
    }
}

/// Per-step coefficients, each laid out `[C, N]`: the decay `Ā` and the
/// drive `B̄ · x`.
pub(crate) trait Coeffs<T>: Sync {
    fn step(&self, b: usize, l: usize, decay: &mut [T], drive: &mut [T]);
}

struct Materialized<'a, T> {
    dims: ScanDims,
    a_bar: &'a [T],
    b_bar: &'a [T],
    x: &'a [T],
}

impl<T: Element> Coeffs<T> for Materialized<'_, T> {
    fn step(&self, b: usize, l: usize, decay: &mut [T], drive: &mut [T]) {
        let d = self.dims;
        let at = (b * d.len + l) * d.cn();
        decay.copy_from_slice(&self.a_bar[at..at + d.cn()]);
        let xs = &self.x[(b * d.len + l) * d.ch..][..d.ch];
        for c in 0..d.ch {
            for n in 0..d.state {
                let i = c * d.state + n;
                drive[i] = self.b_bar[at + i] * xs[c];
            }
        }
    }
}

/// `Ā = exp(δ A)` and `B̄x = (δ B) x` evaluated per step.
pub(crate) struct Selective<'a, T> {
    pub dims: ScanDims,
    pub delta: &'a [T],
    pub a: &'a [T],
    pub bseq: &'a [T],
    pub x: &'a [T],
}

impl<T: Element> Coeffs<T> for Selective<'_, T> {
    fn step(&self, b: usize, l: usize, decay: &mut [T], drive: &mut [T]) {
        let d = self.dims;
        let row = b * d.len + l;
        let dl = &self.delta[row * d.ch..][..d.ch];
        let xs = &self.x[row * d.ch..][..d.ch];
        let bs = &self.bseq[row * d.state..][..d.state];
        for c in 0..d.ch {
            let ar = &self.a[c * d.state..][..d.state];
            let dec = &mut decay[c * d.state..][..d.state];
            let drv = &mut drive[c * d.state..][..d.state];
            for n in 0..d.state {
                dec[n] = (dl[c] * ar[n]).exp();
                drv[n] = (dl[c] * bs[n]) * xs[c];
            }
            debug_assert!(
                dec.iter().all(|&v| v >= T::zero() && v <= T::one()),
                "discretized decay outside [0, 1]"
            );
        }
    }
}

fn readout<T: Element>(h: &[T], cs: &[T], y: &mut [T], state: usize) {
    for (c, yc) in y.iter_mut().enumerate() {
        let hc = &h[c * state..][..state];
        let mut acc = T::zero();
        for n in 0..state {
            acc = acc + cs[n] * hc[n];
        }
        *yc = acc;
    }
}

/// Replays steps `range` of batch `b` from state `h`, writing outputs into `y`
/// (laid out `[range.len(), C]`).
fn run_span<T: Element, K: Coeffs<T>>(
    dims: ScanDims,
    coeffs: &K,
    c_seq: &[T],
    b: usize,
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
) {
    let cn = dims.cn();
    let mut decay = vec![T::zero(); cn];
    let mut drive = vec![T::zero(); cn];
    for (k, l) in range.enumerate() {
        coeffs.step(b, l, &mut decay, &mut drive);
        for i in 0..cn {
            h[i] = decay[i] * h[i] + drive[i];
        }
        let cs = &c_seq[(b * dims.len + l) * dims.state..][..dims.state];
        readout(h, cs, &mut y[k * dims.ch..][..dims.ch], dims.state);
    }
}

pub(crate) fn scan_naive_with<T: Element, K: Coeffs<T>>(dims: ScanDims, coeffs: &K, c_seq: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); dims.batch * dims.len * dims.ch];
    for (b, yb) in out.chunks_exact_mut(dims.len * dims.ch).enumerate() {
        let mut h = vec![T::zero(); dims.cn()];
        run_span(dims, coeffs, c_seq, b, 0..dims.len, &mut h, yb);
    }
    out
}

pub(crate) fn scan_chunked_with<T: Element, K: Coeffs<T>>(
    dims: ScanDims,
    coeffs: &K,
    c_seq: &[T],
    chunk_len: usize,
    join: Combine<T>,
) -> Vec<T> {
    let cn = dims.cn();
    let chunk_len = chunk_len.max(1);
    let n_chunks = dims.len.div_ceil(chunk_len);
    let mut out = vec![T::zero(); dims.batch * dims.len * dims.ch];
    for (b, yb) in out.chunks_exact_mut(dims.len * dims.ch).enumerate() {
        // Local pass: each chunk's (decay product, state from zero).
        let summaries: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
            .into_par_iter()
            .map(|k| {
                let mut prod = vec![T::one(); cn];
                let mut h = vec![T::zero(); cn];
                let mut decay = vec![T::zero(); cn];
                let mut drive = vec![T::zero(); cn];
                for l in k * chunk_len..((k + 1) * chunk_len).min(dims.len) {
                    coeffs.step(b, l, &mut decay, &mut drive);
                    for i in 0..cn {
                        (prod[i], h[i]) = join((prod[i], h[i]), (decay[i], drive[i]));
                    }
                }
                (prod, h)
            })
            .collect();

        // Sequential left-to-right join gives every chunk's start state.
        let mut starts = Vec::with_capacity(n_chunks);
        let mut carry = vec![T::zero(); cn];
        for (prod, h) in &summaries {
            starts.push(carry.clone());
            for i in 0..cn {
                carry[i] = join((T::one(), carry[i]), (prod[i], h[i])).1;
            }
        }

        yb.par_chunks_mut(chunk_len * dims.ch)
            .zip(starts.into_par_iter())
            .enumerate()
            .for_each(|(k, (yk, mut h))| {
                let range = k * chunk_len..((k + 1) * chunk_len).min(dims.len);
                run_span(dims, coeffs, c_seq, b, range, &mut h, yk);
            });
    }
    out
}

fn check_scan_shapes<T: Element>(
    op: &'static str,
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c_seq: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<ScanDims> {
    let (batch, len, ch) = x.dims3(op)?;
    let state = match *a_bar.shape() {
        [b, l, c, n] if b == batch && l == len && c == ch => n,
        _ => {
            return Err(Error::shape(
                op,
                format!("A_bar {} vs x {}", shape_str(a_bar.shape()), shape_str(x.shape())),
            ))
        }
    };
    if b_bar.shape() != a_bar.shape() {
        return Err(Error::shape(
            op,
            format!("B_bar {} vs A_bar {}", shape_str(b_bar.shape()), shape_str(a_bar.shape())),
        ));
    }
    if c_seq.shape() != [batch, len, state] {
        return Err(Error::shape(
            op,
            format!("C {} vs expected [{batch}, {len}, {state}]", shape_str(c_seq.shape())),
        ));
    }
    Ok(ScanDims { batch, len, ch, state })
}

/// `Ā[b,l,c,n] = exp(δ[b,l,c]·A[c,n])`, `B̄[b,l,c,n] = δ[b,l,c]·B[b,l,n]`.
///
/// `B̄` uses the first-order (Euler) form of the zero-order hold.
pub fn discretize<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, len, ch) = delta.dims3("discretize")?;
    let state = match *a.shape() {
        [c, n] if c == ch => n,
        _ => {
            return Err(Error::shape(
                "discretize",
                format!("A {} vs delta {}", shape_str(a.shape()), shape_str(delta.shape())),
            ))
        }
    };
    if b.shape() != [batch, len, state] {
        return Err(Error::shape(
            "discretize",
            format!("B {} vs delta {} / A {}", shape_str(b.shape()), shape_str(delta.shape()), shape_str(a.shape())),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Domain {
            op: "discretize",
            detail: format!("step size must be positive, got {bad}"),
        });
    }
    let mut a_bar = Vec::with_capacity(batch * len * ch * state);
    let mut b_bar = Vec::with_capacity(batch * len * ch * state);
    for row in 0..batch * len {
        let bs = &b.data()[row * state..][..state];
        for c in 0..ch {
            let dl = delta.data()[row * ch + c];
            for n in 0..state {
                a_bar.push((dl * a.data()[c * state + n]).exp());
                b_bar.push(dl * bs[n]);
            }
        }
    }
    let shape = [batch, len, ch, state];
    Ok((Tensor::new(&shape, a_bar)?, Tensor::new(&shape, b_bar)?))
}

/// Strict left-to-right recurrence; the reference for every other scan path.
pub fn ssm_scan_naive<T: Element>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c_seq: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = check_scan_shapes("ssm_scan_naive", a_bar, b_bar, c_seq, x)?;
    let coeffs = Materialized {
        dims,
        a_bar: a_bar.data(),
        b_bar: b_bar.data(),
        x: x.data(),
    };
    Tensor::new(x.shape(), scan_naive_with(dims, &coeffs, c_seq.data()))
}

pub fn ssm_scan_chunked<T: Element>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c_seq: &Tensor<T>,
    x: &Tensor<T>,
    cfg: &ScanConfig,
) -> Result<Tensor<T>> {
    ssm_scan_chunked_using(a_bar, b_bar, c_seq, x, cfg, combine::<T>)
}

/// [`ssm_scan_chunked`] with a caller-supplied cross-chunk combine. Used to
/// check that the verification suite detects a broken combine.
pub fn ssm_scan_chunked_using<T: Element>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c_seq: &Tensor<T>,
    x: &Tensor<T>,
    cfg: &ScanConfig,
    join: Combine<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let dims = check_scan_shapes("ssm_scan_chunked", a_bar, b_bar, c_seq, x)?;
    let coeffs = Materialized {
        dims,
        a_bar: a_bar.data(),
        b_bar: b_bar.data(),
        x: x.data(),
    };
    Tensor::new(x.shape(), scan_chunked_with(dims, &coeffs, c_seq.data(), cfg.chunk_len, join))
}

/// Selective scan on raw tensors: `delta [B,L,C]`, `a [C,N]`, `bseq`/`cseq [B,L,N]`, `x [B,L,C]`.
pub fn selective_scan_forward<T: Element>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bseq: &Tensor<T>,
    cseq: &Tensor<T>,
    x: &Tensor<T>,
    cfg: &ScanConfig,
) -> Result<Tensor<T>> {
    let dims = selective_dims(delta, a, bseq, cseq, x)?;
    let coeffs = Selective {
        dims,
        delta: delta.data(),
        a: a.data(),
        bseq: bseq.data(),
        x: x.data(),
    };
    let y = match cfg.mode {
        ScanMode::Naive => scan_naive_with(dims, &coeffs, cseq.data()),
        ScanMode::Chunked => scan_chunked_with(dims, &coeffs, cseq.data(), cfg.chunk_len, combine::<T>),
    };
    Tensor::new(x.shape(), y)
}

fn selective_dims<T: Element>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bseq: &Tensor<T>,
    cseq: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<ScanDims> {
    let (batch, len, ch) = x.dims3("selective_scan")?;
    let state = match *a.shape() {
        [c, n] if c == ch => n,
        _ => {
            return Err(Error::shape(
                "selective_scan",
                format!("A {} vs x {}", shape_str(a.shape()), shape_str(x.shape())),
            ))
        }
    };
    if delta.shape() != x.shape() || bseq.shape() != [batch, len, state] || cseq.shape() != bseq.shape() {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "x {} delta {} B {} C {} A {}",
                shape_str(x.shape()),
                shape_str(delta.shape()),
                shape_str(bseq.shape()),
                shape_str(cseq.shape()),
                shape_str(a.shape())
            ),
        ));
    }
    Ok(ScanDims { batch, len, ch, state })
}

pub(crate) struct SelectiveGrads<T> {
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub bseq: Tensor<T>,
    pub cseq: Tensor<T>,
    pub x: Tensor<T>,
}

/// Adjoint of the selective scan. States are recomputed with the naive
/// recurrence, then the adjoint state `dh_l = C_l g_l + Ā_{l+1} ⊙ dh_{l+1}`
/// is swept right to left.
pub(crate) fn selective_scan_backward<T: Element>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bseq: &Tensor<T>,
    cseq: &Tensor<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> SelectiveGrads<T> {
    let dims = selective_dims(delta, a, bseq, cseq, x).expect("validated in forward");
    let ScanDims { batch, len, ch, state } = dims;
    let cn = dims.cn();
    let coeffs = Selective {
        dims,
        delta: delta.data(),
        a: a.data(),
        bseq: bseq.data(),
        x: x.data(),
    };
    let mut d_delta = vec![T::zero(); delta.numel()];
    let mut d_a = vec![T::zero(); a.numel()];
    let mut d_b = vec![T::zero(); bseq.numel()];
    let mut d_c = vec![T::zero(); cseq.numel()];
    let mut d_x = vec![T::zero(); x.numel()];

    let mut hs = vec![T::zero(); len * cn];
    let mut decays = vec![T::zero(); len * cn];
    let mut drive = vec![T::zero(); cn];
    let mut dh = vec![T::zero(); cn];
    for b in 0..batch {
        let mut prev = vec![T::zero(); cn];
        for l in 0..len {
            let dec = &mut decays[l * cn..][..cn];
            coeffs.step(b, l, dec, &mut drive);
            let h = &mut hs[l * cn..][..cn];
            for i in 0..cn {
                h[i] = dec[i] * prev[i] + drive[i];
            }
            prev.copy_from_slice(h);
        }

        dh.iter_mut().for_each(|v| *v = T::zero());
        for l in (0..len).rev() {
            let row = b * len + l;
            let g = &dy.data()[row * ch..][..ch];
            let cs = &cseq.data()[row * state..][..state];
            let bs = &bseq.data()[row * state..][..state];
            let dl = &delta.data()[row * ch..][..ch];
            let xs = &x.data()[row * ch..][..ch];
            let h = &hs[l * cn..][..cn];
            let dec = &decays[l * cn..][..cn];

            for c in 0..ch {
                for n in 0..state {
                    dh[c * state + n] = dh[c * state + n] + cs[n] * g[c];
                }
            }
            let dcs = &mut d_c[row * state..][..state];
            for c in 0..ch {
                for n in 0..state {
                    dcs[n] = dcs[n] + g[c] * h[c * state + n];
                }
            }
            let dbs = &mut d_b[row * state..][..state];
            for c in 0..ch {
                let mut ddelta = T::zero();
                let mut dxc = T::zero();
                for n in 0..state {
                    let i = c * state + n;
                    let h_prev = if l == 0 { T::zero() } else { hs[(l - 1) * cn + i] };
                    let d_decay = dh[i] * h_prev;
                    let b_bar = dl[c] * bs[n];
                    dxc = dxc + dh[i] * b_bar;
                    let d_bbar = dh[i] * xs[c];
                    let a_cn = a.data()[i];
                    ddelta = ddelta + d_decay * dec[i] * a_cn + d_bbar * bs[n];
                    d_a[i] = d_a[i] + d_decay * dec[i] * dl[c];
                    dbs[n] = dbs[n] + d_bbar * dl[c];
                    dh[i] = dec[i] * dh[i];
                }
                d_delta[row * ch + c] = ddelta;
                d_x[row * ch + c] = dxc;
            }
        }
    }
    SelectiveGrads {
        delta: Tensor::new(delta.shape(), d_delta).expect("d_delta"),
        a: Tensor::new(a.shape(), d_a).expect("d_a"),
        bseq: Tensor::new(bseq.shape(), d_b).expect("d_b"),
        cseq: Tensor::new(cseq.shape(), d_c).expect("d_c"),
        x: Tensor::new(x.shape(), d_x).expect("d_x"),
    }
}

/// Differentiable selective scan with on-the-fly discretization.
pub fn selective_scan<'g, T: Element>(
    delta: Var<'g, T>,
    a: Var<'g, T>,
    bseq: Var<'g, T>,
    cseq: Var<'g, T>,
    x: Var<'g, T>,
    cfg: &ScanConfig,
) -> Result<Var<'g, T>> {
    cfg.validate()?;
    let (dv, av, bv, cv, xv) = (delta.value(), a.value(), bseq.value(), cseq.value(), x.value());
    let y = selective_scan_forward(&dv, &av, &bv, &cv, &xv, cfg)?;
    Ok(delta.graph().custom(&[delta, a, bseq, cseq, x], y, move |g, need| {
        let grads = selective_scan_backward(&dv, &av, &bv, &cv, &xv, g);
        vec![
            need[0].then_some(grads.delta),
            need[1].then_some(grads.a),
            need[2].then_some(grads.bseq),
            need[3].then_some(grads.cseq),
            need[4].then_some(grads.x),
        ]
    }))
}
