//! Selective state-space layers.
//!
//! An S6 head maps a sequence `x: [B, L, C]` through input-dependent
//! parameters: `B = Linear(x)`, `C = Linear(x)` (each `[B, L, N]`),
//! `Δ = softplus(Δ̃ + Linear(x))` with a low-rank `Linear`, and a diagonal
//! per-channel state matrix `A = −exp(A_log)` of shape `[C, N]`. The
//! discretized system is then run through a scan.

mod bench;
mod scan;
mod ss2d;

pub use bench::{bench_scan, rows_to_csv, BenchGrid, BenchRow, CSV_HEADER};
pub use scan::{
    combine, discretize, selective_scan, selective_scan_forward, ssm_scan_chunked, ssm_scan_chunked_using,
    ssm_scan_naive, Combine,
};
pub use ss2d::{scan_in_order, scan_order, ss2d, ss2d_direction, ss2d_forward, ss2d_with_orders, Direction};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_STATE_SIZE: usize = 16;
pub const DEFAULT_CHUNK_LEN: usize = 64;
const DT_MIN: f64 = 0.001;
const DT_MAX: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Naive,
    Chunked,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(ScanMode::Naive),
            "chunked" => Ok(ScanMode::Chunked),
            other => Err(Error::Config(format!("unknown scan mode '{other}' (naive|chunked)"))),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanMode::Naive => "naive",
            ScanMode::Chunked => "chunked",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanConfig {
    pub mode: ScanMode,
    pub chunk_len: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self::chunked(DEFAULT_CHUNK_LEN)
    }
}

impl ScanConfig {
    pub fn naive() -> Self {
        Self {
            mode: ScanMode::Naive,
            chunk_len: DEFAULT_CHUNK_LEN,
        }
    }

    pub fn chunked(chunk_len: usize) -> Self {
        Self {
            mode: ScanMode::Chunked,
            chunk_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 {
            return Err(Error::Config("chunk_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Low-rank width of the step-size projection: `max(1, ⌈C/16⌉)`.
pub fn dt_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

/// The fields of one S6 head, generic over storage (tensors, parameter ids
/// or graph variables).
#[derive(Clone, Debug, PartialEq)]
pub struct SsmFields<P> {
    /// `[C, N]`; the realized state matrix is `−exp(a_log)`.
    pub a_log: P,
    /// `[C]`, the learnable `Δ̃` broadcast over batch and length.
    pub delta_bias: P,
    pub w_b: P,
    pub b_b: P,
    pub w_c: P,
    pub b_c: P,
    /// `[C, R]` then `[R, C]`.
    pub dt_down: P,
    pub dt_up: P,
}

pub const SSM_FIELD_NAMES: [&str; 8] = ["a_log", "delta_bias", "w_b", "b_b", "w_c", "b_c", "dt_down", "dt_up"];

impl<P> SsmFields<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SsmFields<Q> {
        SsmFields {
            a_log: f(&self.a_log),
            delta_bias: f(&self.delta_bias),
            w_b: f(&self.w_b),
            b_b: f(&self.b_b),
            w_c: f(&self.w_c),
            b_c: f(&self.b_c),
            dt_down: f(&self.dt_down),
            dt_up: f(&self.dt_up),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &P)> {
        SSM_FIELD_NAMES.into_iter().zip([
            &self.a_log,
            &self.delta_bias,
            &self.w_b,
            &self.b_b,
            &self.w_c,
            &self.b_c,
            &self.dt_down,
            &self.dt_up,
        ])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut P)> {
        SSM_FIELD_NAMES.into_iter().zip([
            &mut self.a_log,
            &mut self.delta_bias,
            &mut self.w_b,
            &mut self.b_b,
            &mut self.w_c,
            &mut self.b_c,
            &mut self.dt_down,
            &mut self.dt_up,
        ])
    }
}

pub type SsmParams<T> = SsmFields<Tensor<T>>;
pub type SsmParamIds = SsmFields<ParamId>;
pub type SsmVars<'g, T> = SsmFields<Var<'g, T>>;

fn init_field<T: Element, R: Rng + ?Sized>(field: &str, channels: usize, state: usize, rng: &mut R) -> Tensor<T> {
    let rank = dt_rank(channels);
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    match field {
        // A[c, n] = −(n + 1)
        "a_log" => Tensor::from_fn(&[channels, state], |i| T::lit(((i % state) as f64 + 1.0).ln())),
        // softplus(delta_bias) log-uniform in [DT_MIN, DT_MAX]
        "delta_bias" => Tensor::from_fn(&[channels], |_| {
            let dt = rng.gen_range(DT_MIN.ln()..DT_MAX.ln()).exp();
            T::lit(dt + (-(-dt).exp_m1()).ln())
        }),
        "w_b" | "w_c" => Tensor::rand_uniform(&[channels, state], -bound(channels), bound(channels), rng),
        "b_b" | "b_c" => Tensor::zeros(&[state]),
        "dt_down" => Tensor::rand_uniform(&[channels, rank], -bound(channels), bound(channels), rng),
        "dt_up" => Tensor::rand_uniform(&[rank, channels], -bound(rank), bound(rank), rng),
        _ => unreachable!("unknown ssm field {field}"),
    }
}

impl<T: Element> SsmParams<T> {
    /// Standard initialization for `channels` inputs and state size `state`.
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, rng: &mut R) -> Self {
        SsmFields {
            a_log: init_field(SSM_FIELD_NAMES[0], channels, state, rng),
            delta_bias: init_field(SSM_FIELD_NAMES[1], channels, state, rng),
            w_b: init_field(SSM_FIELD_NAMES[2], channels, state, rng),
            b_b: init_field(SSM_FIELD_NAMES[3], channels, state, rng),
            w_c: init_field(SSM_FIELD_NAMES[4], channels, state, rng),
            b_c: init_field(SSM_FIELD_NAMES[5], channels, state, rng),
            dt_down: init_field(SSM_FIELD_NAMES[6], channels, state, rng),
            dt_up: init_field(SSM_FIELD_NAMES[7], channels, state, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Realized state matrix `A = −exp(A_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    /// Binds every field as a gradient-tracked leaf.
    pub fn bind_leaves<'g>(&self, g: &'g Graph<T>) -> SsmVars<'g, T> {
        self.map(|t| g.leaf(t.clone()))
    }
}

impl SsmParamIds {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize, state: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(SSM_FIELD_NAMES.len());
        for name in SSM_FIELD_NAMES {
            ids.push(b.with(name, |rng| init_field(name, channels, state, rng))?);
        }
        Ok(SsmFields {
            a_log: ids[0],
            delta_bias: ids[1],
            w_b: ids[2],
            b_b: ids[3],
            w_c: ids[4],
            b_c: ids[5],
            dt_down: ids[6],
            dt_up: ids[7],
        })
    }

    pub fn bind<'g, T: Element>(&self, g: &'g Graph<T>, store: &ParamStore<T>) -> SsmVars<'g, T> {
        self.map(|&id| g.param(store, id))
    }
}

/// Differentiable S6: `[B, L, C] -> [B, L, C]`.
pub fn s6<'g, T: Element>(x: Var<'g, T>, p: &SsmVars<'g, T>, cfg: &ScanConfig) -> Result<Var<'g, T>> {
    let bseq = x.linear(p.w_b, Some(p.b_b))?;
    let cseq = x.linear(p.w_c, Some(p.b_c))?;
    let delta = x.linear(p.dt_down, None)?.linear(p.dt_up, Some(p.delta_bias))?.softplus();
    let a = p.a_log.exp().neg();
    selective_scan(delta, a, bseq, cseq, x, cfg)
}

/// S6 on plain tensors.
pub fn s6_forward<T: Element>(x: &Tensor<T>, params: &SsmParams<T>, cfg: &ScanConfig) -> Result<Tensor<T>> {
    x.check_finite("s6 input")?;
    let g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let p = params.map(|t| g.constant(t.clone()));
    let y = s6(xv, &p, cfg)?;
    Ok((*y.value()).clone())
}
