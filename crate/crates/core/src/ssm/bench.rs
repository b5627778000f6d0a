//! Throughput benchmark for the scan paths.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{selective_scan_forward, ScanConfig, ScanMode};

pub const CSV_HEADER: &str = "mode,L,C,N,chunk,wall_ms,elems_per_s,max_rel_err";

#[derive(Clone, Debug)]
pub struct BenchGrid {
    pub batch: usize,
    pub lengths: Vec<usize>,
    pub channels: Vec<usize>,
    pub states: Vec<usize>,
    pub chunks: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            batch: 1,
            lengths: vec![256, 1024, 4096, 16384],
            channels: vec![8],
            states: vec![16],
            chunks: vec![64, 256],
            warmup: 3,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: ScanMode,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// 0 for the naive path.
    pub chunk: usize,
    pub wall_ms: f64,
    /// State updates (`B·L·C·N`) per second.
    pub elems_per_s: f64,
    /// Deviation from the naive scan on the same inputs, relative to its max magnitude.
    pub max_rel_err: f64,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4e},{:.3e}",
            self.mode, self.len, self.channels, self.state, self.chunk, self.wall_ms, self.elems_per_s, self.max_rel_err
        )
    }
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Times naive and chunked selective scans over the grid in 32-bit.
pub fn bench_scan(grid: &BenchGrid) -> Result<Vec<BenchRow>> {
    if grid.warmup < 3 {
        return Err(Error::Config(format!("bench needs >= 3 warmup iterations, got {}", grid.warmup)));
    }
    let reps = grid.reps.max(1);
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    for &len in &grid.lengths {
        for &ch in &grid.channels {
            for &state in &grid.states {
                let b = grid.batch;
                let a = Tensor::<f32>::from_fn(&[ch, state], |i| -((i % state) as f32 + 1.0));
                let delta = Tensor::<f32>::from_fn(&[b, len, ch], |_| rng.gen_range(0.001f32.ln()..0.1f32.ln()).exp());
                let bseq = Tensor::<f32>::randn(&[b, len, state], &mut rng);
                let cseq = Tensor::<f32>::randn(&[b, len, state], &mut rng);
                let x = Tensor::<f32>::randn(&[b, len, ch], &mut rng);
                let elems = (b * len * ch * state) as f64;

                let time = |cfg: &ScanConfig| -> Result<(f64, Tensor<f32>)> {
                    let mut y = selective_scan_forward(&delta, &a, &bseq, &cseq, &x, cfg)?;
                    for _ in 1..grid.warmup {
                        y = selective_scan_forward(&delta, &a, &bseq, &cseq, &x, cfg)?;
                    }
                    let start = Instant::now();
                    for _ in 0..reps {
                        y = selective_scan_forward(&delta, &a, &bseq, &cseq, &x, cfg)?;
                    }
                    Ok((start.elapsed().as_secs_f64() * 1e3 / reps as f64, y))
                };

                let (naive_ms, reference) = time(&ScanConfig::naive())?;
                rows.push(BenchRow {
                    mode: ScanMode::Naive,
                    len,
                    channels: ch,
                    state,
                    chunk: 0,
                    wall_ms: naive_ms,
                    elems_per_s: elems / (naive_ms / 1e3).max(1e-12),
                    max_rel_err: 0.0,
                });
                for &chunk in &grid.chunks {
                    let (ms, y) = time(&ScanConfig::chunked(chunk))?;
                    rows.push(BenchRow {
                        mode: ScanMode::Chunked,
                        len,
                        channels: ch,
                        state,
                        chunk,
                        wall_ms: ms,
                        elems_per_s: elems / (ms / 1e3).max(1e-12),
                        max_rel_err: y.max_rel_diff(&reference),
                    });
                }
            }
        }
    }
    Ok(rows)
}
