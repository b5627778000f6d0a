//! Acceptance gate. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero if any fails.
//!
//! Runs the full smoke training twice (for the rerun check) plus two short
//! ablation runs, so expect it to take a while.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mtmamba_core::decoder::{Model, Preset};
use mtmamba_core::ssm::{bench_scan, BenchGrid, ScanMode};
use mtmamba_harness::config::RunConfig;
use mtmamba_harness::data::Dataset;
use mtmamba_harness::train::{train_with, TrainSummary, FINAL_CKPT, LOG_FILE};
use mtmamba_harness::verify::{run_suite, tall_grid_flip_error, Suite, VerifyOptions};
use mtmamba_harness::{init_threads, Result};

const SMOKE_CLASSES: usize = 5;
const SMOKE_ITERS: usize = 500;
const ABLATION_ITERS: usize = 100;
/// The criterion leaves the step size open. The 1e-4 default is tuned for a
/// pretrained encoder and reaches only ~0.31 train mIoU here in 500 steps.
const SMOKE_LR: f64 = 1e-3;

struct Gate {
    failed: usize,
}

impl Gate {
    fn record(&mut self, name: &str, passed: bool, detail: impl AsRef<str>) {
        if !passed {
            self.failed += 1;
        }
        println!("[{}] {name}: {}", if passed { "PASS" } else { "FAIL" }, detail.as_ref());
    }

    /// Runs a suite, echoing its individual checks, and records one line.
    fn suite(&mut self, name: &str, suite: Suite, budget: Option<Duration>) {
        match run_suite(suite, &VerifyOptions::default()) {
            Ok(rep) => {
                for line in rep.lines() {
                    println!("    {line}");
                }
                let in_time = budget.map_or(true, |b| rep.seconds < b.as_secs_f64());
                let failing = rep.checks.iter().filter(|c| !c.passed).count();
                let budget_note = budget.map_or(String::new(), |b| format!(" (budget {}s)", b.as_secs()));
                self.record(
                    name,
                    rep.passed() && in_time,
                    format!("{} checks, {failing} failing, {:.1}s{budget_note}", rep.checks.len(), rep.seconds),
                );
            }
            Err(e) => self.record(name, false, format!("error: {e}")),
        }
    }
}

fn smoke_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 0;
    cfg.image_height = 64;
    cfg.image_width = 64;
    cfg.base_width = 32;
    cfg.state_size = 8;
    cfg.tasks = vec![
        mtmamba_core::tasks::TaskSpec::segmentation("seg", SMOKE_CLASSES).expect("valid spec"),
        mtmamba_core::tasks::TaskSpec::depth("depth"),
    ];
    cfg.loss_weights = vec![1.0, 1.0];
    cfg.apply_preset(Preset::Stm2Ctm);
    cfg.iterations = SMOKE_ITERS;
    cfg.batch_size = 4;
    cfg.lr = SMOKE_LR;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn smoke(gate: &mut Gate, root: &Path) -> Result<()> {
    let cfg = smoke_config(&root.join("smoke"));
    let data = Dataset::for_config(&cfg)?;
    let params = Model::<f32>::new(cfg.model_config())?.num_parameters();
    println!("    smoke: {params} parameters, {} training samples", data.train.len());
    let s: TrainSummary = train_with::<f32>(&cfg, &data)?;
    let miou = s.train_report.get("seg").map_or(f64::NAN, |e| e.value);
    let chance = 1.0 / SMOKE_CLASSES as f64;
    println!(
        "    smoke: loss {:.4} -> {:.4} (ratio {:.3}), train mIoU {miou:.3}, {:.0}s",
        s.initial_loss,
        s.final_loss,
        s.final_loss / s.initial_loss,
        s.seconds
    );
    gate.record(
        "smoke training: wall time",
        s.seconds < 30.0 * 60.0,
        format!("{:.0}s for {SMOKE_ITERS} iterations (limit 1800s)", s.seconds),
    );
    gate.record(
        "smoke training: loss halves",
        s.final_loss <= 0.5 * s.initial_loss,
        format!("final {:.4} vs initial {:.4}, ratio {:.3} (limit 0.5)", s.final_loss, s.initial_loss, s.final_loss / s.initial_loss),
    );
    gate.record(
        "smoke training: train mIoU above twice chance",
        miou > 2.0 * chance,
        format!("{miou:.4} vs {:.2}", 2.0 * chance),
    );

    let mut again = cfg.clone();
    again.out_dir = root.join("smoke_rerun");
    train_with::<f32>(&again, &data)?;
    let same_log = fs::read(cfg.out_dir.join(LOG_FILE))? == fs::read(again.out_dir.join(LOG_FILE))?;
    let same_ckpt = fs::read(cfg.out_dir.join(FINAL_CKPT))? == fs::read(again.out_dir.join(FINAL_CKPT))?;
    gate.record(
        "smoke training: rerun is bitwise identical",
        same_log && same_ckpt,
        format!("log identical: {same_log}, final checkpoint identical: {same_ckpt}"),
    );
    Ok(())
}

fn ablation(gate: &mut Gate, root: &Path) -> Result<()> {
    let mut names = Vec::new();
    for preset in [Preset::Stm2, Preset::Stm2Ctm] {
        let mut cfg = smoke_config(&root.join(preset.as_str()));
        cfg.apply_preset(preset);
        cfg.iterations = ABLATION_ITERS;
        let data = Dataset::for_config(&cfg)?;
        let s = train_with::<f32>(&cfg, &data)?;
        println!(
            "    {preset}: {} parameters, loss {:.4} -> {:.4}, {:.0}s",
            s.parameters, s.initial_loss, s.final_loss, s.seconds
        );
        let m = Model::<f32>::new(cfg.model_config())?;
        names.push(m.store.names().map(String::from).collect::<BTreeSet<_>>());
    }
    let (stm2, ctm) = (&names[0], &names[1]);
    let missing = stm2.difference(ctm).count();
    let extra: Vec<&String> = ctm.difference(stm2).collect();
    let only_ctm = extra.iter().all(|n| n.contains(".ctm."));
    gate.record(
        "ablation plumbing: stm2 vs stm2_ctm",
        missing == 0 && !extra.is_empty() && only_ctm,
        format!(
            "both trained {ABLATION_ITERS} iterations; {} extra parameters, all CTM: {only_ctm}; {missing} stm2 parameters absent",
            extra.len()
        ),
    );
    Ok(())
}

fn bench(gate: &mut Gate) -> Result<()> {
    let rows = bench_scan(&BenchGrid::default())?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in rows.iter().filter(|r| r.mode == ScanMode::Chunked) {
        let naive = rows
            .iter()
            .find(|n| n.mode == ScanMode::Naive && n.len == r.len && n.channels == r.channels && n.state == r.state)
            .expect("naive row");
        println!("    bench L={} chunk={}: chunked/naive speed {:.2}x", r.len, r.chunk, naive.wall_ms / r.wall_ms);
    }
    gate.record(
        "benchmark artifact",
        worst <= 1e-5 && !rows.is_empty(),
        format!("{} rows, max_rel_err {worst:.2e} (limit 1e-5)", rows.len()),
    );
    Ok(())
}

fn main() -> ExitCode {
    if let Err(e) = init_threads() {
        eprintln!("{e}");
        return ExitCode::FAILURE;
    }
    let start = Instant::now();
    let mut gate = Gate { failed: 0 };
    gate.suite("scan oracle equivalence", Suite::Scan, Some(Duration::from_secs(60)));
    gate.suite("gradient correctness", Suite::Grad, Some(Duration::from_secs(300)));
    gate.suite("identity at init", Suite::Identity, None);
    gate.suite("delta_m reproduction", Suite::DeltaM, None);
    gate.suite("ss2d properties", Suite::Ss2d, None);
    match tall_grid_flip_error() {
        Ok(e) => println!("    note: pair-swap flip on a 3x4 map is off by {e:.2e}; it is a symmetry only for single-row maps"),
        Err(e) => println!("    note: tall-grid flip probe failed: {e}"),
    }
    gate.suite("discretization order", Suite::Discretization, None);

    let root = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            gate.record("smoke training", false, format!("no temp dir: {e}"));
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = smoke(&mut gate, root.path()) {
        gate.record("smoke training", false, format!("error: {e}"));
    }
    if let Err(e) = ablation(&mut gate, root.path()) {
        gate.record("ablation plumbing", false, format!("error: {e}"));
    }
    if let Err(e) = bench(&mut gate) {
        gate.record("benchmark artifact", false, format!("error: {e}"));
    }

    println!(
        "acceptance: {} failing, {:.0}s total",
        gate.failed,
        start.elapsed().as_secs_f64()
    );
    if gate.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
