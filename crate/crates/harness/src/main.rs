use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtmamba_core::decoder::{Model, Preset};
use mtmamba_core::io::load_checkpoint;
use mtmamba_core::ssm::{bench_scan, rows_to_csv, BenchGrid, ScanMode};
use mtmamba_core::tasks::MetricReport;
use mtmamba_core::{DType, Element};
use mtmamba_harness::data::Dataset;
use mtmamba_harness::eval::{evaluate, with_baseline};
use mtmamba_harness::train::{train, CONFIG_FILE};
use mtmamba_harness::verify::{run_suite, Suite, VerifyOptions};
use mtmamba_harness::{init_threads, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "mtmamba", version, about = "Multi-task Mamba decoder: train, evaluate, verify, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes logs and checkpoints to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides stm_per_stage and ctm with a named ablation row.
        #[arg(long)]
        preset: Option<Preset>,
        /// Overrides out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task metrics of a checkpoint on a dataset split, as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Metric report JSON of a single-task baseline; adds delta_m.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suites; exits nonzero if any check fails.
    Verify {
        #[arg(long)]
        suite: Option<Suite>,
        /// Replace the chunked-scan combine with a broken one.
        #[arg(long, hide = true)]
        corrupt_combine: bool,
    },
    /// Time naive and chunked scans and write a CSV.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Generate the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli.cmd));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train { config, preset, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(p) = preset {
                cfg.apply_preset(p);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let s = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s.to_json())?);
            Ok(true)
        }
        Cmd::Eval {
            ckpt,
            data,
            config,
            split,
            baseline,
            out,
        } => {
            let config = config.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE));
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            let mut report = match cfg.dtype {
                DType::F32 => eval_ckpt::<f32>(&cfg, &ckpt, &ds, &split)?,
                DType::F64 => eval_ckpt::<f64>(&cfg, &ckpt, &ds, &split)?,
            };
            if let Some(b) = baseline {
                let base = MetricReport::from_json(&serde_json::from_str(&fs::read_to_string(b)?)?)?;
                report = with_baseline(report, &base)?;
            }
            let text = serde_json::to_string_pretty(&report.to_json())?;
            if let Some(o) = out {
                fs::write(o, format!("{text}\n"))?;
            }
            println!("{text}");
            Ok(true)
        }
        Cmd::Verify { suite, corrupt_combine } => {
            let opts = VerifyOptions { corrupt_combine };
            let suites = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
            let mut ok = true;
            for s in suites {
                let rep = run_suite(s, &opts)?;
                for line in rep.lines() {
                    println!("{line}");
                }
                println!("suite {s}: {} in {:.1}s", if rep.passed() { "ok" } else { "FAILED" }, rep.seconds);
                ok &= rep.passed();
            }
            Ok(ok)
        }
        Cmd::Bench { out, lengths, reps } => {
            let mut grid = BenchGrid {
                reps,
                ..BenchGrid::default()
            };
            if let Some(l) = lengths {
                grid.lengths = l;
            }
            let rows = bench_scan(&grid)?;
            fs::write(&out, rows_to_csv(&rows))?;
            for r in rows.iter().filter(|r| r.mode == ScanMode::Chunked) {
                let naive = rows
                    .iter()
                    .find(|n| n.mode == ScanMode::Naive && (n.len, n.channels, n.state) == (r.len, r.channels, r.state))
                    .expect("naive row per cell");
                println!(
                    "L={} C={} N={} chunk={}: chunked/naive speed {:.2}x, max rel err {:.1e}",
                    r.len,
                    r.channels,
                    r.state,
                    r.chunk,
                    naive.wall_ms / r.wall_ms,
                    r.max_rel_err
                );
            }
            Ok(rows.iter().all(|r| r.max_rel_err <= 1e-5))
        }
        Cmd::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::generate(cfg.seed, cfg.image_height, cfg.image_width, cfg.classes(), cfg.train_samples, cfg.val_samples)?;
            ds.save(&out)?;
            println!("wrote {} train and {} val samples to {}", ds.train.len(), ds.val.len(), out.display());
            Ok(true)
        }
    }
}

fn eval_ckpt<T: Element>(cfg: &RunConfig, ckpt: &Path, ds: &Dataset, split: &str) -> Result<MetricReport> {
    if (ds.height, ds.width) != (cfg.image_height, cfg.image_width) {
        return Err(Error::Data(format!(
            "dataset is {}x{}, model config expects {}x{}",
            ds.height, ds.width, cfg.image_height, cfg.image_width
        )));
    }
    let mut model = Model::<T>::new(cfg.model_config())?;
    load_checkpoint(ckpt, &mut model.store)?;
    Ok(evaluate(&model, ds.split(split)?, cfg.batch_size, &cfg.loss_weights)?.report)
}
