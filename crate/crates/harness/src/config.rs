//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are skipped. Keys not listed in
//! [`KEYS`] are rejected, as are duplicates; absent keys keep their default.
//! [`RunConfig::to_text`] writes every key, so a written file parses back to
//! an identical config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mtmamba_core::blocks::GateMode;
use mtmamba_core::decoder::{check_image_size, ModelConfig, Preset};
use mtmamba_core::ssm::{ScanConfig, ScanMode};
use mtmamba_core::tasks::{TaskKind, TaskSpec};
use mtmamba_core::DType;

use crate::error::{Error, Result};

pub const KEYS: &[&str] = &[
    "seed",
    "image_height",
    "image_width",
    "base_width",
    "state_size",
    "alpha",
    "tasks",
    "loss_weights",
    "stm_per_stage",
    "ctm",
    "ctm_gate",
    "scan_mode",
    "scan_chunk",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "poly_power",
    "iterations",
    "batch_size",
    "dtype",
    "train_samples",
    "val_samples",
    "checkpoint_every",
    "data_dir",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub base_width: usize,
    pub state_size: usize,
    pub alpha: usize,
    pub tasks: Vec<TaskSpec>,
    /// One weight per task, multiplying its loss in the training objective.
    pub loss_weights: Vec<f64>,
    pub stm_per_stage: usize,
    pub ctm: bool,
    pub ctm_gate: GateMode,
    pub scan: ScanConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub dtype: DType,
    pub train_samples: usize,
    pub val_samples: usize,
    pub checkpoint_every: usize,
    /// Dataset written by `gen-data`; generated in memory when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_height: 64,
            image_width: 64,
            base_width: 32,
            state_size: 16,
            alpha: 2,
            tasks: vec![
                TaskSpec::segmentation("seg", 5).expect("valid"),
                TaskSpec::depth("depth"),
            ],
            loss_weights: vec![1.0, 1.0],
            stm_per_stage: 2,
            ctm: true,
            ctm_gate: GateMode::Adaptive,
            scan: ScanConfig::default(),
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            iterations: 500,
            batch_size: 4,
            dtype: DType::F32,
            train_samples: 16,
            val_samples: 8,
            checkpoint_every: 50,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<V: FromStr>(key: &str, v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{v}'")),
    }
}

/// `name:kind[:classes]`, comma separated; `classes` only for segmentation.
pub fn parse_tasks(v: &str) -> std::result::Result<Vec<TaskSpec>, String> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let kind = parts.get(1).ok_or_else(|| format!("task '{item}' needs name:kind"))?;
            let kind = TaskKind::from_str(kind).map_err(|e| e.to_string())?;
            let classes = match (kind, parts.len()) {
                (TaskKind::Segmentation, 3) => parse_num("classes", parts[2])?,
                (TaskKind::Segmentation, _) => return Err(format!("segmentation task '{item}' needs name:segmentation:K")),
                (_, 2) => 0,
                _ => return Err(format!("task '{item}' takes no class count")),
            };
            TaskSpec::new(parts[0], kind, classes).map_err(|e| e.to_string())
        })
        .collect()
}

fn format_tasks(tasks: &[TaskSpec]) -> String {
    let items: Vec<String> = tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::Segmentation => format!("{}:{}:{}", t.name, t.kind, t.out_channels),
            _ => format!("{}:{}", t.name, t.kind),
        })
        .collect();
    items.join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        let mut weights_given = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| Error::ConfigLine { line: line_no, detail };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key '{key}'")));
            }
            if seen.contains(&key) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            seen.push(key);
            weights_given |= key == "loss_weights";
            cfg.set(key, value).map_err(err)?;
        }
        if !weights_given {
            cfg.loss_weights = vec![1.0; cfg.tasks.len()];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "image_height" => self.image_height = parse_num(key, v)?,
            "image_width" => self.image_width = parse_num(key, v)?,
            "base_width" => self.base_width = parse_num(key, v)?,
            "state_size" => self.state_size = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "tasks" => self.tasks = parse_tasks(v)?,
            "loss_weights" => {
                self.loss_weights = v.split(',').map(|w| parse_num(key, w.trim())).collect::<std::result::Result<_, _>>()?
            }
            "stm_per_stage" => self.stm_per_stage = parse_num(key, v)?,
            "ctm" => self.ctm = parse_bool(key, v)?,
            "ctm_gate" => self.ctm_gate = v.parse().map_err(|e: mtmamba_core::Error| e.to_string())?,
            "scan_mode" => self.scan.mode = v.parse::<ScanMode>().map_err(|e| e.to_string())?,
            "scan_chunk" => self.scan.chunk_len = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "poly_power" => self.poly_power = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "dtype" => self.dtype = v.parse::<DType>().map_err(|e| e.to_string())?,
            "train_samples" => self.train_samples = parse_num(key, v)?,
            "val_samples" => self.val_samples = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => unreachable!("key list and setter disagree on '{key}'"),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("image_height", self.image_height.to_string());
        put("image_width", self.image_width.to_string());
        put("base_width", self.base_width.to_string());
        put("state_size", self.state_size.to_string());
        put("alpha", self.alpha.to_string());
        put("tasks", format_tasks(&self.tasks));
        put("loss_weights", self.loss_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
        put("stm_per_stage", self.stm_per_stage.to_string());
        put("ctm", self.ctm.to_string());
        put("ctm_gate", self.ctm_gate.to_string());
        put("scan_mode", self.scan.mode.to_string());
        put("scan_chunk", self.scan.chunk_len.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps", self.eps.to_string());
        put("poly_power", self.poly_power.to_string());
        put("iterations", self.iterations.to_string());
        put("batch_size", self.batch_size.to_string());
        put("dtype", self.dtype.to_string());
        put("train_samples", self.train_samples.to_string());
        put("val_samples", self.val_samples.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("data_dir", self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        self.stm_per_stage = preset.stm_per_stage();
        self.ctm = preset.ctm();
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_width: self.base_width,
            state_size: self.state_size,
            alpha: self.alpha,
            stm_per_stage: self.stm_per_stage,
            ctm: self.ctm,
            ctm_gate: self.ctm_gate,
            tasks: self.tasks.clone(),
            scan: self.scan,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        check_image_size(self.image_height, self.image_width)?;
        if self.loss_weights.len() != self.tasks.len() {
            return Err(Error::Config(format!(
                "loss_weights has {} entries for {} tasks",
                self.loss_weights.len(),
                self.tasks.len()
            )));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss_weights must be finite and non-negative".into()));
        }
        let finite_pos = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        finite_pos("lr", self.lr)?;
        finite_pos("weight_decay", self.weight_decay)?;
        finite_pos("poly_power", self.poly_power)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.iterations == 0 || self.batch_size == 0 || self.train_samples == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("iterations, batch_size, train_samples and checkpoint_every must be positive".into()));
        }
        let classes: Vec<usize> = self.tasks.iter().filter(|t| t.kind == TaskKind::Segmentation).map(|t| t.out_channels).collect();
        if classes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config("all segmentation tasks must share one class count".into()));
        }
        Ok(())
    }

    /// Number of segmentation classes in the synthetic scenes.
    pub fn classes(&self) -> usize {
        self.tasks
            .iter()
            .find(|t| t.kind == TaskKind::Segmentation)
            .map_or(crate::data::DEFAULT_CLASSES, |t| t.out_channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.beta1, c.beta2, c.eps, c.poly_power), (1e-4, 1e-5, 0.9, 0.999, 1e-8, 0.9));
        assert_eq!((c.batch_size, c.iterations), (4, 500));
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let e = RunConfig::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("unknown key 'learning_rate'"), "{e}");
        let e = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
        assert!(RunConfig::parse("seed 1").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::parse("image_height = 40").is_err());
        assert!(RunConfig::parse("loss_weights = 1").is_err());
        assert!(RunConfig::parse("beta2 = 1.0").is_err());
        assert!(RunConfig::parse("tasks = a:segmentation").is_err());
        assert!(RunConfig::parse("tasks = a:depth:3").is_err());
        assert!(RunConfig::parse("stm_per_stage = 4").is_err());
        let c = RunConfig::parse("tasks = s:segmentation:3,n:normal,b:boundary\n# comment\n").unwrap();
        assert_eq!(c.loss_weights, vec![1.0; 3]);
        assert_eq!(c.classes(), 3);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            any::<u64>(),
            1usize..4,
            1usize..4,
            1usize..64,
            prop_oneof![Just(GateMode::Adaptive), Just(GateMode::Zero), Just(GateMode::One)],
            1e-9f64..1.0,
            0.0f64..0.1,
            0.0f64..0.9999,
            proptest::collection::vec(0.0f64..10.0, 3),
            any::<bool>(),
            proptest::option::of("[a-z]{1,8}"),
        )
            .prop_map(|(seed, h, stm, chunk, gate, lr, wd, b2, w, f64_, dir)| RunConfig {
                seed,
                image_height: 32 * h,
                stm_per_stage: stm,
                scan: ScanConfig::chunked(chunk),
                ctm_gate: gate,
                lr,
                weight_decay: wd,
                beta2: b2,
                tasks: vec![
                    TaskSpec::segmentation("s", 7).unwrap(),
                    TaskSpec::normal("n"),
                    TaskSpec::boundary("b"),
                ],
                loss_weights: w,
                dtype: if f64_ { DType::F64 } else { DType::F32 },
                data_dir: dir.map(PathBuf::from),
                ..RunConfig::default()
            })
    }

    proptest! {
        #[test]
        fn text_round_trip_is_lossless(c in arb_config()) {
            let back = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), c.to_text());
        }
    }
}
