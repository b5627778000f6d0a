//! The three-stage multi-task decoder, a small convolutional encoder that
//! produces the four-scale feature pyramid it consumes, and the full model.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::blocks::{eval_plain, Ctx, CtmBlock, GateMode, Linear, PatchExpand, StmBlock, DEFAULT_CONV_KERNEL};
use crate::error::{Error, Result};
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::ssm::{ScanConfig, DEFAULT_STATE_SIZE};
use crate::tasks::{Head, TaskSpec};
use crate::tensor::{Element, Tensor};

/// Total downsampling of the deepest encoder scale.
pub const INPUT_MULTIPLE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

/// Encoder outputs at strides 4, 8, 16, 32 with widths `C, 2C, 4C, 8C`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<T> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
}

impl<T: Element> EncoderFeatures<T> {
    /// Checks the stride and width ratios between scales.
    pub fn validate(&self) -> Result<()> {
        let (b, h, w, c) = self.f1.dims4("encoder features")?;
        for (i, f) in [&self.f2, &self.f3, &self.f4].into_iter().enumerate() {
            let s = 1 << (i + 1);
            let want = [b, h / s, w / s, c * s];
            if h % s != 0 || w % s != 0 || f.shape() != want {
                return Err(Error::shape(
                    "encoder features",
                    format!("f{} should be {want:?}, got {:?}", i + 2, f.shape()),
                ));
            }
        }
        Ok(())
    }
}

pub fn check_image_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        let up = |n: usize| n.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
        return Err(Error::Config(format!(
            "image size {h}x{w} must be divisible by {INPUT_MULTIPLE}; pad to {}x{} (add {} rows, {} columns)",
            up(h),
            up(w),
            up(h) - h,
            up(w) - w
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct EncoderStage {
    factor: usize,
    proj: Linear,
    conv_weight: ParamId,
    conv_bias: ParamId,
}

/// Patchify stem followed by three 2× downsampling stages. Each stage is a
/// strided patch projection, SiLU and a residual depthwise convolution.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    stages: Vec<EncoderStage>,
    pub width: usize,
}

impl ToyEncoder {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, width: usize) -> Result<Self> {
        b.scope("encoder", |b| {
            let mut stages = Vec::new();
            let mut c_in = IMAGE_CHANNELS;
            for i in 0..4 {
                let (factor, name) = if i == 0 { (4, "stem".to_string()) } else { (2, format!("down{}", i + 1)) };
                let c_out = width << i;
                let stage = b.scope(&name, |b| {
                    let proj = Linear::build(b, "proj", c_in * factor * factor, c_out, true)?;
                    let k = DEFAULT_CONV_KERNEL;
                    let conv_weight = b.uniform("conv.weight", &[k, k, c_out], 1.0 / k as f64)?;
                    let conv_bias = b.zeros("conv.bias", &[c_out])?;
                    Ok::<_, Error>(EncoderStage {
                        factor,
                        proj,
                        conv_weight,
                        conv_bias,
                    })
                })?;
                stages.push(stage);
                c_in = c_out;
            }
            Ok(ToyEncoder { stages, width })
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, image: Var<'g, T>) -> Result<[Var<'g, T>; 4]> {
        let shape = image.shape();
        let [_, h, w, c] = shape[..] else {
            return Err(Error::shape("encoder", format!("expected [B, H, W, 3], got {shape:?}")));
        };
        if c != IMAGE_CHANNELS {
            return Err(Error::shape("encoder", format!("expected {IMAGE_CHANNELS} image channels, got {c}")));
        }
        check_image_size(h, w)?;
        let mut x = image;
        let mut out = Vec::with_capacity(4);
        for s in &self.stages {
            let y = s.proj.forward(ctx, x.space_to_depth(s.factor)?)?.silu();
            x = y.add(y.conv2d_depthwise(ctx.p(s.conv_weight), Some(ctx.p(s.conv_bias)))?)?;
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Per-task path through one decoder stage.
#[derive(Clone, Debug)]
pub struct StageBranch {
    pub expand: PatchExpand,
    pub fuse: Linear,
    pub stms: Vec<StmBlock>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub branches: Vec<StageBranch>,
    pub ctm: Option<CtmBlock>,
    pub width_in: usize,
    pub width_out: usize,
}

/// Intermediates of one stage, indexed by task.
pub struct StageTrace<'g, T: Element> {
    /// After expand, skip concatenation and the fusion linear.
    pub fused: Vec<Var<'g, T>>,
    /// After the self-task blocks.
    pub self_task: Vec<Var<'g, T>>,
    pub outputs: Vec<Var<'g, T>>,
}

impl DecoderStage {
    pub fn forward_traced<'g, T: Element>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        prev: &[Var<'g, T>],
        skip: Var<'g, T>,
    ) -> Result<StageTrace<'g, T>> {
        if prev.len() != self.branches.len() {
            return Err(Error::Config(format!(
                "stage expects {} task features, got {}",
                self.branches.len(),
                prev.len()
            )));
        }
        let mut trace = StageTrace {
            fused: Vec::new(),
            self_task: Vec::new(),
            outputs: Vec::new(),
        };
        for (br, &z) in self.branches.iter().zip(prev) {
            let r = br.expand.forward(ctx, z)?;
            let (rs, ss) = (r.shape(), skip.shape());
            if rs != ss {
                return Err(Error::shape(
                    "decoder stage",
                    format!("skip {ss:?} does not match expanded features {rs:?}"),
                ));
            }
            let fused = br.fuse.forward(ctx, ctx.graph.concat(&[r, skip])?)?;
            let mut x = fused;
            for stm in &br.stms {
                x = stm.forward(ctx, x)?;
            }
            trace.fused.push(fused);
            trace.self_task.push(x);
        }
        trace.outputs = match &self.ctm {
            Some(ctm) => ctm.forward(ctx, &trace.self_task)?,
            None => trace.self_task.clone(),
        };
        Ok(trace)
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, prev: &[Var<'g, T>], skip: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        Ok(self.forward_traced(ctx, prev, skip)?.outputs)
    }
}

/// Named rows of the block-count ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One two-block model per task, trained and evaluated independently.
    SingleTask,
    Stm1,
    Stm2,
    Stm3,
    Stm2Ctm,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::SingleTask, Preset::Stm1, Preset::Stm2, Preset::Stm3, Preset::Stm2Ctm];

    pub fn stm_per_stage(self) -> usize {
        match self {
            Preset::Stm1 => 1,
            Preset::SingleTask | Preset::Stm2 | Preset::Stm2Ctm => 2,
            Preset::Stm3 => 3,
        }
    }

    pub fn ctm(self) -> bool {
        self == Preset::Stm2Ctm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::SingleTask => "single_task",
            Preset::Stm1 => "stm1",
            Preset::Stm2 => "stm2",
            Preset::Stm3 => "stm3",
            Preset::Stm2Ctm => "stm2_ctm",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}' (single_task|stm1|stm2|stm3|stm2_ctm)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub state_size: usize,
    pub alpha: usize,
    pub stm_per_stage: usize,
    pub ctm: bool,
    pub ctm_gate: GateMode,
    pub tasks: Vec<TaskSpec>,
    pub scan: ScanConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(tasks: Vec<TaskSpec>) -> Self {
        ModelConfig {
            base_width: 32,
            state_size: DEFAULT_STATE_SIZE,
            alpha: crate::blocks::DEFAULT_EXPANSION,
            stm_per_stage: 2,
            ctm: true,
            ctm_gate: GateMode::Adaptive,
            tasks,
            scan: ScanConfig::default(),
            seed: 0,
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.stm_per_stage = preset.stm_per_stage();
        self.ctm = preset.ctm();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.state_size == 0 || self.alpha == 0 {
            return Err(Error::Config("base_width, state_size and alpha must be positive".into()));
        }
        if !(1..=3).contains(&self.stm_per_stage) {
            return Err(Error::Config(format!("stm_per_stage must be 1, 2 or 3, got {}", self.stm_per_stage)));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config(format!("task name '{}' must be non-empty [A-Za-z0-9_]", t.name)));
            }
            if !seen.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task name '{}'", t.name)));
            }
        }
        self.scan.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let names: Vec<&str> = cfg.tasks.iter().map(|t| t.name.as_str()).collect();
        b.scope("decoder", |b| {
            let mut stages = Vec::new();
            for i in 1..=3 {
                let width_in = (8 * cfg.base_width) >> (i - 1);
                let width_out = width_in / 2;
                let stage = b.scope(&format!("stage{i}"), |b| {
                    let branches = names
                        .iter()
                        .map(|t| {
                            b.scope(t, |b| {
                                Ok(StageBranch {
                                    expand: PatchExpand::build(b, "expand", width_in)?,
                                    fuse: Linear::build(b, "fuse", 2 * width_out, width_out, true)?,
                                    stms: (0..cfg.stm_per_stage)
                                        .map(|j| StmBlock::build(b, &format!("stm{j}"), width_out, cfg.alpha, cfg.state_size))
                                        .collect::<Result<_>>()?,
                                })
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let ctm = if cfg.ctm {
                        Some(CtmBlock::build(b, "ctm", &names, width_out, cfg.alpha, cfg.state_size, cfg.ctm_gate)?)
                    } else {
                        None
                    };
                    Ok::<_, Error>(DecoderStage {
                        branches,
                        ctm,
                        width_in,
                        width_out,
                    })
                })?;
                stages.push(stage);
            }
            Ok(Decoder { stages })
        })
    }

    /// Runs the three stages with skips `f3, f2, f1`; every task starts from `f4`.
    pub fn forward_traced<'g, T: Element>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        feats: &[Var<'g, T>; 4],
    ) -> Result<Vec<StageTrace<'g, T>>> {
        let mut prev = vec![feats[3]; self.stages[0].branches.len()];
        let mut traces = Vec::with_capacity(3);
        for (stage, skip) in self.stages.iter().zip([feats[2], feats[1], feats[0]]) {
            let tr = stage.forward_traced(ctx, &prev, skip)?;
            prev = tr.outputs.clone();
            traces.push(tr);
        }
        Ok(traces)
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, feats: &[Var<'g, T>; 4]) -> Result<Vec<Var<'g, T>>> {
        Ok(self.forward_traced(ctx, feats)?.pop().expect("three stages").outputs)
    }
}

/// Encoder, decoder and per-task heads with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: ToyEncoder,
    pub decoder: Decoder,
    pub heads: Vec<Head>,
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, config.seed);
        let encoder = ToyEncoder::build(&mut b, config.base_width)?;
        let decoder = Decoder::build(&mut b, &config)?;
        let heads = b.scope("heads", |b| {
            config
                .tasks
                .iter()
                .map(|t| Head::build(b, &t.name, config.base_width, t.out_channels))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn ctx<'g, 's>(&'s self, graph: &'g Graph<T>) -> Ctx<'g, 's, T> {
        Ctx::new(graph, &self.store, self.config.scan)
    }

    /// Per-task raw outputs `[B, H, W, K_t]` for an image `[B, H, W, 3]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_, T>, image: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let feats = self.encoder.forward(ctx, image)?;
        let z = self.decoder.forward(ctx, &feats)?;
        self.heads.iter().zip(z).map(|(h, z)| h.forward(ctx, z)).collect()
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        image.check_finite("image")?;
        eval_plain(&self.store, &self.config.scan, |ctx| {
            Ok(self
                .forward(ctx, ctx.constant(image))?
                .into_iter()
                .map(|v| (*v.value()).clone())
                .collect())
        })
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<EncoderFeatures<T>> {
        eval_plain(&self.store, &self.config.scan, |ctx| {
            let [f1, f2, f3, f4] = self.encoder.forward(ctx, ctx.constant(image))?.map(|v| (*v.value()).clone());
            Ok(EncoderFeatures { f1, f2, f3, f4 })
        })
    }
}

pub fn toy_encoder_forward<T: Element>(image: &Tensor<T>, encoder: &ToyEncoder, store: &ParamStore<T>) -> Result<EncoderFeatures<T>> {
    eval_plain(store, &ScanConfig::default(), |ctx| {
        let [f1, f2, f3, f4] = encoder.forward(ctx, ctx.constant(image))?.map(|v| (*v.value()).clone());
        Ok(EncoderFeatures { f1, f2, f3, f4 })
    })
}

pub fn decoder_forward<T: Element>(
    feats: &EncoderFeatures<T>,
    decoder: &Decoder,
    store: &ParamStore<T>,
    scan: &ScanConfig,
) -> Result<Vec<Tensor<T>>> {
    feats.validate()?;
    eval_plain(store, scan, |ctx| {
        let f = [&feats.f1, &feats.f2, &feats.f3, &feats.f4].map(|t| ctx.constant(t));
        Ok(decoder.forward(ctx, &f)?.into_iter().map(|v| (*v.value()).clone()).collect())
    })
}
