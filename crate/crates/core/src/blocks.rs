//! Decoder building blocks: the Mamba feature extractor (MFE), the self-task
//! and cross-task blocks built on it, and the patch-expand resamplers.
//!
//! Blocks hold parameter ids only; values live in a [`ParamStore`] and are
//! bound into a [`Graph`] through a [`Ctx`] for each forward pass.

use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::LAYER_NORM_EPS;
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::ssm::{ss2d, ScanConfig, SsmParamIds, SsmVars};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EXPANSION: usize = 2;
pub const DEFAULT_CONV_KERNEL: usize = 3;

/// Binds stored parameters into one graph.
pub struct Ctx<'g, 's, T: Element> {
    pub graph: &'g Graph<T>,
    pub store: &'s ParamStore<T>,
    pub scan: ScanConfig,
}

impl<'g, 's, T: Element> Ctx<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, scan: ScanConfig) -> Self {
        Self { graph, store, scan }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.graph.param(self.store, id)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t.clone())
    }
}

/// Runs `f` on a non-recording graph.
pub fn eval_plain<T: Element, R>(
    store: &ParamStore<T>,
    scan: &ScanConfig,
    f: impl for<'g> FnOnce(&Ctx<'g, '_, T>) -> Result<R>,
) -> Result<R> {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, store, *scan);
    f(&ctx)
}

fn value<T: Element>(v: Var<'_, T>) -> Tensor<T> {
    (*v.value()).clone()
}

fn expect_channels(op: &'static str, shape: &[usize], c: usize) -> Result<()> {
    if shape.len() != 4 || shape[3] != c {
        return Err(Error::shape(op, format!("expected [B, H, W, {c}], got {shape:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Linear {
                weight: b.linear_weight("weight", c_in, c_out)?,
                bias: if bias { Some(b.zeros("bias", &[c_out])?) } else { None },
                c_in,
                c_out,
            })
        })
    }

    /// Weight and bias start at zero.
    pub fn build_zero<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Linear {
                weight: b.zeros("weight", &[c_in, c_out])?,
                bias: Some(b.zeros("bias", &[c_out])?),
                c_in,
                c_out,
            })
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(LayerNorm {
                gamma: b.ones("gamma", &[width])?,
                beta: b.zeros("beta", &[width])?,
                width,
            })
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), T::lit(LAYER_NORM_EPS))
    }
}

/// `LN ∘ SS2D ∘ SiLU ∘ DWConv ∘ Linear`, mapping `c_in` to `width` channels.
#[derive(Clone, Debug)]
pub struct Mfe {
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub heads: [SsmParamIds; 4],
    pub norm: LayerNorm,
    pub c_in: usize,
    pub width: usize,
}

impl Mfe {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        width: usize,
        state: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        if c_in == 0 || width == 0 || state == 0 {
            return Err(Error::Config("mfe widths and state size must be positive".into()));
        }
        b.scope(name, |b| {
            let in_proj = Linear::build(b, "in_proj", c_in, width, true)?;
            let (conv_weight, conv_bias) = b.scope("conv", |b| {
                let bound = 1.0 / kernel as f64;
                Ok::<_, Error>((b.uniform("weight", &[kernel, kernel, width], bound)?, b.zeros("bias", &[width])?))
            })?;
            let heads = b.scope("ss2d", |b| -> Result<Vec<SsmParamIds>> {
                (1..=4)
                    .map(|d| b.scope(&format!("d{d}"), |b| SsmParamIds::build(b, width, state)))
                    .collect()
            })?;
            let heads: [SsmParamIds; 4] = heads.try_into().expect("four heads");
            let norm = LayerNorm::build(b, "norm", width)?;
            Ok(Mfe {
                in_proj,
                conv_weight,
                conv_bias,
                heads,
                norm,
                c_in,
                width,
            })
        })
    }

    pub fn head_vars<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>) -> [SsmVars<'g, T>; 4] {
        [0, 1, 2, 3].map(|i| self.heads[i].map(|&id| ctx.p(id)))
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels("mfe", &z.shape(), self.c_in)?;
        let u = self.in_proj.forward(ctx, z)?;
        let u = u.conv2d_depthwise(ctx.p(self.conv_weight), Some(ctx.p(self.conv_bias)))?.silu();
        let y = ss2d(u, &self.head_vars(ctx), &ctx.scan)?;
        self.norm.forward(ctx, y)
    }
}

/// Self-task block: `z + out_proj(MFE(LN z) ⊙ SiLU(gate_proj(LN z)))`.
#[derive(Clone, Debug)]
pub struct StmBlock {
    pub norm: LayerNorm,
    pub mfe: Mfe,
    pub gate_proj: Linear,
    pub out_proj: Linear,
    pub channels: usize,
}

impl StmBlock {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        alpha: usize,
        state: usize,
    ) -> Result<Self> {
        let width = alpha * channels;
        b.scope(name, |b| {
            Ok(StmBlock {
                norm: LayerNorm::build(b, "norm", channels)?,
                mfe: Mfe::build(b, "mfe", channels, width, state, DEFAULT_CONV_KERNEL)?,
                gate_proj: Linear::build(b, "gate_proj", channels, width, true)?,
                out_proj: Linear::build_zero(b, "out_proj", width, channels)?,
                channels,
            })
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels("stm", &z.shape(), self.channels)?;
        let zn = self.norm.forward(ctx, z)?;
        let zt = self.mfe.forward(ctx, zn)?;
        let g = self.gate_proj.forward(ctx, zn)?.silu();
        z.add(self.out_proj.forward(ctx, zt.mul(g)?)?)
    }
}

/// How the cross-task block mixes task-specific and shared features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    /// `g = sigmoid(gate_proj(LN z))`.
    #[default]
    Adaptive,
    /// `g = 0`: shared features only.
    Zero,
    /// `g = 1`: task features only.
    One,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(GateMode::Adaptive),
            "zero" | "0" => Ok(GateMode::Zero),
            "one" | "1" => Ok(GateMode::One),
            other => Err(Error::Config(format!("unknown ctm gate '{other}' (adaptive|zero|one)"))),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Adaptive => "adaptive",
            GateMode::Zero => "zero",
            GateMode::One => "one",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CtmTaskBranch {
    pub norm: LayerNorm,
    pub mfe: Mfe,
    pub gate_proj: Linear,
    pub out_proj: Linear,
}

/// Cross-task block over `T` same-shaped features.
#[derive(Clone, Debug)]
pub struct CtmBlock {
    pub tasks: Vec<CtmTaskBranch>,
    pub shared_norm: LayerNorm,
    pub shared_mfe: Mfe,
    pub channels: usize,
    pub gate: GateMode,
}

/// Intermediates of one cross-task pass, indexed by task.
pub struct CtmTrace<'g, T: Element> {
    pub task_features: Vec<Var<'g, T>>,
    pub shared: Var<'g, T>,
    pub gates: Vec<Option<Var<'g, T>>>,
    pub blends: Vec<Var<'g, T>>,
    pub outputs: Vec<Var<'g, T>>,
}

impl CtmBlock {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        task_names: &[&str],
        channels: usize,
        alpha: usize,
        state: usize,
        gate: GateMode,
    ) -> Result<Self> {
        if task_names.is_empty() {
            return Err(Error::Config("cross-task block needs at least one task".into()));
        }
        let width = alpha * channels;
        let n = task_names.len();
        b.scope(name, |b| {
            let tasks = task_names
                .iter()
                .map(|t| {
                    b.scope(t, |b| {
                        Ok(CtmTaskBranch {
                            norm: LayerNorm::build(b, "norm", channels)?,
                            mfe: Mfe::build(b, "mfe", channels, width, state, DEFAULT_CONV_KERNEL)?,
                            gate_proj: Linear::build(b, "gate_proj", channels, width, true)?,
                            out_proj: Linear::build_zero(b, "out_proj", width, channels)?,
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (shared_norm, shared_mfe) = b.scope("shared", |b| {
                Ok::<_, Error>((
                    LayerNorm::build(b, "norm", n * channels)?,
                    Mfe::build(b, "mfe", n * channels, width, state, DEFAULT_CONV_KERNEL)?,
                ))
            })?;
            Ok(CtmBlock {
                tasks,
                shared_norm,
                shared_mfe,
                channels,
                gate,
            })
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn check_inputs<T: Element>(&self, feats: &[Var<'_, T>]) -> Result<()> {
        if feats.len() != self.tasks.len() {
            return Err(Error::Config(format!(
                "cross-task block built for {} tasks, got {} features",
                self.tasks.len(),
                feats.len()
            )));
        }
        let shape = feats[0].shape();
        expect_channels("ctm", &shape, self.channels)?;
        if let Some(f) = feats.iter().find(|f| f.shape() != shape) {
            return Err(Error::Config(format!(
                "cross-task features must share a shape: {shape:?} vs {:?}",
                f.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_traced<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, feats: &[Var<'g, T>]) -> Result<CtmTrace<'g, T>> {
        self.check_inputs(feats)?;
        let concat = ctx.graph.concat(feats)?;
        let shared = self.shared_mfe.forward(ctx, self.shared_norm.forward(ctx, concat)?)?;
        let mut trace = CtmTrace {
            task_features: Vec::new(),
            shared,
            gates: Vec::new(),
            blends: Vec::new(),
            outputs: Vec::new(),
        };
        for (branch, &z) in self.tasks.iter().zip(feats) {
            let zn = branch.norm.forward(ctx, z)?;
            let zt = branch.mfe.forward(ctx, zn)?;
            let (gate, blend) = match self.gate {
                GateMode::Adaptive => {
                    let g = branch.gate_proj.forward(ctx, zn)?.sigmoid();
                    (Some(g), ctx.graph.gate_blend(g, zt, shared)?)
                }
                GateMode::Zero => (None, shared),
                GateMode::One => (None, zt),
            };
            let out = z.add(branch.out_proj.forward(ctx, blend)?)?;
            trace.task_features.push(zt);
            trace.gates.push(gate);
            trace.blends.push(blend);
            trace.outputs.push(out);
        }
        Ok(trace)
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, feats: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        Ok(self.forward_traced(ctx, feats)?.outputs)
    }
}

/// `proj` to `r²·c_out` channels, then each pixel's channels unfold into an
/// `r × r` block: `out[b, r i + p, r j + q, c] = proj(z)[b, i, j, (r p + q) c_out + c]`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
    pub factor: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl PatchExpand {
    /// 2× upsampling, `C → C/2`.
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!("patch expand needs an even channel count, got {channels}")));
        }
        Self::build_with(b, name, channels, channels / 2, 2)
    }

    /// 4× upsampling to `c_out` channels.
    pub fn build_final<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::build_with(b, name, c_in, c_out, 4)
    }

    fn build_with<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("patch expand widths must be positive".into()));
        }
        b.scope(name, |b| {
            Ok(PatchExpand {
                proj: Linear::build(b, "proj", c_in, factor * factor * c_out, false)?,
                factor,
                c_in,
                c_out,
            })
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels("patch_expand", &z.shape(), self.c_in)?;
        self.proj.forward(ctx, z)?.depth_to_space(self.factor)
    }
}

pub fn mfe_forward<T: Element>(z: &Tensor<T>, mfe: &Mfe, store: &ParamStore<T>, scan: &ScanConfig) -> Result<Tensor<T>> {
    z.check_finite("mfe input")?;
    eval_plain(store, scan, |ctx| Ok(value(mfe.forward(ctx, ctx.constant(z))?)))
}

pub fn stm_forward<T: Element>(
    z: &Tensor<T>,
    block: &StmBlock,
    store: &ParamStore<T>,
    scan: &ScanConfig,
) -> Result<Tensor<T>> {
    z.check_finite("stm input")?;
    eval_plain(store, scan, |ctx| Ok(value(block.forward(ctx, ctx.constant(z))?)))
}

pub fn ctm_forward<T: Element>(
    feats: &[Tensor<T>],
    block: &CtmBlock,
    store: &ParamStore<T>,
    scan: &ScanConfig,
) -> Result<Vec<Tensor<T>>> {
    for f in feats {
        f.check_finite("ctm input")?;
    }
    eval_plain(store, scan, |ctx| {
        let vars: Vec<_> = feats.iter().map(|f| ctx.constant(f)).collect();
        Ok(block.forward(ctx, &vars)?.into_iter().map(value).collect())
    })
}

pub fn patch_expand<T: Element>(
    z: &Tensor<T>,
    layer: &PatchExpand,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    eval_plain(store, &ScanConfig::default(), |ctx| Ok(value(layer.forward(ctx, ctx.constant(z))?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{self, Activation};
    use crate::ssm::{ss2d_forward, SsmParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ssm_values(store: &ParamStore<f64>, mfe: &Mfe) -> [SsmParams<f64>; 4] {
        [0, 1, 2, 3].map(|i| mfe.heads[i].map(|&id| (**store.value(id)).clone()))
    }

    #[test]
    fn mfe_shape_and_zero_propagation() {
        let mut store = ParamStore::<f64>::new();
        let mfe = Mfe::build(&mut ParamBuilder::new(&mut store, 3), "mfe", 16, 32, 4, 3).unwrap();
        let z = Tensor::zeros(&[1, 8, 8, 16]);
        let y = mfe_forward(&z, &mfe, &store, &ScanConfig::default()).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 32]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mfe_matches_unfused_composition() {
        let mut store = ParamStore::<f64>::new();
        let mfe = Mfe::build(&mut ParamBuilder::new(&mut store, 5), "mfe", 3, 6, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Non-trivial biases so every term participates.
        for id in [mfe.in_proj.bias.unwrap(), mfe.conv_bias, mfe.norm.beta] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::randn(&shape, &mut rng)).unwrap();
        }
        let z = Tensor::randn(&[2, 4, 5, 3], &mut rng);
        let cfg = ScanConfig::default();
        let v = |id: ParamId| (**store.value(id)).clone();

        let u = ops::linear(&z, &v(mfe.in_proj.weight), Some(&v(mfe.in_proj.bias.unwrap()))).unwrap();
        let u = ops::conv2d_depthwise(&u, &v(mfe.conv_weight), Some(&v(mfe.conv_bias))).unwrap();
        let u = ops::activation(&u, Activation::Silu);
        let u = ss2d_forward(&u, &ssm_values(&store, &mfe), &cfg).unwrap();
        let expect = ops::layer_norm(&u, &v(mfe.norm.gamma), &v(mfe.norm.beta), LAYER_NORM_EPS).unwrap();

        let got = mfe_forward(&z, &mfe, &store, &cfg).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn mfe_rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let mfe = Mfe::build(&mut ParamBuilder::new(&mut store, 5), "mfe", 3, 6, 2, 3).unwrap();
        let z = Tensor::zeros(&[1, 2, 2, 4]);
        assert!(matches!(mfe_forward(&z, &mfe, &store, &ScanConfig::default()), Err(Error::Shape { .. })));
    }

    #[test]
    fn stm_is_identity_at_init() {
        let mut store = ParamStore::<f64>::new();
        let blk = StmBlock::build(&mut ParamBuilder::new(&mut store, 1), "stm", 4, 2, 4).unwrap();
        let z = Tensor::randn(&[2, 3, 3, 4], &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(stm_forward(&z, &blk, &store, &ScanConfig::default()).unwrap(), z);
    }

    #[test]
    fn stm_gate_saturation() {
        let mut store = ParamStore::<f64>::new();
        let blk = StmBlock::build(&mut ParamBuilder::new(&mut store, 1), "stm", 4, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.set_value(blk.out_proj.weight, Tensor::randn(&[8, 4], &mut rng)).unwrap();
        store.set_value(blk.gate_proj.weight, Tensor::zeros(&[4, 8])).unwrap();
        store.set_value(blk.gate_proj.bias.unwrap(), Tensor::full(&[8], -20.0)).unwrap();
        let z = Tensor::randn(&[1, 3, 3, 4], &mut rng);
        let cfg = ScanConfig::default();
        let y = stm_forward(&z, &blk, &store, &cfg).unwrap();

        let zn = {
            let v = |id: ParamId| (**store.value(id)).clone();
            ops::layer_norm(&z, &v(blk.norm.gamma), &v(blk.norm.beta), LAYER_NORM_EPS).unwrap()
        };
        let zt = mfe_forward(&zn, &blk.mfe, &store, &cfg).unwrap();
        let w = store.value(blk.out_proj.weight);
        let row_bound = (0..4)
            .map(|j| (0..8).map(|i| w.data()[i * 4 + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let bound = ops::silu(-20.0f64).abs() * zt.max_abs() * row_bound;
        let dev = y.sub(&z).unwrap().max_abs();
        assert!(dev <= bound * (1.0 + 1e-9), "{dev} > {bound}");
        assert!(dev > 0.0);
    }

    fn ctm_fixture(t: usize, seed: u64, gate: GateMode) -> (ParamStore<f64>, CtmBlock) {
        let mut store = ParamStore::<f64>::new();
        let names: Vec<String> = (0..t).map(|i| format!("t{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let blk = CtmBlock::build(&mut ParamBuilder::new(&mut store, seed), "ctm", &names, 3, 2, 4, gate).unwrap();
        (store, blk)
    }

    fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], rng: &mut ChaCha8Rng) {
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::randn(&shape, rng).scale(0.5)).unwrap();
        }
    }

    #[test]
    fn ctm_identity_at_init_and_contains_t_plus_one_mfes() {
        let (store, blk) = ctm_fixture(3, 4, GateMode::Adaptive);
        assert_eq!(store.names().filter(|n| n.ends_with("mfe.in_proj.weight")).count(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<_> = (0..3).map(|_| Tensor::randn(&[1, 2, 3, 3], &mut rng)).collect();
        let out = ctm_forward(&feats, &blk, &store, &ScanConfig::default()).unwrap();
        assert_eq!(out, feats);
    }

    #[test]
    fn ctm_rejects_bad_inputs() {
        let (store, blk) = ctm_fixture(2, 4, GateMode::Adaptive);
        let a = Tensor::<f64>::zeros(&[1, 2, 2, 3]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let cfg = ScanConfig::default();
        assert!(matches!(ctm_forward(&[a.clone()], &blk, &store, &cfg), Err(Error::Config(_))));
        assert!(matches!(ctm_forward(&[a, b], &blk, &store, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn ctm_gate_saturation_selects_branch() {
        let (mut store, blk) = ctm_fixture(2, 6, GateMode::Adaptive);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for br in &blk.tasks {
            store.set_value(br.gate_proj.weight, Tensor::zeros(&[3, 6])).unwrap();
        }
        let feats: Vec<_> = (0..2).map(|_| Tensor::randn(&[1, 3, 3, 3], &mut rng)).collect();
        for (bias, pick_task) in [(20.0, true), (-20.0, false)] {
            for br in &blk.tasks {
                store.set_value(br.gate_proj.bias.unwrap(), Tensor::full(&[6], bias)).unwrap();
            }
            eval_plain(&store, &ScanConfig::default(), |ctx| {
                let vars: Vec<_> = feats.iter().map(|f| ctx.constant(f)).collect();
                let tr = blk.forward_traced(ctx, &vars)?;
                for t in 0..2 {
                    let target = if pick_task { tr.task_features[t] } else { tr.shared };
                    let dev = tr.blends[t].value().sub(&target.value())?.max_abs();
                    let spread = tr.task_features[t].value().sub(&tr.shared.value())?.max_abs();
                    assert!(dev <= ops::sigmoid(-20.0f64) * spread * (1.0 + 1e-6), "{dev}");
                }
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn ctm_gates_in_open_interval_and_blend_is_convex() {
        let (mut store, blk) = ctm_fixture(2, 8, GateMode::Adaptive);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<ParamId> = blk.tasks.iter().flat_map(|b| [b.gate_proj.weight, b.gate_proj.bias.unwrap()]).collect();
        randomize(&mut store, &ids, &mut rng);
        let feats: Vec<_> = (0..2).map(|_| Tensor::randn(&[2, 2, 3, 3], &mut rng)).collect();
        eval_plain(&store, &ScanConfig::default(), |ctx| {
            let vars: Vec<_> = feats.iter().map(|f| ctx.constant(f)).collect();
            let tr = blk.forward_traced(ctx, &vars)?;
            let sh = tr.shared.value();
            for t in 0..2 {
                let g = tr.gates[t].unwrap().value();
                assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
                let (zt, bl) = (tr.task_features[t].value(), tr.blends[t].value());
                for i in 0..bl.numel() {
                    let (a, b) = (zt.data()[i], sh.data()[i]);
                    let slack = 1e-12 * (a.abs() + b.abs());
                    assert!(bl.data()[i] >= a.min(b) - slack && bl.data()[i] <= a.max(b) + slack);
                }
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn ctm_fixed_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats: Vec<_> = (0..2).map(|_| Tensor::randn(&[1, 2, 2, 3], &mut rng)).collect();
        for mode in [GateMode::Zero, GateMode::One] {
            let (store, blk) = ctm_fixture(2, 11, mode);
            eval_plain(&store, &ScanConfig::default(), |ctx| {
                let vars: Vec<_> = feats.iter().map(|f| ctx.constant(f)).collect();
                let tr = blk.forward_traced(ctx, &vars)?;
                for t in 0..2 {
                    let want = if mode == GateMode::One { tr.task_features[t] } else { tr.shared };
                    assert_eq!(*tr.blends[t].value(), *want.value());
                }
                Ok(())
            })
            .unwrap();
        }
        assert_eq!("one".parse::<GateMode>().unwrap(), GateMode::One);
        assert!("half".parse::<GateMode>().is_err());
    }

    #[test]
    fn ctm_single_task_matches_hand_trace() {
        let (mut store, blk) = ctm_fixture(1, 12, GateMode::Adaptive);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let br = &blk.tasks[0];
        randomize(&mut store, &[br.out_proj.weight, br.gate_proj.bias.unwrap()], &mut rng);
        let z = Tensor::randn(&[1, 3, 2, 3], &mut rng);
        let cfg = ScanConfig::default();
        let v = |id: ParamId| (**store.value(id)).clone();
        let ln = |x: &Tensor<f64>, n: &LayerNorm| ops::layer_norm(x, &v(n.gamma), &v(n.beta), LAYER_NORM_EPS).unwrap();

        let zn = ln(&z, &br.norm);
        let zt = mfe_forward(&zn, &br.mfe, &store, &cfg).unwrap();
        let zsh = mfe_forward(&ln(&z, &blk.shared_norm), &blk.shared_mfe, &store, &cfg).unwrap();
        let g = ops::activation(
            &ops::linear(&zn, &v(br.gate_proj.weight), Some(&v(br.gate_proj.bias.unwrap()))).unwrap(),
            Activation::Sigmoid,
        );
        let blend = Tensor::from_fn(g.shape(), |i| {
            g.data()[i] * zt.data()[i] + (1.0 - g.data()[i]) * zsh.data()[i]
        });
        let expect = z
            .add(&ops::linear(&blend, &v(br.out_proj.weight), Some(&v(br.out_proj.bias.unwrap()))).unwrap())
            .unwrap();
        let got = ctm_forward(&[z.clone()], &blk, &store, &cfg).unwrap();
        assert_eq!(got[0], expect);
        assert_ne!(got[0], z);
    }

    #[test]
    fn ctm_task_permutation_symmetry() {
        let (mut store, blk) = ctm_fixture(3, 14, GateMode::Adaptive);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let all: Vec<ParamId> = store.ids().collect();
        randomize(&mut store, &all, &mut rng);
        // Keep the state matrices stable after randomization.
        for id in all.iter().copied() {
            if store.get(id).name.ends_with("a_log") {
                let shape = store.value(id).shape().to_vec();
                store.set_value(id, Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng)).unwrap();
            }
        }
        let feats: Vec<_> = (0..3).map(|_| Tensor::randn(&[1, 2, 3, 3], &mut rng)).collect();
        let cfg = ScanConfig::default();
        let base = ctm_forward(&feats, &blk, &store, &cfg).unwrap();

        let perm = [2usize, 0, 1];
        let mut permuted = store.clone();
        let branch_ids = |b: &CtmTaskBranch| -> Vec<ParamId> {
            let mut ids = vec![b.norm.gamma, b.norm.beta, b.gate_proj.weight, b.gate_proj.bias.unwrap()];
            ids.extend([b.out_proj.weight, b.out_proj.bias.unwrap()]);
            ids.extend([b.mfe.in_proj.weight, b.mfe.in_proj.bias.unwrap(), b.mfe.conv_weight, b.mfe.conv_bias]);
            ids.extend([b.mfe.norm.gamma, b.mfe.norm.beta]);
            ids.extend(b.mfe.heads.iter().flat_map(|h| h.iter().map(|(_, &id)| id).collect::<Vec<_>>()));
            ids
        };
        for (new_t, &old_t) in perm.iter().enumerate() {
            for (dst, src) in branch_ids(&blk.tasks[new_t]).into_iter().zip(branch_ids(&blk.tasks[old_t])) {
                permuted.set_value(dst, (**store.value(src)).clone()).unwrap();
            }
        }
        // Shared norm and in_proj rows follow the channel-block order.
        let c = 3;
        let permute_rows = |t: &Tensor<f64>, row_len: usize| {
            Tensor::from_fn(t.shape(), |i| {
                let (row, col) = (i / row_len, i % row_len);
                let (blk_i, within) = (row / c, row % c);
                t.data()[(perm[blk_i] * c + within) * row_len + col]
            })
        };
        for id in [blk.shared_norm.gamma, blk.shared_norm.beta] {
            permuted.set_value(id, permute_rows(store.value(id), 1)).unwrap();
        }
        let w = blk.shared_mfe.in_proj.weight;
        permuted.set_value(w, permute_rows(store.value(w), blk.shared_mfe.width)).unwrap();

        let pfeats: Vec<_> = perm.iter().map(|&t| feats[t].clone()).collect();
        let out = ctm_forward(&pfeats, &blk, &permuted, &cfg).unwrap();
        for (new_t, &old_t) in perm.iter().enumerate() {
            let d = out[new_t].max_rel_diff(&base[old_t]);
            assert!(d <= 1e-12, "task {new_t}: {d}");
        }
    }

    #[test]
    fn patch_expand_shapes_and_index_law() {
        let mut store = ParamStore::<f64>::new();
        let pe = PatchExpand::build(&mut ParamBuilder::new(&mut store, 1), "pe", 8).unwrap();
        let z = Tensor::randn(&[1, 4, 4, 8], &mut ChaCha8Rng::seed_from_u64(0));
        let y = patch_expand(&z, &pe, &store).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 4]);
        assert_eq!(y.numel(), 4 * 4 * 8 * 2);

        // C = 2 at 1×1: proj = identity padded to 4 channels.
        let mut store = ParamStore::<f64>::new();
        let pe = PatchExpand::build(&mut ParamBuilder::new(&mut store, 1), "pe", 2).unwrap();
        let w = Tensor::from_f64(&[2, 4], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        store.set_value(pe.proj.weight, w).unwrap();
        let z = Tensor::from_f64(&[1, 1, 1, 2], &[3.0, 5.0]).unwrap();
        let y = patch_expand(&z, &pe, &store).unwrap();
        // proj(z) = [3, 5, 5, 3]; channel (2p+q) lands at (p, q).
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[3.0, 5.0, 5.0, 3.0]);

        assert!(PatchExpand::build(&mut ParamBuilder::new(&mut ParamStore::<f64>::new(), 1), "pe", 3).is_err());
    }

    #[test]
    fn final_patch_expand_shapes_and_tiling() {
        let mut store = ParamStore::<f64>::new();
        let fe = PatchExpand::build_final(&mut ParamBuilder::new(&mut store, 1), "fe", 32, 8).unwrap();
        let z = Tensor::randn(&[1, 8, 8, 32], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(patch_expand(&z, &fe, &store).unwrap().shape(), &[1, 32, 32, 8]);

        let mut store = ParamStore::<f64>::new();
        let fe = PatchExpand::build_final(&mut ParamBuilder::new(&mut store, 1), "fe", 1, 1).unwrap();
        store.set_value(fe.proj.weight, Tensor::from_fn(&[1, 16], |i| i as f64)).unwrap();
        let y = patch_expand(&Tensor::ones(&[1, 1, 1, 1]), &fe, &store).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        let expect: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(y.data(), &expect[..]);
    }
}
