//! Decoder wiring: shapes, identity at initialization, dataflow and the
//! ablation presets.

use mtmamba_core::blocks::{ctm_forward, patch_expand, stm_forward, Ctx};
use mtmamba_core::decoder::{decoder_forward, EncoderFeatures, Model, ModelConfig, Preset};
use mtmamba_core::ops::concat_channels;
use mtmamba_core::tasks::{task_loss, Labels, Target, TaskSpec};
use mtmamba_core::{Error, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn two_tasks() -> Vec<TaskSpec> {
    vec![TaskSpec::segmentation("seg", 5).unwrap(), TaskSpec::depth("depth")]
}

fn config(c: usize, preset: Preset) -> ModelConfig {
    let mut cfg = ModelConfig::new(two_tasks()).with_preset(preset);
    cfg.base_width = c;
    cfg.state_size = 4;
    cfg.seed = 3;
    cfg
}

fn randomize_residuals(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).name.contains("out_proj") {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::randn(&shape, &mut r).scale(0.2)).unwrap();
        }
    }
}

fn features(b: usize, h: usize, w: usize, c: usize, seed: u64) -> EncoderFeatures<f64> {
    let mut r = rng(seed);
    EncoderFeatures {
        f1: Tensor::randn(&[b, h / 4, w / 4, c], &mut r),
        f2: Tensor::randn(&[b, h / 8, w / 8, 2 * c], &mut r),
        f3: Tensor::randn(&[b, h / 16, w / 16, 4 * c], &mut r),
        f4: Tensor::randn(&[b, h / 32, w / 32, 8 * c], &mut r),
    }
}

fn consts<'g>(ctx: &Ctx<'g, '_, f64>, f: &EncoderFeatures<f64>) -> [mtmamba_core::Var<'g, f64>; 4] {
    [&f.f1, &f.f2, &f.f3, &f.f4].map(|t| ctx.constant(t))
}

#[test]
fn stage_one_shape_trace() {
    let m = Model::<f64>::new(config(16, Preset::Stm2Ctm)).unwrap();
    let f = features(1, 64, 64, 16, 1);
    let g = Graph::no_grad();
    let ctx = m.ctx(&g);
    let st = &m.decoder.stages[0];
    assert_eq!((st.width_in, st.width_out), (128, 64));
    let z = ctx.constant(&f.f4);
    assert_eq!(z.shape(), [1, 2, 2, 128]);
    let r = st.branches[0].expand.forward(&ctx, z).unwrap();
    assert_eq!(r.shape(), [1, 4, 4, 64]);
    let cat = g.concat(&[r, ctx.constant(&f.f3)]).unwrap();
    assert_eq!(cat.shape(), [1, 4, 4, 128]);
    assert_eq!(st.branches[0].fuse.forward(&ctx, cat).unwrap().shape(), [1, 4, 4, 64]);
    let widths: Vec<_> = m.decoder.stages.iter().map(|s| (s.width_in, s.width_out)).collect();
    assert_eq!(widths, [(128, 64), (64, 32), (32, 16)]);
}

#[test]
fn encoder_pyramid_shapes() {
    let m = Model::<f32>::new(config(16, Preset::Stm1)).unwrap();
    let img = Tensor::randn(&[2, 64, 64, 3], &mut rng(2));
    let f = m.encode(&img).unwrap();
    f.validate().unwrap();
    assert_eq!(f.f1.shape(), [2, 16, 16, 16]);
    assert_eq!(f.f2.shape(), [2, 8, 8, 32]);
    assert_eq!(f.f3.shape(), [2, 4, 4, 64]);
    assert_eq!(f.f4.shape(), [2, 2, 2, 128]);
}

#[test]
fn end_to_end_shape_law() {
    for c in [8, 16, 32] {
        for (h, w) in [(32, 32), (32, 64), (64, 32)] {
            let mut cfg = config(c, Preset::Stm1);
            cfg.state_size = 2;
            let m = Model::<f32>::new(cfg).unwrap();
            let img = Tensor::randn(&[1, h, w, 3], &mut rng(3));
            let outs = m.predict(&img).unwrap();
            assert_eq!(outs[0].shape(), [1, h, w, 5], "C={c} {h}x{w}");
            assert_eq!(outs[1].shape(), [1, h, w, 1], "C={c} {h}x{w}");
            let z = decoder_forward(&m.encode(&img).unwrap(), &m.decoder, &m.store, &m.config.scan).unwrap();
            for zt in z {
                assert_eq!(zt.shape(), [1, h / 4, w / 4, c]);
            }
        }
    }
}

#[test]
fn bad_image_size_hints_padding() {
    let m = Model::<f32>::new(config(8, Preset::Stm1)).unwrap();
    let err = m.predict(&Tensor::zeros(&[1, 40, 64, 3])).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("pad to 64x64 (add 24 rows, 0 columns)"), "{err}");
}

#[test]
fn every_stage_is_identity_after_fusion_at_init() {
    let m = Model::<f64>::new(config(8, Preset::Stm2Ctm)).unwrap();
    let f = features(2, 64, 32, 8, 4);
    let g = Graph::no_grad();
    let ctx = m.ctx(&g);
    let traces = m.decoder.forward_traced(&ctx, &consts(&ctx, &f)).unwrap();
    for (i, tr) in traces.iter().enumerate() {
        for t in 0..2 {
            assert_eq!(*tr.outputs[t].value(), *tr.fused[t].value(), "stage {} task {t}", i + 1);
        }
    }
}

#[test]
fn stage_matches_hand_composition() {
    let mut m = Model::<f64>::new(config(4, Preset::Stm2Ctm)).unwrap();
    randomize_residuals(&mut m.store, 5);
    let f = features(1, 64, 64, 4, 6);
    let (store, scan) = (&m.store, &m.config.scan);
    let st = &m.decoder.stages[0];

    let mut self_task = Vec::new();
    for br in &st.branches {
        let r = patch_expand(&f.f4, &br.expand, store).unwrap();
        let cat = concat_channels(&[&r, &f.f3]).unwrap();
        let w = store.value(br.fuse.weight);
        let b = store.value(br.fuse.bias.unwrap());
        let mut x = mtmamba_core::ops::linear(&cat, w, Some(b)).unwrap();
        for stm in &br.stms {
            x = stm_forward(&x, stm, store, scan).unwrap();
        }
        self_task.push(x);
    }
    let expect = ctm_forward(&self_task, st.ctm.as_ref().unwrap(), store, scan).unwrap();

    let g = Graph::no_grad();
    let ctx = m.ctx(&g);
    let z = ctx.constant(&f.f4);
    let got = st.forward(&ctx, &[z, z], ctx.constant(&f.f3)).unwrap();
    for (a, b) in got.iter().zip(&expect) {
        assert_eq!(*a.value(), *b);
    }
}

#[test]
fn skip_mismatch_is_a_shape_error() {
    let m = Model::<f64>::new(config(4, Preset::Stm1)).unwrap();
    let f = features(1, 64, 64, 4, 7);
    let g = Graph::no_grad();
    let ctx = m.ctx(&g);
    let z = ctx.constant(&f.f4);
    let err = m.decoder.stages[0].forward(&ctx, &[z, z], ctx.constant(&f.f2)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn single_task_runs_end_to_end() {
    let mut cfg = ModelConfig::new(vec![TaskSpec::segmentation("seg", 3).unwrap()]);
    cfg.base_width = 4;
    cfg.state_size = 2;
    let mut m = Model::<f64>::new(cfg).unwrap();
    randomize_residuals(&mut m.store, 8);
    let outs = m.predict(&Tensor::randn(&[1, 32, 32, 3], &mut rng(9))).unwrap();
    assert_eq!(outs.len(), 1);
    assert_eq!(outs[0].shape(), [1, 32, 32, 3]);
    assert!(outs[0].is_finite());
}

#[test]
fn perturbing_f1_leaves_earlier_stages_bit_identical() {
    let mut m = Model::<f64>::new(config(4, Preset::Stm2Ctm)).unwrap();
    randomize_residuals(&mut m.store, 10);
    let f = features(1, 64, 64, 4, 11);
    let mut f_alt = f.clone();
    f_alt.f1 = f.f1.map(|v| v + 0.5);
    let run = |feats: &EncoderFeatures<f64>| {
        let g = Graph::no_grad();
        let ctx = m.ctx(&g);
        let tr = m.decoder.forward_traced(&ctx, &consts(&ctx, feats)).unwrap();
        tr.iter()
            .map(|s| s.outputs.iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(&f), run(&f_alt));
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
    assert_ne!(a[2], b[2]);
}

#[test]
fn ctm_is_transparent_at_init() {
    let img = Tensor::randn(&[1, 32, 32, 3], &mut rng(12));
    let plain = Model::<f64>::new(config(4, Preset::Stm2)).unwrap();
    let with_ctm = Model::<f64>::new(config(4, Preset::Stm2Ctm)).unwrap();
    assert_eq!(plain.predict(&img).unwrap(), with_ctm.predict(&img).unwrap());
}

#[test]
fn zero_image_and_biases_give_zero_features() {
    let mut m = Model::<f64>::new(config(8, Preset::Stm1)).unwrap();
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        if m.store.get(id).name.ends_with("bias") {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let f = m.encode(&Tensor::zeros(&[1, 32, 32, 3])).unwrap();
    for t in [&f.f1, &f.f2, &f.f3, &f.f4] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn every_task_loss_reaches_the_stem() {
    let mut m = Model::<f64>::new(config(4, Preset::Stm2Ctm)).unwrap();
    randomize_residuals(&mut m.store, 13);
    let img = Tensor::randn(&[1, 32, 32, 3], &mut rng(14));
    let labels = Labels::new([1, 32, 32], (0..1024).map(|i| (i % 5) as u8).collect()).unwrap();
    let targets = [
        Target::Labels(labels),
        Target::Dense {
            values: Tensor::randn(&[1, 32, 32, 1], &mut rng(15)),
            mask: None,
        },
    ];
    let stem = m.store.find("encoder.stem.proj.weight").unwrap();
    for t in 0..2 {
        let g = Graph::new();
        let ctx = m.ctx(&g);
        let outs = m.forward(&ctx, ctx.constant(&img)).unwrap();
        let loss = task_loss(&m.config.tasks[t], outs[t], &targets[t]).unwrap();
        let grads = g.backward(loss).unwrap();
        let norm = grads.param(stem).map_or(0.0, |g| g.data().iter().map(|v| v * v).sum::<f64>());
        assert!(norm > 0.0, "task {t}: no gradient at the stem");
    }
}

#[test]
fn presets_strictly_grow_and_differ_only_where_expected() {
    let count = |p| Model::<f32>::new(config(8, p)).unwrap().num_parameters();
    let sizes = [Preset::Stm1, Preset::Stm2, Preset::Stm3, Preset::Stm2Ctm].map(count);
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");

    let names = |p| {
        let m = Model::<f32>::new(config(8, p)).unwrap();
        m.store.iter().map(|(_, p)| p.name.clone()).collect::<std::collections::BTreeSet<_>>()
    };
    let (a, b) = (names(Preset::Stm2), names(Preset::Stm2Ctm));
    assert!(a.is_subset(&b));
    assert!(b.difference(&a).all(|n| n.contains(".ctm.")));
}
