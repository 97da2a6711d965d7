mod common;

use common::{eval, gat_oracle, matmul_loops, max_abs_diff, random, rng};
use dsran::diff::{gradcheck, BatchNormState, GradcheckOptions, Tape, Tensor};
use dsran::featurestore::FeatureSet;
use dsran::params::{BnAccess, Ctx, ParamStore};
use dsran::text::{TextConfig, TextEncoder};
use dsran::visual::{fuse_tree, gated_fuse, FusionLayer, VisualConfig, VisualEncoder};
use dsran::Error;
use ndarray::{s, Array2, Axis};

const D_O: usize = 6;
const D_E: usize = 4;

fn visual_config() -> VisualConfig {
    VisualConfig {
        feature_dim: D_O,
        embed_dim: D_E,
        heads: 2,
        gat_depth: 1,
        jsr_k: 2,
        use_bn: true,
        use_global: true,
        use_regional: true,
        use_ssr: true,
        use_jsr: true,
    }
}

fn encoder(cfg: VisualConfig, seed: u64) -> (ParamStore, VisualEncoder) {
    let mut store = ParamStore::new();
    let enc = VisualEncoder::new(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, enc)
}

/// Gives every batch-norm layer non-trivial running statistics.
fn perturb_bn(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for st in store.bn_states_mut() {
        for v in st.running_mean.iter_mut() {
            *v = rand::Rng::random_range(&mut r, -0.5..0.5);
        }
        for v in st.running_var.iter_mut() {
            *v = rand::Rng::random_range(&mut r, 0.5..2.0);
        }
    }
}

fn features(n: usize, k: usize, seed: u64) -> FeatureSet {
    FeatureSet {
        global: random(n, D_O, seed),
        regional: random(k, D_O, seed + 1),
        captions: vec![vec![1]],
    }
}

fn image_rep(store: &ParamStore, enc: &VisualEncoder, fs: &FeatureSet) -> Tensor {
    eval(store, |ctx| {
        let out = enc.encode_batch(ctx, &[fs]).unwrap().remove(0);
        ctx.tape.value(out.rep).clone()
    })
}

fn mean_row(t: &Tensor) -> Tensor {
    t.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0))
}

#[test]
fn zero_features_project_to_bias() {
    let (mut store, enc) = encoder(visual_config(), 1);
    let pg = enc.proj_global.unwrap();
    let pr = enc.proj_regional.unwrap();
    *store.get_mut(pg.bias) = random(1, D_E, 2);
    *store.get_mut(pr.bias) = random(1, D_E, 3);
    let fs = FeatureSet {
        global: Tensor::zeros((3, D_O)),
        regional: Tensor::zeros((2, D_O)),
        captions: vec![],
    };
    let (vf, vr) = eval(&store, |ctx| {
        let (g, r) = enc.project_features(ctx, &fs).unwrap();
        (
            ctx.tape.value(g.unwrap()).clone(),
            ctx.tape.value(r.unwrap()).clone(),
        )
    });
    for row in vf.rows() {
        assert_eq!(row, store.get(pg.bias).row(0));
    }
    for row in vr.rows() {
        assert_eq!(row, store.get(pr.bias).row(0));
    }
}

#[test]
fn identity_projection_passes_through() {
    let cfg = VisualConfig {
        feature_dim: D_E,
        ..visual_config()
    };
    let mut store = ParamStore::new();
    let enc = VisualEncoder::new(&mut store, cfg, &mut rng(4)).unwrap();
    let pg = enc.proj_global.unwrap();
    *store.get_mut(pg.weight) = Tensor::eye(D_E);
    let fs = FeatureSet {
        global: random(3, D_E, 5),
        regional: random(2, D_E, 6),
        captions: vec![],
    };
    let vf = eval(&store, |ctx| {
        let (g, _) = enc.project_features(ctx, &fs).unwrap();
        ctx.tape.value(g.unwrap()).clone()
    });
    assert_eq!(vf, fs.global);
}

#[test]
fn projection_matches_loop_oracle() {
    let (mut store, enc) = encoder(visual_config(), 7);
    let pr = enc.proj_regional.unwrap();
    *store.get_mut(pr.bias) = random(1, D_E, 8);
    let fs = features(4, 5, 9);
    let vr = eval(&store, |ctx| {
        let (_, r) = enc.project_features(ctx, &fs).unwrap();
        ctx.tape.value(r.unwrap()).clone()
    });
    let expected = matmul_loops(&fs.regional, store.get(pr.weight)) + store.get(pr.bias);
    assert!(max_abs_diff(&vr, &expected) < 1e-12);
}

#[test]
fn projection_rejects_wrong_feature_dim() {
    let (store, enc) = encoder(visual_config(), 10);
    let fs = FeatureSet {
        global: Tensor::zeros((2, D_O + 1)),
        regional: Tensor::zeros((2, D_O)),
        captions: vec![],
    };
    let r = eval(&store, |ctx| enc.project_features(ctx, &fs).map(|_| ()));
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
}

fn ssr(
    store: &ParamStore,
    enc: &VisualEncoder,
    fs: &FeatureSet,
) -> (Tensor, Tensor, Tensor, Tensor) {
    eval(store, |ctx| {
        let (g, r) = enc.project_features(ctx, fs).unwrap();
        let (g, r) = (g.unwrap(), r.unwrap());
        let (gs, rs) = enc.ssr_forward(ctx, &[g], &[r]).unwrap();
        (
            ctx.tape.value(g).clone(),
            ctx.tape.value(r).clone(),
            ctx.tape.value(gs[0]).clone(),
            ctx.tape.value(rs[0]).clone(),
        )
    })
}

#[test]
fn ssr_regional_permutation_is_equivariant_and_path_independent() {
    let (mut store, enc) = encoder(visual_config(), 11);
    perturb_bn(&mut store, 12);
    let fs = features(4, 5, 13);
    let perm = [3, 0, 4, 2, 1];
    let mut shuffled = fs.clone();
    shuffled.regional = fs.regional.select(Axis(0), &perm);
    let (_, _, g1, r1) = ssr(&store, &enc, &fs);
    let (_, _, g2, r2) = ssr(&store, &enc, &shuffled);
    assert_eq!(g1, g2);
    assert!(max_abs_diff(&r1.select(Axis(0), &perm), &r2) < 1e-12);
}

#[test]
fn ssr_single_node_graphs_are_valid() {
    let (store, enc) = encoder(visual_config(), 14);
    let (_, _, g, r) = ssr(&store, &enc, &features(1, 1, 15));
    assert_eq!(g.dim(), (1, D_E));
    assert_eq!(r.dim(), (1, D_E));
    assert!(g.iter().chain(r.iter()).all(|v| v.is_finite()));
}

#[test]
fn ssr_equals_two_oracle_passes() {
    let (mut store, enc) = encoder(visual_config(), 16);
    perturb_bn(&mut store, 17);
    let (vf, vr, g, r) = ssr(&store, &enc, &features(5, 3, 18));
    let og = gat_oracle(&store, enc.ssr_global.as_ref().unwrap(), &vf);
    let or = gat_oracle(&store, enc.ssr_regional.as_ref().unwrap(), &vr);
    assert!(max_abs_diff(&g, &og) < 1e-12);
    assert!(max_abs_diff(&r, &or) < 1e-12);
}

fn jsr_vectors(store: &ParamStore, enc: &VisualEncoder, g: &Tensor, r: &Tensor) -> Vec<Tensor> {
    eval(store, |ctx| {
        let gv = ctx.tape.leaf(g.clone());
        let rv = ctx.tape.leaf(r.clone());
        enc.jsr_forward(ctx, &[gv], &[rv]).unwrap()[0]
            .iter()
            .map(|&v| ctx.tape.value(v).clone())
            .collect()
    })
}

#[test]
fn jsr_degenerate_gat_is_relu_of_mean() {
    let cfg = VisualConfig {
        jsr_k: 1,
        ..visual_config()
    };
    let (mut store, enc) = encoder(cfg, 19);
    let layer = enc.jsr[0].layers[0].clone();
    let d = layer.head_dim;
    for (h, head) in layer.heads.iter().enumerate() {
        *store.get_mut(head.query) = Tensor::zeros((D_E, d));
        let mut select = Tensor::zeros((D_E, d));
        for c in 0..d {
            select[[h * d + c, c]] = 1.0;
        }
        *store.get_mut(head.value) = select;
    }
    *store.get_mut(layer.output) = Tensor::eye(D_E);
    let g = random(3, D_E, 20);
    let r = random(2, D_E, 21);
    let v = jsr_vectors(&store, &enc, &g, &r);
    assert_eq!(v.len(), 1);
    let mut all = g.clone();
    all.append(Axis(0), r.view()).unwrap();
    let eps = BatchNormState::new(D_E).epsilon;
    let expected = mean_row(&all).mapv(|x| x.max(0.0) / (1.0 + eps).sqrt());
    assert!(max_abs_diff(&v[0], &expected) < 1e-12);
}

#[test]
fn jsr_block_order_does_not_matter() {
    let (mut store, enc) = encoder(visual_config(), 22);
    perturb_bn(&mut store, 23);
    let g = random(3, D_E, 24);
    let r = random(4, D_E, 25);
    let forward = jsr_vectors(&store, &enc, &g, &r);
    let swapped = jsr_vectors(&store, &enc, &r, &g);
    for (a, b) in forward.iter().zip(&swapped) {
        assert!(max_abs_diff(a, b) < 1e-12);
    }
}

#[test]
fn jsr_parameter_sets_are_disjoint() {
    let cfg = VisualConfig {
        jsr_k: 4,
        ..visual_config()
    };
    let (mut store, enc) = encoder(cfg, 26);
    let g = random(3, D_E, 27);
    let r = random(2, D_E, 28);
    let before = jsr_vectors(&store, &enc, &g, &r);
    assert_eq!(before.len(), 4);
    assert_eq!(enc.fusion.len(), 3);
    let target = enc.jsr[1].layers[0].clone();
    for h in &target.heads {
        for id in [h.query, h.key, h.value] {
            *store.get_mut(id) += &random(D_E, target.head_dim, 29 + id.0 as u64);
        }
    }
    let after = jsr_vectors(&store, &enc, &g, &r);
    for k in 0..4 {
        let changed = before[k] != after[k];
        assert_eq!(changed, k == 1, "vector {k}");
    }
}

fn fusion_layer(store: &mut ParamStore, seed: u64) -> FusionLayer {
    FusionLayer::new(store, &format!("f{seed}"), D_E, &mut rng(seed))
}

fn fuse(
    store: &ParamStore,
    layer: &FusionLayer,
    a: &Tensor,
    b: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    eval(store, |ctx| {
        let av = ctx.tape.leaf(a.clone());
        let bv = ctx.tape.leaf(b.clone());
        let out = gated_fuse(ctx, av, bv, layer).unwrap();
        let v1 = matmul_loops(a, ctx.tape.value(ctx.p(layer.w1)));
        let v2 = matmul_loops(b, ctx.tape.value(ctx.p(layer.w2)));
        (ctx.tape.value(out).clone(), v1, v2)
    })
}

#[test]
fn zero_gate_weights_average() {
    let mut store = ParamStore::new();
    let layer = fusion_layer(&mut store, 30);
    *store.get_mut(layer.u1) = Tensor::zeros((D_E, D_E));
    *store.get_mut(layer.u2) = Tensor::zeros((D_E, D_E));
    let (out, v1, v2) = fuse(&store, &layer, &random(1, D_E, 31), &random(1, D_E, 32));
    assert!(max_abs_diff(&out, &((&v1 + &v2) / 2.0)) < 1e-15);
}

#[test]
fn equal_inputs_fuse_to_themselves() {
    let mut store = ParamStore::new();
    let layer = fusion_layer(&mut store, 33);
    let w = store.get(layer.w1).clone();
    *store.get_mut(layer.w2) = w;
    let a = random(1, D_E, 34);
    let (out, v1, _) = fuse(&store, &layer, &a, &a);
    assert!(max_abs_diff(&out, &v1) < 1e-15);
}

#[test]
fn fusion_shape_mismatch() {
    let mut store = ParamStore::new();
    let layer = fusion_layer(&mut store, 35);
    let r = eval(&store, |ctx| {
        let a = ctx.tape.leaf(random(1, D_E, 36));
        let b = ctx.tape.leaf(random(2, D_E, 37));
        gated_fuse(ctx, a, b, &layer).map(|_| ())
    });
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
}

fn tree(store: &ParamStore, layers: &[FusionLayer], vs: &[Tensor]) -> dsran::Result<Tensor> {
    eval(store, |ctx| {
        let vars: Vec<_> = vs.iter().map(|v| ctx.tape.leaf(v.clone())).collect();
        let out = fuse_tree(ctx, &vars, layers)?;
        Ok(ctx.tape.value(out).clone())
    })
}

#[test]
fn fuse_tree_shapes() {
    let mut store = ParamStore::new();
    let layers: Vec<_> = (0..3).map(|i| fusion_layer(&mut store, 40 + i)).collect();
    let vs: Vec<Tensor> = (0..4).map(|i| random(1, D_E, 50 + i)).collect();

    assert_eq!(tree(&store, &[], &vs[..1]).unwrap(), vs[0]);
    let (direct, _, _) = fuse(&store, &layers[0], &vs[0], &vs[1]);
    assert_eq!(tree(&store, &layers[..1], &vs[..2]).unwrap(), direct);
    assert!(matches!(
        tree(&store, &layers[..2], &vs[..3]),
        Err(Error::ArityMismatch { .. })
    ));
    assert!(matches!(
        tree(&store, &layers[..1], &vs[..4]),
        Err(Error::ArityMismatch { .. })
    ));

    for l in &layers {
        for id in [l.u1, l.u2] {
            *store.get_mut(id) = Tensor::zeros((D_E, D_E));
        }
        for id in [l.w1, l.w2] {
            *store.get_mut(id) = Tensor::eye(D_E);
        }
    }
    let mean = (&vs[0] + &vs[1] + &vs[2] + &vs[3]) / 4.0;
    assert!(max_abs_diff(&tree(&store, &layers, &vs).unwrap(), &mean) < 1e-15);
}

#[test]
fn image_rep_ignores_regional_order() {
    for k in [1, 2, 4] {
        let cfg = VisualConfig {
            jsr_k: k,
            ..visual_config()
        };
        let (mut store, enc) = encoder(cfg, 60 + k as u64);
        perturb_bn(&mut store, 61);
        let fs = features(5, 6, 62);
        let mut shuffled = fs.clone();
        shuffled.regional = fs.regional.select(Axis(0), &[5, 2, 0, 1, 4, 3]);
        let a = image_rep(&store, &enc, &fs);
        let b = image_rep(&store, &enc, &shuffled);
        assert!(max_abs_diff(&a, &b) < 1e-9, "K={k}");
    }
}

#[test]
fn ablation_wirings() {
    let fs = features(4, 3, 70);
    for use_ssr in [false, true] {
        for (g, r) in [(true, false), (false, true)] {
            let cfg = VisualConfig {
                use_global: g,
                use_regional: r,
                use_ssr,
                use_jsr: false,
                ..visual_config()
            };
            let (store, enc) = encoder(cfg, 71);
            assert!(enc.fusion.is_empty() && enc.jsr.is_empty());
            let rep = image_rep(&store, &enc, &fs);
            let (vf, vr, sf, sr) = eval(&store, |ctx| {
                let (p_g, p_r) = enc.project_features(ctx, &fs).unwrap();
                let (s_g, s_r) = enc
                    .ssr_forward(ctx, &Vec::from_iter(p_g), &Vec::from_iter(p_r))
                    .unwrap();
                let val = |v: Option<&dsran::diff::Var>| v.map(|&v| ctx.tape.value(v).clone());
                (
                    val(p_g.as_ref()),
                    val(p_r.as_ref()),
                    val(s_g.first()),
                    val(s_r.first()),
                )
            });
            let nodes = match (g, use_ssr) {
                (true, false) => vf.unwrap(),
                (true, true) => sf.unwrap(),
                (false, false) => vr.unwrap(),
                (false, true) => sr.unwrap(),
            };
            assert!(max_abs_diff(&rep, &mean_row(&nodes)) < 1e-12);
        }
    }

    let cfg = VisualConfig {
        use_ssr: false,
        use_jsr: false,
        ..visual_config()
    };
    let (store, enc) = encoder(cfg, 72);
    assert_eq!(enc.fusion.len(), 1);
    let rep = image_rep(&store, &enc, &fs);
    let (vf, vr) = eval(&store, |ctx| {
        let (p_g, p_r) = enc.project_features(ctx, &fs).unwrap();
        (
            ctx.tape.value(p_g.unwrap()).clone(),
            ctx.tape.value(p_r.unwrap()).clone(),
        )
    });
    let (expected, _, _) = fuse(&store, &enc.fusion[0], &mean_row(&vf), &mean_row(&vr));
    assert!(max_abs_diff(&rep, &expected) < 1e-12);

    let bad = VisualConfig {
        use_regional: false,
        ..visual_config()
    };
    assert!(matches!(
        VisualEncoder::new(&mut ParamStore::new(), bad, &mut rng(0)),
        Err(Error::Config(_))
    ));
    let bad_k = VisualConfig {
        jsr_k: 3,
        ..visual_config()
    };
    assert!(matches!(
        VisualEncoder::new(&mut ParamStore::new(), bad_k, &mut rng(0)),
        Err(Error::ArityMismatch { .. })
    ));
}

#[test]
fn visual_path_gradcheck() {
    let (store, enc) = encoder(visual_config(), 80);
    let batch = [features(3, 2, 81), features(2, 3, 82)];
    let weights = random(2, D_E, 83);
    let report = gradcheck(
        |tape, vars| {
            let mut bn = store.bn_states().to_vec();
            let mut ctx = Ctx::new(tape, vars, BnAccess::Update(&mut bn));
            let outs = enc.encode_batch(&mut ctx, &[&batch[0], &batch[1]])?;
            let reps: Vec<_> = outs.iter().map(|o| o.rep).collect();
            let stacked = ctx.tape.concat_rows(&reps)?;
            let w = ctx.tape.leaf(weights.clone());
            let prod = ctx.tape.mul(stacked, w)?;
            Ok(ctx.tape.sum(prod))
        },
        store.values(),
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.params.len(), store.len());
}

// ---- text side ----

fn text_encoder(seed: u64, use_bn: bool) -> (ParamStore, TextEncoder) {
    let mut store = ParamStore::new();
    let cfg = TextConfig {
        vocab_size: 12,
        word_dim: 3,
        embed_dim: D_E,
        heads: 2,
        gat_depth: 1,
        use_bn,
    };
    let enc = TextEncoder::new(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, enc)
}

fn text_rep(store: &ParamStore, enc: &TextEncoder, tokens: &[u32]) -> dsran::Result<Tensor> {
    eval(store, |ctx| {
        let v = enc.encode_batch(ctx, &[tokens])?.remove(0);
        Ok(ctx.tape.value(v).clone())
    })
}

fn word_nodes_oracle(store: &ParamStore, enc: &TextEncoder, tokens: &[u32]) -> Tensor {
    let table = store.get(enc.embedding);
    let words: Vec<usize> = tokens
        .iter()
        .take_while(|&&t| t != 0)
        .map(|&t| t as usize)
        .collect();
    let c: Array2<f64> = table.select(Axis(0), &words);
    matmul_loops(&c, store.get(enc.weight)) + store.get(enc.bias)
}

#[test]
fn single_word_caption_hand_evaluation() {
    let (mut store, enc) = text_encoder(90, true);
    perturb_bn(&mut store, 91);
    let t = text_rep(&store, &enc, &[5]).unwrap();
    let c = word_nodes_oracle(&store, &enc, &[5]);
    let layer = &enc.gat.layers[0];
    let mut joined = Tensor::zeros((1, D_E));
    for (h, head) in layer.heads.iter().enumerate() {
        let v = matmul_loops(&c, store.get(head.value));
        joined
            .slice_mut(s![.., h * layer.head_dim..(h + 1) * layer.head_dim])
            .assign(&v);
    }
    let pre = matmul_loops(&joined, store.get(layer.output)).mapv(|x| x.max(0.0));
    let bn = layer.bn.unwrap();
    let st = &store.bn_states()[bn.state.0];
    let mut expected = pre.clone();
    for ch in 0..D_E {
        expected[[0, ch]] = store.get(bn.gamma)[[0, ch]] * (pre[[0, ch]] - st.running_mean[ch])
            / (st.running_var[ch] + st.epsilon).sqrt()
            + store.get(bn.beta)[[0, ch]];
    }
    assert!(max_abs_diff(&t, &expected) < 1e-12);
}

#[test]
fn permuted_caption_gives_same_rep() {
    let (mut store, enc) = text_encoder(92, true);
    perturb_bn(&mut store, 93);
    let a = text_rep(&store, &enc, &[3, 7, 1, 9, 4]).unwrap();
    let b = text_rep(&store, &enc, &[9, 4, 7, 3, 1]).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn caption_matches_compositional_oracle() {
    let (mut store, enc) = text_encoder(94, true);
    perturb_bn(&mut store, 95);
    let tokens = [2, 11, 6, 6, 8, 1];
    let t = text_rep(&store, &enc, &tokens).unwrap();
    let nodes = word_nodes_oracle(&store, &enc, &tokens);
    let expected = mean_row(&gat_oracle(&store, &enc.gat, &nodes));
    assert!(max_abs_diff(&t, &expected) < 1e-12);
}

#[test]
fn padding_never_matters() {
    let (store, enc) = text_encoder(96, true);
    let a = text_rep(&store, &enc, &[4, 2, 8]).unwrap();
    let b = text_rep(&store, &enc, &[4, 2, 8, 0, 0, 0, 0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn caption_errors() {
    let (store, enc) = text_encoder(97, true);
    assert!(matches!(
        text_rep(&store, &enc, &[]),
        Err(Error::EmptyCaption)
    ));
    assert!(matches!(
        text_rep(&store, &enc, &[0, 0]),
        Err(Error::EmptyCaption)
    ));
    assert!(matches!(
        text_rep(&store, &enc, &[3, 12]),
        Err(Error::BadToken { id: 12, .. })
    ));
}

#[test]
fn text_path_gradcheck() {
    for use_bn in [false, true] {
        let (store, enc) = text_encoder(98, use_bn);
        let captions: [&[u32]; 2] = [&[1, 5, 9, 0], &[2, 5]];
        let weights = random(2, D_E, 99);
        let report = gradcheck(
            |tape, vars| {
                let mut bn = store.bn_states().to_vec();
                let mut ctx = Ctx::new(tape, vars, BnAccess::Update(&mut bn));
                let reps = enc.encode_batch(&mut ctx, &captions)?;
                let stacked = ctx.tape.concat_rows(&reps)?;
                let w = ctx.tape.leaf(weights.clone());
                let prod = ctx.tape.mul(stacked, w)?;
                Ok(ctx.tape.sum(prod))
            },
            store.values(),
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "bn={use_bn}: {report:?}");
    }
}

#[test]
fn text_rep_is_finite_for_every_token() {
    let (store, enc) = text_encoder(100, true);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &vars, BnAccess::Frozen(store.bn_states()));
    let captions: Vec<Vec<u32>> = (1..12).map(|t| vec![t]).collect();
    let refs: Vec<&[u32]> = captions.iter().map(Vec::as_slice).collect();
    for v in enc.encode_batch(&mut ctx, &refs).unwrap() {
        assert!(ctx.tape.value(v).iter().all(|x| x.is_finite()));
    }
}
