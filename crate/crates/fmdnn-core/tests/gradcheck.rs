//! Finite-difference verification of every backward rule, from single ops
//! up to the assembled model. Central differences at 64-bit give ~1e-10
//! agreement on smooth paths; the tolerance below leaves room for the
//! mildly nonsmooth ones (relu, max-pool) probed away from their kinks.

use fmdnn_core::fca::{
    attention, encoder_layer, fca_block, mlp_block, AttnIds, EncoderLayerIds, FcaBlockIds,
    MlpBlockIds, MlpMode,
};
use fmdnn_core::fuzzy::fuse_on_graph;
use fmdnn_core::model::{Fmdnn, FusionMode, ModelConfig};
use fmdnn_core::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

fn scalar_loss(g: &Graph, v: Var) -> f64 {
    let t = g.value(v);
    assert_eq!(t.len(), 1, "loss must be scalar");
    t.data[0]
}

/// Sum of squares, a smooth scalar readout for any tensor output.
fn sq_sum(g: &mut Graph, v: Var) -> Var {
    let sq = g.mul(v, v).unwrap();
    g.sum_all(sq)
}

/// Compare analytic gradients against central differences for the given
/// (parameter, flat index) picks. `build` must construct the loss from
/// scratch each call using current store values.
fn check<F>(store: &mut ParamStore, picks: &[(ParamId, usize)], tol: f64, build: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    store.accumulate(&g, &grads);
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(id, i)| {
            store
                .get(id)
                .grad
                .as_ref()
                .unwrap_or_else(|| panic!("no gradient for {}", store.get(id).name))[i]
        })
        .collect();
    store.clear_grads();

    for (&(id, i), &ad) in picks.iter().zip(&analytic) {
        let orig = store.value(id).data[i];
        store.value_mut(id).data[i] = orig + EPS;
        let up = {
            let mut g = Graph::new();
            let l = build(&mut g, store);
            scalar_loss(&g, l)
        };
        store.value_mut(id).data[i] = orig - EPS;
        let down = {
            let mut g = Graph::new();
            let l = build(&mut g, store);
            scalar_loss(&g, l)
        };
        store.value_mut(id).data[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        assert!(
            rel < tol,
            "{}[{}]: analytic {ad:.12e} vs fd {fd:.12e} (rel {rel:.3e})",
            store.get(id).name,
            i
        );
    }
}

/// A spread of indices across a parameter without assuming its size.
fn spread(store: &ParamStore, id: ParamId, count: usize) -> Vec<(ParamId, usize)> {
    let len = store.value(id).len();
    (0..count.min(len))
        .map(|j| (id, j * len / count.min(len)))
        .collect()
}

#[test]
fn conv2d_stride1_padded() {
    let mut rng = Rng::seed_from_u64(101);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0)).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5)).unwrap();
    let b = store.add("b", rand_tensor(&mut rng, &[3], -0.2, 0.2)).unwrap();
    let mut picks = spread(&store, w, 6);
    picks.extend(spread(&store, x, 5));
    picks.extend(spread(&store, b, 3));
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let wv = s.on_graph(g, w);
        let bv = s.on_graph(g, b);
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        let y = g.add_chan_bias(y, bv).unwrap();
        sq_sum(g, y)
    });
}

#[test]
fn conv2d_stride2_unpadded() {
    let mut rng = Rng::seed_from_u64(102);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[1, 6, 6], -1.0, 1.0)).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[2, 1, 2, 2], -0.5, 0.5)).unwrap();
    let mut picks = spread(&store, w, 8);
    picks.extend(spread(&store, x, 6));
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let wv = s.on_graph(g, w);
        let y = g.conv2d(xv, wv, 2, 0).unwrap();
        sq_sum(g, y)
    });
}

#[test]
fn tconv2d_stride2() {
    let mut rng = Rng::seed_from_u64(103);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0)).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[3, 2, 2, 2], -0.5, 0.5)).unwrap();
    let mut picks = spread(&store, w, 8);
    picks.extend(spread(&store, x, 6));
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let wv = s.on_graph(g, w);
        let y = g.tconv2d(xv, wv, 2).unwrap();
        sq_sum(g, y)
    });
}

#[test]
fn max_pool_behind_conv() {
    let mut rng = Rng::seed_from_u64(104);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[1, 6, 6], 0.1, 1.0)).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[2, 1, 3, 3], -0.5, 0.5)).unwrap();
    let mut picks = spread(&store, w, 6);
    picks.extend(spread(&store, x, 4));
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let wv = s.on_graph(g, w);
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        let p = g.max_pool(y, 2).unwrap();
        sq_sum(g, p)
    });
}

#[test]
fn relu_and_gelu_chain() {
    let mut rng = Rng::seed_from_u64(105);
    let mut store = ParamStore::new();
    // keep magnitudes >= 0.05 so no relu kink sits within eps of a probe
    let vals: Vec<f64> = (0..24)
        .map(|_| {
            let v = rng.uniform_in(0.05, 1.0);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    let x = store.add("x", Tensor::new(&[4, 6], vals).unwrap()).unwrap();
    let picks = spread(&store, x, 10);
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let r = g.relu(xv);
        let e = g.gelu(r);
        sq_sum(g, e)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = Rng::seed_from_u64(106);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[3, 7], -2.0, 2.0)).unwrap();
    let gain = store.add("g", rand_tensor(&mut rng, &[7], 0.5, 1.5)).unwrap();
    let bias = store.add("b", rand_tensor(&mut rng, &[7], -0.3, 0.3)).unwrap();
    let mut picks = spread(&store, x, 8);
    picks.extend(spread(&store, gain, 4));
    picks.extend(spread(&store, bias, 4));
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let gv = s.on_graph(g, gain);
        let bv = s.on_graph(g, bias);
        let y = g.layer_norm(xv, gv, bv).unwrap();
        sq_sum(g, y)
    });
}

#[test]
fn matmul_both_orientations_with_bias() {
    let mut rng = Rng::seed_from_u64(107);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
    let b = store.add("b", rand_tensor(&mut rng, &[4, 5], -1.0, 1.0)).unwrap();
    let c = store.add("c", rand_tensor(&mut rng, &[2, 5], -1.0, 1.0)).unwrap();
    let bias = store.add("bias", rand_tensor(&mut rng, &[3], -0.3, 0.3)).unwrap();
    let mut picks = spread(&store, a, 5);
    picks.extend(spread(&store, b, 5));
    picks.extend(spread(&store, c, 5));
    picks.extend(spread(&store, bias, 3));
    check(&mut store, &picks, TOL, |g, s| {
        let av = s.on_graph(g, a);
        let bv = s.on_graph(g, b);
        let cv = s.on_graph(g, c);
        let biasv = s.on_graph(g, bias);
        let ab = g.matmul(av, bv).unwrap(); // [3,5]
        let y = g.matmul_nt(cv, ab).unwrap(); // [2,3]
        let y = g.add_row_bias(y, biasv).unwrap();
        sq_sum(g, y)
    });
}

#[test]
fn softmax_weighted_readout() {
    let mut rng = Rng::seed_from_u64(108);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[3, 5], -2.0, 2.0)).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[3, 5], -1.0, 1.0)).unwrap();
    let mut picks = spread(&store, x, 8);
    picks.extend(spread(&store, w, 5));
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        let wv = s.on_graph(g, w);
        let sm = g.softmax(xv).unwrap();
        let weighted = g.mul(sm, wv).unwrap();
        g.sum_all(weighted)
    });
}

#[test]
fn cross_entropy_logits() {
    let mut rng = Rng::seed_from_u64(109);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[6], -2.0, 2.0)).unwrap();
    let picks = spread(&store, x, 6);
    check(&mut store, &picks, TOL, |g, s| {
        let xv = s.on_graph(g, x);
        g.cross_entropy(xv, 2).unwrap()
    });
}

#[test]
fn gather_concat_slice_chain() {
    let mut rng = Rng::seed_from_u64(110);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)).unwrap();
    let picks = spread(&store, x, 10);
    // reuse elements so gather's scatter-add accumulation is exercised
    let idx = std::sync::Arc::new(vec![0usize, 5, 5, 7, 1, 23, 12, 0]);
    check(&mut store, &picks, TOL, move |g, s| {
        let xv = s.on_graph(g, x);
        let gathered = g.gather(xv, idx.clone(), &[2, 4]).unwrap();
        let both = g.concat(&[gathered, gathered], 0).unwrap(); // [4,4]
        let cut = g.slice_rows(both, 1, 2).unwrap();
        sq_sum(g, cut)
    });
}

#[test]
fn fuzzy_fusion_scalars() {
    let mut rng = Rng::seed_from_u64(111);
    let mut store = ParamStore::new();
    let logits = store.add("w", rand_tensor(&mut rng, &[3], -0.5, 0.5)).unwrap();
    let bias = store.add("b", Tensor::new(&[1], vec![0.05]).unwrap()).unwrap();
    let maps: Vec<Tensor> = (0..3)
        .map(|_| rand_tensor(&mut rng, &[4, 4], 0.05, 0.9))
        .collect();
    let mut picks = spread(&store, logits, 3);
    picks.push((bias, 0));
    check(&mut store, &picks, TOL, move |g, s| {
        let ms = [
            g.leaf(maps[0].clone()),
            g.leaf(maps[1].clone()),
            g.leaf(maps[2].clone()),
        ];
        let wv = s.on_graph(g, logits);
        let bv = s.on_graph(g, bias);
        let fused = fuse_on_graph(g, ms, wv, bv).unwrap();
        sq_sum(g, fused)
    });
}

#[test]
fn attention_projections_and_inputs() {
    let mut rng = Rng::seed_from_u64(112);
    let mut store = ParamStore::new();
    let d = 6;
    let ids = AttnIds::new(&mut store, &mut rng, "a", d, 2).unwrap();
    let q = store.add("qseq", rand_tensor(&mut rng, &[3, d], -1.0, 1.0)).unwrap();
    let kv = store.add("kvseq", rand_tensor(&mut rng, &[4, d], -1.0, 1.0)).unwrap();
    let mut picks = spread(&store, ids.q[0], 4);
    picks.extend(spread(&store, ids.k[1], 4));
    picks.extend(spread(&store, ids.v[0], 4));
    picks.extend(spread(&store, ids.out, 5));
    picks.extend(spread(&store, q, 4));
    picks.extend(spread(&store, kv, 4));
    check(&mut store, &picks, TOL, move |g, s| {
        let qv = s.on_graph(g, q);
        let kvv = s.on_graph(g, kv);
        let out = attention(g, s, &ids, qv, kvv).unwrap();
        sq_sum(g, out.out)
    });
}

#[test]
fn fused_attention_block_stack() {
    let mut rng = Rng::seed_from_u64(113);
    let mut store = ParamStore::new();
    let d = 6;
    let fca = FcaBlockIds::new(&mut store, &mut rng, "f", d, 2).unwrap();
    let mlp = MlpBlockIds::new(&mut store, &mut rng, "m", d, 2 * d).unwrap();
    let enc = EncoderLayerIds::new(&mut store, &mut rng, "e", d, 2, 2 * d).unwrap();
    let z = store.add("z", rand_tensor(&mut rng, &[5, d], -1.0, 1.0)).unwrap();
    let ft = store.add("ft", rand_tensor(&mut rng, &[4, d], -1.0, 1.0)).unwrap();
    let mut picks = vec![];
    picks.extend(spread(&store, fca.f_cls, 3));
    picks.extend(spread(&store, fca.attn.q[0], 3));
    picks.extend(spread(&store, fca.attn.v[1], 3));
    picks.extend(spread(&store, fca.ln_q.gain, 2));
    picks.extend(spread(&store, mlp.mlp.w1, 3));
    picks.extend(spread(&store, mlp.ln.bias, 2));
    picks.extend(spread(&store, enc.attn.out, 3));
    picks.extend(spread(&store, enc.mlp.w2, 3));
    picks.extend(spread(&store, z, 5));
    picks.extend(spread(&store, ft, 4));
    for mode in [MlpMode::Paper, MlpMode::Prenorm] {
        check(&mut store, &picks, TOL, |g, s| {
            let zv = s.on_graph(g, z);
            let ftv = s.on_graph(g, ft);
            let a = fca_block(g, s, &fca, zv, Some(ftv)).unwrap();
            let m = mlp_block(g, s, &mlp, a, mode).unwrap();
            let e = encoder_layer(g, s, &enc, m).unwrap();
            sq_sum(g, e)
        });
    }
}

#[test]
fn whole_model_sampled_parameters() {
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 8,
        dim: 8,
        layers: 1,
        heads: 2,
        classes: 2,
        widths: fmdnn_core::granular::ExtractorWidths { c0: 4, c1: 6, c2: 8 },
        fusion: FusionMode::Fca,
        branches: fmdnn_core::granular::BranchMask::default(),
        mlp_mode: MlpMode::Paper,
        membership: fmdnn_core::fuzzy::MembershipParams::default(),
    };
    let mut model = Fmdnn::new(cfg, 31).unwrap();
    let mut rng = Rng::seed_from_u64(32);
    let image = rand_tensor(&mut rng, &[3, 16, 16], 0.02, 0.98);

    let names = [
        "ext.conv0.w",
        "ext.enc2.w",
        "ext.up1.w",
        "ext.tap_medium.w",
        "fuzzy.w_logits",
        "fuzzy.embed.w",
        "fuzzy.pos",
        "fine.embed.w",
        "fine.cls",
        "medium.pos",
        "coarse.l0.fca.attn.q0",
        "fine.l0.fca.f_cls",
        "medium.l0.enc.mlp.w1",
        "head.w",
        "head.ln.g",
    ];
    let mut picks = vec![];
    for name in names {
        let id = model
            .store
            .id(name)
            .unwrap_or_else(|| panic!("missing param {name}"));
        let len = model.store.value(id).len();
        picks.push((id, (len - 1) / 2));
    }

    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, &image, 0).unwrap();
    let grads = g.backward(loss).unwrap();
    model.store.accumulate(&g, &grads);
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(id, i)| model.store.get(id).grad.as_ref().unwrap()[i])
        .collect();
    model.store.clear_grads();

    let eval = |m: &Fmdnn| {
        let mut g = Graph::new();
        let (loss, _) = m.loss(&mut g, &image, 0).unwrap();
        g.value(loss).data[0]
    };
    for (&(id, i), &ad) in picks.iter().zip(&analytic) {
        let orig = model.store.value(id).data[i];
        model.store.value_mut(id).data[i] = orig + EPS;
        let up = eval(&model);
        model.store.value_mut(id).data[i] = orig - EPS;
        let down = eval(&model);
        model.store.value_mut(id).data[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        // the deep composite leaves tiny gradients on some picks, where
        // central-difference cancellation dominates; 1e-4 still separates
        // a correct rule from a broken one by orders of magnitude
        assert!(
            rel < 1e-4,
            "{}[{}]: analytic {ad:.12e} vs fd {fd:.12e} (rel {rel:.3e})",
            model.store.get(id).name,
            i
        );
    }
}
