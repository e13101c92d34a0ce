//! Finite-difference checks for every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlmdiff_nn::{exec, Graph, ParamId, ParamStore, Tensor, Var};

/// Builds the loss `sum(f(params) ⊙ probe)` so every output element matters.
fn check<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), Tensor::randn(s, &mut rng)))
        .collect();

    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let out = f(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let probe = Tensor::randn(&probe_shape, &mut rng);

    let eval = |store: &ParamStore| -> (f64, Option<vlmdiff_nn::ParamGrads>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = f(&mut g, &vars);
        let p = g.input(probe.clone());
        let prod = g.mul(out, p);
        let loss = g.sum(prod);
        let v = g.value(loss).data()[0] as f64;
        (v, Some(g.backward(loss)))
    };

    let (_, grads) = eval(&store);
    let grads = grads.unwrap();
    let h = 1e-2f32;
    for &id in &ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let (lp, _) = eval(&store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let (lm, _) = eval(&store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            let tol = 2e-2 * (1.0 + numeric.abs().max(a.abs()));
            assert!(
                (a - numeric).abs() < tol,
                "param {} elem {i}: analytic {a} vs numeric {numeric}",
                id.0
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    check(&[&[3, 4], &[3, 4]], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.mul(b, v[1]);
        let d = g.scale(c, 0.7);
        let e = g.silu(d);
        let f = g.sigmoid(e);
        let h = g.gelu(f);
        let s = g.scale(v[0], 0.3);
        let x = g.exp(s);
        g.add(h, x)
    });
}

#[test]
fn reductions() {
    check(&[&[2, 5]], |g, v| {
        let s = g.sum(v[0]);
        let m = g.mean(v[0]);
        g.add(s, m)
    });
}

#[test]
fn conv2d_variants() {
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        check(&[&[2, 2, 5, 5], &[3, 2, k, k], &[3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
}

#[test]
fn linear_and_bmm() {
    check(&[&[2, 3, 4], &[5, 4], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(&[&[2, 3, 4], &[2, 4, 5]], |g, v| g.batch_matmul(v[0], v[1], false));
    check(&[&[2, 3, 4], &[2, 5, 4]], |g, v| g.batch_matmul(v[0], v[1], true));
}

#[test]
fn softmax_and_norms() {
    check(&[&[3, 5]], |g, v| g.softmax(v[0]));
    check(&[&[2, 4, 3, 3], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], 2));
    check(&[&[2, 3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn layout_ops() {
    check(&[&[2, 3, 2, 2]], |g, v| g.upsample2x(v[0]));
    check(&[&[2, 3, 2, 2], &[2, 1, 2, 2]], |g, v| g.concat_channels(v[0], v[1]));
    check(&[&[2, 4, 2, 2]], |g, v| g.slice_channels(v[0], 1, 2));
    check(&[&[2, 3, 2, 2], &[2, 3]], |g, v| g.add_channel_bias(v[0], v[1]));
    check(&[&[2, 3, 4], &[3, 4]], |g, v| g.add_row_broadcast(v[0], v[1]));
    check(&[&[2, 3, 2, 2]], |g, v| {
        let t = g.to_tokens(v[0]);
        let t = g.scale(t, 2.0);
        g.from_tokens(t, 2, 2)
    });
    check(&[&[2, 3, 6]], |g, v| {
        let s = g.split_heads(v[0], 2);
        let s = g.softmax(s);
        g.merge_heads(s, 2)
    });
    check(&[&[2, 3, 4], &[4]], |g, v| {
        let p = g.prepend_token(v[0], v[1]);
        let p = g.softmax(p);
        g.drop_first_token(p)
    });
    check(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
}

#[test]
fn attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let attn = vlmdiff_nn::Attention::new(&mut store, "attn", 4, 3, 2, &mut rng);
    let x = Tensor::randn(&[2, 5, 4], &mut rng);
    let ctx = Tensor::randn(&[2, 6, 3], &mut rng);
    let run = |store: &ParamStore| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let cv = g.input(ctx.clone());
        let out = attn.forward(&mut g, store, xv, Some(cv));
        let sq = g.mul(out, out);
        let loss = g.sum(sq);
        (g.value(loss).data()[0], g.backward(loss))
    };
    let (_, grads) = run(&store);
    let id = attn.to_k.weight;
    let h = 1e-2;
    for i in 0..store.get(id).numel() {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let lp = run(&store).0;
        store.get_mut(id).data_mut()[i] = orig - h;
        let lm = run(&store).0;
        store.get_mut(id).data_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        let a = grads.get(id).unwrap().data()[i];
        assert!((a - num).abs() < 2e-2 * (1.0 + num.abs()), "{a} vs {num}");
    }
}

#[test]
fn sequential_and_parallel_backward_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[4, 3, 3, 3], &mut rng));
    let b = store.add("b", Tensor::randn(&[4], &mut rng));
    let x = Tensor::randn(&[5, 3, 9, 9], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1);
        let y = g.silu(y);
        let loss = g.mean(y);
        let grads = g.backward(loss);
        (g.value(loss).clone(), grads.get(w).unwrap().clone())
    };
    let par = run();
    let seq = exec::sequential(run);
    assert_eq!(par, seq);
}
