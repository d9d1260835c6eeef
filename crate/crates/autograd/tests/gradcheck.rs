use std::rc::Rc;

use hoi_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};

use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares analytic gradients of every parameter entry against central
/// differences of the same scalar function.
fn check(store: &mut ParamStore, f: impl Fn(&mut Graph<'_>) -> Var) {
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = f(&mut g);
        g.value(l).item()
    };
    let h = 1e-6;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "{}[{k}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
        }
    }
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut s = ParamStore::new();
    for &(n, r, c) in shapes {
        s.insert(n, random(rng, r, c)).unwrap();
    }
    s
}

fn p(g: &mut Graph<'_>, name: &str) -> Var {
    let id = g.store().id(name).unwrap();
    g.param(id)
}

#[test]
fn matmul_family_and_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = store_with(&mut rng, &[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("r", 1, 2), ("k", 5, 2)]);
    check(&mut s, |g| {
        let (a, b, c, r, k) = (p(g, "a"), p(g, "b"), p(g, "c"), p(g, "r"), p(g, "k"));
        let ab = g.matmul(a, b);
        let x = g.add(ab, c);
        let x = g.mul(x, c);
        let x = g.add_row(x, r);
        let x = g.silu(x);
        let y = g.matmul_t(x, k);
        let z = g.scale(y, 0.7);
        let w = g.sub(z, y);
        let w = g.mul(w, y);
        let w = g.add_scalar(w, 0.3);
        g.sum(w)
    });
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = store_with(&mut rng, &[("x", 4, 5), ("gain", 1, 5), ("bias", 1, 5), ("w", 5, 5)]);
    let mask: Vec<bool> = (0..20).map(|i| i % 5 != 3 || i == 3).collect();
    check(&mut s, move |g| {
        let (x, ga, be, w) = (p(g, "x"), p(g, "gain"), p(g, "bias"), p(g, "w"));
        let y = g.layer_norm(x, ga, be, 1e-5);
        let y = g.matmul(y, w);
        let a = g.softmax_rows(y, Some(&mask));
        let b = g.softmax_rows(y, None);
        let ab = g.mul(a, b);
        let t = g.mul(ab, y);
        g.sum(t)
    });
}

#[test]
fn shape_ops_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = store_with(&mut rng, &[("x", 4, 6), ("y", 2, 6), ("col", 4, 1)]);
    let idx: Rc<[usize]> = vec![5, 0, 0, 2, 3].into();
    check(&mut s, move |g| {
        let (x, y, col) = (p(g, "x"), p(g, "y"), p(g, "col"));
        let a = g.slice_cols(x, 1, 3);
        let b = g.slice_rows(x, 1, 2);
        let c = g.concat_rows(&[b, y]);
        let c = g.mul_col(c, col);
        let d = g.concat_cols(&[a, a]);
        let e = g.gather_cols(c, idx.clone());
        let m = g.max_rows(e);
        let sq = g.mul(x, x);
        let rs = g.row_sum(sq);
        let rs = g.add_scalar(rs, 0.5);
        let n = g.sqrt(rs);
        let inv = g.recip(n);
        let xs = g.mul_col(x, inv);
        let t1 = g.sum(d);
        let t2 = g.sum(m);
        let t3 = g.sum(xs);
        let t = g.add(t1, t2);
        let t = g.mul(t, t3);
        g.add(t, t3)
    });
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = store_with(&mut rng, &[("a", 2, 2), ("b", 2, 2)]);
    let mut g = Graph::with_trainable(&s, vec![false, true].into());
    let (a, b) = (p(&mut g, "a"), p(&mut g, "b"));
    let ab = g.matmul(a, b);
    let l = g.sum(ab);
    let grads = g.backward(l);
    assert!(grads.get(s.id("a").unwrap()).is_none());
    assert!(grads.get(s.id("b").unwrap()).is_some());
}

#[test]
fn masked_softmax_entries_are_exact_zero() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
    let y = g.softmax_rows(x, Some(&[true, false, true]));
    assert_eq!(g.value(y).get(0, 1), 0.0);
    let total: f64 = g.value(y).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-15);
}
