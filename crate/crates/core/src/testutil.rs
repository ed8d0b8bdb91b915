//! Finite-difference oracles shared by unit tests.

use crate::numkit::{Graph, ParamId, ParamStore, Tensor, Var};

/// `‖a − b‖₂ / max(‖a‖₂ + ‖b‖₂, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Central differences of a scalar function of one input tensor vs autodiff.
pub fn fd_check_input<F>(x: &Tensor, h: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let eval = |t: &Tensor| {
        let g = Graph::new();
        let v = g.constant(t.clone());
        f(&g, v).item()
    };
    let g = Graph::new();
    let w = g.leaf(x.clone().with_requires_grad(true));
    let loss = f(&g, w);
    let grads = g.backward(loss).unwrap();
    let analytic = grads
        .wrt(w)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        numeric[i] = (eval(&p) - eval(&m)) / (2.0 * h);
    }
    rel_err(&analytic, &numeric)
}

/// Central differences w.r.t. every parameter in `ids` vs autodiff.
/// Returns the worst per-parameter relative error.
pub fn fd_check_params<F>(store: &ParamStore, ids: &[ParamId], h: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Var<'g>,
{
    let g = Graph::new();
    let loss = f(&g, store);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let lp = f(&Graph::new(), &probe).item();
            probe.get_mut(id).data_mut()[i] = orig - h;
            let lm = f(&Graph::new(), &probe).item();
            probe.get_mut(id).data_mut()[i] = orig;
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
