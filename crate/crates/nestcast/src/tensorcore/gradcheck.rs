//! Central finite-difference verification of analytic gradients.

use super::params::{ParamBinding, ParamStore};
use super::tape::{Tape, Var};

/// Build a scalar objective from the bound parameters.
pub type ScalarFn<'a> = dyn FnMut(&Tape<f64>, &ParamBinding) -> Var + 'a;

fn eval_scalar(store: &ParamStore<f64>, build: &mut ScalarFn) -> f64 {
    let tape = Tape::new();
    let binding = store.bind(&tape);
    let root = build(&tape, &binding);
    let v = tape.value(root);
    assert_eq!(v.shape(), (1, 1), "objective must be scalar");
    v.get(0, 0)
}

/// Compare analytic gradients of a scalar objective against central finite
/// differences, perturbing every scalar parameter in `store`. Returns the
/// maximum relative error, with relative defined against
/// `max(|analytic|, |numeric|, 1e-6)`.
#[allow(clippy::needless_range_loop)] // k indexes the leaf data and the analytic grads together
pub fn grad_check(
    store: &mut ParamStore<f64>,
    eps: f64,
    build: &mut ScalarFn,
) -> f64 {
    // Analytic pass.
    let tape = Tape::new();
    let binding = store.bind(&tape);
    let root = build(&tape, &binding);
    let grads = tape.backward(root);
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| {
            let leaf = store.leaf(id);
            grads
                .get(binding.var(id), leaf.value.shape())
                .data()
                .to_vec()
        })
        .collect();
    drop(tape);

    let mut max_rel: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (li, id) in ids.iter().enumerate() {
        let n = store.leaf(*id).value.len();
        for k in 0..n {
            let orig = store.leaf(*id).value.data()[k];
            store.leaf_mut(*id).value.data_mut()[k] = orig + eps;
            let fp = eval_scalar(store, build);
            store.leaf_mut(*id).value.data_mut()[k] = orig - eps;
            let fm = eval_scalar(store, build);
            store.leaf_mut(*id).value.data_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[li][k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
