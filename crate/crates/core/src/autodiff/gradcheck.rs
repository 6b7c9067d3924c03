//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};

/// Worst relative error found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Name of the input (`input<i>`) or parameter with the worst error.
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of `sum(f(inputs) * r)` (with a fixed
/// random `r`) against central differences, for every input element and
/// every parameter scalar in `store`.
pub fn check_gradients(
    store: &ParamStore,
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Graph<'_>, &[Var]) -> Var,
) -> GradCheck {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0));
    let w = g.input(weights.clone());
    let prod = g.mul(out, w);
    let loss = g.sum(prod);
    let grads = g.backward(loss);

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: &str, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = name.to_string();
        }
    };

    let mut perturbed = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + H;
            let up = eval(store, &perturbed);
            perturbed[i].data_mut()[j] = orig - H;
            let down = eval(store, &perturbed);
            perturbed[i].data_mut()[j] = orig;
            record(&format!("input{i}"), analytic.data()[j], (up - down) / (2.0 * H));
        }
    }

    let mut work = store.clone();
    let param_grads: Vec<_> = grads.params().map(|(id, t)| (id, t.clone())).collect();
    for id in store.ids() {
        let analytic = param_grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + H;
            let up = eval(&work, inputs);
            work.get_mut(id).data_mut()[j] = orig - H;
            let down = eval(&work, inputs);
            work.get_mut(id).data_mut()[j] = orig;
            record(store.name(id), analytic.data()[j], (up - down) / (2.0 * H));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_ok(name: &str, r: GradCheck) {
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(r.max_rel_err < 1e-5, "{name}: rel err {} at {}", r.max_rel_err, r.worst);
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::new();
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 3, 4], &mut rng);
        let y = rand_tensor(&[2, 1, 4], &mut rng);
        assert_ok(
            "add/sub/mul",
            check_gradients(&store, &[a.clone(), b.clone()], 0, |g, v| {
                let s = g.add(v[0], v[1]);
                let d = g.sub(v[0], v[1]);
                let p = g.mul(s, d);
                g.scale(p, 0.7)
            }),
        );
        assert_ok(
            "bcast",
            check_gradients(&store, &[a.clone(), y.clone()], 1, |g, v| {
                let m = g.bcast_mul(v[0], v[1]);
                g.bcast_add(m, v[1])
            }),
        );
        assert_ok(
            "broadcast_to",
            check_gradients(&store, std::slice::from_ref(&y), 2, |g, v| {
                g.broadcast_to(v[0], &[2, 3, 4])
            }),
        );
        assert_ok(
            "silu",
            check_gradients(&store, std::slice::from_ref(&a), 3, |g, v| g.silu(v[0])),
        );
        assert_ok(
            "mse",
            check_gradients(&store, &[a.clone(), b.clone()], 4, |g, v| g.mse(v[0], v[1])),
        );
        assert_ok(
            "mean",
            check_gradients(&store, std::slice::from_ref(&a), 5, |g, v| {
                let s = g.silu(v[0]);
                g.mean(s)
            }),
        );
    }

    #[test]
    fn shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let a = rand_tensor(&[2, 5, 3], &mut rng);
        let b = rand_tensor(&[2, 2, 3], &mut rng);
        assert_ok(
            "concat",
            check_gradients(&store, &[a.clone(), b.clone()], 0, |g, v| {
                let c = g.concat(&[v[0], v[1]], 1);
                g.silu(c)
            }),
        );
        assert_ok(
            "slice",
            check_gradients(&store, std::slice::from_ref(&a), 1, |g, v| {
                let s = g.slice(v[0], 1, 1, 3);
                let t = g.slice(v[0], 2, 1, 2);
                let s = g.silu(s);
                let t = g.silu(t);
                let s = g.reshape(s, &[18]);
                let t = g.reshape(t, &[20]);
                g.concat(&[s, t], 0)
            }),
        );
        assert_ok(
            "upsample",
            check_gradients(&store, std::slice::from_ref(&b), 2, |g, v| g.upsample(v[0], 5)),
        );
        assert_ok(
            "im2col",
            check_gradients(&store, std::slice::from_ref(&a), 3, |g, v| g.im2col(v[0], 3, 2, 1)),
        );
        let w = rand_tensor(&[4, 7], &mut rng);
        assert_ok(
            "temporal_mix",
            check_gradients(&store, &[w, a.clone(), b.clone()], 4, |g, v| {
                let x = g.concat(&[v[1], v[2]], 1);
                g.temporal_mix(v[0], x)
            }),
        );
    }

    #[test]
    fn matmul_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[4, 6], &mut rng));
        let bias = store.add("b", rand_tensor(&[6], &mut rng));
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        assert_ok(
            "linear",
            check_gradients(&store, std::slice::from_ref(&a), 0, |g, v| {
                let wv = g.param(w);
                let bv = g.param(bias);
                let y = g.matmul(v[0], wv);
                g.add_bias(y, bv)
            }),
        );
        let x = rand_tensor(&[2, 5, 6], &mut rng);
        assert_ok(
            "group_norm",
            check_gradients(&ParamStore::new(), &[x], 1, |g, v| g.group_norm(v[0], 3, 1e-5)),
        );
    }

    #[test]
    fn attention_and_sinusoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::new();
        let q = rand_tensor(&[1, 4], &mut rng);
        let qb = rand_tensor(&[3, 4], &mut rng);
        let k = rand_tensor(&[3, 5, 4], &mut rng);
        let v = rand_tensor(&[3, 5, 4], &mut rng);
        assert_ok(
            "attend shared q",
            check_gradients(&store, &[q, k.clone(), v.clone()], 0, |g, x| {
                g.attend(x[0], x[1], x[2], 2)
            }),
        );
        assert_ok(
            "attend batched q",
            check_gradients(&store, &[qb, k, v], 1, |g, x| g.attend(x[0], x[1], x[2], 1)),
        );
        let t = Tensor::new(&[3], vec![1.0, 7.0, 42.0]);
        assert_ok(
            "sinusoidal",
            check_gradients(&store, &[t], 2, |g, x| g.sinusoidal(x[0], 8)),
        );
    }
}
