//! Finite-difference oracle shared by the unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Ctx, Module, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn store_for(m: &impl Module, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::init(&m.param_specs(), &mut rng).unwrap();
    s.randomize(&mut rng, scale);
    s
}

/// Central differences over the inputs and parameters of `f`, reduced to a
/// scalar by a fixed random projection. At most `per_tensor` evenly spaced
/// entries of each tensor are probed.
pub fn check_grads<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, tol: f64, per_tensor: usize)
where
    F: for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let xs: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&cx, &xs).unwrap();
        let r = random(y.shape(), 99);
        y.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store);
    let xs: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&cx, &xs).unwrap();
    let r = tape.constant(random(y.shape(), 99));
    let grads = tape.backward(&y.mul(&r).unwrap().sum_all().unwrap()).unwrap();
    let pgrads = cx.param_grads(&grads);

    let h = 1e-5;
    let compare = |label: &str, a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        assert!(rel < tol, "{label}: analytic {a} numeric {n} rel {rel}");
    };
    let picks = |n: usize| {
        let step = n.div_ceil(per_tensor).max(1);
        (0..n).step_by(step)
    };
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(&xs[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for i in picks(input.numel()) {
            let (mut p, mut m) = (inputs.to_vec(), inputs.to_vec());
            p[k].data_mut()[i] += h;
            m[k].data_mut()[i] -= h;
            compare(&format!("input{k}[{i}]"), g.data()[i], (eval(store, &p) - eval(store, &m)) / (2.0 * h));
        }
    }
    for (name, t) in store.iter() {
        let g = &pgrads[name];
        for i in picks(t.numel()) {
            let (mut p, mut m) = (store.clone(), store.clone());
            p.get_mut(name).unwrap().data_mut()[i] += h;
            m.get_mut(name).unwrap().data_mut()[i] -= h;
            compare(&format!("{name}[{i}]"), g.data()[i], (eval(&p, inputs) - eval(&m, inputs)) / (2.0 * h));
        }
    }
}
