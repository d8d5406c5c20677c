//! Test-only oracles shared by integration suites.
#![allow(dead_code)]

use m2gan::nn::{Ctx, ParamId, ParamStore};
use m2gan::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-4;

/// Central difference at `FD_STEP`, or at a hundredth of it when the two
/// disagree: a ReLU-style kink inside the wider stencil makes the wide
/// estimate meaningless, while a smooth function agrees at both scales.
fn central<E: Fn(f64) -> f64>(shifted: E) -> f64 {
    let at = |h: f64| (shifted(h) - shifted(-h)) / (2.0 * h);
    let wide = at(FD_STEP);
    let narrow = at(FD_STEP * 1e-2);
    if rel_err(wide, narrow) > 0.1 * FD_RTOL {
        narrow
    } else {
        wide
    }
}

/// `|ad - fd| / max(1, |fd|)`.
pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1.0)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], avoid_kinks: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            if !avoid_kinks || v.abs() > 0.01 {
                break v;
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Compares tape gradients of `f` with respect to each input against
/// central finite differences. Returns the worst relative error.
pub fn check_inputs<G>(inputs: &[Tensor<f64>], f: G) -> f64
where
    G: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&vars).backward().unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let fd = central(|h| {
                let mut x = inputs.to_vec();
                x[i].data_mut()[j] += h;
                eval(&x)
            });
            worst = worst.max(rel_err(grads[i].data()[j], fd));
        }
    }
    worst
}

/// Same as [`check_inputs`] but differentiates a model's parameters.
/// At most `per_param` randomly chosen elements of each parameter are
/// probed. Returns the worst relative error and the number of probes.
pub fn check_params<G>(store: &ParamStore<f64>, per_param: usize, seed: u64, f: G) -> (f64, usize)
where
    G: for<'t, 's> Fn(&Ctx<'t, 's, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, store, true);
    f(&cx).backward().unwrap();
    let grads = cx.grads();

    let eval = |s: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, s, false);
        f(&cx).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let fd = central(|h| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += h;
                eval(&s)
            });
            let ad = grads[id.index()]
                .as_ref()
                .map(|g| g.data()[j])
                .unwrap_or(0.0);
            worst = worst.max(rel_err(ad, fd));
            probes += 1;
        }
    }
    (worst, probes)
}

/// Scalar projection `sum(x * w)` with a fixed random `w`, so gradient
/// checks see asymmetric upstream gradients.
pub fn project<'t>(x: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random_tensor(&mut rng, &x.shape(), false);
    let w = x.tape().constant(w);
    x.mul(&w).unwrap().sum_all()
}
