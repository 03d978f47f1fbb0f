//! Central finite-difference gradient checking, independent of the reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients whose norms both stay below this are treated as identically zero.
pub const ZERO_GRAD: f64 = 1e-10;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish to round-off.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < ZERO_GRAD {
        0.0
    } else {
        diff / denom
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// over every element of `x`. Returns the relative error.
pub fn check_input_gradient(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    input_check(Graph::detached, x, f)
}

/// [`check_input_gradient`] for functions that read parameters from `store`.
pub fn check_input_gradient_in(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    input_check(|| Graph::new(store), x, f)
}

fn input_check<'s>(make: impl Fn() -> Graph<'s>, x: &Tensor, f: impl Fn(&mut Graph<'s>, Var) -> Var) -> f64 {
    let eval = |t: &Tensor| {
        let mut g = make();
        let v = g.constant(t.clone());
        let out = f(&mut g, v);
        g.value(out).item()
    };
    let mut g = make();
    let v = g.input(x.clone());
    let out = f(&mut g, v);
    let analytic = g
        .backward(out)
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * FD_STEP);
    }
    relative_error(analytic.data(), &numeric)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
}

/// Finite-difference check of `d f / d θ` for the parameters of `store`.
///
/// `max_per_tensor` limits the number of evenly spaced entries probed per
/// tensor; `None` probes every scalar.
pub fn check_param_gradients(
    store: &ParamStore,
    max_per_tensor: Option<usize>,
    f: impl Fn(&mut Graph) -> Var,
) -> Vec<ParamCheck> {
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out).into_params()
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut report = Vec::new();
    for id in 0..store.len() {
        let n = store.value(id).len();
        let idx: Vec<usize> = match max_per_tensor {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            a.push(analytic.get(&id).map_or(0.0, |t| t.data()[i]));
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            num.push((up - down) / (2.0 * FD_STEP));
        }
        report.push(ParamCheck {
            name: store.entry(id).name.clone(),
            checked: idx.len(),
            rel_error: relative_error(&a, &num),
        });
    }
    report
}

/// Adds uniform noise in `±scale` to every parameter so checks run away from
/// the zero-initialised biases, where ReLU kinks sit exactly on the probe point.
pub fn perturb_params(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..store.len() {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Name and relative error of the worst tensor in a report.
pub fn worst(report: &[ParamCheck]) -> (&str, f64) {
    report
        .iter()
        .fold(("", 0.0), |acc, c| if c.rel_error > acc.1 { (c.name.as_str(), c.rel_error) } else { acc })
}
