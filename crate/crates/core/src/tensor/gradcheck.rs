//! Finite-difference verification of tape gradients in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-3;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-2;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub points: usize,
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst point, with the flat index.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.points > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy)]
enum Target {
    Param(ParamId),
    Input(usize),
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `build` at `points` randomly chosen coordinates.
///
/// Coordinates are drawn from the trainable entries of `store` and from
/// `inputs`, visiting distinct tensors first. `build` must be deterministic:
/// any dropout inside it has to reseed its generator on every call.
pub fn check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: F,
    points: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with_step(store, inputs, build, points, seed, STEP)
}

/// [`check`] with an explicit central-difference step.
///
/// Deep towers with max-pooling or ReLU need a step well below [`STEP`]: with
/// thousands of pooling windows, a perturbation of `1e-3` routinely swaps a
/// winner and the difference quotient straddles a kink.
pub fn check_with_step<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: F,
    points: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut targets: Vec<Target> = store
        .ids()
        .filter(|&id| store.is_trainable(id) && store.get(id).numel() > 0)
        .map(Target::Param)
        .collect();
    targets.extend((0..inputs.len()).filter(|&i| inputs[i].numel() > 0).map(Target::Input));
    if targets.is_empty() {
        return Err(Error::Contract("gradient check without differentiable targets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::new();
    while order.len() < points {
        let mut round = targets.clone();
        round.shuffle(&mut rng);
        order.extend(round);
    }
    order.truncate(points);

    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let mut report = GradCheckReport {
        points: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for target in order {
        let (analytic, numeric, name, idx) = match target {
            Target::Param(id) => {
                let n = store.get(id).numel();
                let idx = rng.random_range(0..n);
                let a = grads.param(id).map_or(0.0, |t| t.data()[idx]);
                let orig = store.get(id).data()[idx];
                work_store.get_mut(id).data_mut()[idx] = orig + step;
                let up = eval(&work_store, &work_inputs)?;
                work_store.get_mut(id).data_mut()[idx] = orig - step;
                let down = eval(&work_store, &work_inputs)?;
                work_store.get_mut(id).data_mut()[idx] = orig;
                (a, (up - down) / (2.0 * step), store.name(id).to_string(), idx)
            }
            Target::Input(i) => {
                let n = inputs[i].numel();
                let idx = rng.random_range(0..n);
                let a = grads.input(vars[i]).map_or(0.0, |t| t.data()[idx]);
                let orig = inputs[i].data()[idx];
                work_inputs[i].data_mut()[idx] = orig + step;
                let up = eval(&work_store, &work_inputs)?;
                work_inputs[i].data_mut()[idx] = orig - step;
                let down = eval(&work_store, &work_inputs)?;
                work_inputs[i].data_mut()[idx] = orig;
                (a, (up - down) / (2.0 * step), format!("input{i}"), idx)
            }
        };
        let err = rel_err(analytic, numeric);
        report.points += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name, idx));
        }
    }
    Ok(report)
}

/// Fixed random weighting used to reduce a non-scalar output to a scalar probe.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(y ⊙ R)` for a fixed random `R`; keeps every output coordinate in play.
pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(probe_weights(g.shape(y), seed));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

/// Uniform random tensor in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}
