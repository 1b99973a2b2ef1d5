//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::params::{Mode, ParamStore, Session};
use crate::Result;

/// Builds a scalar loss from leaf inputs placed on a fresh graph.
pub trait LossFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> LossFn for F {}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
    /// so entries whose true gradient is ~0 are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct InputReport {
    pub checked: usize,
    /// Entries left out because the two probes landed on different sides of
    /// a ReLU kink or a max tie, where no derivative exists.
    pub straddled: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

impl InputReport {
    fn add(&mut self, analytic: f64, numeric: Option<f64>, floor: f64) {
        match numeric {
            None => self.straddled += 1,
            Some(n) => {
                self.checked += 1;
                self.max_abs_error = self.max_abs_error.max((analytic - n).abs());
                self.max_rel_error = self.max_rel_error.max(relative_error(analytic, n, floor));
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate(loss: &impl LossFn, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    Ok((g.value(out).item(), g.branch_fingerprint()))
}

/// `(f(x + h) - f(x - h)) / 2h`, or `None` when the two probes took
/// different branches.
fn difference((plus, at_plus): (f64, u64), (minus, at_minus): (f64, u64), h: f64) -> Option<f64> {
    (at_plus == at_minus).then(|| (plus - minus) / (2.0 * h))
}

/// Analytic gradients of `loss` with respect to every input.
pub fn analytic_gradients(loss: &impl LossFn, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central difference for one entry of one input; `None` when the stencil
/// straddles a kink.
pub fn central_difference(loss: &impl LossFn, inputs: &[Tensor], input: usize, entry: usize, h: f64) -> Result<Option<f64>> {
    let mut probe = inputs.to_vec();
    let x0 = probe[input].data()[entry];
    probe[input].data_mut()[entry] = x0 + h;
    let plus = evaluate(loss, &probe)?;
    probe[input].data_mut()[entry] = x0 - h;
    let minus = evaluate(loss, &probe)?;
    Ok(difference(plus, minus, h))
}

/// Compare analytic and numeric gradients on the entries chosen by
/// `entries(input_index, len)` (all of them when it returns `None`).
pub fn check_gradients(
    loss: &impl LossFn,
    inputs: &[Tensor],
    opts: GradCheckOptions,
    mut entries: impl FnMut(usize, usize) -> Option<Vec<usize>>,
) -> Result<Vec<InputReport>> {
    let analytic = analytic_gradients(loss, inputs)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let which = entries(i, t.len()).unwrap_or_else(|| (0..t.len()).collect());
        let mut rep = InputReport::default();
        for e in which {
            let numeric = central_difference(loss, inputs, i, e, opts.step)?;
            rep.add(analytic[i].data()[e], numeric, opts.floor);
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Full check over every entry of every input; returns the worst relative
/// error.
pub fn max_relative_error(loss: &impl LossFn, inputs: &[Tensor]) -> Result<f64> {
    let reports = check_gradients(loss, inputs, GradCheckOptions::default(), |_, _| None)?;
    Ok(reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max))
}

/// Finite-difference check of every parameter in `store` against the loss
/// built by `loss` on a fresh [`Session`]. Each evaluation starts from an
/// untouched copy of `store`, so running-statistic updates do not leak
/// between probes.
pub fn check_params(
    store: &ParamStore,
    mode: Mode,
    loss: impl Fn(&mut Session) -> Result<Var>,
    opts: GradCheckOptions,
    mut entries: impl FnMut(usize, usize) -> Option<Vec<usize>>,
) -> Result<Vec<InputReport>> {
    let analytic = {
        let mut local = store.clone();
        let mut s = Session::new(&mut local, mode, true);
        let out = loss(&mut s)?;
        s.graph.backward(out)?;
        s.param_grads()
    };
    let eval = |param: usize, entry: usize, value: f64| -> Result<(f64, u64)> {
        let mut local = store.clone();
        local.params_mut()[param].value.data_mut()[entry] = value;
        let mut s = Session::new(&mut local, mode, false);
        let out = loss(&mut s)?;
        Ok((s.graph.value(out).item(), s.graph.branch_fingerprint()))
    };
    let mut reports = Vec::with_capacity(store.params().len());
    for (i, p) in store.params().iter().enumerate() {
        let which = entries(i, p.value.len()).unwrap_or_else(|| (0..p.value.len()).collect());
        let mut rep = InputReport::default();
        for e in which {
            let x0 = p.value.data()[e];
            let numeric = difference(eval(i, e, x0 + opts.step)?, eval(i, e, x0 - opts.step)?, opts.step);
            rep.add(analytic[i].as_ref().map_or(0.0, |g| g.data()[e]), numeric, opts.floor);
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// How random inputs for an [`OpCase`] are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Standard normal, pushed at least 0.05 away from zero.
    Signed,
    /// Uniform in [0.5, 2).
    Positive,
}

/// One differentiable graph operation with the input shapes it is checked on.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], build: fn(&mut Graph, &[Var]) -> Result<Var>) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(), build }
}

/// Every differentiable operation on [`Graph`], with broadcasting variants.
pub fn op_suite() -> Vec<OpCase> {
    use Domain::{Positive as P, Signed as S};
    vec![
        case("add", &[(&[2, 3], S), (&[2, 3], S)], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", &[(&[2, 3, 4], S), (&[3, 1], S)], |g, v| g.add(v[0], v[1])),
        case("sub", &[(&[2, 3], S), (&[1, 3], S)], |g, v| g.sub(v[0], v[1])),
        case("mul", &[(&[2, 3], S), (&[2, 1], S)], |g, v| g.mul(v[0], v[1])),
        case("div", &[(&[2, 3], S), (&[3], P)], |g, v| g.div(v[0], v[1])),
        case("add_scalar", &[(&[4], S)], |g, v| Ok(g.add_scalar(v[0], 0.7))),
        case("mul_scalar", &[(&[4], S)], |g, v| Ok(g.mul_scalar(v[0], -1.3))),
        case("sigmoid", &[(&[2, 3], S)], |g, v| Ok(g.sigmoid(v[0]))),
        case("relu", &[(&[2, 3], S)], |g, v| Ok(g.relu(v[0]))),
        case("exp", &[(&[2, 3], S)], |g, v| Ok(g.exp(v[0]))),
        case("log", &[(&[2, 3], P)], |g, v| Ok(g.log(v[0]))),
        case("sqrt", &[(&[2, 3], P)], |g, v| Ok(g.sqrt(v[0]))),
        case("neg", &[(&[2, 3], S)], |g, v| Ok(g.neg(v[0]))),
        case("square", &[(&[2, 3], S)], |g, v| Ok(g.square(v[0]))),
        case("sum", &[(&[2, 3, 4], S)], |g, v| g.sum(v[0], &[0, 2], true)),
        case("mean", &[(&[2, 3, 4], S)], |g, v| g.mean(v[0], &[1], false)),
        case("variance", &[(&[2, 3, 4], S)], |g, v| g.variance(v[0], &[2], true)),
        case("max", &[(&[2, 3, 4], S)], |g, v| g.max(v[0], &[1], false)),
        case("sum_all", &[(&[2, 3], S)], |g, v| Ok(g.sum_all(v[0]))),
        case("mean_all", &[(&[2, 3], S)], |g, v| Ok(g.mean_all(v[0]))),
        case("reshape", &[(&[2, 3, 2], S)], |g, v| g.reshape(v[0], &[3, 4])),
        case("transpose", &[(&[2, 3], S)], |g, v| g.transpose(v[0])),
        case("concat", &[(&[2, 1, 3], S), (&[2, 2, 3], S)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("slice", &[(&[2, 5, 2], S)], |g, v| g.slice(v[0], 1, 1, 3)),
        case("matmul", &[(&[3, 4], S), (&[4, 2], S)], |g, v| g.matmul(v[0], v[1])),
        case("conv2d", &[(&[2, 2, 5, 5], S), (&[3, 2, 3, 3], S)], |g, v| g.conv2d(v[0], v[1], 1, 1)),
        case("conv2d_strided", &[(&[1, 2, 6, 6], S), (&[2, 2, 3, 3], S)], |g, v| g.conv2d(v[0], v[1], 2, 0)),
        case("max_pool2d", &[(&[2, 2, 5, 5], S)], |g, v| g.max_pool2d(v[0], 3, 2, 1)),
        case("batch_norm", &[(&[3, 2, 2, 2], S), (&[2], S), (&[2], S)], |g, v| {
            g.batch_norm(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
        }),
        case("log_softmax", &[(&[3, 4], S)], |g, v| g.log_softmax(v[0])),
        case("masked_logsumexp", &[(&[2, 3], S)], |g, v| {
            g.masked_logsumexp(v[0], &[true, false, true, true, false, true])
        }),
    ]
}

fn draw(shape: &[usize], domain: Domain, rng: &mut impl rand::Rng) -> Tensor {
    match domain {
        Domain::Signed => {
            Tensor::randn(shape, rng).map(|v| if v.abs() < 0.05 { v + 0.05 * v.signum() } else { v })
        }
        Domain::Positive => Tensor::uniform(shape, 0.5, 2.0, rng),
    }
}

/// Worst relative error of `case` over every input entry. The output is
/// reduced to a scalar through fixed random weights, so every output entry
/// carries a distinct upstream gradient.
pub fn check_op(case: &OpCase, seed: u64, opts: GradCheckOptions) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case.inputs.iter().map(|(s, d)| draw(s, *d, &mut rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = Tensor::randn(&out_shape, &mut rng);
    let build = case.build;
    let loss = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let out = build(g, v)?;
        let w = g.constant(weights.clone());
        let weighted = g.mul(out, w)?;
        Ok(g.sum_all(weighted))
    };
    let reports = check_gradients(&loss, &inputs, opts, |_, _| None)?;
    Ok(reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max))
}
