//! Property checks run against a whole model: per-layer equivariance, the
//! commutation identity, symmetric inference, and gradient checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Layer, Model, Stream};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::layers::ChiralLinearSpec;
use crate::layout::{ChiralityTransform, JointLayout};
use crate::recurrent::{swap_only, CellKind, RecurrentCell};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: String, trials: usize, max_violation: f64, tol: f64) -> Self {
        Self {
            name,
            trials,
            max_violation,
            tol,
            passed: max_violation <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl SuiteReport {
    fn new(checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// `max |T_out(f(x)) - f(T_in(x))|` where both transforms act on the last axis.
pub fn equivariance_violation(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    t_in: &ChiralityTransform,
    t_out: &ChiralityTransform,
) -> Result<f64> {
    let lhs = t_out.apply(&f(x)?)?;
    let rhs = f(&t_in.apply(x)?)?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// Dense commutation identity `W T_in == T_out W` for a chiral linear map.
pub fn commutation_violation(spec: &ChiralLinearSpec) -> Result<f64> {
    let w = spec.materialize_weight();
    let ti = spec.in_layout().transform().to_dense();
    let to = spec.out_layout().transform().to_dense();
    Ok(w.matmul(&ti)?.max_abs_diff(&to.matmul(&w)?))
}

fn min_frames(model: &Model) -> usize {
    (1..=4096)
        .find(|&t| model.frame_map(t).is_ok())
        .unwrap_or(1)
}

fn layer_layouts(model: &Model) -> Vec<Option<JointLayout>> {
    let mut out = Vec::new();
    let mut stream = model.input().clone();
    for layer in model.layers() {
        out.push(stream.layout().cloned());
        stream = match layer {
            Layer::Linear(s) | Layer::Head(s) => Stream::Layout(s.out_layout().clone()),
            Layer::Conv(s) => Stream::Layout(s.plan().out_layout().clone()),
            Layer::Recurrent(s) => Stream::Layout(s.hidden_layout().clone()),
            Layer::Dense(d) => Stream::Features(d.n_out()),
            _ => stream,
        };
    }
    out
}

/// Runs the equivariance suite: every layer in isolation, then the whole model.
pub fn check_equivariance(
    model: &Model,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<SuiteReport> {
    let Some((t_in, t_out)) = model.transforms() else {
        return Err(Error::validation(
            "model contains unstructured layers, so it has no chirality transform to check",
        ));
    };
    if trials == 0 {
        return Err(Error::validation("trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let layouts = layer_layouts(model);
    for (i, layer) in model.layers().iter().enumerate() {
        let inl = layouts[i].clone().expect("chiral model");
        let ti = inl.transform();
        let tag = |what: &str| format!("layer {i} {} {what}", layer.kind_name());
        let mut worst = 0.0f64;
        match layer {
            Layer::Linear(s) | Layer::Head(s) => {
                let to = s.out_layout().transform();
                let mut sym = 0.0f64;
                for _ in 0..trials {
                    let x = random_tensor(&mut rng, vec![4, inl.size()]);
                    worst = worst.max(equivariance_violation(|x| s.forward(x), &x, &ti, &to)?);
                    let (y, _) = s.symmetric_matvec(x.row_slice(0))?;
                    let dense = s.forward(&Tensor::row(x.row_slice(0).to_vec()))?;
                    sym = sym.max(dense.max_abs_diff(&Tensor::row(y)));
                }
                checks.push(CheckResult::new(tag("equivariance"), trials, worst, tol));
                checks.push(CheckResult::new(
                    tag("commutation identity"),
                    1,
                    commutation_violation(s)?,
                    tol,
                ));
                checks.push(CheckResult::new(
                    tag("symmetric matvec"),
                    trials,
                    sym,
                    tol.max(1e-9),
                ));
            }
            Layer::Conv(c) => {
                let to = c.plan().out_layout().transform();
                let t = c.receptive_field() + 2;
                for _ in 0..trials {
                    let x = random_tensor(&mut rng, vec![2, t, inl.size()]);
                    worst = worst.max(equivariance_violation(|x| c.forward(x), &x, &ti, &to)?);
                }
                checks.push(CheckResult::new(tag("equivariance"), trials, worst, tol));
            }
            Layer::BatchNorm(bn) => {
                let mut eval = 0.0f64;
                for _ in 0..trials {
                    let x = random_tensor(&mut rng, vec![6, inl.size()]);
                    worst = worst.max(equivariance_violation(
                        |x| Ok(bn.forward_const(x, true)?.0),
                        &x,
                        &ti,
                        &ti,
                    )?);
                    eval = eval.max(equivariance_violation(
                        |x| Ok(bn.forward_const(x, false)?.0),
                        &x,
                        &ti,
                        &ti,
                    )?);
                }
                checks.push(CheckResult::new(
                    tag("train-mode equivariance"),
                    trials,
                    worst,
                    tol,
                ));
                checks.push(CheckResult::new(
                    tag("eval-mode equivariance"),
                    trials,
                    eval,
                    tol,
                ));
            }
            Layer::Activation(k) => {
                for _ in 0..trials {
                    let x = random_tensor(&mut rng, vec![4, inl.size()]);
                    worst = worst.max(equivariance_violation(|x| Ok(k.apply(x)), &x, &ti, &ti)?);
                }
                checks.push(CheckResult::new(tag("equivariance"), trials, worst, tol));
            }
            Layer::Dropout(d) => {
                for _ in 0..trials {
                    let x = random_tensor(&mut rng, vec![4, inl.size()]);
                    let f = |x: &Tensor| Ok(d.forward(x, false, &mut ChaCha8Rng::seed_from_u64(0)));
                    worst = worst.max(equivariance_violation(f, &x, &ti, &ti)?);
                }
                checks.push(CheckResult::new(
                    tag("eval-mode equivariance"),
                    trials,
                    worst,
                    tol,
                ));
            }
            Layer::Recurrent(cell) => {
                let (step, gates) = recurrent_step_violation(cell, trials, &mut rng)?;
                checks.push(CheckResult::new(
                    tag("step equivariance"),
                    trials,
                    step,
                    tol,
                ));
                checks.push(CheckResult::new(
                    tag("gate swap covariance"),
                    trials,
                    gates,
                    tol,
                ));
                let th = cell.hidden_layout().transform();
                for _ in 0..trials.div_ceil(10) {
                    let x = random_tensor(&mut rng, vec![2, 5, inl.size()]);
                    worst = worst.max(equivariance_violation(
                        |x| cell.unroll(x, None, None),
                        &x,
                        &ti,
                        &th,
                    )?);
                }
                checks.push(CheckResult::new(
                    tag("5-step unroll equivariance"),
                    trials.div_ceil(10),
                    worst,
                    tol.max(1e-9),
                ));
            }
            Layer::Dense(_) => unreachable!("chiral model"),
        }
    }
    let t = min_frames(model) + 1;
    let mut end = 0.0f64;
    for _ in 0..trials {
        let x = random_tensor(&mut rng, vec![2, t, model.input().size()]);
        end = end.max(equivariance_violation(
            |x| model.forward(x),
            &x,
            &t_in,
            &t_out,
        )?);
    }
    checks.push(CheckResult::new(
        "model end-to-end equivariance (eval mode)".into(),
        trials,
        end,
        tol.max(1e-9),
    ));
    Ok(SuiteReport::new(checks))
}

/// Worst step-equivariance and gate-covariance violations of a cell.
pub fn recurrent_step_violation(
    cell: &RecurrentCell,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let (il, hl) = (cell.in_layout(), cell.hidden_layout());
    let (ti, th) = (il.transform(), hl.transform());
    let (mut step, mut gates) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let x = random_tensor(rng, vec![3, il.size()]);
        let h = random_tensor(rng, vec![3, hl.size()]);
        let c = random_tensor(rng, vec![3, hl.size()]);
        let (tx, thh, tc) = (ti.apply(&x)?, th.apply(&h)?, th.apply(&c)?);
        match cell.kind() {
            CellKind::Lstm => {
                let (h1, c1) = cell.lstm_step(&x, &h, &c)?;
                let (h2, c2) = cell.lstm_step(&tx, &thh, &tc)?;
                step = step
                    .max(th.apply(&h1)?.max_abs_diff(&h2))
                    .max(th.apply(&c1)?.max_abs_diff(&c2));
            }
            CellKind::Gru => {
                let h1 = cell.gru_step(&x, &h)?;
                let h2 = cell.gru_step(&tx, &thh)?;
                step = step.max(th.apply(&h1)?.max_abs_diff(&h2));
            }
        }
        let g1 = cell.gates(&x, &h)?;
        let g2 = cell.gates(&tx, &thh)?;
        for ((_, a), (_, b)) in g1.values.iter().zip(&g2.values) {
            for r in 0..a.rows() {
                let swapped = swap_only(hl, a.row_slice(r));
                let d = swapped
                    .iter()
                    .zip(b.row_slice(r))
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max);
                gates = gates.max(d);
            }
        }
    }
    Ok((step, gates))
}

/// Central-difference checks of every parametrized layer and of the input
/// gradient, on a random weighted sum of training-mode outputs.
pub fn gradcheck_model(model: &Model, eps: f64, tol: f64, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = min_frames(model);
    let batch = 3;
    let x = random_tensor(&mut rng, vec![batch * t, model.input().size()]);
    let t_out = model.frame_map(t)?.len();
    let weights = random_tensor(&mut rng, vec![batch * t_out, model.output().size()]);
    let base: Vec<Tensor> = model
        .layers()
        .iter()
        .map(|l| Tensor::new(vec![l.theta().len()], l.theta().to_vec()))
        .collect::<Result<_>>()?;

    let run = |target: Option<usize>| -> Result<f64> {
        let probe = match target {
            Some(i) => base[i].clone(),
            None => x.clone(),
        };
        grad_check(
            |tape, v| {
                let params: Vec<Option<Var<'_>>> = base
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        if b.is_empty() {
                            None
                        } else if Some(i) == target {
                            Some(v)
                        } else {
                            Some(tape.constant(b.clone()))
                        }
                    })
                    .collect();
                let input = if target.is_none() {
                    v
                } else {
                    tape.constant(x.clone())
                };
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let pass = model.forward_var(&params, input, batch, t, true, &mut r)?;
                Ok(pass.output.mul(tape.constant(weights.clone()))?.sum())
            },
            &probe,
            eps,
        )
    };

    let mut checks = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if layer.theta().is_empty() {
            continue;
        }
        let err = run(Some(i))?;
        checks.push(CheckResult::new(
            format!("layer {i} {} parameter gradient", layer.kind_name()),
            layer.theta().len(),
            err,
            tol,
        ));
    }
    let err = run(None)?;
    checks.push(CheckResult::new("input gradient".into(), x.len(), err, tol));
    Ok(SuiteReport::new(checks))
}

/// A random layout with at most `max_joints` joints and `max_dims` dims per joint.
pub fn random_layout(
    rng: &mut impl Rng,
    prefix: &str,
    max_joints: usize,
    max_dims: usize,
) -> JointLayout {
    loop {
        let pairs = rng.random_range(0..=max_joints / 2);
        let center = rng.random_range(0..=max_joints - 2 * pairs);
        if pairs + center == 0 {
            continue;
        }
        let dims = rng.random_range(1..=max_dims);
        let negated: Vec<usize> = (0..dims).filter(|_| rng.random_bool(0.5)).collect();
        return JointLayout::synthetic(prefix, pairs, center, dims, &negated)
            .expect("valid layout");
    }
}
