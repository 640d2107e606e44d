//! Central-difference gradient oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::validation(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&tape, xv)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    check_finite(out.item(), "function value")?;
    let analytic = tape.backward(out)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let y = f(&tape, v)?.item();
        check_finite(y, "perturbed function value")
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = check_finite(analytic.data()[i], "analytic gradient")?;
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GatherMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let err = grad_check(|_, v| Ok(v.square().sum()), &x, 1e-6).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row(vec![0.5, -0.25]);
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0)).sum()), &x, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::row(vec![1.0]);
        assert!(grad_check(|_, v| Ok(v.sum()), &x, 1e-2).is_err());
        let zero = Tensor::row(vec![0.0]);
        let r = grad_check(|_, v| Ok(v.recip().sum()), &zero, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_primitive_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-5;
        let eps = 1e-6;
        for _ in 0..5 {
            let x = rand_tensor(&mut rng, vec![3, 4]);
            let other = rand_tensor(&mut rng, vec![3, 4]);
            let w = rand_tensor(&mut rng, vec![4, 2]);
            let row = rand_tensor(&mut rng, vec![4]);
            let weights = rand_tensor(&mut rng, vec![3, 4]);
            // bounded away from zero for division / reciprocal / sqrt
            let pos = x.map(|v| v.abs() + 0.5);

            type Case = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>;
            let (o1, o2, o3, o4, o5) = (
                other.clone(),
                w.clone(),
                row.clone(),
                weights.clone(),
                other.clone(),
            );
            let cases: Vec<(&str, Case, &Tensor)> = vec![
                (
                    "matmul",
                    Box::new(move |t, v| {
                        v.matmul(t.constant(o2.clone()))?.square().sum().pipe_ok()
                    }),
                    &x,
                ),
                (
                    "add",
                    Box::new(move |t, v| v.add(t.constant(o1.clone()))?.square().sum().pipe_ok()),
                    &x,
                ),
                (
                    "sub",
                    Box::new({
                        let o = other.clone();
                        move |t, v| t.constant(o.clone()).sub(v)?.square().sum().pipe_ok()
                    }),
                    &x,
                ),
                (
                    "mul",
                    Box::new(move |t, v| v.mul(t.constant(o5.clone()))?.sum().pipe_ok()),
                    &x,
                ),
                (
                    "div",
                    Box::new({
                        let o = other.clone();
                        move |t, v| t.constant(o.clone()).div(v)?.sum().pipe_ok()
                    }),
                    &pos,
                ),
                (
                    "add_row",
                    Box::new(move |t, v| {
                        t.constant(o4.clone()).add_row(v)?.square().sum().pipe_ok()
                    }),
                    &row,
                ),
                (
                    "mul_row",
                    Box::new({
                        let o = weights.clone();
                        move |t, v| t.constant(o.clone()).mul_row(v)?.square().sum().pipe_ok()
                    }),
                    &row,
                ),
                (
                    "mul_row_lhs",
                    Box::new(move |t, v| {
                        v.mul_row(t.constant(o3.clone()))?.square().sum().pipe_ok()
                    }),
                    &x,
                ),
                (
                    "scale_offset",
                    Box::new(|_, v| Ok(v.scale(-1.5).offset(0.3).square().sum())),
                    &x,
                ),
                ("mean", Box::new(|_, v| Ok(v.square().mean())), &x),
                (
                    "mean_rows",
                    Box::new(|_, v| Ok(v.square().mean_rows()?.square().sum())),
                    &x,
                ),
                ("tanh", Box::new(|_, v| Ok(v.tanh().square().sum())), &x),
                (
                    "hardtanh",
                    Box::new(|_, v| Ok(v.hardtanh().square().sum())),
                    &x,
                ),
                (
                    "softsign",
                    Box::new(|_, v| Ok(v.softsign().square().sum())),
                    &x,
                ),
                (
                    "sigmoid",
                    Box::new(|_, v| Ok(v.sigmoid().square().sum())),
                    &x,
                ),
                ("sqrt", Box::new(|_, v| Ok(v.sqrt().sum())), &pos),
                ("recip", Box::new(|_, v| Ok(v.recip().sum())), &pos),
                (
                    "concat",
                    Box::new(|t, v| t.concat(&[v, v.tanh()])?.square().sum().pipe_ok()),
                    &x,
                ),
                (
                    "stack_rows",
                    Box::new(|t, v| t.stack_rows(&[v.tanh(), v])?.square().sum().pipe_ok()),
                    &x,
                ),
                (
                    "slice",
                    Box::new(|_, v| v.slice(1, 3)?.square().sum().pipe_ok()),
                    &x,
                ),
                (
                    "gather",
                    Box::new(|_, v| {
                        let map: GatherMap =
                            vec![Some((3, -1.0)), None, Some((0, 2.0)), Some((3, 0.5))].into();
                        v.gather(&map)?.square().sum().pipe_ok()
                    }),
                    &x,
                ),
                (
                    "select_rows",
                    Box::new(|_, v| {
                        let idx: Arc<[usize]> = vec![2, 0, 2].into();
                        v.select_rows(&idx)?.square().sum().pipe_ok()
                    }),
                    &x,
                ),
                (
                    "reshape",
                    Box::new(|_, v| v.reshape(vec![4, 3])?.tanh().sum().pipe_ok()),
                    &x,
                ),
            ];
            for (name, f, at) in &cases {
                let err = grad_check(|t, v| f(t, v), at, eps).unwrap();
                assert!(err <= tol, "{name}: {err}");
            }
        }
    }

    trait PipeOk: Sized {
        fn pipe_ok(self) -> Result<Self> {
            Ok(self)
        }
    }
    impl PipeOk for Var<'_> {}
}
