//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default step scale. A power of two (~1.2e-4) so that `x ± h` round-trips
/// exactly for small integer-valued inputs and linear functions check to
/// literally zero error.
pub const DEFAULT_FD_STEP: f64 = 1.220703125e-4; // 2^-13

/// Maximum over coordinates of
/// `|analytic - central| / max(1, |central|)`
/// for a scalar-valued tensor function `f` of a single input. The step for
/// coordinate i is `h_scale * max(1, |x_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h_scale: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h_scale)
}

/// Multi-input variant: perturbs every coordinate of every tensor in `xs`.
pub fn finite_diff_check_multi<F>(f: F, xs: &[Tensor], h_scale: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = false;
                g.constant(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(
            "finite_diff_check requires a scalar-valued function".into(),
        ));
    }
    g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(vars[ti]) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; x.len()],
        };
        for i in 0..x.len() {
            let orig = x.data()[i];
            let h = h_scale * orig.abs().max(1.0);
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let central = (up - down) / (2.0 * h);
            let err = (analytic[i] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_exactly() {
        // Integer inputs and a power-of-two step keep every evaluation exact,
        // so a linear f has literally zero discrepancy.
        let x = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = finite_diff_check(|g, v| g.sum(v), &x, DEFAULT_FD_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_grad_matches() {
        // loss = sum(x*x), x = [3] -> grad [6]
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone().with_requires_grad());
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[6.0]);

        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn silu_grad_under_tolerance() {
        let mut rng = crate::rng::Rng::new(11);
        let x = Tensor::uniform(vec![10], -2.0, 2.0, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let s = g.silu(v)?;
                g.sum(s)
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
