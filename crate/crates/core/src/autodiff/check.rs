use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `build` receives a fresh graph and the leaf holding the evaluation point
/// and must return the scalar output node. The result is
/// `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
pub fn gradient_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let root = build(&mut g, x)?;
    g.backward(root)?;
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p)?;
        let root = build(&mut g, x)?;
        let v = g.value(root);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        if !(fd.is_finite() && a.is_finite()) {
            return Err(Error::NonFinite(format!("gradient_check coordinate {i}")));
        }
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let err = gradient_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::vector(vec![1.0]);
        assert!(gradient_check(|g, x| g.sum(x), &p, 0.0).is_err());
    }

    // Every differentiable primitive, 100 random points in [-1, 1].
    #[test]
    fn primitives_match_finite_differences() {
        type Builder = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
        let w = Tensor::matrix(3, 2, vec![0.4, -0.3, 0.25, 0.9, -0.6, 0.1]).unwrap();
        let bias = Tensor::vector(vec![0.05, -0.2]);
        let cases: Vec<(&str, Vec<usize>, Builder)> = vec![
            ("matmul", vec![4, 3], {
                let w = w.clone();
                Box::new(move |g, x| {
                    let wv = g.constant(w.clone())?;
                    let y = g.matmul(x, wv)?;
                    let y = g.square(y)?;
                    g.sum(y)
                })
            }),
            (
                "matmul_rhs",
                vec![3, 2],
                Box::new(|g, x| {
                    let a = g.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 0.3, 0.2, 0.8, -0.4])?)?;
                    let y = g.matmul(a, x)?;
                    let y = g.square(y)?;
                    g.sum(y)
                }),
            ),
            ("add_row", vec![4, 2], {
                let b = bias.clone();
                Box::new(move |g, x| {
                    let bv = g.leaf(b.clone())?;
                    let y = g.add_row(x, bv)?;
                    let y = g.square(y)?;
                    g.sum(y)
                })
            }),
            (
                "add_sub",
                vec![5],
                Box::new(|g, x| {
                    let sq = g.square(x)?;
                    let a = g.add(x, sq)?;
                    let e = g.exp(x)?;
                    let d = g.sub(a, e)?;
                    g.mean(d)
                }),
            ),
            (
                "affine",
                vec![5],
                Box::new(|g, x| {
                    let a = g.affine(x, -2.5, 0.3)?;
                    let a = g.square(a)?;
                    g.sum(a)
                }),
            ),
            (
                "relu",
                vec![6],
                Box::new(|g, x| {
                    let s = g.affine(x, 1.0, 0.0)?;
                    let r = g.relu(s)?;
                    let r = g.square(r)?;
                    g.sum(r)
                }),
            ),
            (
                "exp",
                vec![5],
                Box::new(|g, x| {
                    let e = g.exp(x)?;
                    g.sum(e)
                }),
            ),
            (
                "log",
                vec![5],
                Box::new(|g, x| {
                    let p = g.affine(x, 1.0, 2.0)?;
                    let l = g.log(p)?;
                    g.sum(l)
                }),
            ),
            (
                "sqrt",
                vec![5],
                Box::new(|g, x| {
                    let p = g.affine(x, 1.0, 2.0)?;
                    let r = g.sqrt(p)?;
                    g.sum(r)
                }),
            ),
            (
                "logsumexp_rows",
                vec![3, 4],
                Box::new(|g, x| {
                    let l = g.logsumexp_rows(x)?;
                    let l = g.square(l)?;
                    g.sum(l)
                }),
            ),
            (
                "pick",
                vec![3, 4],
                Box::new(|g, x| {
                    let p = g.pick(x, &[2, 0, 3])?;
                    let p = g.exp(p)?;
                    g.sum(p)
                }),
            ),
            (
                "index_select",
                vec![4, 2],
                Box::new(|g, x| {
                    let s = g.index_select(x, &[3, 0, 0, 2])?;
                    let s = g.square(s)?;
                    g.sum(s)
                }),
            ),
            (
                "row_norm",
                vec![4, 3],
                Box::new(|g, x| {
                    let n = g.row_norm(x)?;
                    g.sum(n)
                }),
            ),
            (
                "kernel_mean_cross",
                vec![5, 2],
                Box::new(|g, x| {
                    let y = g.constant(Tensor::matrix(3, 2, vec![0.1, 0.2, -0.4, 0.5, 0.7, -0.3])?)?;
                    g.kernel_mean(x, y, &[0.5, 1.0, 2.0])
                }),
            ),
            (
                "kernel_mean_self",
                vec![6],
                Box::new(|g, x| g.kernel_mean(x, x, &[0.25, 0.5, 1.0, 2.0, 4.0])),
            ),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, shape, build) in &cases {
            for trial in 0..100 {
                let p = random_tensor(&mut rng, shape);
                let err = gradient_check(build, &p, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
            }
        }
    }

    #[test]
    fn reduction_order_does_not_change_forward_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_tensor(&mut rng, &[16]);
        let mut g = Graph::new();
        let x = g.leaf(t.clone()).unwrap();
        let s1 = g.sum(x).unwrap();
        let rev: Vec<usize> = (0..16).rev().collect();
        let r = g.index_select(x, &rev).unwrap();
        let s2 = g.sum(r).unwrap();
        assert!((g.scalar(s1) - g.scalar(s2)).abs() < 1e-14);
    }
}
