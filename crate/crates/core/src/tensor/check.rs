//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input (sampled with a fixed
    /// seed). `None` checks every coordinate.
    pub max_coords: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-6,
            max_coords: None,
        }
    }
}

/// Denominator floor for the relative error, so that gradients that are zero up
/// to rounding do not divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Max relative error `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)` between the tape
/// gradient of a scalar function and central differences, over every coordinate
/// of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        FdOptions {
            eps,
            max_coords: None,
        },
    )
}

/// Multi-input variant of [`finite_difference_check`].
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], opts: FdOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a7d);
    let mut worst: f64 = 0.0;
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(cap) if cap < input.len() => {
                let mut c = sample(&mut rng, input.len(), cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            perturbed[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[k][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::MASK_BIG;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sum_has_zero_error() {
        let err = finite_difference_check(|g, x| Ok(g.sum(x)), &rand_t(&[5], 1), 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_at_zero_is_quarter() {
        let x = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let s = g.sigmoid(v);
        let l = g.sum(s);
        g.backward(l).unwrap();
        for &d in g.grad(v).unwrap() {
            assert!((d - 0.25).abs() < 1e-15);
        }
        let err = finite_difference_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    /// Every differentiable op on 20 random inputs, weighted by a random
    /// projection so the loss is not symmetric in its inputs.
    #[test]
    fn every_op_passes_gradcheck() {
        type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
            ("matmul_t", vec![vec![3, 4], vec![2, 4]], |g, v| g.matmul_t(v[0], v[1])),
            ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |g, v| {
                g.linear(v[0], v[1], Some(v[2]))
            }),
            ("add", vec![vec![3, 2], vec![3, 2]], |g, v| g.add(v[0], v[1])),
            ("sub", vec![vec![3, 2], vec![3, 2]], |g, v| g.sub(v[0], v[1])),
            ("mul", vec![vec![3, 2], vec![3, 2]], |g, v| g.mul(v[0], v[1])),
            ("div", vec![vec![3, 2], vec![3, 2]], |g, v| {
                let d = g.mul(v[1], v[1])?;
                let d = g.add_scalar(d, 1.0);
                g.div(v[0], d)
            }),
            ("add_row", vec![vec![3, 2], vec![2]], |g, v| g.add_row(v[0], v[1])),
            ("mul_scalar", vec![vec![3, 2]], |g, v| Ok(g.mul_scalar(v[0], -1.7))),
            ("relu", vec![vec![3, 2]], |g, v| Ok(g.relu(v[0]))),
            ("sigmoid", vec![vec![3, 2]], |g, v| Ok(g.sigmoid(v[0]))),
            ("exp", vec![vec![3, 2]], |g, v| Ok(g.exp(v[0]))),
            ("log_sqrt", vec![vec![3, 2]], |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let pos = g.add_scalar(sq, 0.5);
                let r = g.sqrt(pos);
                Ok(g.log(r))
            }),
            ("layernorm", vec![vec![3, 5]], |g, v| Ok(g.layernorm(v[0]))),
            ("softmax", vec![vec![3, 4]], |g, v| Ok(g.softmax(v[0]))),
            ("masked_softmax", vec![vec![2, 4]], |g, v| {
                let mask = Tensor::new(
                    vec![2, 4],
                    vec![0.0, -MASK_BIG, 0.0, 0.0, -MASK_BIG, -MASK_BIG, -MASK_BIG, -MASK_BIG],
                )?;
                g.masked_softmax(v[0], &mask)
            }),
            ("mean", vec![vec![3, 2]], |g, v| {
                let m = g.mean(v[0]);
                g.reshape(m, &[1])
            }),
            ("sum_rows", vec![vec![3, 4]], |g, v| g.sum_rows(v[0])),
            ("gather", vec![vec![3, 2]], |g, v| g.gather(v[0], &[5, 0, 0, 3])),
            ("select_rows", vec![vec![3, 2]], |g, v| g.select_rows(v[0], &[2, 2, 0])),
            ("transpose", vec![vec![3, 2]], |g, v| g.transpose(v[0])),
            ("slice_concat", vec![vec![3, 4], vec![3, 1]], |g, v| {
                let a = g.slice_cols(v[0], 1, 2)?;
                g.concat_cols(&[v[1], a])
            }),
            ("concat", vec![vec![3], vec![2, 2]], |g, v| Ok(g.concat(&[v[0], v[1]]))),
            ("logsumexp", vec![vec![5]], |g, v| {
                let l = g.logsumexp(v[0]);
                g.reshape(l, &[1])
            }),
            ("cross_entropy", vec![vec![3, 4]], |g, v| {
                let l = g.cross_entropy(v[0], &[1, 3, 3], &[1.0, 0.1, 0.5])?;
                g.reshape(l, &[1])
            }),
            ("bce_with_logits", vec![vec![4]], |g, v| {
                g.bce_with_logits(v[0], &[1.0, 0.0, 0.3, 1.0])
            }),
        ];

        for (name, shapes, op) in cases {
            let mut worst: f64 = 0.0;
            for trial in 0..20u64 {
                let inputs: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(k, s)| rand_t(s, trial * 31 + k as u64))
                    .collect();
                let err = finite_difference_check_many(
                    |g, vars| {
                        let y = op(g, vars)?;
                        let n = g.value(y).len();
                        let w = g.constant(rand_t(&[n], 999 + trial).reshape(g.shape(y).to_vec())?);
                        let p = g.mul(y, w)?;
                        Ok(g.sum(p))
                    },
                    &inputs,
                    FdOptions::default(),
                )
                .unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{name}: max relative error {worst}");
        }
    }
}
