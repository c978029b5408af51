//! Central finite-difference gradient checking.
//!
//! The harness compares the tape's analytic gradients against
//! `(f(p+eps) - f(p-eps)) / (2 eps)` for every coordinate of every trainable
//! parameter, and reports the worst relative error with denominator
//! `max(|analytic|, |numeric|, 1e-8)`.
//!
//! Checks must be run at differentiable points: kinks (ReLU at exactly 0,
//! tied max inputs) are excluded by construction in the built-in suites,
//! which sample smooth random points.

use super::graph::{Graph, Var};
use super::store::ParameterStore;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Maximum relative error between analytic and central-difference gradients
/// of a deterministic scalar-valued function of the store.
///
/// Dropout must be disabled (evaluation-mode graphs) — non-determinism is
/// detected by evaluating twice and comparing bit-for-bit.
pub fn grad_check<F>(f: F, store: &mut ParameterStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let v0 = eval(&f, store)?;
    let v1 = eval(&f, store)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::NonDeterministic);
    }

    // Analytic pass.
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    graph.backward(loss, store)?;
    let names = store.trainable_names();
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::with_capacity(names.len());
    for name in &names {
        let t = store.get(name)?;
        let g = t
            .grad
            .clone()
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        analytic.push((name.clone(), g));
    }

    // Numeric pass, one coordinate at a time.
    let mut max_rel = 0.0f64;
    for (name, grad) in &analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.get(name)?.data()[i];
            store.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = eval(&f, store)?;
            store.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = eval(&f, store)?;
            store.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Moves every trainable scalar by a uniform amount in ±`amplitude`.
///
/// Freshly initialized models sit exactly on ReLU kinks wherever a
/// zero-initialized bias follows dead units (pre-activation = bias = 0), and
/// one-sided derivatives break finite differences there. A small random
/// nudge makes the evaluation point generic; checks then run at a smooth
/// point as required.
pub fn nudge_params(store: &mut ParameterStore, rng: &mut Rng, amplitude: f64) {
    for name in store.trainable_names() {
        let t = store.get_mut(&name).expect("trainable name");
        for v in t.data_mut() {
            *v += rng.range(-amplitude, amplitude);
        }
    }
}

fn eval<F>(f: &F, store: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let v = f(&mut graph, store)?;
    let t = graph.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check: function returned shape {:?}, expected scalar",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

// ── built-in primitive suite ───────────────────────────────────────

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.range(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor bounded away from zero so ReLU-style kinks are avoided.
fn random_tensor_smooth(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let v = rng.range(0.2, 1.0);
            if rng.chance(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weights the output elementwise with a fixed random tensor and sums, so
/// every output coordinate contributes a distinct gradient signal.
fn weighted_sum(g: &mut Graph, out: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random_tensor(rng, &shape));
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Gradient-checks every differentiable primitive at `seeds` random smooth
/// points each. Returns `(name, worst relative error)` per primitive.
type Builder = fn(&mut Graph, &ParameterStore) -> Result<Var>;
type PrimitiveCase = (&'static str, Vec<(&'static str, Vec<usize>)>, Builder);

pub fn check_primitives(seeds: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let cases: Vec<PrimitiveCase> = vec![
        (
            "matmul",
            vec![("a", vec![3, 4]), ("b", vec![4, 2])],
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                g.matmul(a, b)
            },
        ),
        ("transpose", vec![("a", vec![3, 4])], |g, s| {
            let a = g.param(s, "a")?;
            g.transpose(a)
        }),
        ("add", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            g.add(a, b)
        }),
        ("sub", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            g.sub(a, b)
        }),
        ("mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            g.mul(a, b)
        }),
        (
            "add_row",
            vec![("a", vec![3, 4]), ("v", vec![4])],
            |g, s| {
                let a = g.param(s, "a")?;
                let v = g.param(s, "v")?;
                g.add_row(a, v)
            },
        ),
        (
            "mul_row",
            vec![("a", vec![3, 4]), ("v", vec![4])],
            |g, s| {
                let a = g.param(s, "a")?;
                let v = g.param(s, "v")?;
                g.mul_row(a, v)
            },
        ),
        (
            "add_col",
            vec![("a", vec![3, 4]), ("v", vec![3])],
            |g, s| {
                let a = g.param(s, "a")?;
                let v = g.param(s, "v")?;
                g.add_col(a, v)
            },
        ),
        (
            "mul_col",
            vec![("a", vec![3, 4]), ("v", vec![3])],
            |g, s| {
                let a = g.param(s, "a")?;
                let v = g.param(s, "v")?;
                g.mul_col(a, v)
            },
        ),
        ("scale", vec![("a", vec![2, 3])], |g, s| {
            let a = g.param(s, "a")?;
            g.scale(a, -1.75)
        }),
        ("relu", vec![("a", vec![4, 4])], |g, s| {
            let a = g.param(s, "a")?;
            g.relu(a)
        }),
        ("sin", vec![("a", vec![2, 5])], |g, s| {
            let a = g.param(s, "a")?;
            g.sin(a)
        }),
        ("cos", vec![("a", vec![2, 5])], |g, s| {
            let a = g.param(s, "a")?;
            g.cos(a)
        }),
        ("softmax", vec![("a", vec![3, 5])], |g, s| {
            let a = g.param(s, "a")?;
            g.softmax_last(a)
        }),
        (
            "layer_norm",
            vec![("a", vec![3, 6]), ("gamma", vec![6]), ("beta", vec![6])],
            |g, s| {
                let a = g.param(s, "a")?;
                let gamma = g.param(s, "gamma")?;
                let beta = g.param(s, "beta")?;
                g.layer_norm(a, gamma, beta, 1e-5)
            },
        ),
        ("max_axis", vec![("a", vec![3, 4, 2])], |g, s| {
            let a = g.param(s, "a")?;
            Ok(g.max_axis(a, 1)?.0)
        }),
        ("min_axis", vec![("a", vec![3, 4])], |g, s| {
            let a = g.param(s, "a")?;
            Ok(g.min_axis(a, 0)?.0)
        }),
        ("sum_axis", vec![("a", vec![2, 3, 4])], |g, s| {
            let a = g.param(s, "a")?;
            g.sum_axis(a, 2)
        }),
        (
            "concat_last",
            vec![("a", vec![3, 2]), ("b", vec![3, 4])],
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                g.concat_last(&[a, b])
            },
        ),
        (
            "concat_rows",
            vec![("a", vec![2, 3]), ("b", vec![4, 3])],
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                g.concat_rows(&[a, b])
            },
        ),
        ("gather_rows", vec![("a", vec![4, 3])], |g, s| {
            let a = g.param(s, "a")?;
            g.gather_rows(a, &[2, 0, 2, 3])
        }),
        ("reshape", vec![("a", vec![2, 6])], |g, s| {
            let a = g.param(s, "a")?;
            g.reshape(a, vec![3, 4])
        }),
        ("narrow_last", vec![("a", vec![3, 6])], |g, s| {
            let a = g.param(s, "a")?;
            g.narrow_last(a, 1, 3)
        }),
    ];

    let mut results = Vec::with_capacity(cases.len());
    for (name, params, builder) in cases {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = Rng::new(0x5eed_0000 + seed);
            let mut store = ParameterStore::new(seed);
            for (pname, shape) in &params {
                store.insert(
                    *pname,
                    random_tensor_smooth(&mut rng, shape).requires_grad(true),
                )?;
            }
            let wrng = rng.split(999);
            let err = grad_check(
                |g, s| {
                    let out = builder(g, s)?;
                    weighted_sum(g, out, &mut wrng.clone())
                },
                &mut store,
                eps,
            )?;
            worst = worst.max(err);
        }
        results.push((name.to_string(), worst));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_to_high_precision() {
        // f(p) = p² at p = 3: analytic 6, central differences are exact for
        // quadratics up to rounding.
        let mut store = ParameterStore::new(0);
        store
            .insert(
                "p",
                Tensor::new(vec![1], vec![3.0]).unwrap().requires_grad(true),
            )
            .unwrap();
        let err = grad_check(
            |g, s| {
                let p = g.param(s, "p")?;
                let sq = g.mul(p, p)?;
                g.sum_all(sq)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn every_primitive_below_1e4_over_20_seeds() {
        for (name, err) in check_primitives(20, 1e-6).unwrap() {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn loss_independent_of_parameter_has_zero_grad() {
        let mut store = ParameterStore::new(0);
        store
            .insert(
                "used",
                Tensor::new(vec![1], vec![2.0]).unwrap().requires_grad(true),
            )
            .unwrap();
        store
            .insert(
                "idle",
                Tensor::new(vec![1], vec![5.0]).unwrap().requires_grad(true),
            )
            .unwrap();
        let err = grad_check(
            |g, s| {
                let p = g.param(s, "used")?;
                let _ = g.param(s, "idle")?;
                g.mul(p, p)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        // The idle parameter's analytic and numeric gradients are both zero.
        assert!(err < 1e-8);
    }
}
