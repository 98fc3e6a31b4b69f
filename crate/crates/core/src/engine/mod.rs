//! Dense tensors with reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major tensors, a define-by-run
//! [`Graph`], and exactly the primitives the encoder and the structural
//! probe need. [`finite_diff_check`] verifies any loss built on it.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Float, Tensor};

#[allow(unused_imports)]
pub(crate) use graph::softmax_in_place;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.reshape(x, &[2, 2]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&[7, 13], 3).cast::<f32>());
        let y = g.softmax(x).unwrap();
        for r in 0..7 {
            let s: f32 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[5, 32], 4));
        let gain = g.constant(Tensor::full(&[32], 1.0));
        let bias = g.constant(Tensor::zeros(&[32]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn two_layer_perceptron_matches_direct_forward() {
        let x = random(&[3, 4], 10);
        let w1 = random(&[4, 5], 11);
        let b1 = random(&[5], 12);
        let w2 = random(&[5, 2], 13);

        let mut g = Graph::new();
        let (xv, w1v, b1v, w2v) = (g.constant(x.clone()), g.param(w1.clone()), g.param(b1.clone()), g.param(w2.clone()));
        let h = g.linear(xv, w1v, b1v).unwrap();
        let h = g.tanh(h).unwrap();
        let y = g.matmul(h, w2v).unwrap();

        // plain loops
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            let mut hid = [0.0; 5];
            for j in 0..5 {
                let mut s = b1.data()[j];
                for k in 0..4 {
                    s += x.data()[i * 4 + k] * w1.data()[k * 5 + j];
                }
                hid[j] = s.tanh();
            }
            for o in 0..2 {
                expected[i * 2 + o] = (0..5).map(|j| hid[j] * w2.data()[j * 2 + o]).sum();
            }
        }
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(random(&[3, 3], 1));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(4.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
        assert_eq!(grads.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(random(&[2], 2));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        let z = grads.get_or_zeros(unused, g.value(unused));
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, EngineError::NonFinite { .. }));
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(EngineError::Shape(_))));
        assert!(g.matmul_t(a, b, false, true).is_ok());
    }

    #[test]
    fn permute_round_trips() {
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 4, 5], 7));
        let y = g.permute(x, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 3, 5]);
        let z = g.permute(y, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.value(z), g.value(x));
        // spot check one element
        let xv = g.value(x).data()[((1 * 3 + 2) * 4 + 3) * 5 + 4];
        let yv = g.value(y).data()[((1 * 4 + 3) * 3 + 2) * 5 + 4];
        assert_eq!(xv, yv);
    }

    #[test]
    fn evaluation_is_bit_identical_across_runs() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let x = g.param(random(&[4, 8], 5).cast());
            let w = g.param(random(&[8, 8], 6).cast());
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let h = g.matmul(x, w).unwrap();
            let h = g.dropout(h, 0.1, &mut rng).unwrap();
            let h = g.gelu(h).unwrap();
            let s = g.sum(h).unwrap();
            (g.value(s).item().to_bits(), g.value(h).clone())
        };
        assert_eq!(build(), build());
    }

    fn check_eps(
        params: ParamStore<f64>,
        eps: f64,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, EngineError>,
    ) -> f64 {
        finite_diff_check(&params, f, eps, 200, 1).unwrap().max_rel_error
    }

    fn check(params: ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, EngineError>) -> f64 {
        check_eps(params, 1e-6, f)
    }

    fn store(items: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in items {
            s.insert(*n, t.clone());
        }
        s
    }

    #[test]
    fn linear_loss_check_is_exact() {
        let p = store(&[("x", random(&[10], 1)), ("w", random(&[10], 2))]);
        let w_const = random(&[10], 3);
        // no truncation error for a linear loss; the widest step minimizes roundoff
        let err = check_eps(p, 1e-4, |g, v| {
            let c = g.constant(w_const.clone());
            let a = g.mul(v[0], c)?;
            let b = g.add(a, v[1])?;
            g.sum(b)
        });
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        let p = store(&[
            ("a", random(&[3, 4], 1)),
            ("b", random(&[4, 5], 2)),
            ("bias", random(&[5], 3)),
            ("gain", random(&[5], 4)),
            ("lnb", random(&[5], 5)),
            ("table", random(&[6, 5], 6)),
            ("c", random(&[2, 3, 4], 7)),
            ("d", random(&[2, 5, 4], 8)),
        ]);
        let err = check(p, |g, v| {
            let h = g.matmul(v[0], v[1])?; // [3,5]
            let h = g.add_row(h, v[2])?;
            let h = g.layer_norm(h, v[3], v[4], 1e-5)?;
            let h = g.gelu(h)?;
            let e = g.gather(v[5], &[0, 3, 3])?; // [3,5]
            let h = g.mul(h, e)?;
            let h2 = g.tanh(h)?;
            let h = g.sub(h2, e)?;
            let h = g.scale(h, 0.7)?;
            let s = g.softmax(h)?;
            let ce = g.cross_entropy(h, &[1, 4, 0])?;
            let bm = g.matmul_t(v[6], v[7], false, true)?; // [2,3,5]
            let bm = g.permute(bm, &[1, 0, 2])?; // [3,2,5]
            let bm = g.reshape(bm, &[3, 10])?;
            let pd = g.pairwise_sq_dist(bm)?;
            let pd = g.mean(pd)?;
            let s = g.sum(s)?;
            let tot = g.add(ce, pd)?;
            let tot = g.add(tot, s)?;
            let q = g.mul(h2, h2)?;
            let q = g.mean(q)?;
            g.add(tot, q)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn transposed_matmul_variants_pass_finite_differences() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let sa = if ta { [4, 3] } else { [3, 4] };
            let sb = if tb { [5, 4] } else { [4, 5] };
            let p = store(&[("a", random(&sa, 1)), ("b", random(&sb, 2))]);
            let err = check(p, |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb)?;
                let m = g.tanh(m)?;
                g.sum(m)
            });
            assert!(err < 1e-6, "ta={ta} tb={tb}: {err}");
        }
    }

    #[test]
    fn l1_off_ties_passes_finite_differences() {
        let target = random(&[6], 9);
        let p = store(&[("x", random(&[6], 10))]);
        let err = check(p, |g, v| {
            let c = g.constant(target.clone());
            let d = g.sub(v[0], c)?;
            let a = g.abs(d)?;
            g.sum(a)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let p = store(&[("x", random(&[2], 1))]);
        let r = finite_diff_check(&p, |g, v| g.sum(v[0]), 1e-2, 10, 0);
        assert!(r.is_err());
    }
}
