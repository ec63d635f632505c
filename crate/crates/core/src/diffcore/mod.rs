//! Dense tensors and a small reverse-mode differentiation tape.
//!
//! The op set is exactly what the topic/embedding model needs: affine maps
//! (dense and sparse-input), elementwise arithmetic, `tanh`/`exp`/`log`,
//! row-wise softmax and log-softmax, and a few reductions. Every value is
//! `f64` and every op checks its output for NaN/Inf.

mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{compare_gradients, finite_difference, grad_check, GradCheckReport, TensorCheck};
pub use graph::{Graph, SparseId, Var};
pub(crate) use graph::{log_softmax_in_place, softmax_in_place};
pub use params::{Gradients, ParamId, ParamSet};
pub use tensor::{SparseRows, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{len} values cannot fill shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DiffError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn affine_with_identity_is_noop() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::from_rows(&[vec![1.5, -2.0, 3.25]]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.row_mut(i)[i] = 1.0;
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 3.25]);
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.log_softmax(x).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[0].abs() < 1e-12);
        assert!(close(v[1], -1000.0, 1e-9));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(DiffError::ShapeMismatch { .. })));
        assert!(matches!(
            g.affine(a, a, None),
            Err(DiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_of_zero_is_an_error_state() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert_eq!(g.log(a), Err(DiffError::NonFinite { op: "log" }));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let mut g = Graph::new(&params);
        let x = g.param(id);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_half_square_is_identity() {
        let mut params = ParamSet::new();
        let xs = vec![0.3, -1.0, 2.0, 7.5];
        let id = params.add("x", Tensor::vector(xs.clone()));
        let mut g = Graph::new(&params);
        let x = g.param(id);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).data(), xs.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&params);
        let x = g.param(id);
        let y = g.exp(x).unwrap();
        assert!(matches!(g.backward(y), Err(DiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn sparse_ops_match_their_dense_counterparts() {
        let mut params = ParamSet::new();
        let w = params.add(
            "w",
            Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6]]).unwrap(),
        );
        let mut rows = SparseRows::new(3);
        rows.push_row([(0, 1.0), (2, 0.5)]).unwrap();
        rows.push_row([(1, 2.0)]).unwrap();
        let dense = rows.to_dense();

        let mut g = Graph::new(&params);
        let wv = g.param(w);
        let sid = g.sparse(rows.clone());
        let a = g.sparse_affine(sid, wv, None).unwrap();
        let xd = g.constant(dense);
        let b = g.affine(xd, wv, None).unwrap();
        assert_eq!(g.value(a), g.value(b));

        let logits = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let sid2 = g.sparse(rows);
        let r = g.row_weighted_sum(logits, sid2).unwrap();
        assert_eq!(g.value(r).data(), &[1.0 + 1.5, 10.0]);
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::vector(vec![0.5, -1.5, 2.0]));
        let loss = |p: &ParamSet| -> Result<f64, DiffError> {
            Ok(p.get(id).data().iter().map(|x| 0.5 * x * x).sum())
        };
        let numeric = finite_difference(&params, loss, 1e-5).unwrap();
        // Wrong rule: d(x²/2)/dx taken as 2x.
        let mut wrong = Gradients::zeros_like(&params);
        for (dst, x) in wrong.get_mut(id).data_mut().iter_mut().zip(params.get(id).data()) {
            *dst = 2.0 * x;
        }
        let report = compare_gradients(&params, &wrong, &numeric, 1e-6);
        assert!(!report.passed);

        let mut right = Gradients::zeros_like(&params);
        right.get_mut(id).data_mut().copy_from_slice(params.get(id).data());
        assert!(compare_gradients(&params, &right, &numeric, 1e-6).passed);
    }

    #[test]
    fn quadratic_passes_grad_check() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::vector(vec![0.5, -1.5, 2.0, 0.25]));
        let report = grad_check(
            &params,
            |g| {
                let x = g.param(id);
                let sq = g.mul(x, x)?;
                let s = g.sum(sq)?;
                g.scale(s, 0.5)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap());
        let run = || {
            let mut g = Graph::new(&params);
            let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap());
            let wv = g.param(w);
            let h = g.affine(x, wv, None).unwrap();
            let h = g.tanh(h).unwrap();
            let l = g.log_softmax(h).unwrap();
            let s = g.sum(l).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item().to_bits(), grads)
        };
        assert_eq!(run(), run());
    }

    /// A random chain over every differentiable op, built from a seed vector.
    fn random_graph_loss(g: &mut Graph<'_>, ids: &[ParamId], rows: usize, mix: &[f64]) -> Result<Var, DiffError> {
        let a = g.param(ids[0]);
        let w = g.param(ids[1]);
        let b = g.param(ids[2]);
        let h = g.affine(a, w, Some(b))?;
        let t = g.tanh(h)?;
        let sm = g.softmax(t)?;
        let ls = g.log_softmax(h)?;
        let e = g.exp(t)?;
        let m = g.mul(sm, e)?;
        let d = g.div(m, e)?;
        let sq = g.mul(t, t)?;
        let pos = g.add_scalar(sq, 1.0)?;
        let r = g.sqrt(pos)?;
        let lg = g.log(r)?;
        let s1 = g.sub(ls, lg)?;
        let s2 = g.add(s1, d)?;
        let c = g.clamp_min(s2, -1e6)?;
        let gathered = g.gather_rows(c, (0..rows).rev().chain(0..1).collect())?;
        let sr = g.sum_rows(gathered)?;
        let mut weights = SparseRows::new(g.shape(c)[1]);
        for r in 0..rows {
            weights.push_row([(r % g.shape(c)[1], mix[r % mix.len()])]).unwrap();
        }
        let sid = g.sparse(weights);
        let rw = g.row_weighted_sum(c, sid)?;
        let m1 = g.mean(sr)?;
        let m2 = g.sum(rw)?;
        let tot = g.add(m1, m2)?;
        g.scale(tot, 0.7)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_graphs_match_finite_differences(
            rows in 1usize..=4,
            inner in 1usize..=8,
            cols in 1usize..=8,
            seed in proptest::collection::vec(-1.0f64..1.0, 64..=64),
        ) {
            let mut it = seed.iter().cycle().copied();
            let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<_>>();
            let mut params = ParamSet::new();
            let a = params.add("a", Tensor::from_vec(&[rows, inner], take(rows * inner)).unwrap());
            let w = params.add("w", Tensor::from_vec(&[inner, cols], take(inner * cols)).unwrap());
            let b = params.add("b", Tensor::from_vec(&[cols], take(cols)).unwrap());
            let mix = take(4);
            let ids = [a, w, b];
            let report = grad_check(&params, |g| random_graph_loss(g, &ids, rows, &mix), 1e-5, 1e-4).unwrap();
            prop_assert!(report.passed, "{:?}", report);
        }

        #[test]
        fn softmax_is_a_strictly_positive_distribution(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..=40),
        ) {
            let params = ParamSet::new();
            let mut g = Graph::new(&params);
            let x = g.constant(Tensor::vector(logits));
            let y = g.softmax(x).unwrap();
            let v = g.value(y).data();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(v.iter().all(|&p| p > 0.0));
        }
    }
}
