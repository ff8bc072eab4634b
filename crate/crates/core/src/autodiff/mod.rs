//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the encoder classifier needs: matrix products,
//! broadcasting add/mul, masked softmax, layer normalization, GELU/ReLU,
//! inverted dropout, embedding gathers, axis swaps and the softmax
//! cross-entropy loss.
//!
//! ```
//! use newsbench::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod tape;
mod tensor;

pub mod gradcheck;

use std::sync::OnceLock;

use thiserror::Error;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

/// Seedable counter-based generator used for every dropout mask.
pub type DropoutRng = rand_chacha::ChaCha8Rng;

/// Environment variable that turns on non-finite checks after every op.
pub const DEBUG_ENV: &str = "NEWSBENCH_DEBUG";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable does not belong to the current tape")]
    StaleVar,
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Whether `NEWSBENCH_DEBUG=1` was set when first queried.
pub fn nan_checks_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var(DEBUG_ENV).map(|v| v == "1").unwrap_or(false))
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{max_relative_error, numeric_gradient};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut DropoutRng) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).unwrap().data().to_vec();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert!(v[3] > v[1]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = DropoutRng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[4, 16], &mut rng).cast());
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, g, b, 1, 1e-12).unwrap();
        for row in tape.value(y).unwrap().data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let mut rng = DropoutRng::seed_from_u64(11);
        let x0 = random(&[4, 3], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let probe = random(&[4, 2], &mut rng);
        let loss_of = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.constant(w.clone());
            let pv = tape.constant(probe.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.mul(y, pv).unwrap();
            let l = tape.sum(y).unwrap();
            (tape, xv, l)
        };
        let (mut tape, xv, l) = loss_of(&x0);
        let analytic = tape.backward(l).unwrap().get(xv).unwrap().clone();
        let numeric = numeric_gradient(&x0, 1e-6, |x| {
            let (tape, _, l) = loss_of(x);
            tape.value(l).unwrap().data()[0]
        });
        assert!(max_relative_error(analytic.data(), numeric.data(), 1e-8) <= 1e-5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[5], &[1.0, -2.0, 3.0, 0.5, 7.0]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);
        assert!(tape.is_empty());
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.param(t(&[2], &[4.0, 5.0]));
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 3] and [2, 3]");
    }

    #[test]
    fn stale_handles_are_rejected_after_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[1.0]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(x).unwrap_err(), AutodiffError::StaleVar);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[3.0, -1.0]));
        let a = tape.add(x, x).unwrap();
        let b = tape.mul(a, x).unwrap();
        let l = tape.sum(b).unwrap();
        // l = 2 Σ x², dl/dx = 4x
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[12.0, -4.0]);
    }

    #[test]
    fn two_layer_mlp_matches_central_differences() {
        let mut rng = DropoutRng::seed_from_u64(5);
        let params = vec![
            random(&[6, 8], &mut rng),
            random(&[8], &mut rng),
            random(&[8, 4], &mut rng),
            random(&[4], &mut rng),
        ];
        let x = random(&[5, 6], &mut rng);
        let labels = [0usize, 3, 1, 2, 3];
        let loss = |ps: &[Tensor<f64>], tape: &mut Tape<f64>| -> (Vec<Var>, Var) {
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, vars[0]).unwrap();
            let h = tape.add(h, vars[1]).unwrap();
            let h = tape.gelu(h).unwrap();
            let o = tape.matmul(h, vars[2]).unwrap();
            let o = tape.add(o, vars[3]).unwrap();
            (vars, tape.cross_entropy(o, &labels).unwrap())
        };
        let mut tape = Tape::new();
        let (vars, l) = loss(&params, &mut tape);
        let grads = tape.backward(l).unwrap();
        for (pi, var) in vars.iter().enumerate() {
            let numeric = numeric_gradient(&params[pi], 1e-5, |p| {
                let mut ps = params.clone();
                ps[pi] = p.clone();
                let mut tape = Tape::new();
                let (_, l) = loss(&ps, &mut tape);
                tape.value(l).unwrap().data()[0]
            });
            let err = max_relative_error(grads.get(*var).unwrap().data(), numeric.data(), 1e-8);
            assert!(err <= 1e-4, "parameter {pi}: relative error {err}");
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = DropoutRng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![4], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), tape.value(x).unwrap().data());
    }

    #[test]
    fn dropout_keeps_expected_fraction_and_mean() {
        let n = 100_000;
        let p = 0.3;
        let mut rng = DropoutRng::seed_from_u64(77);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let y = tape.dropout(x, p, &mut rng).unwrap();
        let out = tape.value(y).unwrap().data();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((kept - n as f64 * (1.0 - p)).abs() <= 3.0 * sigma);
        let mean = out.iter().sum::<f64>() / n as f64;
        // Kept values equal exactly 1/(1-p), so the mean error is the binomial error scaled.
        assert!((mean - 1.0).abs() <= 3.0 * sigma / (n as f64 * (1.0 - p)));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = DropoutRng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut tape = Tape::<f32>::new();
        let s = tape.constant(Tensor::new(vec![2, 1, 3], vec![0.1, 5.0, -1.0, 2.0, 2.0, 2.0]).unwrap());
        let m = tape.mask_keys(s, &[true, false, true, true, true, false], 1).unwrap();
        let p = tape.softmax(m, 2).unwrap();
        let v = tape.value(p).unwrap().data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn nan_check_reports_the_op() {
        let mut tape = Tape::<f64>::new().with_nan_check(true);
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.add(x, x).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "add" });
    }

    #[test]
    fn transpose_swaps_inner_axes() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.transpose(x, 1, 2).unwrap();
        let v = tape.value(y).unwrap();
        assert_eq!(v.shape(), &[2, 4, 3]);
        // y[b, i, j] = x[b, j, i]
        assert_eq!(v.data()[(4 + 2) * 3 + 1], data[(3 + 1) * 4 + 2]);
    }

    /// Random composite graph over every differentiable op.
    fn composite_loss(ps: &[Tensor<f64>], labels: &[usize], tape: &mut Tape<f64>) -> (Vec<Var>, Var) {
        let v: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let ids: Vec<usize> = labels.iter().map(|&l| (l * 2 + 1) % 5).collect();
        let e = tape.embedding_lookup(v[0], &ids).unwrap(); // [4, 6]
        let h = tape.matmul(e, v[1]).unwrap(); // [4, 6]
        let h = tape.layer_norm(h, v[2], v[3], 1, 1e-5).unwrap();
        let r = tape.reshape(h, &[2, 2, 6]).unwrap();
        let s = tape.batch_matmul(r, r, true).unwrap(); // [2, 2, 2]
        let s = tape.softmax(s, 2).unwrap();
        let c = tape.batch_matmul(s, r, false).unwrap(); // [2, 2, 6]
        let c = tape.transpose(c, 0, 1).unwrap();
        let c = tape.reshape(c, &[4, 6]).unwrap();
        let c = tape.gelu(c).unwrap();
        let c = tape.mul(c, v[2]).unwrap();
        let c = tape.scale(c, 0.7).unwrap();
        let o = tape.matmul(c, v[4]).unwrap(); // [4, 3]
        let ce = tape.cross_entropy(o, labels).unwrap();
        let m = tape.mean(o).unwrap();
        let total = tape.add(ce, m).unwrap();
        (v, total)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn composite_graphs_pass_gradient_check(seed in any::<u64>()) {
            let mut rng = DropoutRng::seed_from_u64(seed);
            let params = vec![
                random(&[5, 6], &mut rng),
                random(&[6, 6], &mut rng),
                random(&[6], &mut rng),
                random(&[6], &mut rng),
                random(&[6, 3], &mut rng),
            ];
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let mut tape = Tape::new();
            let (vars, l) = composite_loss(&params, &labels, &mut tape);
            let grads = tape.backward(l).unwrap();
            for (pi, var) in vars.iter().enumerate() {
                let numeric = numeric_gradient(&params[pi], 1e-5, |p| {
                    let mut ps = params.clone();
                    ps[pi] = p.clone();
                    let mut tape = Tape::new();
                    let (_, l) = composite_loss(&ps, &labels, &mut tape);
                    tape.value(l).unwrap().data()[0]
                });
                let err = max_relative_error(grads.get(*var).unwrap().data(), numeric.data(), 1e-6);
                prop_assert!(err <= 1e-4, "parameter {}: relative error {}", pi, err);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_ignore_shift(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(t(&[1, n], &row));
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let b = tape.constant(t(&[1, n], &shifted));
            let pa = tape.softmax(a, 1).unwrap();
            let pb = tape.softmax(b, 1).unwrap();
            let (va, vb) = (tape.value(pa).unwrap().data(), tape.value(pb).unwrap().data());
            prop_assert!((va.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in va.iter().zip(vb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
