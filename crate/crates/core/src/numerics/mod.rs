//! Dense `f64` tensors, a scoped reverse-mode tape and the finite-difference
//! gradient oracle.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use tape::{column_moments, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a)?, tape.constant(b)?);
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = tape.transpose(v)?;
    Ok(tape.value(out).clone())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = tape.softmax_rows(v)?;
    Ok(tape.value(out).clone())
}

pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = tape.l2_normalize_rows(v, eps)?;
    Ok(tape.value(out).clone())
}

/// Default floor for row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_examples() {
        let i = Tensor::identity(2);
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let a = random(&[3, 4], seed);
            let b = random(&[4, 2], seed + 100);
            let r = grad_check("matmul", |t, xs| t.matmul(xs[0], xs[1]), &[a, b], 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        for v in softmax_rows(&x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);

        // d softmax(x)_0 / dx against central differences.
        let x = Tensor::from_rows(&[vec![1.0, 0.5]]).unwrap();
        let r = grad_check(
            "softmax_first",
            |t, xs| {
                let s = t.softmax_rows(xs[0])?;
                t.contract(s, vec![1.0, 0.0])
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn normalize_examples() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = l2_normalize_rows(&x, NORM_EPS).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(l2_normalize_rows(&z, 1e-12).unwrap().data(), &[0.0, 0.0]);
        let r = l2_normalize_rows(&random(&[5, 8], 7), NORM_EPS).unwrap();
        for i in 0..5 {
            let n: f64 = r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_tape_op_passes_gradient_check() {
        for seed in 0..3 {
            let x = random(&[3, 4], seed);
            let support: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            let s2 = support.clone();
            let s3 = support.clone();
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)> = vec![
                ("log_softmax", Box::new(|t, xs| t.log_softmax_rows(xs[0]))),
                (
                    "masked_softmax",
                    Box::new(move |t, xs| t.masked_softmax_rows(xs[0], Some(support.clone()))),
                ),
                (
                    "masked_log_softmax",
                    Box::new(move |t, xs| t.masked_log_softmax_rows(xs[0], Some(s2.clone()))),
                ),
                ("logsumexp", Box::new(move |t, xs| t.logsumexp_rows(xs[0], Some(s3.clone())))),
                ("normalize", Box::new(|t, xs| t.l2_normalize_rows(xs[0], NORM_EPS))),
                ("gather", Box::new(|t, xs| t.gather_cols(xs[0], &[0, 3, 1]))),
                ("select", Box::new(|t, xs| t.select_rows(xs[0], &[2, 0, 2]))),
                ("transpose", Box::new(|t, xs| t.transpose(xs[0]))),
                ("mean", Box::new(|t, xs| t.mean(xs[0]))),
                (
                    "concat",
                    Box::new(|t, xs| {
                        let y = t.scale(xs[0], 2.0)?;
                        t.concat_rows(&[xs[0], y])
                    }),
                ),
            ];
            for (name, op) in cases {
                let r = grad_check(name, op, &[x.clone()], 1e-6).unwrap();
                assert!(r.passed, "{r:?}");
            }
        }
    }

    #[test]
    fn conv_and_pooling_gradients() {
        for seed in 0..3 {
            let x = random(&[2, 2, 5, 5], seed);
            let w = random(&[3, 2, 3, 3], seed + 10);
            let b = random(&[3], seed + 20);
            let r = grad_check(
                "conv2d",
                |t, xs| {
                    let y = t.conv2d(xs[0], xs[1], xs[2], 2, 1)?;
                    t.spatial_mean(y)
                },
                &[x.clone(), w.clone(), b.clone()],
                1e-6,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn batch_norm_and_column_scale_gradients() {
        for seed in 0..3 {
            let x = random(&[5, 3], seed);
            let g = random(&[3], seed + 10);
            let b = random(&[3], seed + 20);
            let r = grad_check(
                "batch_norm_affine",
                |t, xs| {
                    let y = t.batch_norm(xs[0], 1e-5)?;
                    let y = t.mul_cols(y, xs[1])?;
                    t.add_bias(y, xs[2])
                },
                &[x, g, b],
                1e-6,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let x = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 10.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(&x).unwrap();
        let y = tape.batch_norm(v, 0.0 + 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[2] - 1.0).abs() < 1e-9);
        // a constant column maps to zero rather than blowing up
        assert_eq!(out[1], 0.0);
        assert_eq!(out[3], 0.0);
        let (mean, var) = column_moments(x.data(), 2, 2);
        assert_eq!(mean, vec![2.0, 10.0]);
        assert_eq!(var, vec![1.0, 0.0]);
    }

    #[test]
    fn conv_output_extents() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        let w = tape.constant(&Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[4])).unwrap();
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let mut tape = Tape::new();
        let bad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(tape.constant(&bad).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-700.0f64..700.0, 1..12)) {
            let n = row.len();
            let x = Tensor::new(vec![1, n], row).unwrap();
            let y = softmax_rows(&x).unwrap();
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn normalize_is_idempotent(row in proptest::collection::vec(-100.0f64..100.0, 1..12)) {
            let n = row.len();
            let x = Tensor::new(vec![1, n], row).unwrap();
            let once = l2_normalize_rows(&x, NORM_EPS).unwrap();
            let twice = l2_normalize_rows(&once, NORM_EPS).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
        }
    }
}
