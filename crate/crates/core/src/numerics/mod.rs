//! Dense arrays and reverse-mode differentiation.

mod gradcheck;
mod init;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_mode, GradCheckReport};
pub use init::{random_tensor, Initializer};
pub use tape::{BatchStats, Gradients, Mask, NormStats, Tape, TapeMode, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_scalars() {
        let mut tape = Tape::new(TapeMode::inference());
        let a = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new(TapeMode::inference());
        let a = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(a).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new(TapeMode::inference());
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0]);
        let report = grad_check(
            |t, vs| {
                let sq = t.mul(vs[0], vs[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn stop_gradient_blocks_path() {
        let x = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut tape = Tape::new(TapeMode::inference());
        let v = tape.leaf(x.clone(), true);
        let s = tape.stop_gradient(v).unwrap();
        assert_eq!(tape.value(s), &x);
        let sq = tape.mul(s, s).unwrap();
        let total = tape.sum(sq).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.get(v).is_none());
        assert_eq!(g.get_or_zeros(v, 2), vec![0.0, 0.0]);

        // Finite differences through the blocked path are non-zero, which is
        // the point: the analytic side reports exactly zero.
        let mut tape = Tape::new(TapeMode::inference());
        let v = tape.leaf(x, true);
        let s = tape.stop_gradient(v).unwrap();
        let out = tape.sum(s).unwrap();
        assert!(!tape.requires_grad(out));
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-2).is_err());
    }

    #[test]
    fn non_finite_names_primitive() {
        let mut tape = Tape::new(TapeMode::inference());
        let x = tape.constant(Tensor::scalar(1e300));
        let err = tape.scale(x, 1e300).unwrap_err();
        assert!(err.to_string().contains("scale"), "{err}");
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new(TapeMode::inference());
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn dropout_rate_zero_and_deterministic_are_identity() {
        let x = random_tensor(&[4, 5], 1);
        let mut tape = Tape::new(TapeMode {
            deterministic: false,
            ..TapeMode::training(3)
        });
        let v = tape.constant(x.clone());
        let d = tape.dropout(v, 0.0).unwrap();
        assert_eq!(tape.value(d), &x);

        let mut tape = Tape::new(TapeMode::training(3));
        let v = tape.constant(x.clone());
        let d = tape.dropout(v, 0.5).unwrap();
        assert_eq!(tape.value(d), &x);
    }

    #[test]
    fn dropout_gradient_follows_mask() {
        let x = random_tensor(&[6, 7], 2);
        let mut tape = Tape::new(TapeMode {
            deterministic: false,
            ..TapeMode::training(9)
        });
        let v = tape.leaf(x.clone(), true);
        let d = tape.dropout(v, 0.3).unwrap();
        let s = tape.sum(d).unwrap();
        let g = tape.backward(s).unwrap();
        for ((gx, out), inp) in g.get(v).unwrap().iter().zip(tape.value(d).data()).zip(x.data()) {
            assert!((gx * inp - out).abs() < 1e-12);
            assert!(*gx == 0.0 || (gx - 1.0 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_forward_bits() {
        let run = || {
            let mut tape = Tape::new(TapeMode {
                deterministic: false,
                ..TapeMode::training(42)
            });
            let x = tape.constant(random_tensor(&[3, 8], 5));
            let w = tape.constant(random_tensor(&[8, 4], 6));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.dropout(h, 0.2).unwrap();
            tape.value(h).clone()
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn masked_losses_ignore_padding() {
        let mut tape = Tape::new(TapeMode::inference());
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 9.0, 9.0]).unwrap());
        let y = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap());
        let mask = Mask::from_lengths(&[1], 2);
        let l = tape.mae(x, y, Some(&mask)).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn conv2d_ceil_extents() {
        let mut tape = Tape::new(TapeMode::inference());
        let mut t_len: usize = 64;
        let mut x = tape.constant(Tensor::zeros(&[1, 64, 16, 1]));
        let mut extents = vec![];
        for _ in 0..6 {
            let c = tape.shape(x)[3];
            let w = tape.constant(Tensor::zeros(&[3, 3, c, 2]));
            x = tape.conv2d(x, w, 2).unwrap();
            t_len = t_len.div_ceil(2);
            assert_eq!(tape.shape(x)[1], t_len);
            extents.push(tape.shape(x)[1]);
        }
        assert_eq!(extents, vec![32, 16, 8, 4, 2, 1]);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut tape = Tape::new(TapeMode::inference());
        let q = tape.constant(random_tensor(&[2, 3, 4], 1));
        let k = tape.constant(random_tensor(&[2, 5, 4], 2));
        let v = tape.constant(random_tensor(&[2, 5, 4], 3));
        let mask = Mask::from_lengths(&[5, 3], 5);
        let o = tape.attention(q, k, v, 2, Some(&mask)).unwrap();
        let w = tape.attention_weights(o).unwrap();
        for (r, row) in w.rows().enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            if r >= 2 * 3 * 1 {
                // second batch item: keys 3 and 4 are padding
                assert_eq!(row[3], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
    }
}
