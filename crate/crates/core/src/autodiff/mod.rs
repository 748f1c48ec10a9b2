//! A small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`];
//! [`Tape::backward`] walks the nodes in reverse. The primitive set is just
//! what the Transformer and the merge layer need. Matmuls and merges also
//! bump a FLOP counter ([`Tape::flops`]) that the analytic cost model is
//! checked against.

mod tape;
mod tensor;

pub use tape::{FlopTally, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
///
/// The floor keeps the ratio meaningful for gradients that are essentially
/// zero, where central differences only resolve about `1e-10`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grouping::{group_subwords, GroupIndices, WordIdBatch};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `build` at `inputs`. The scalar probed is
    /// `sum(out * r)` for a fixed random `r`.
    fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe_weights = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let out = build(&mut t, &vars);
            random(t.shape(out), &mut rng)
        };
        let eval = |xs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out)
                .data()
                .iter()
                .zip(probe_weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        let r = t.constant(probe_weights.clone());
        let weighted = t.mul(out, r).unwrap();
        let loss = t.sum(weighted);
        let grads = t.backward(loss).unwrap();

        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]);
            for j in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                worst = worst.max(relative_error(analytic.data()[j], numeric));
            }
        }
        worst
    }

    fn groups() -> Rc<GroupIndices> {
        Rc::new(group_subwords(
            &WordIdBatch::from_rows(&[vec![-1, 0, 0, 1, -1], vec![-1, 0, 1, 1, 1]]).unwrap(),
        ))
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.flops().matmul, 16);
    }

    #[test]
    fn softmax_of_equal_scores() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let y = t.softmax(a).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3], [2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(&[4]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = t.sum(x);
        assert_eq!(t.backward(loss).unwrap().wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut t = Tape::new();
        let data = Tensor::from_fn(&[3], |i| i as f64 - 1.5);
        let x = t.leaf(data.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        assert_eq!(t.backward(loss).unwrap().wrt(x), data);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn untouched_leaves_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2]));
        let unused = t.leaf(Tensor::ones(&[3]));
        let loss = t.sum(x);
        assert_eq!(t.backward(loss).unwrap().wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(random(&[4, 6], &mut rng));
        let g = t.constant(Tensor::ones(&[6]));
        let b = t.constant(Tensor::zeros(&[6]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        for row in t.value(y).data().chunks(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_ops_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 5, 3], &mut rng);
        let g = groups();
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let s = t.segment_sum(xv, &g).unwrap();
        let m = t.segment_max(xv, &g).unwrap();
        assert_eq!(t.shape(s), &[2, 4, 3]);
        for b in 0..2 {
            for gi in 0..g.counts()[b] {
                for k in 0..3 {
                    let members: Vec<f64> = (0..5)
                        .filter(|&p| g.row(b)[p] == gi)
                        .map(|p| x.data()[(b * 5 + p) * 3 + k])
                        .collect();
                    let sum: f64 = members.iter().sum();
                    let max = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let o = (b * 4 + gi) * 3 + k;
                    assert!((t.value(s).data()[o] - sum).abs() <= 1e-12);
                    assert_eq!(t.value(m).data()[o], max);
                }
            }
        }
    }

    #[test]
    fn flop_counter_counts_matmuls_only() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 2, 4]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        let c = t.matmul(a, b).unwrap();
        let _ = t.relu(c);
        let e = t.constant(Tensor::zeros(&[3, 5, 2]));
        let _ = t.batch_matmul(c, e).unwrap();
        assert_eq!(t.flops().matmul, 2 * 6 * 4 * 5 + 2 * 3 * 2 * 5 * 2);
    }

    const TOL: f64 = 1e-4;

    #[test]
    fn gradcheck_matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [random(&[2, 3, 4], &mut rng), random(&[4, 2], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.matmul(v[0], v[1]).unwrap()) < TOL);
        let inputs = [random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.batch_matmul(v[0], v[1]).unwrap()) < TOL);
        let inputs = [random(&[2, 3, 4], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.transpose(v[0]).unwrap()) < TOL);
    }

    #[test]
    fn gradcheck_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&[2, 3, 4], &mut rng);
        let inputs = [a.clone(), random(&[3, 4], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
        let inputs = [a.clone(), random(&[2, 3, 4], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
        let inputs = [a.clone(), random(&[2, 3, 1], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
        let inputs = [a.clone()];
        assert!(gradcheck(&inputs, |t, v| t.scale(v[0], -2.5)) < TOL);
        assert!(gradcheck(&inputs, |t, v| t.exp(v[0])) < TOL);
        assert!(gradcheck(&inputs, |t, v| t.relu(v[0])) < TOL);
        assert!(gradcheck(&inputs, |t, v| t.sum(v[0])) < TOL);
        assert!(gradcheck(&inputs, |t, v| t.reshape(v[0], &[6, 4]).unwrap()) < TOL);
        let positive = [Tensor::from_fn(&[5], |i| 0.5 + i as f64)];
        assert!(gradcheck(&positive, |t, v| t.recip(v[0])) < TOL);
    }

    #[test]
    fn gradcheck_softmax_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = [random(&[3, 5], &mut rng)];
        assert!(gradcheck(&inputs, |t, v| t.softmax(v[0]).unwrap()) < TOL);
        let inputs = [
            random(&[2, 3, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6], &mut rng),
        ];
        assert!(
            gradcheck(&inputs, |t, v| t
                .layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
                .unwrap())
                < TOL
        );
    }

    #[test]
    fn gradcheck_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = [random(&[2, 4], &mut rng)];
        let mask = [false, true, false, true, true, false, false, false];
        assert!(
            gradcheck(&inputs, |t, v| {
                let m = t.masked_fill(v[0], &mask, f64::NEG_INFINITY).unwrap();
                t.softmax(m).unwrap()
            }) < TOL
        );
        assert!(gradcheck(&inputs, |t, v| t.masked_fill(v[0], &mask, 3.0).unwrap()) < TOL);
    }

    #[test]
    fn gradcheck_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let table = [random(&[6, 3], &mut rng)];
        assert!(gradcheck(&table, |t, v| t.embedding(v[0], &[1, 4, 1, 0], &[2, 2]).unwrap()) < TOL);
        let x = [random(&[2, 3, 4], &mut rng)];
        assert!(gradcheck(&x, |t, v| t.select_position(v[0], 1).unwrap()) < TOL);
        assert!(gradcheck(&x, |t, v| t.split_heads(v[0], 2).unwrap()) < TOL);
        let y = [random(&[4, 3, 2], &mut rng)];
        assert!(gradcheck(&y, |t, v| t.join_heads(v[0], 2).unwrap()) < TOL);
        let parts = [random(&[2, 3], &mut rng), random(&[2, 1], &mut rng), random(&[2, 2], &mut rng)];
        assert!(gradcheck(&parts, |t, v| t.concat(v).unwrap()) < TOL);
    }

    #[test]
    fn split_then_join_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = t.split_heads(x, 2).unwrap();
        let j = t.join_heads(s, 2).unwrap();
        assert_eq!(t.value(j), t.value(x));
    }

    #[test]
    fn gradcheck_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = groups();
        let x = [random(&[2, 5, 3], &mut rng)];
        assert!(gradcheck(&x, |t, v| t.segment_sum(v[0], &g).unwrap()) < TOL);
        assert!(gradcheck(&x, |t, v| t.segment_max(v[0], &g).unwrap()) < TOL);
        let y = [random(&[2, 4, 3], &mut rng)];
        assert!(gradcheck(&y, |t, v| t.gather_segments(v[0], &g).unwrap()) < TOL);
    }

    #[test]
    fn gradcheck_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = [random(&[4, 5], &mut rng)];
        let targets = [Some(1), None, Some(4), Some(0)];
        assert!(gradcheck(&logits, |t, v| t.cross_entropy(v[0], &targets).unwrap()) < TOL);
    }

    #[test]
    fn gradcheck_merge_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g = groups();
        let mask = [true; 10];
        let x = [random(&[2, 5, 3], &mut rng), random(&[3], &mut rng)];
        assert!(gradcheck(&x, |t, v| t.merge(v[0], &mask, &g, None).unwrap().0) < TOL);
        assert!(gradcheck(&x, |t, v| t.merge(v[0], &mask, &g, Some(v[1])).unwrap().0) < TOL);
    }

    /// The stabilized group softmax written with tape primitives agrees with
    /// the fused merge in value and gradient.
    #[test]
    fn composed_group_softmax_matches_fused_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g = groups();
        let x0 = random(&[2, 5, 3], &mut rng);
        let w0 = random(&[3], &mut rng);
        let mask = [true; 10];

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let wcol = t.reshape(w, &[3, 1]).unwrap();
        let z = t.matmul(x, wcol).unwrap();
        let zmax = t.segment_max(z, &g).unwrap();
        let zmax_b = t.gather_segments(zmax, &g).unwrap();
        let neg = t.scale(zmax_b, -1.0);
        let shifted = t.add(z, neg).unwrap();
        let e = t.exp(shifted);
        let denom = t.segment_sum(e, &g).unwrap();
        let inv = t.recip(denom);
        let inv_b = t.gather_segments(inv, &g).unwrap();
        let alpha = t.mul(e, inv_b).unwrap();
        let weighted = t.mul(x, alpha).unwrap();
        let composed = t.segment_sum(weighted, &g).unwrap();
        let loss_c = t.sum(composed);
        let gc = t.backward(loss_c).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(x0);
        let w2 = t2.leaf(w0);
        let (fused, _, _) = t2.merge(x2, &mask, &g, Some(w2)).unwrap();
        let loss_f = t2.sum(fused);
        let gf = t2.backward(loss_f).unwrap();

        assert!(t.value(composed).max_abs_diff(t2.value(fused)) < 1e-12);
        assert!(gc.wrt(x).max_abs_diff(&gf.wrt(x2)) < 1e-12);
        assert!(gc.wrt(w).max_abs_diff(&gf.wrt(w2)) < 1e-12);
    }

    #[test]
    fn merge_records_flops() {
        let mut t = Tape::new();
        let g = groups();
        let x = t.constant(Tensor::zeros(&[2, 5, 3]));
        t.merge(x, &[true; 10], &g, None).unwrap();
        assert_eq!(t.flops().merge, 2 * 2 * 5 * 3);
    }
}
