use super::{Tape, Tensor, Var};
use crate::error::{CdError, CdResult};
use crate::scalar::Scalar;

/// Compares the analytic gradient of a scalar-valued graph against central
/// finite differences, entry by entry.
///
/// `f` rebuilds the graph on the tape it is given; it runs once for the
/// analytic pass and twice per input entry for the numeric pass. Returns the
/// maximum relative error `|a - n| / (|a| + |n| + 1e-8)`.
pub fn gradient_check<S, F>(f: F, input: &Tensor<S>, eps: f64) -> CdResult<f64>
where
    S: Scalar,
    F: Fn(&Tape<S>, Var) -> CdResult<Var>,
{
    let tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let y = f(&tape, x)?;
    if tape.shape_of(y) != [1] {
        return Err(CdError::ShapeMismatch(
            "gradient_check needs a scalar-valued function".into(),
        ));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = grads
        .get(x)
        .ok_or_else(|| CdError::MissingGradient("gradient_check input".into()))?
        .iter()
        .map(|v| v.to64())
        .collect();

    let eval = |i: usize, delta: f64| -> CdResult<f64> {
        let mut t = input.clone();
        t.data_mut()[i] = S::from64(t.data()[i].to64() + delta);
        let tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&tape, x)?;
        Ok(tape.value(y).item().to64())
    };

    let mut max_rel = 0.0f64;
    for i in 0..input.numel() {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor<S: Scalar>(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::from64(rng.random_range(lo..hi))).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = random_tensor::<f64>(vec![10], 1, -2.0, 2.0);
        let rel = gradient_check(|t, x| Ok(t.sum(t.square(x))), &x, 1e-3).unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn pretext_loss_gradient_checks_out() {
        let z_top = random_tensor::<f64>(vec![16], 2, -1.0, 1.0);
        let z_bottom = random_tensor::<f64>(vec![16], 3, -1.0, 1.0);
        let rel = gradient_check(
            move |t, x| {
                let zb = t.constant(z_bottom.clone());
                t.pretext_similarity_loss(x, zb)
            },
            &z_top,
            1e-3,
        )
        .unwrap();
        assert!(rel < 1e-3, "rel {rel}");
    }

    #[test]
    fn conv_bce_pipeline_checks_out_in_f32() {
        let input = random_tensor::<f32>(vec![1, 1, 8, 8], 4, -0.8, 0.8);
        let weight = random_tensor::<f32>(vec![2, 1, 3, 3], 5, -0.5, 0.5);
        let bias = random_tensor::<f32>(vec![2], 6, -0.1, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = Tensor::<f32>::new(
            vec![1, 2, 8, 8],
            (0..128)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let rel = gradient_check(
            move |t, x| {
                let w = t.constant(weight.clone());
                let b = t.constant(bias.clone());
                let conv = t.conv2d(x, w, b, 1, 1)?;
                let tgt = t.constant(target.clone());
                t.bce_with_logits(conv, tgt)
            },
            &input,
            // f32 value rounding forces a coarse step; bce stays smooth
            // enough that truncation error is below the tolerance
            3e-2,
        )
        .unwrap();
        assert!(rel < 1e-2, "rel {rel}");
    }

    #[test]
    fn conv_weight_gradient_checks_out() {
        let input = random_tensor::<f64>(vec![1, 2, 6, 6], 8, -1.0, 1.0);
        let bias = random_tensor::<f64>(vec![3], 9, -0.1, 0.1);
        let weight = random_tensor::<f64>(vec![3, 2, 3, 3], 10, -0.5, 0.5);
        let rel = gradient_check(
            move |t, w| {
                let x = t.constant(input.clone());
                let b = t.constant(bias.clone());
                let conv = t.conv2d(x, w, b, 1, 1)?;
                Ok(t.mean(t.square(conv)))
            },
            &weight,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn strided_conv_gradient_checks_out() {
        let weight = random_tensor::<f64>(vec![2, 1, 3, 3], 11, -0.5, 0.5);
        let bias = random_tensor::<f64>(vec![2], 12, -0.1, 0.1);
        let input = random_tensor::<f64>(vec![1, 1, 7, 7], 13, -1.0, 1.0);
        let rel = gradient_check(
            move |t, x| {
                let w = t.constant(weight.clone());
                let b = t.constant(bias.clone());
                let conv = t.conv2d(x, w, b, 2, 0)?;
                Ok(t.mean(t.square(conv)))
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        // one randomized pass over every layer backward at small shapes
        #[test]
        fn layer_stack_gradients_match_fd(seed in 0u64..1000) {
            let input = random_tensor::<f64>(vec![1, 2, 4, 4], seed, -1.0, 1.0);
            // keep |input - other| >= 0.05 everywhere so the finite
            // difference never straddles the abs kink
            let mag = random_tensor::<f64>(vec![1, 2, 4, 4], seed.wrapping_add(1), 0.05, 1.0);
            let sgn = random_tensor::<f64>(vec![1, 2, 4, 4], seed.wrapping_add(2), -1.0, 1.0);
            let other = Tensor::new(
                vec![1, 2, 4, 4],
                input
                    .data()
                    .iter()
                    .zip(mag.data().iter().zip(sgn.data()))
                    .map(|(x, (m, s))| x - m * s.signum())
                    .collect(),
            ).unwrap();
            // the relu kink cannot be designed away, so skip the rare
            // draws that land a pooled activation near zero
            let relu_margin = {
                let t = Tape::new();
                let x = t.constant(input.clone());
                let o = t.constant(other.clone());
                let d = t.abs(t.sub(x, o).unwrap());
                let cat = t.concat_channels(&[d, x]).unwrap();
                let up = t.upsample_bilinear2x(cat).unwrap();
                let pooled = t.avg_pool2(up).unwrap();
                t.value(pooled)
                    .data()
                    .iter()
                    .fold(f64::INFINITY, |m, &v| m.min(v.abs()))
            };
            prop_assume!(relu_margin > 1e-3);
            let rel = gradient_check(
                move |t, x| {
                    let o = t.constant(other.clone());
                    let d = t.abs(t.sub(x, o)?);
                    let cat = t.concat_channels(&[d, x])?;
                    let up = t.upsample_bilinear2x(cat)?;
                    let pooled = t.avg_pool2(up)?;
                    let r = t.relu(pooled);
                    let gap = t.global_avg_pool(r)?;
                    let n = t.l2_normalize_rows(gap)?;
                    Ok(t.mean(n))
                },
                &input,
                1e-4,
            ).unwrap();
            prop_assert!(rel < 1e-5, "rel {rel}");
        }

        #[test]
        fn channel_normalize_gradient_matches_fd(seed in 0u64..1000) {
            let input = random_tensor::<f64>(vec![1, 3, 2, 2], seed, -1.0, 1.0);
            // subtract an offset first: the squared norm of a unit vector
            // alone is constant, which would leave nothing to check
            let offset = random_tensor::<f64>(vec![1, 3, 2, 2], seed.wrapping_add(3), -1.0, 1.0);
            // short channel vectors make the normalization curvature spike
            let min_pos_norm = (0..4)
                .map(|p| {
                    (0..3)
                        .map(|c| input.data()[c * 4 + p].powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            prop_assume!(min_pos_norm > 0.5);
            let rel = gradient_check(
                move |t, x| {
                    let n = t.l2_normalize_channels(x)?;
                    let k = t.constant(offset.clone());
                    let d = t.sub(n, k)?;
                    Ok(t.mean(t.square(d)))
                },
                &input,
                1e-5,
            ).unwrap();
            prop_assert!(rel < 1e-5, "rel {rel}");
        }

        #[test]
        fn cosine_gradient_matches_fd_both_sides(seed in 0u64..1000) {
            let a = random_tensor::<f64>(vec![3, 5], seed, -1.0, 1.0);
            let b = random_tensor::<f64>(vec![3, 5], seed.wrapping_add(9), -1.0, 1.0);
            // small-norm rows blow up the curvature and with it the
            // truncation error of the finite difference
            let min_row_norm = |t: &Tensor<f64>| {
                t.data()
                    .chunks(5)
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            };
            prop_assume!(min_row_norm(&a) > 0.5 && min_row_norm(&b) > 0.5);
            let b2 = b.clone();
            let rel_a = gradient_check(
                move |t, x| {
                    let bb = t.constant(b.clone());
                    Ok(t.mean(t.cosine_rows(x, bb)?))
                },
                &a,
                1e-5,
            ).unwrap();
            let a2 = a.clone();
            let rel_b = gradient_check(
                move |t, x| {
                    let aa = t.constant(a2.clone());
                    Ok(t.mean(t.cosine_rows(aa, x)?))
                },
                &b2,
                1e-5,
            ).unwrap();
            prop_assert!(rel_a < 5e-6 && rel_b < 5e-6, "rel {rel_a} / {rel_b}");
        }
    }
}
