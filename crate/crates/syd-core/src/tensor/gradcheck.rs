//! Central finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward implementation it is checking. Runs in f64.

/// Step scale: h = 1e-4 * max(1, |x|) per entry.
pub const FD_STEP_SCALE: f64 = 1e-4;

/// Central difference d(eval)/d(values[i]) for every entry. `eval` must be a
/// pure function of the buffer it is handed.
pub fn central_difference<F>(values: &[f64], mut eval: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = values.to_vec();
    let mut grad = vec![0.0; values.len()];
    for i in 0..values.len() {
        let x = values[i];
        let h = FD_STEP_SCALE * x.abs().max(1.0);
        work[i] = x + h;
        let up = eval(&work);
        work[i] = x - h;
        let down = eval(&work);
        work[i] = x;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct RelError {
    pub max: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-entry error |a - n| / max(1, |a|, |n|); relative for large gradients,
/// absolute near zero so finite-difference noise cannot dominate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> RelError {
    let mut worst = RelError::default();
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1.0);
        let err = (a - n).abs() / denom;
        if err > worst.max {
            worst = RelError {
                max: err,
                index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::{BnRunning, CropRect, Tape, TensorId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PRIMITIVE_TOL: f64 = 1e-5;

    /// Check one op: builds the graph via `build` over leaves of the given
    /// shapes, compares backward against central differences on every leaf.
    /// The objective is a random-weighted sum of the op output so errors in
    /// any output entry are visible.
    fn check_op<F>(name: &str, shapes: &[&[usize]], seed: u64, build: F)
    where
        F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
            })
            .collect();
        let out_weights_seed = rng.random::<u64>();

        let run = |datas: &[Vec<f64>]| -> (Tape<f64>, Vec<TensorId>, TensorId) {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = datas
                .iter()
                .zip(shapes)
                .map(|(d, s)| tape.variable(s.to_vec(), d.clone()).unwrap())
                .collect();
            let out = build(&mut tape, &ids);
            // random projection to a scalar
            let mut wrng = ChaCha8Rng::seed_from_u64(out_weights_seed);
            let w: Vec<f64> = (0..tape.data(out).len())
                .map(|_| wrng.random_range(-1.0..1.0))
                .collect();
            let w = tape.constant(tape.shape(out).to_vec(), w).unwrap();
            let prod = tape.mul(out, w).unwrap();
            let loss = tape.sum_all(prod);
            (tape, ids, loss)
        };

        let (mut tape, ids, loss) = run(&inputs);
        tape.backward(loss);
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.grad(id).expect("leaf gradient present").to_vec())
            .collect();

        for (which, vals) in inputs.iter().enumerate() {
            let numeric = central_difference(vals, |v| {
                let mut datas = inputs.clone();
                datas[which] = v.to_vec();
                let (t, _, l) = run(&datas);
                t.data(l)[0]
            });
            let err = max_rel_error(&analytic[which], &numeric);
            assert!(
                err.max < PRIMITIVE_TOL,
                "{name} input {which}: rel err {} at {} (analytic {}, numeric {})",
                err.max,
                err.index,
                err.analytic,
                err.numeric
            );
        }
    }

    #[test]
    fn matmul_gradients() {
        for (i, (m, k, n)) in [(3, 4, 2), (1, 5, 3), (4, 1, 4), (2, 2, 2), (5, 3, 1)]
            .into_iter()
            .enumerate()
        {
            check_op("matmul", &[&[m, k], &[k, n]], 100 + i as u64, |t, ids| {
                t.matmul(ids[0], ids[1]).unwrap()
            });
        }
    }

    #[test]
    fn bmm_gradients() {
        for (i, (b, m, k, n)) in [(2, 3, 4, 2), (1, 1, 3, 5), (3, 2, 2, 2), (2, 4, 1, 3), (4, 1, 2, 1)]
            .into_iter()
            .enumerate()
        {
            check_op("bmm", &[&[b, m, k], &[b, k, n]], 200 + i as u64, |t, ids| {
                t.bmm(ids[0], ids[1]).unwrap()
            });
        }
    }

    #[test]
    fn broadcast_add_mul_gradients() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3], &[2, 3]),
            (&[2, 3], &[3]),
            (&[4, 1, 3], &[1, 2, 3]),
            (&[2, 2, 2], &[1]),
            (&[5], &[1]),
        ];
        for (i, (a, b)) in cases.iter().enumerate() {
            check_op("add", &[a, b], 300 + i as u64, |t, ids| {
                t.add(ids[0], ids[1]).unwrap()
            });
            check_op("mul", &[a, b], 350 + i as u64, |t, ids| {
                t.mul(ids[0], ids[1]).unwrap()
            });
        }
    }

    #[test]
    fn unary_gradients() {
        let shapes: &[&[usize]] = &[&[7], &[2, 3], &[1, 4, 2], &[3, 1], &[2, 2, 2]];
        for (i, s) in shapes.iter().enumerate() {
            check_op("tanh", &[s], 400 + i as u64, |t, ids| t.tanh(ids[0]));
            check_op("sigmoid", &[s], 450 + i as u64, |t, ids| t.sigmoid(ids[0]));
            // relu is non-differentiable at exactly 0; random draws avoid it
            check_op("relu", &[s], 500 + i as u64, |t, ids| t.relu(ids[0]));
        }
    }

    #[test]
    fn reduction_gradients() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[3, 4], &[0]),
            (&[3, 4], &[1]),
            (&[2, 3, 4], &[0, 1]),
            (&[2, 3, 4], &[2]),
            (&[2, 2, 3, 2], &[1, 2]),
        ];
        for (i, (shape, axes)) in cases.iter().enumerate() {
            check_op("mean_axes", &[shape], 600 + i as u64, |t, ids| {
                t.mean_axes(ids[0], axes).unwrap()
            });
            check_op("max_axes", &[shape], 650 + i as u64, |t, ids| {
                t.max_axes(ids[0], axes).unwrap()
            });
        }
    }

    #[test]
    fn softmax_gradients() {
        let cases: &[(&[usize], usize)] = &[
            (&[5], 0),
            (&[2, 4], 1),
            (&[2, 4], 0),
            (&[2, 3, 2], 1),
            (&[3, 2, 2], 2),
        ];
        for (i, (shape, axis)) in cases.iter().enumerate() {
            check_op("softmax", &[shape], 700 + i as u64, |t, ids| {
                t.softmax(ids[0], *axis).unwrap()
            });
        }
    }

    #[test]
    fn concat_reshape_gradients() {
        for i in 0..5u64 {
            check_op(
                "concat",
                &[&[2, 2, 3], &[2, 1, 3], &[2, 2, 3]],
                800 + i,
                |t, ids| t.concat(ids, 1).unwrap(),
            );
            check_op("reshape", &[&[2, 6]], 850 + i, |t, ids| {
                t.reshape(ids[0], vec![3, 4]).unwrap()
            });
        }
    }

    #[test]
    fn conv2d_gradients() {
        let cases = [
            (1usize, 4usize, 4usize, 2usize, 3usize, 1usize, 1usize),
            (2, 4, 4, 1, 3, 2, 1),
            (1, 5, 5, 2, 3, 2, 1),
            (2, 3, 3, 2, 1, 1, 0),
            (1, 6, 4, 1, 3, 2, 1),
        ];
        for (i, (b, h, w, cin, k, stride, pad)) in cases.into_iter().enumerate() {
            let cout = 2;
            check_op(
                "conv2d",
                &[&[b, h, w, cin], &[k, k, cin, cout], &[cout]],
                900 + i as u64,
                move |t, ids| t.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap(),
            );
        }
    }

    #[test]
    fn batch_norm_gradients_training_and_eval() {
        let shapes: &[&[usize]] = &[&[4, 3], &[6, 2], &[2, 2, 2, 3], &[3, 1, 4], &[8, 2]];
        for (i, s) in shapes.iter().enumerate() {
            let c = *s.last().unwrap();
            for training in [true, false] {
                check_op("batch_norm", &[s, &[c], &[c]], 1000 + i as u64, move |t, ids| {
                    let mut running = BnRunning::new(c);
                    // non-trivial eval statistics
                    for (j, m) in running.mean.iter_mut().enumerate() {
                        *m = 0.1 * j as f64 - 0.05;
                    }
                    for (j, v) in running.var.iter_mut().enumerate() {
                        *v = 0.5 + 0.3 * j as f64;
                    }
                    t.batch_norm(ids[0], ids[1], ids[2], &mut running, training)
                        .unwrap()
                });
            }
        }
    }

    #[test]
    fn dropout_gradients_with_fixed_noise() {
        // The noise pattern is part of the graph; reseeding per rebuild keeps
        // the forward pure, which finite differences require.
        for i in 0..5u64 {
            check_op("gaussian_dropout", &[&[3, 4]], 1100 + i, move |t, ids| {
                let mut rng = ChaCha8Rng::seed_from_u64(9000 + i);
                t.gaussian_dropout(ids[0], 0.2, true, &mut rng).unwrap()
            });
            check_op("bernoulli_dropout", &[&[3, 4]], 1150 + i, move |t, ids| {
                let mut rng = ChaCha8Rng::seed_from_u64(9100 + i);
                t.bernoulli_dropout(ids[0], 0.3, true, &mut rng).unwrap()
            });
        }
    }

    #[test]
    fn bilinear_gradients() {
        let cases = [
            (1usize, 4usize, 4usize, 2usize, CropRect { y: 0, x: 0, h: 4, w: 4 }, 6usize, 6usize),
            (2, 3, 3, 1, CropRect { y: 0, x: 0, h: 3, w: 3 }, 5, 7),
            (1, 6, 6, 1, CropRect { y: 1, x: 2, h: 3, w: 3 }, 2, 2),
            (1, 8, 8, 2, CropRect { y: 2, x: 2, h: 4, w: 4 }, 3, 3),
            (2, 5, 4, 1, CropRect { y: 0, x: 1, h: 5, w: 2 }, 4, 4),
        ];
        for (i, (b, h, w, c, crop, oh, ow)) in cases.into_iter().enumerate() {
            check_op("bilinear", &[&[b, h, w, c]], 1200 + i as u64, move |t, ids| {
                t.bilinear_resize(ids[0], crop, oh, ow).unwrap()
            });
        }
    }

    #[test]
    fn cross_entropy_gradient_through_softmax() {
        for i in 0..5u64 {
            let labels: Vec<usize> = vec![0, 2, 1];
            check_op("softmax+ce", &[&[3, 3]], 1300 + i, move |t, ids| {
                let p = t.softmax(ids[0], 1).unwrap();
                t.cross_entropy(p, &labels).unwrap()
            });
        }
    }

    #[test]
    fn composite_graph_gradient() {
        // conv -> bn -> relu -> pool -> dense -> softmax -> ce, the full
        // training-path shape in miniature
        check_op(
            "composite",
            &[&[2, 4, 4, 1], &[3, 3, 1, 2], &[2], &[2], &[2], &[2, 3], &[3]],
            0xC0FFEE,
            |t, ids| {
                let conv = t.conv2d(ids[0], ids[1], ids[2], 2, 1).unwrap();
                let mut running = BnRunning::new(2);
                let bn = t.batch_norm(conv, ids[3], ids[4], &mut running, true).unwrap();
                let act = t.relu(bn);
                let pooled = t.mean_axes(act, &[1, 2]).unwrap();
                let logits = t.matmul(pooled, ids[5]).unwrap();
                let logits = t.add(logits, ids[6]).unwrap();
                let probs = t.softmax(logits, 1).unwrap();
                t.cross_entropy(probs, &[0, 2]).unwrap()
            },
        );
    }
}
