use std::sync::Arc;

use super::*;
use rand::Rng;

fn t2(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = crate::rng::stream(seed, "tensor-test", &[rows as u64, cols as u64]);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn sigmoid_of_zero_is_exactly_half() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).item(), 0.5);
}

#[test]
fn mean_axis_zero_averages_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let m = tape.mean_axis(x, 0).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
}

#[test]
fn neg_sq_dist_of_identical_inputs_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.3, -1.7, 2.9]));
    let d = tape.neg_sq_dist(x, x).unwrap();
    assert_eq!(tape.value(d).item(), 0.0);
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(w);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(w).item(), 0.25);
}

#[test]
fn gradient_of_sum_of_squares_is_two_x() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let mean = tape.mean_axis(sq, 0).unwrap();
    let sum = tape.scale(mean, 2.0); // numel * mean
    let grads = tape.backward(sum).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    // Params packed into a single row vector and unpacked with narrow_cols,
    // so one gradient_check covers every weight and bias at once.
    let dims = [3usize, 5, 4, 1];
    let mut sizes = Vec::new();
    for l in 0..3 {
        sizes.push(dims[l] * dims[l + 1]);
        sizes.push(dims[l + 1]);
    }
    let total: usize = sizes.iter().sum();
    let point = t2(1, total, 21);
    let input = t2(2, dims[0], 22);

    let f = move |tape: &mut Tape<f64>, packed: Var| -> TensorResult<Var> {
        let mut offset = 0;
        let mut fetch = |tape: &mut Tape<f64>, len: usize, shape: Vec<usize>| -> TensorResult<Var> {
            let cols = tape.narrow_cols(packed, offset, len)?;
            offset += len;
            tape.reshape(cols, shape)
        };
        let mut h = tape.constant(input.clone());
        for l in 0..3 {
            let w = fetch(tape, dims[l] * dims[l + 1], vec![dims[l], dims[l + 1]])?;
            let b = fetch(tape, dims[l + 1], vec![dims[l + 1]])?;
            let a = tape.affine(h, w, b)?;
            h = tape.sigmoid(a);
        }
        Ok(tape.mean_all(h))
    };

    let err = gradient_check(f, &point, 1e-5).unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn gradient_check_squared_norm_is_tight() {
    let point = Tensor::vector(vec![0.4, -1.2, 0.05, 2.0]);
    let f = |tape: &mut Tape<f64>, x: Var| -> TensorResult<Var> {
        let sq = tape.mul(x, x)?;
        let mean = tape.mean_axis(sq, 0)?;
        Ok(tape.scale(mean, 4.0))
    };
    let err = gradient_check(f, &point, 1e-5).unwrap();
    assert!(err < 1e-8, "max relative error {err}");
}

#[test]
fn gradient_check_constant_is_exactly_zero() {
    let point = Tensor::vector(vec![1.0, -2.0]);
    let f = |tape: &mut Tape<f64>, _x: Var| -> TensorResult<Var> {
        Ok(tape.constant(Tensor::scalar(3.25)))
    };
    assert_eq!(gradient_check(f, &point, 1e-5).unwrap(), 0.0);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.relu(x);
    assert!(matches!(
        tape.backward(y),
        Err(TensorError::NonScalarRoot { .. })
    ));
}

#[test]
fn second_backward_on_same_tape_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(1.5));
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    assert!(matches!(
        tape.backward(y),
        Err(TensorError::BackwardAlreadyRun)
    ));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let used = tape.param(Tensor::scalar(2.0));
    let unused = tape.param(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let y = tape.sigmoid(used);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    assert!(grads.get_ref(unused).is_none());
}

#[test]
fn forward_and_gradients_are_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(t2(4, 6, 3));
        let w = tape.param(t2(6, 5, 4));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(y);
        let m = tape.mean_all(s);
        let value = tape.value(m).item();
        let grads = tape.backward(m).unwrap();
        (value, grads.get(x).data().to_vec(), grads.get(w).data().to_vec())
    };
    let (v1, gx1, gw1) = run();
    let (v2, gx2, gw2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn softmax_rows_sum_to_one_and_ties_split_evenly() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 2], vec![3.7, 3.7, -1.0, 2.0]).unwrap());
    let y = tape.softmax_axis(x, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.at2(0, 0), 0.5);
    assert_eq!(v.at2(0, 1), 0.5);
    assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn gather_rows_accumulates_duplicate_indices() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let g = tape
        .gather_rows(x, Arc::new(vec![1, 1, 0]))
        .unwrap();
    assert_eq!(tape.value(g).row(0), &[3.0, 4.0]);
    let m = tape.mean_all(g);
    let grads = tape.backward(m).unwrap();
    // d(mean)/dx: each gathered element contributes 1/6; row 1 twice.
    let gx = grads.get(x);
    assert_eq!(gx.row(0), &[1.0 / 6.0, 1.0 / 6.0]);
    assert_eq!(gx.row(1), &[2.0 / 6.0, 2.0 / 6.0]);
    assert_eq!(gx.row(2), &[0.0, 0.0]);
}

#[test]
fn segment_mean_with_empty_segment_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(t2(4, 3, 9));
    let y = tape
        .segment_mean_rows(x, Arc::new(vec![2, 3]), Arc::new(vec![0, 0, 2]))
        .unwrap();
    assert_eq!(tape.value(y).row(0), &[0.0, 0.0, 0.0]);
}

/// Finite-difference sweep over every primitive: the op under test is mixed
/// with fixed constants into a scalar, then checked at random points.
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> TensorResult<Var>>;
    let other = t2(4, 4, 100);
    let other2 = t2(4, 4, 101);
    let row = Tensor::vector(t2(1, 4, 102).data().to_vec());

    let cases: Vec<(&str, Vec<usize>, Build)> = vec![
        ("matmul_lhs", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.matmul(x, c)?;
                Ok(t.mean_all(y))
            })
        }),
        ("matmul_rhs", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.matmul(c, x)?;
                Ok(t.mean_all(y))
            })
        }),
        ("add", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.add(x, c)?;
                let z = t.mul(y, y)?;
                Ok(t.mean_all(z))
            })
        }),
        ("add_row", vec![4, 4], {
            let r = row.clone();
            Box::new(move |t, x| {
                let c = t.constant(r.clone());
                let y = t.add_row(x, c)?;
                let z = t.mul(y, y)?;
                Ok(t.mean_all(z))
            })
        }),
        ("add_row_bias", vec![4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.add_row(c, x)?;
                let z = t.mul(y, y)?;
                Ok(t.mean_all(z))
            })
        }),
        ("sub_and_mul", vec![4, 4], {
            let o = other.clone();
            let o2 = other2.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let c2 = t.constant(o2.clone());
                let y = t.sub(x, c)?;
                let z = t.mul(y, c2)?;
                Ok(t.mean_all(z))
            })
        }),
        ("concat_axis0", vec![2, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.concat(&[x, c, x], 0)?;
                let z = t.mul(y, y)?;
                Ok(t.mean_all(z))
            })
        }),
        ("concat_axis1", vec![4, 2], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.concat(&[c, x], 1)?;
                let z = t.mul(y, y)?;
                Ok(t.mean_all(z))
            })
        }),
        ("mean_axis0", vec![4, 4], Box::new(|t, x| {
            let y = t.mean_axis(x, 0)?;
            let z = t.mul(y, y)?;
            Ok(t.mean_all(z))
        })),
        ("mean_axis1", vec![4, 4], Box::new(|t, x| {
            let y = t.mean_axis(x, 1)?;
            let z = t.mul(y, y)?;
            Ok(t.mean_all(z))
        })),
        ("softmax_axis0", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let y = t.softmax_axis(x, 0)?;
                let c = t.constant(o.clone());
                let z = t.mul(y, c)?;
                Ok(t.mean_all(z))
            })
        }),
        ("softmax_axis1", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let y = t.softmax_axis(x, 1)?;
                let c = t.constant(o.clone());
                let z = t.mul(y, c)?;
                Ok(t.mean_all(z))
            })
        }),
        ("sigmoid", vec![4, 4], Box::new(|t, x| {
            let y = t.sigmoid(x);
            Ok(t.mean_all(y))
        })),
        ("relu_away_from_kink", vec![4, 4], Box::new(|t, x| {
            // shift inputs away from zero so central differences stay valid
            let y = t.add_scalar(x, 3.0);
            let r = t.relu(y);
            Ok(t.mean_all(r))
        })),
        ("exp", vec![4, 4], Box::new(|t, x| {
            let y = t.exp(x);
            Ok(t.mean_all(y))
        })),
        ("softplus", vec![4, 4], Box::new(|t, x| {
            let y = t.softplus(x);
            Ok(t.mean_all(y))
        })),
        ("neg_sq_dist_lhs", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.neg_sq_dist(x, c)?;
                Ok(t.mean_axis(y, 0)?)
            })
        }),
        ("neg_sq_dist_rhs", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.neg_sq_dist(c, x)?;
                Ok(t.mean_axis(y, 0)?)
            })
        }),
        ("scale_add_scalar", vec![4, 4], Box::new(|t, x| {
            let y = t.scale(x, -2.5);
            let z = t.add_scalar(y, 0.75);
            let w = t.mul(z, z)?;
            Ok(t.mean_all(w))
        })),
        ("gather_rows", vec![4, 4], Box::new(|t, x| {
            let y = t.gather_rows(x, Arc::new(vec![3, 1, 1, 0]))?;
            let z = t.mul(y, y)?;
            Ok(t.mean_all(z))
        })),
        ("segment_mean_rows", vec![4, 4], Box::new(|t, x| {
            let y = t.segment_mean_rows(
                x,
                Arc::new(vec![0, 1, 2, 2, 3]),
                Arc::new(vec![0, 2, 2, 5]),
            )?;
            let z = t.mul(y, y)?;
            Ok(t.mean_all(z))
        })),
        ("head_dot", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let y = t.head_dot(x, c, 2)?;
                let z = t.mul(y, y)?;
                Ok(t.mean_all(z))
            })
        }),
        ("mul_head_scalars", vec![4, 4], {
            let o = other.clone();
            Box::new(move |t, x| {
                let c = t.constant(o.clone());
                let w = t.head_dot(x, c, 2)?; // [4,2] weights from x too
                let y = t.mul_head_scalars(x, w, 2)?;
                Ok(t.mean_all(y))
            })
        }),
        ("reshape_narrow", vec![2, 8], Box::new(|t, x| {
            let y = t.narrow_cols(x, 2, 4)?;
            let z = t.reshape(y, vec![4, 2])?;
            let w = t.mul(z, z)?;
            Ok(t.mean_all(w))
        })),
    ];

    for (name, shape, f) in cases {
        let numel: usize = shape.iter().product();
        let mut rng = crate::rng::stream(7, "primitive-fd", &[numel as u64]);
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let point = Tensor::new(shape, data).unwrap();
        let err = gradient_check(&f, &point, 1e-5).unwrap();
        assert!(err < 1e-6, "{name}: max relative error {err}");
    }
}
