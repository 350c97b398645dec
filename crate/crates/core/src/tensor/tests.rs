use super::check::{assert_grad_close, central_difference};
use super::*;
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(loss)/d(x) for a graph builder against central differences,
/// where the loss is the mean of the builder's output.
fn check_unary<F>(name: &str, x: Array2<f64>, build: F)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let f = |probe: &Array2<f64>| {
        let mut tape = Tape::new();
        let v = tape.leaf(probe.clone());
        let out = build(&mut tape, v);
        let loss = tape.mean_all(out);
        tape.scalar(loss)
    };
    let numeric = central_difference(f, &x, 1e-6);

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v);
    let loss = tape.mean_all(out);
    let grads = tape.backward(loss);
    assert_grad_close(name, grads.get(v).unwrap(), &numeric, 1e-6, 1e-9);
}

#[test]
fn matmul_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a0 = rand_mat(3, 4, &mut rng);
    let b0 = rand_mat(4, 2, &mut rng);

    for side in 0..2 {
        let fixed_a = a0.clone();
        let fixed_b = b0.clone();
        let f = |probe: &Array2<f64>| {
            let mut tape = Tape::new();
            let a = tape.leaf(if side == 0 { probe.clone() } else { fixed_a.clone() });
            let b = tape.leaf(if side == 1 { probe.clone() } else { fixed_b.clone() });
            let out = tape.matmul(a, b);
            let loss = tape.mean_all(out);
            tape.scalar(loss)
        };
        let base = if side == 0 { &a0 } else { &b0 };
        let numeric = central_difference(f, base, 1e-6);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let out = tape.matmul(a, b);
        let loss = tape.mean_all(out);
        let grads = tape.backward(loss);
        let got = if side == 0 { grads.get(a) } else { grads.get(b) };
        assert_grad_close("matmul", got.unwrap(), &numeric, 1e-6, 1e-9);
    }
}

#[test]
fn elementwise_op_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_mat(4, 5, &mut rng);
    check_unary("relu", x.clone(), |t, v| t.relu(v));
    check_unary("leaky_relu", x.clone(), |t, v| t.leaky_relu(v, 0.1));
    check_unary("tanh", x.clone(), |t, v| t.tanh(v));
    check_unary("scale", x.clone(), |t, v| t.scale(v, -2.5));
    check_unary("add_scalar", x.clone(), |t, v| t.add_scalar(v, 3.0));
    check_unary("square", x.clone(), |t, v| t.mul(v, v));
    check_unary("transpose", x.clone(), |t, v| t.transpose(v));
    // abs away from the kink, sqrt/log on positive inputs
    let pos = x.mapv(|v| v.abs() + 0.5);
    check_unary("sqrt", pos.clone(), |t, v| t.sqrt(v));
    check_unary("log_clamped", pos, |t, v| t.log_clamped(v, 1e-5));
}

#[test]
fn log_clamped_floors_and_zeroes_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[1e-9, 2.0]]);
    let y = tape.log_clamped(x, 1e-5);
    assert_eq!(tape.value(y)[[0, 0]], 1e-5f64.ln());
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss);
    let g = grads.get(x).unwrap();
    assert_eq!(g[[0, 0]], 0.0);
    assert!((g[[0, 1]] - 0.5).abs() < 1e-12);
}

#[test]
fn broadcast_op_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_mat(4, 3, &mut rng);
    let row = rand_mat(1, 3, &mut rng);
    let col = rand_mat(4, 1, &mut rng);

    // check gradient wrt the broadcast operand, which exercises the reduction
    let f_row = |probe: &Array2<f64>| {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let r = tape.leaf(probe.clone());
        let out = tape.add_row(a, r);
        let out = tape.mul_row(out, r);
        let loss = tape.mean_all(out);
        tape.scalar(loss)
    };
    let numeric = central_difference(f_row, &row, 1e-6);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let r = tape.leaf(row.clone());
    let out = tape.add_row(a, r);
    let out = tape.mul_row(out, r);
    let loss = tape.mean_all(out);
    let grads = tape.backward(loss);
    assert_grad_close("add_row/mul_row", grads.get(r).unwrap(), &numeric, 1e-6, 1e-9);

    let f_col = |probe: &Array2<f64>| {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let c = tape.leaf(probe.clone());
        let out = tape.add_col(a, c);
        let loss = tape.mean_all(out);
        tape.scalar(loss)
    };
    let numeric = central_difference(f_col, &col, 1e-6);
    let mut tape = Tape::new();
    let a = tape.constant(x);
    let c = tape.leaf(col.clone());
    let out = tape.add_col(a, c);
    let loss = tape.mean_all(out);
    let grads = tape.backward(loss);
    assert_grad_close("add_col", grads.get(c).unwrap(), &numeric, 1e-6, 1e-9);
}

#[test]
fn softmax_rows_sum_to_one_and_grads_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_mat(3, 6, &mut rng) * 3.0;
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.softmax_rows(v);
    for row in tape.value(s).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    // non-trivial downstream so the softmax Jacobian matters
    check_unary("softmax", x, |t, v| {
        let s = t.softmax_rows(v);
        t.mul(s, s)
    });
}

#[test]
fn softmax_handles_neg_infinity_mask() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[0.5, f64::NEG_INFINITY, 1.5]]);
    let s = tape.softmax_rows(x);
    let v = tape.value(s);
    assert_eq!(v[[0, 1]], 0.0);
    assert!((v.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_grads_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_mat(3, 8, &mut rng);
    let g0 = rand_mat(1, 8, &mut rng);
    let b0 = rand_mat(1, 8, &mut rng);

    for target in 0..3 {
        let f = |probe: &Array2<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(if target == 0 { probe.clone() } else { x0.clone() });
            let g = tape.leaf(if target == 1 { probe.clone() } else { g0.clone() });
            let b = tape.leaf(if target == 2 { probe.clone() } else { b0.clone() });
            let y = tape.layer_norm(x, g, b, 1e-5);
            let y2 = tape.mul(y, y);
            let loss = tape.mean_all(y2);
            tape.scalar(loss)
        };
        let base = [&x0, &g0, &b0][target];
        let numeric = central_difference(f, base, 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.layer_norm(x, g, b, 1e-5);
        let y2 = tape.mul(y, y);
        let loss = tape.mean_all(y2);
        let grads = tape.backward(loss);
        let got = [grads.get(x), grads.get(g), grads.get(b)][target];
        assert_grad_close("layer_norm", got.unwrap(), &numeric, 1e-5, 1e-8);
    }
}

#[test]
fn gather_scatter_adjoint_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_mat(1, 10, &mut rng);
    let map = im2col_map(1, 10, 4, 2, 2, 1);
    check_unary("gather", x.clone(), |t, v| t.gather(v, map.clone()));

    let cols = rand_mat(4, 5, &mut rng);
    let (smap, shape) = col2im_map(1, 5, 4, 2, 1);
    assert_eq!(smap.dim(), cols.dim());
    check_unary("scatter", cols, |t, v| t.scatter(v, smap.clone(), shape));
}

#[test]
fn gather_reads_zero_outside_bounds() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[1.0, 2.0, 3.0]]);
    let map = array![[-1i64, 0, 2], [1, -1, -1]];
    let y = tape.gather(x, map);
    assert_eq!(tape.value(y), &array![[0.0, 1.0, 3.0], [2.0, 0.0, 0.0]]);
}

#[test]
fn embed_accumulates_repeated_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = rand_mat(5, 3, &mut rng);
    let ids = vec![1, 3, 1, 1];
    let f = |probe: &Array2<f64>| {
        let mut tape = Tape::new();
        let t = tape.leaf(probe.clone());
        let e = tape.embed(t, &ids);
        let e2 = tape.mul(e, e);
        let loss = tape.mean_all(e2);
        tape.scalar(loss)
    };
    let numeric = central_difference(f, &table, 1e-6);
    let mut tape = Tape::new();
    let t = tape.leaf(table.clone());
    let e = tape.embed(t, &ids);
    let e2 = tape.mul(e, e);
    let loss = tape.mean_all(e2);
    let grads = tape.backward(loss);
    assert_grad_close("embed", grads.get(t).unwrap(), &numeric, 1e-6, 1e-9);
}

#[test]
fn concat_and_slice_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_mat(6, 4, &mut rng);
    check_unary("slice_rows", x.clone(), |t, v| t.slice_rows(v, 1, 3));
    check_unary("slice_cols", x.clone(), |t, v| t.slice_cols(v, 2, 2));
    check_unary("concat_rows", x.clone(), |t, v| {
        let head = t.slice_rows(v, 0, 2);
        let tail = t.slice_rows(v, 2, 4);
        t.concat_rows(&[tail, head])
    });
    check_unary("mean_rows", x.clone(), |t, v| t.mean_rows(v));
    check_unary("normalize_rows", x, |t, v| t.normalize_rows(v, 1e-12));
}

#[test]
fn cross_entropy_matches_uniform_closed_form_and_grads() {
    // zero logits over 64 classes: CE = ln 64 regardless of target
    let mut tape = Tape::new();
    let logits = tape.leaf(Array2::zeros((3, 64)));
    let loss = tape.cross_entropy_rows(logits, &[Some(0), Some(63), Some(5)]);
    assert!((tape.scalar(loss) - 64f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l0 = rand_mat(4, 7, &mut rng);
    let targets = vec![Some(2), None, Some(0), Some(6)];
    let f = |probe: &Array2<f64>| {
        let mut tape = Tape::new();
        let l = tape.leaf(probe.clone());
        let loss = tape.cross_entropy_rows(l, &targets);
        tape.scalar(loss)
    };
    let numeric = central_difference(f, &l0, 1e-6);
    let mut tape = Tape::new();
    let l = tape.leaf(l0.clone());
    let loss = tape.cross_entropy_rows(l, &targets);
    let grads = tape.backward(loss);
    assert_grad_close("cross_entropy", grads.get(l).unwrap(), &numeric, 1e-6, 1e-9);
    // masked row receives zero gradient
    let g = grads.get(l).unwrap();
    assert!(g.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn perfect_one_hot_logits_give_zero_loss() {
    let mut tape = Tape::new();
    let mut logits = Array2::from_elem((2, 4), -1e4);
    logits[[0, 1]] = 1e4;
    logits[[1, 3]] = 1e4;
    let l = tape.leaf(logits);
    let loss = tape.cross_entropy_rows(l, &[Some(1), Some(3)]);
    assert!(tape.scalar(loss).abs() < 1e-9);
}

#[test]
fn constants_do_not_receive_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[1.0, 2.0]]);
    let c = tape.constant(array![[3.0, 4.0]]);
    let y = tape.mul(x, c);
    let loss = tape.mean_all(y);
    let grads = tape.backward(loss);
    assert!(grads.get(c).is_none());
    assert!(grads.get(x).is_some());
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    // loss = mean(x*x + 3x) -> dL/dx = (2x + 3)/len
    let mut tape = Tape::new();
    let x = tape.leaf(array![[1.0, -2.0]]);
    let sq = tape.mul(x, x);
    let lin = tape.scale(x, 3.0);
    let sum = tape.add(sq, lin);
    let loss = tape.mean_all(sum);
    let grads = tape.backward(loss);
    let g = grads.get(x).unwrap();
    assert!((g[[0, 0]] - (2.0 + 3.0) / 2.0).abs() < 1e-12);
    assert!((g[[0, 1]] - (-4.0 + 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn im2col_map_shapes_and_entries() {
    // channels=2, time=5, kernel=3, stride=1, pad=1
    let map = im2col_map(2, 5, 3, 1, 1, 1);
    assert_eq!(map.dim(), (6, 5));
    assert_eq!(map[[0, 0]], -1); // left padding
    assert_eq!(map[[1, 0]], 0); // x[0][0]
    assert_eq!(map[[3 + 1, 0]], 5); // channel 1, k=1 -> x[1][0] at flat 5
    // dilation widens the span
    let dmap = im2col_map(1, 7, 3, 1, 2, 2);
    assert_eq!(dmap.dim(), (3, 7));
}

#[test]
fn col2im_output_length_matches_transposed_conv_formula() {
    // (T-1)*s + k - 2p
    let (_, shape) = col2im_map(3, 10, 8, 4, 2);
    assert_eq!(shape, (3, (10 - 1) * 4 + 8 - 4));
}
