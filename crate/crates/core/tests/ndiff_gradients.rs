use fbgs::ndiff::{central_difference, grad_check, Array, NdiffError, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array {
    Array::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

/// Tape gradient of `f` against central differences, reduced to a scalar
/// through a fixed random weighting so that no output is trivially constant.
fn check<F>(name: &str, point: &Array, out_shape: (usize, usize), f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var, NdiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let w = random(out_shape.0, out_shape.1, &mut rng);
    let build = |t: &mut Tape, x: Var| -> Result<Var, NdiffError> {
        let y = f(t, x)?;
        let m = t.mask(y, &w)?;
        Ok(t.sum(m))
    };
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let root = build(&mut tape, x).unwrap();
    tape.backward(root).unwrap();
    let analytic = tape.grad(x);
    let eval = |p: &Array| -> Result<f64, NdiffError> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let r = build(&mut t, x)?;
        Ok(t.value(r).data()[0])
    };
    let fd = central_difference(&eval, point, 1e-5).unwrap();
    let scale = fd.max_abs().max(1.0);
    let err = analytic.data().iter().zip(fd.data()).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale;
    assert!(err < 1e-7, "{name}: error {err:e}");
}

#[test]
fn elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(3, 4, &mut rng);
    let c = random(3, 4, &mut rng);
    check("add", &x, (3, 4), |t, x| {
        let k = t.constant(c.clone());
        t.add(x, k)
    });
    check("sub", &x, (3, 4), |t, x| {
        let k = t.constant(c.clone());
        t.sub(k, x)
    });
    check("mul", &x, (3, 4), |t, x| {
        let k = t.constant(c.clone());
        t.mul(x, k)
    });
    check("mul_self", &x, (3, 4), |t, x| t.mul(x, x));
    check("scale", &x, (3, 4), |t, x| Ok(t.scale(x, -2.5)));
    check("add_scalar", &x, (3, 4), |t, x| {
        let y = t.add_scalar(x, 0.7);
        t.mul(y, x)
    });
}

#[test]
fn linear_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(4, 3, &mut rng);
    let w = random(3, 5, &mut rng);
    let b = random(1, 5, &mut rng);
    check("matmul_left", &x, (4, 5), |t, x| {
        let w = t.constant(w.clone());
        t.matmul(x, w)
    });
    let xc = x.clone();
    check("matmul_right", &w, (4, 5), |t, w| {
        let x = t.constant(xc.clone());
        t.matmul(x, w)
    });
    check("affine_input", &x, (4, 5), |t, x| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        t.affine(x, w, b)
    });
    let xc = x.clone();
    check("affine_bias", &b, (4, 5), |t, b| {
        let (x, w) = (t.constant(xc.clone()), t.constant(w.clone()));
        t.affine(x, w, b)
    });
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Keep ReLU inputs away from the kink.
    let x = Array::from_fn(3, 4, |_, _| {
        let v: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { v } else { -v }
    });
    check("relu", &x, (3, 4), |t, x| {
        let y = t.relu(x);
        t.mul(y, y)
    });
    check("tanh", &x, (3, 4), |t, x| Ok(t.tanh(x)));
    check("exp", &x, (3, 4), |t, x| Ok(t.exp(x)));
    let pos = x.map(|v| v.abs() + 0.2);
    check("log", &pos, (3, 4), |t, x| t.log(x));
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(3, 4, &mut rng);
    check("sum", &x, (1, 1), |t, x| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    });
    check("mean", &x, (1, 1), |t, x| {
        let y = t.tanh(x);
        t.mean(y)
    });
    check("row_sum", &x, (3, 1), |t, x| {
        let y = t.exp(x);
        Ok(t.row_sum(y))
    });
}

#[test]
fn softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(4, 3, &mut rng).map(|v| 3.0 * v);
    check("softmax", &x, (4, 3), |t, x| Ok(t.softmax(x)));
    check("log_softmax", &x, (4, 3), |t, x| Ok(t.log_softmax(x)));
    let big = x.map(|v| v + 500.0);
    check("log_softmax_shifted", &big, (4, 3), |t, x| Ok(t.log_softmax(x)));
}

#[test]
fn structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(3, 2, &mut rng);
    let other = random(3, 3, &mut rng);
    check("concat_cols", &x, (3, 7), |t, x| {
        let o = t.constant(other.clone());
        let sq = t.mul(x, x)?;
        t.concat_cols(&[x, o, sq])
    });
    let m = Array::from_fn(3, 2, |i, j| ((i + j) % 2) as f64);
    check("mask", &x, (3, 2), |t, x| {
        let y = t.tanh(x);
        t.mask(y, &m)
    });
}

#[test]
fn reused_nodes_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(2, 3, &mut rng);
    let w = random(3, 3, &mut rng);
    check("two_layer", &x, (2, 3), |t, x| {
        let w = t.constant(w.clone());
        let h = t.matmul(x, w)?;
        let h = t.tanh(h);
        let r = t.add(h, x)?;
        let s = t.log_softmax(r);
        t.mul(s, r)
    });
}

#[test]
fn library_grad_check_agrees() {
    let x = Array::from_vec(1, 3, vec![0.3, -0.8, 1.1]).unwrap();
    let err = grad_check(
        |t, x| {
            let e = t.exp(x);
            let y = t.mul(e, x)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}
