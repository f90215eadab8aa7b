//! Central finite-difference checks for every tape operation. The numeric
//! side only re-runs the forward closure, so it cannot share a bug with the
//! reverse-mode path.

use avsr::autodiff::{Tape, TensorD, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn filled(dims: &[usize], rng: &mut impl Rng) -> TensorD {
    ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-1.0..1.0))
}

/// Inputs biased away from zero so ReLU-style kinks stay out of the
/// finite-difference window.
fn filled_off_zero(dims: &[usize], rng: &mut impl Rng) -> TensorD {
    ArrayD::from_shape_fn(IxDyn(dims), |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn check_grads(inputs: &[TensorD], f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let eval = |xs: &[TensorD]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "loss must be scalar");
    let grads = tape.backward(out);
    let eps = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).cloned();
        for flat in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[flat] += eps;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[flat] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let ad = g
                .as_ref()
                .map(|g| g.as_slice().unwrap()[flat])
                .unwrap_or(0.0);
            let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                err < tol,
                "input {i} coord {flat}: fd={fd} ad={ad} rel_err={err}"
            );
        }
    }
}

fn rng() -> impl Rng {
    avsr::rng::substream(99, "autodiff_ops")
}

#[test]
fn grad_add_mul_scale() {
    let mut r = rng();
    let a = filled(&[3, 4], &mut r);
    let b = filled(&[3, 4], &mut r);
    check_grads(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let m = t.mul(s, v[1]);
        let sc = t.scale(m, 0.7);
        t.mean_all(sc)
    }, 1e-7);
}

#[test]
fn grad_activations() {
    let mut r = rng();
    let a = filled_off_zero(&[4, 5], &mut r);
    check_grads(&[a.clone()], |t, v| {
        let x = t.relu(v[0]);
        t.mean_all(x)
    }, 1e-6);
    check_grads(&[a.clone()], |t, v| {
        let x = t.sigmoid(v[0]);
        t.mean_all(x)
    }, 1e-7);
    check_grads(&[a.clone()], |t, v| {
        let x = t.tanh(v[0]);
        t.mean_all(x)
    }, 1e-7);
    check_grads(&[a.clone()], |t, v| {
        let x = t.swish(v[0]);
        t.mean_all(x)
    }, 1e-7);
}

#[test]
fn grad_glu() {
    let mut r = rng();
    let a = filled(&[3, 8], &mut r);
    check_grads(&[a], |t, v| {
        let x = t.glu(v[0]);
        t.mean_all(x)
    }, 1e-7);
}

#[test]
fn grad_matmul_and_bias() {
    let mut r = rng();
    let x = filled(&[3, 4], &mut r);
    let w = filled(&[4, 5], &mut r);
    let b = filled(&[5], &mut r);
    check_grads(&[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], v[2]);
        let y = t.tanh(y);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn grad_bmm() {
    let mut r = rng();
    let a = filled(&[2, 3, 4], &mut r);
    let b = filled(&[2, 4, 3], &mut r);
    check_grads(&[a, b], |t, v| {
        let y = t.bmm(v[0], v[1]);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn grad_layer_norm() {
    let mut r = rng();
    let x = filled(&[3, 6], &mut r);
    let gamma = filled(&[6], &mut r);
    let beta = filled(&[6], &mut r);
    check_grads(&[x, gamma, beta], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
        let y = t.mul(y, y);
        t.mean_all(y)
    }, 1e-6);
}

#[test]
fn grad_softmaxes() {
    let mut r = rng();
    let x = filled(&[4, 5], &mut r);
    check_grads(&[x.clone()], |t, v| {
        let y = t.log_softmax(v[0]);
        let y = t.mul(y, y);
        t.mean_all(y)
    }, 1e-6);
    let x3 = filled(&[2, 3, 4], &mut r);
    check_grads(&[x3], |t, v| {
        let y = t.softmax_last3(v[0]);
        let y = t.mul(y, y);
        t.mean_all(y)
    }, 1e-6);
}

#[test]
fn grad_shape_ops() {
    let mut r = rng();
    let x = filled(&[2, 3, 4], &mut r);
    check_grads(&[x.clone()], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]);
        let q = t.reshape(p, &[4, 6]);
        let y = t.tanh(q);
        t.mean_all(y)
    }, 1e-7);
    let m = filled(&[5, 4], &mut r);
    check_grads(&[m.clone()], |t, v| {
        let a = t.slice_rows(v[0], 1, 3);
        let b = t.slice_cols(a, 1, 2);
        t.mean_all(b)
    }, 1e-7);
    let p1 = filled(&[2, 4], &mut r);
    let p2 = filled(&[3, 4], &mut r);
    check_grads(&[p1, p2], |t, v| {
        let c = t.concat_rows(&[v[0], v[1]]);
        let y = t.mul(c, c);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn grad_embedding_rows() {
    let mut r = rng();
    let table = filled(&[6, 3], &mut r);
    check_grads(&[table], |t, v| {
        let rows = t.embedding_rows(v[0], &[1, 4, 1, 5]);
        let y = t.mul(rows, rows);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn grad_masked_nll() {
    let mut r = rng();
    let logits = filled(&[5, 7], &mut r);
    let labels = [2u32, 0, 6, 1, 3];
    let mask = [true, false, true, true, false];
    check_grads(&[logits.clone()], |t, v| {
        let lp = t.log_softmax(v[0]);
        t.masked_nll_sum(lp, &labels, &mask)
    }, 1e-7);
    // gradient w.r.t. logits is exactly zero at non-target rows
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let lp = tape.log_softmax(lv);
    let loss = tape.masked_nll_sum(lp, &labels, &mask);
    let grads = tape.backward(loss);
    let g = grads.get(lv).unwrap();
    for col in 0..7 {
        assert_eq!(g[[1, col]], 0.0);
        assert_eq!(g[[4, col]], 0.0);
    }
}

#[test]
fn grad_mean_of() {
    let mut r = rng();
    let a = filled(&[1], &mut r);
    let b = filled(&[1], &mut r);
    check_grads(&[a, b], |t, v| {
        let s0 = t.mean_all(v[0]);
        let s1 = t.mean_all(v[1]);
        t.mean_of(&[s0, s1])
    }, 1e-7);
}

#[test]
fn grad_relpos_expand() {
    let mut r = rng();
    let table = filled(&[2, 5], &mut r);
    check_grads(&[table], |t, v| {
        let e = t.relpos_expand(v[0], 4);
        let y = t.mul(e, e);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn grad_outer_add() {
    let mut r = rng();
    let a = filled(&[3, 4], &mut r);
    let b = filled(&[2, 4], &mut r);
    check_grads(&[a, b], |t, v| {
        let y = t.outer_add(v[0], v[1]);
        let y = t.mul(y, y);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn grad_conv2d() {
    let mut r = rng();
    let x = filled(&[2, 5, 6, 3], &mut r);
    let k = filled(&[3, 3, 3, 4], &mut r);
    let b = filled(&[4], &mut r);
    for stride in [(1usize, 1usize), (2, 2)] {
        check_grads(&[x.clone(), k.clone(), b.clone()], |t, v| {
            let y = t.conv2d_same(v[0], v[1], v[2], stride);
            let y = t.tanh(y);
            t.mean_all(y)
        }, 1e-6);
    }
}

#[test]
fn grad_conv1d_time() {
    let mut r = rng();
    let x = filled(&[5, 4, 3], &mut r);
    let k = filled(&[3, 3, 2], &mut r);
    let b = filled(&[2], &mut r);
    check_grads(&[x, k, b], |t, v| {
        let y = t.conv1d_time_same(v[0], v[1], v[2]);
        let y = t.tanh(y);
        t.mean_all(y)
    }, 1e-6);
}

#[test]
fn grad_depthwise1d() {
    let mut r = rng();
    let x = filled(&[6, 3], &mut r);
    let k = filled(&[5, 3], &mut r);
    let b = filled(&[3], &mut r);
    check_grads(&[x, k, b], |t, v| {
        let y = t.depthwise1d_same(v[0], v[1], v[2]);
        let y = t.tanh(y);
        t.mean_all(y)
    }, 1e-6);
}

#[test]
fn grad_spatial_mean() {
    let mut r = rng();
    let x = filled(&[3, 4, 2], &mut r);
    check_grads(&[x], |t, v| {
        let y = t.spatial_mean(v[0]);
        let y = t.mul(y, y);
        t.mean_all(y)
    }, 1e-7);
}

#[test]
fn conv2d_same_padding_shapes() {
    let mut r = rng();
    let x = filled(&[1, 100, 80, 1], &mut r);
    let k = filled(&[3, 3, 1, 2], &mut r);
    let b = filled(&[2], &mut r);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let kv = tape.leaf(k);
    let bv = tape.leaf(b);
    let y = tape.conv2d_same(xv, kv, bv, (2, 2));
    assert_eq!(tape.value(y).shape(), &[1, 50, 40, 2]);
}
