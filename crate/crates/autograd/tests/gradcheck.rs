//! Finite-difference checks for every differentiable op. Each check builds
//! the same scalar-valued graph twice: once for the analytic gradient, and
//! once per perturbed element for the central-difference estimate.

use dvcp_autograd::{Tape, TensorData, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> TensorData {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0f32..1.0))
}

/// Compare analytic and numeric gradients of `f` w.r.t. every input.
fn gradcheck(
    inputs: &[TensorData],
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    tol: f64,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.grad_leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let eps = 1e-3f32;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .of(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        for idx in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[idx] -= eps;
            let fp = eval(&plus, &f);
            let fm = eval(&minus, &f);
            let numeric = (fp - fm) / (2.0 * eps as f64);
            let got = analytic.as_slice().unwrap()[idx] as f64;
            assert!(
                (got - numeric).abs() <= tol * (1.0 + numeric.abs()),
                "input {i} element {idx}: analytic {got} vs numeric {numeric}"
            );
        }
    }
}

fn eval(inputs: &[TensorData], f: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.grad_leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.scalar_value(out) as f64
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 3], &mut rng);
    gradcheck(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let n = t.neg(m);
        let sc = t.scale(n, 0.7);
        let p = t.add_scalar(sc, 0.3);
        t.mean(p)
    }, 1e-3);
}

#[test]
fn activations() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    // Keep values away from relu/abs kinks.
    let mut a = rand_tensor(&[3, 4], &mut rng);
    a.mapv_inplace(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    gradcheck(&[a.clone()], |t, v| {
        let r = t.relu(v[0]);
        let m = t.mean(r);
        m
    }, 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let r = t.leaky_relu(v[0], 0.2);
        t.mean(r)
    }, 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let r = t.tanh(v[0]);
        t.mean(r)
    }, 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let r = t.sigmoid(v[0]);
        t.mean(r)
    }, 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let r = t.softplus(v[0]);
        t.mean(r)
    }, 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let r = t.abs(v[0]);
        t.mean(r)
    }, 1e-3);
    let pos = a.mapv(|v| v.abs() + 0.5);
    gradcheck(&[pos], |t, v| {
        let r = t.ln(v[0]);
        t.mean(r)
    }, 1e-3);
}

#[test]
fn square_accumulates_both_sides() {
    let mut tape = Tape::new();
    let x = tape.grad_leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0f32));
    let y = tape.square(x);
    let s = tape.sum(y);
    let grads = tape.backward(s);
    let g = grads.of(x).unwrap();
    assert!((g[[0]] - 6.0).abs() < 1e-6, "d(x^2)/dx = 2x");
}

#[test]
fn broadcasting_add_mul() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let a = rand_tensor(&[4, 3, 5], &mut rng);
    let bias = rand_tensor(&[4, 3, 1], &mut rng);
    gradcheck(&[a.clone(), bias.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        t.mean(s)
    }, 1e-3);
    gradcheck(&[a, bias], |t, v| {
        let s = t.mul(v[0], v[1]);
        t.mean(s)
    }, 1e-3);
}

#[test]
fn reductions_and_shape_ops() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    gradcheck(&[a.clone()], |t, v| t.sum(v[0]), 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let m = t.mean_per_sample(v[0]);
        let sq = t.square(m);
        t.sum(sq)
    }, 1e-3);
    gradcheck(&[a.clone()], |t, v| {
        let r = t.reshape(v[0], &[6, 4]);
        let p = t.permute(r, &[1, 0]);
        let s = t.square(p);
        t.mean(s)
    }, 1e-3);
}

#[test]
fn concat_channels_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let a = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[2, 1, 3, 3], &mut rng);
    gradcheck(&[a, b], |t, v| {
        let c = t.concat_channels(&[v[0], v[1]]);
        let s = t.square(c);
        t.mean(s)
    }, 1e-3);
}

#[test]
fn conv2d_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        gradcheck(&[x.clone(), w.clone(), b.clone()], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            let s = t.square(y);
            t.mean(s)
        }, 2e-3);
    }
}

#[test]
fn conv_transpose2d_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    gradcheck(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1);
        let s = t.square(y);
        t.mean(s)
    }, 2e-3);
}

#[test]
fn conv_transpose2d_output_size() {
    let mut tape = Tape::new();
    let x = tape.input(ArrayD::zeros(IxDyn(&[1, 2, 5, 5])));
    let w = tape.input(ArrayD::zeros(IxDyn(&[2, 3, 3, 3])));
    let y = tape.conv_transpose2d(x, w, None, 2, 1, 1);
    assert_eq!(tape.value(y).shape(), &[1, 3, 10, 10]);
}

#[test]
fn upsample_grads() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
    gradcheck(&[x.clone()], |t, v| {
        let y = t.upsample_nearest(v[0], 2);
        let s = t.square(y);
        t.mean(s)
    }, 1e-3);
    gradcheck(&[x.clone()], |t, v| {
        let y = t.upsample_bilinear(v[0], 2);
        let s = t.square(y);
        t.mean(s)
    }, 1e-3);
    let x4 = rand_tensor(&[1, 2, 4, 4], &mut rng);
    gradcheck(&[x4], |t, v| {
        let y = t.avg_pool2(v[0]);
        let s = t.square(y);
        t.mean(s)
    }, 1e-3);
}

#[test]
fn upsample_nearest_values() {
    let mut tape = Tape::new();
    let x = tape.input(
        ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let y = tape.upsample_nearest(x, 2);
    let expect = vec![
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.value(y).as_slice().unwrap(), expect.as_slice());
}

#[test]
fn warp_grad_interior() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let frame = rand_tensor(&[1, 2, 6, 6], &mut rng);
    // Sub-pixel flows away from integer lattice and borders so the
    // analytic derivative is smooth at the probe points.
    let flow = ArrayD::from_shape_fn(IxDyn(&[1, 2, 6, 6]), |_| {
        rng.random_range(0.2f32..0.4)
    });
    gradcheck(&[frame, flow], |t, v| {
        let y = t.warp(v[0], v[1]);
        let s = t.square(y);
        t.mean(s)
    }, 5e-3);
}

#[test]
fn batch_norm_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let x = rand_tensor(&[3, 2, 4, 4], &mut rng);
    let gamma = rand_tensor(&[2], &mut rng);
    let beta = rand_tensor(&[2], &mut rng);
    gradcheck(&[x, gamma, beta], |t, v| {
        let y = t.batch_norm(v[0], v[1], v[2], 1e-5);
        let s = t.square(y);
        t.mean(s)
    }, 5e-3);
}

#[test]
fn batch_matmul_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 2, 4], &mut rng);
    let b = rand_tensor(&[3, 4, 5], &mut rng);
    gradcheck(&[a, b], |t, v| {
        let y = t.batch_matmul(v[0], v[1]);
        let s = t.square(y);
        t.mean(s)
    }, 1e-3);
}

#[test]
fn param_reuse_accumulates() {
    use dvcp_autograd::ParamStore;
    let mut store = ParamStore::new();
    let id = store.register("w", ArrayD::from_elem(IxDyn(&[1]), 2.0f32));
    let mut tape = Tape::new();
    let w1 = tape.param(&store, id);
    let w2 = tape.param(&store, id);
    assert_eq!(w1, w2, "same param appears as one node");
    let prod = tape.mul(w1, w2); // w^2
    let s = tape.sum(prod);
    let grads = tape.backward(s);
    let g = grads.of_param(id).unwrap();
    assert!((g[[0]] - 4.0).abs() < 1e-6, "d(w^2)/dw = 2w = 4");
}

#[test]
fn adam_descends_quadratic() {
    use dvcp_autograd::{Adam, ParamStore};
    let mut store = ParamStore::new();
    let id = store.register("x", ArrayD::from_elem(IxDyn(&[2]), 5.0f32));
    let mut adam = Adam::new(0.1, store.len());
    for _ in 0..200 {
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        adam.step(&mut store, &grads, &[id], None);
    }
    let x = store.value(id);
    assert!(x.iter().all(|v| v.abs() < 0.5), "x should approach 0, got {x:?}");
}

#[test]
fn grad_clip_bounds_update() {
    use dvcp_autograd::{Adam, ParamStore};
    let mut store = ParamStore::new();
    let id = store.register("x", ArrayD::from_elem(IxDyn(&[4]), 100.0f32));
    let mut adam = Adam::new(0.1, store.len());
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    let grads = tape.backward(loss);
    // Raw gradient is 200 per element; clipped global norm is 1.
    adam.step(&mut store, &grads, &[id], Some(1.0));
    let moved: f32 = store.value(id).iter().map(|v| (100.0 - v).abs()).sum();
    assert!(moved > 0.0 && moved < 1.0, "clipped Adam step should be small, moved {moved}");
}
