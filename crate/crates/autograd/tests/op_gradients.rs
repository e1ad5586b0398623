use jdatt_autograd::gradcheck;
use jdatt_autograd::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn assert_close<F: Fn(&mut Graph, &[Var]) -> Var>(name: &str, f: F, inputs: &[Tensor]) {
    for (k, r) in gradcheck::check(f, inputs, 1e-6).iter().enumerate() {
        let err = r.relative_error(1e-12);
        assert!(err < 1e-6, "{name}: input {k} relative error {err:e}");
    }
}

// Random weights into a scalar so every output element contributes.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], 0.2, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4], 0.2, 2.0);
    let unary: Vec<(&str, fn(&mut Graph, Var) -> Var)> = vec![
        ("exp", |g, x| g.exp(x)),
        ("log", |g, x| g.log(x)),
        ("sqrt", |g, x| g.sqrt(x)),
        ("square", |g, x| g.square(x)),
        ("powf", |g, x| g.powf(x, 2.5)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("silu", |g, x| g.silu(x)),
        ("scale", |g, x| g.scale(x, -1.7)),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
        ("log_softmax", |g, x| g.log_softmax(x)),
        ("transpose", |g, x| g.transpose2(x)),
        ("narrow", |g, x| g.narrow(x, 1, 1, 2)),
        ("index_select", |g, x| g.index_select(x, &[2, 0, 2])),
        ("clamp", |g, x| g.clamp(x, 0.5, 1.5)),
        ("abs", |g, x| {
            let y = g.add_scalar(x, -1.0);
            g.abs(y)
        }),
    ];
    for (name, op) in unary {
        assert_close(
            name,
            |g, v| {
                let y = op(g, v[0]);
                project(g, y, 9)
            },
            std::slice::from_ref(&a),
        );
    }
    let binary: Vec<(&str, fn(&mut Graph, Var, Var) -> Var)> = vec![
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
        ("div", |g, x, y| g.div(x, y)),
        ("minimum", |g, x, y| g.minimum(x, y)),
        ("maximum", |g, x, y| g.maximum(x, y)),
        ("concat", |g, x, y| g.concat(&[x, y])),
    ];
    for (name, op) in binary {
        assert_close(
            name,
            |g, v| {
                let y = op(g, v[0], v[1]);
                project(g, y, 10)
            },
            &[a.clone(), b.clone()],
        );
    }
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let x = rand_tensor(&mut rng, &[2, 6, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        assert_close(
            "conv2d",
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                project(g, y, 11)
            },
            &[x, w, b],
        );
    }
}

#[test]
fn channel_bias_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    assert_close(
        "add_channel_bias",
        |g, v| {
            let y = g.add_channel_bias(v[0], v[1]);
            project(g, y, 12)
        },
        &[x.clone(), b],
    );
    for &(oh, ow) in &[(8, 6), (2, 2), (5, 7)] {
        assert_close(
            "resize",
            |g, v| {
                let y = g.resize(v[0], oh, ow);
                project(g, y, 13)
            },
            std::slice::from_ref(&x),
        );
    }
}

#[test]
fn warp_gradients_reach_image_and_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = rand_tensor(&mut rng, &[2, 6, 7], 0.0, 1.0);
    // keep samples away from integer grid crossings and the border clamp
    let flow = Tensor::from_fn(&[2, 6, 7], |_| {
        let base: f64 = rng.random_range(-1.0..1.0);
        base.trunc() + 0.2 + 0.6 * rng.random::<f64>() * base.signum()
    });
    assert_close(
        "warp",
        |g, v| {
            let y = g.warp(v[0], v[1]);
            project(g, y, 14)
        },
        &[img, flow],
    );
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(&[2], 1.0));
    let c = g.constant(Tensor::full(&[2], 3.0));
    let y = g.mul(a, c);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
    assert!(grads.get(c).is_none());
}

proptest! {
    #[test]
    fn log_softmax_rows_exponentiate_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = g.log_softmax(x);
        for row in g.value(y).data().chunks(4) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones(n in 1usize..20) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[n], 0.5));
        let s = g.sum(x);
        let grads = g.backward(s);
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
