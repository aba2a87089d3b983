use gsfield_core::numeric::nn::FinalInit;
use gsfield_core::numeric::{Activation, Mlp, ParamStore, Tape, Tensor, Var};
use gsfield_core::rng;
use rand::Rng;

/// Compares tape gradients of `f` at `inputs` against central differences,
/// returning the worst norm-wise relative error over all inputs.
fn check<'s>(inputs: &[Tensor], f: impl Fn(&mut Tape<'s>, &[Var]) -> Var) -> f64 {
    let h = 1e-4;
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[k].len()]);
        let mut fd = Vec::new();
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            minus[k].data_mut()[j] -= h;
            fd.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn rand_t(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled.
fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_t(r, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

#[test]
fn elementwise_primitives() {
    let mut r = rng::rng(1);
    for _ in 0..5 {
        let rows = r.random_range(1..5);
        let cols = r.random_range(1..5);
        let a = away_from_zero(&mut r, &[rows, cols]);
        let b = away_from_zero(&mut r, &[rows, cols]);
        let pos = {
            let mut t = rand_t(&mut r, &[rows, cols]);
            t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
            t
        };
        let ab = [a.clone(), b.clone()];
        assert!(check(&ab, |t, v| { let x = t.add(v[0], v[1]).unwrap(); let y = t.mul(x, x).unwrap(); t.sum(y) }) < 1e-4);
        assert!(check(&ab, |t, v| { let x = t.sub(v[0], v[1]).unwrap(); let y = t.mul(x, v[0]).unwrap(); t.mean(y) }) < 1e-4);
        assert!(check(&ab, |t, v| t.mse_loss(v[0], v[1]).unwrap()) < 1e-4);
        assert!(check(&[a.clone(), b.clone().reshape(&[rows, cols]).unwrap()], |t, v| {
            let d = t.scale(v[1], 3.0);
            let d = t.add(v[0], d).unwrap();
            t.l1_loss(d, v[1]).unwrap()
        }) < 1e-4);
        let one = [a.clone()];
        for op in 0..6 {
            let e = check(&one, |t, v| {
                let y = match op {
                    0 => t.relu(v[0]),
                    1 => t.sigmoid(v[0]),
                    2 => t.tanh(v[0]),
                    3 => t.exp(v[0]),
                    4 => t.add_scalar(v[0], 2.0),
                    _ => t.scale(v[0], -0.7),
                };
                let y = t.mul(y, y).unwrap();
                t.sum(y)
            });
            assert!(e < 1e-4, "op {op}: {e}");
        }
        assert!(check(&[pos], |t, v| { let y = t.log(v[0]); let y = t.mul(y, y).unwrap(); t.sum(y) }) < 1e-4);
    }
}

#[test]
fn linear_algebra_and_shape_primitives() {
    let mut r = rng::rng(2);
    for _ in 0..5 {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = rand_t(&mut r, &[m, k]);
        let w = rand_t(&mut r, &[k, n]);
        let bias = rand_t(&mut r, &[n]);
        let y = rand_t(&mut r, &[m, n]);
        let e = check(&[a.clone(), w.clone(), bias, y], |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_bias(h, v[2]).unwrap();
            t.mse_loss(h, v[3]).unwrap()
        });
        assert!(e < 1e-4, "{e}");
        let b = rand_t(&mut r, &[m, n]);
        let c = rand_t(&mut r, &[2, k]);
        let e = check(&[a.clone(), b.clone(), c.clone()], |t, v| {
            let cols = t.concat(&[v[0], v[1]], 1).unwrap();
            let s = t.slice(cols, 1, 1, k + n - 1).unwrap();
            let rows = t.concat(&[v[0], v[2]], 0).unwrap();
            let rs = t.slice(rows, 0, 1, m + 1).unwrap();
            let q = t.mul(s, s).unwrap();
            let q2 = t.tanh(rs);
            let a = t.sum(q);
            let b = t.sum(q2);
            t.add(a, b).unwrap()
        });
        assert!(e < 1e-4, "{e}");
        let e = check(&[a.clone()], |t, v| {
            let re = t.reshape(v[0], &[1, m * k]).unwrap();
            let nr = t.normalize_rows(v[0]).unwrap();
            let g = t.gather_rows(nr, &[0, m - 1, 0]).unwrap();
            let g = t.exp(g);
            let a = t.sum(g);
            let b = t.sigmoid(re);
            let b = t.sum(b);
            t.add(a, b).unwrap()
        });
        assert!(e < 1e-4, "{e}");
        let rows = r.random_range(2..8);
        let x = rand_t(&mut r, &[rows, 3]);
        let split = r.random_range(1..rows);
        let e = check(&[x], |t, v| {
            let s = t.segment_max(v[0], &[0, split, rows]).unwrap();
            let s = t.mul(s, s).unwrap();
            t.sum(s)
        });
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn triplane_sampling_gradient() {
    let mut r = rng::rng(3);
    let (h, w, c) = (5, 4, 2);
    let planes = rand_t(&mut r, &[3 * h * w * c]);
    let mut qs = Vec::new();
    while qs.len() < 8 * 3 {
        let v: f64 = r.random_range(-0.95..0.95);
        // keep clear of grid nodes so differences stay inside one cell
        let ux = (v + 1.0) * 0.5 * (w - 1) as f64;
        let uy = (v + 1.0) * 0.5 * (h - 1) as f64;
        if (ux - ux.round()).abs() > 1e-2 && (uy - uy.round()).abs() > 1e-2 {
            qs.push(v);
        }
    }
    let q = Tensor::new(&[8, 3], qs).unwrap();
    let e = check(&[planes, q], |t, v| {
        let f = t.triplane(v[0], v[1], h, w, c).unwrap();
        let f = t.mul(f, f).unwrap();
        t.sum(f)
    });
    assert!(e < 1e-4, "{e}");
}

#[test]
fn mlp_chain_gradient_and_input_vjp() {
    let mut r = rng::rng(4);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 6, 5, 2], Activation::Relu, FinalInit::He, &mut r);
    let x = rand_t(&mut r, &[4, 3]);
    let y = rand_t(&mut r, &[4, 2]);
    // relu(Wx + b) then mse, against finite differences on x
    let e = check(&[x.clone()], |t, v| {
        let bound = t.bind_frozen(&store);
        let out = mlp.forward(t, &bound, v[0]).unwrap();
        let yc = t.constant(y.clone());
        t.mse_loss(out, yc).unwrap()
    });
    assert!(e < 1e-4, "{e}");
    // plain batched evaluation agrees with the tape
    let mut tape = Tape::new();
    let bound = tape.bind(&store);
    let xv = tape.constant(x.clone());
    let out = mlp.forward(&mut tape, &bound, xv).unwrap();
    let (fast, cache) = mlp.eval_cached(&store, &x).unwrap();
    assert_eq!(tape.value(out).data(), fast.data());
    // input vjp with an all-ones cotangent equals d(sum out)/dx
    let gin = mlp.input_grad(&store, &cache, &Tensor::full(&[4, 2], 1.0)).unwrap();
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(&store);
    let xv = tape.variable(x.clone());
    let out = mlp.forward(&mut tape, &bound, xv).unwrap();
    let s = tape.sum(out);
    let g = tape.backward(s).unwrap();
    for (a, b) in g.get(xv).unwrap().data().iter().zip(gin.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(tape.backward(s).is_err(), "second backward must fail");

    let mut tape = Tape::new();
    let x = tape.variable(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");

    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2], 3.0));
    let s = tape.sum(c);
    assert!(tape.backward(s).unwrap().is_empty());

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let sg = tape.sigmoid(z);
    assert_eq!(tape.value(sg).item(), 0.5);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng::rng(5);
    let a0 = rand_t(&mut r, &[3, 3]);
    let run = |which: u8| {
        let mut tape = Tape::new();
        let a = tape.variable(a0.clone());
        let f = tape.tanh(a);
        let f = tape.sum(f);
        let g = tape.mul(a, a).unwrap();
        let g = tape.mean(g);
        let loss = match which {
            0 => f,
            1 => g,
            _ => tape.add(f, g).unwrap(),
        };
        tape.backward(loss).unwrap().take(a).unwrap()
    };
    let (f, g, fg) = (run(0), run(1), run(2));
    for i in 0..9 {
        assert!((f.data()[i] + g.data()[i] - fg.data()[i]).abs() < 1e-12);
    }
}
