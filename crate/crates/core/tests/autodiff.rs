//! Reverse-mode gradients against central differences, op by op, plus Adam against a
//! hand-rolled reference.

use dynacq::autodiff::{adam_step, grad_check, AdamState, Graph, Tensor, Var};
use dynacq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalarises any output with a fixed random weighting so every entry matters.
fn weigh(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(g.shape(y), seed))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(|g, v| {
        let y = f(g, v)?;
        weigh(g, y, 99)
    }, x, H)
    .unwrap();
    assert!(err < TOL, "{}: rel err {:e}", name, err);
}

#[test]
fn elementwise_ops() {
    let x = rand_tensor(&[3, 4], 1);
    let other = rand_tensor(&[3, 4], 2);
    check("add", &x, |g, v| {
        let o = g.constant(other.clone())?;
        g.add(v, o)
    });
    check("sub", &x, |g, v| {
        let o = g.constant(other.clone())?;
        g.sub(o, v)
    });
    check("mul", &x, |g, v| {
        let o = g.constant(other.clone())?;
        g.mul(v, o)
    });
    check("mul self", &x, |g, v| g.mul(v, v));
    check("scale", &x, |g, v| g.scale(v, -2.5));
    check("add_scalar", &x, |g, v| g.add_scalar(v, 0.3));
    check("square", &x, |g, v| g.square(v));
    check("gelu", &x, |g, v| g.gelu(v));
}

#[test]
fn kinks_away_from_zero() {
    // keep every entry at least 0.1 from the kink
    let x = Tensor::from_fn(&[10], |i| if i % 2 == 0 { 0.1 + i as f64 * 0.05 } else { -0.2 - i as f64 * 0.03 });
    check("abs", &x, |g, v| g.abs(v));
    check("relu", &x, |g, v| g.relu(v));
}

#[test]
fn reductions_and_biases() {
    let x = rand_tensor(&[3, 2, 5], 3);
    check("sum", &x, |g, v| g.sum(v));
    check("mean", &x, |g, v| g.mean(v));
    check("frame_means", &x, |g, v| g.frame_means(v));
    let b = rand_tensor(&[5], 4);
    check("add_bias x", &x, |g, v| {
        let bb = g.constant(b.clone())?;
        g.add_bias(v, bb)
    });
    check("add_bias b", &b, |g, v| {
        let xx = g.constant(x.clone())?;
        g.add_bias(xx, v)
    });
    let cb = rand_tensor(&[3], 5);
    check("add_channel_bias", &cb, |g, v| {
        let xx = g.constant(x.clone())?;
        g.add_channel_bias(xx, v)
    });
}

#[test]
fn products() {
    let a = rand_tensor(&[2, 3, 4], 6);
    let b = rand_tensor(&[2, 4, 5], 7);
    let bt = rand_tensor(&[2, 5, 4], 8);
    check("bmm a", &a, |g, v| {
        let bb = g.constant(b.clone())?;
        g.bmm(v, bb, false)
    });
    check("bmm b", &b, |g, v| {
        let aa = g.constant(a.clone())?;
        g.bmm(aa, v, false)
    });
    check("bmm trans b", &bt, |g, v| {
        let aa = g.constant(a.clone())?;
        g.bmm(aa, v, true)
    });
    let m = rand_tensor(&[3, 4], 9);
    let n = rand_tensor(&[4, 2], 10);
    check("matmul", &m, |g, v| {
        let nn = g.constant(n.clone())?;
        g.matmul(v, nn)
    });
    check("matmul rhs", &n, |g, v| {
        let mm = g.constant(m.clone())?;
        g.matmul(mm, v)
    });
}

#[test]
fn conv3d_both_operands() {
    let x = rand_tensor(&[2, 3, 4, 5], 11);
    let k = rand_tensor(&[3, 2, 3, 3, 3], 12);
    check("conv3d input", &x, |g, v| {
        let kk = g.constant(k.clone())?;
        g.conv3d(v, kk)
    });
    check("conv3d kernel", &k, |g, v| {
        let xx = g.constant(x.clone())?;
        g.conv3d(xx, v)
    });
}

#[test]
fn conv3d_matches_direct_sum() {
    let x = rand_tensor(&[1, 2, 3, 3], 13);
    let k = rand_tensor(&[1, 1, 3, 3, 3], 14);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let kv = g.constant(k.clone()).unwrap();
    let y = g.conv3d(xv, kv).unwrap();
    let y = g.value(y).clone();
    let (t, h, w) = (2i64, 3i64, 3i64);
    for ot in 0..t {
        for oh in 0..h {
            for ow in 0..w {
                let mut s = 0.0;
                for a in 0..3i64 {
                    for b in 0..3i64 {
                        for c in 0..3i64 {
                            let (it, ih, iw) = (ot + a - 1, oh + b - 1, ow + c - 1);
                            if it < 0 || ih < 0 || iw < 0 || it >= t || ih >= h || iw >= w {
                                continue;
                            }
                            s += k.data()[(a * 9 + b * 3 + c) as usize]
                                * x.data()[(it * h * w + ih * w + iw) as usize];
                        }
                    }
                }
                let got = y.data()[(ot * h * w + oh * w + ow) as usize];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_and_layer_norm() {
    let x = rand_tensor(&[2, 3, 4], 15);
    check("softmax last", &x, |g, v| g.softmax(v, 2));
    check("softmax mid", &x, |g, v| g.softmax(v, 1));
    let gamma = rand_tensor(&[4], 16);
    let beta = rand_tensor(&[4], 17);
    check("layer_norm x", &x, |g, v| {
        let (ga, be) = (g.constant(gamma.clone())?, g.constant(beta.clone())?);
        g.layer_norm(v, ga, be)
    });
    check("layer_norm gamma", &gamma, |g, v| {
        let (xx, be) = (g.constant(x.clone())?, g.constant(beta.clone())?);
        g.layer_norm(xx, v, be)
    });
    check("layer_norm beta", &beta, |g, v| {
        let (xx, ga) = (g.constant(x.clone())?, g.constant(gamma.clone())?);
        g.layer_norm(xx, ga, v)
    });
}

#[test]
fn shape_ops() {
    let x = rand_tensor(&[2, 3, 4], 18);
    check("reshape", &x, |g, v| g.reshape(v, &[6, 4]));
    check("permute", &x, |g, v| g.permute(v, &[2, 0, 1]));
    check("slice", &x, |g, v| g.slice(v, 1, 1, 2));
    check("pad", &x, |g, v| g.pad(v, 2, 1, 2));
    check("concat", &x, |g, v| {
        let s = g.square(v)?;
        g.concat(&[v, s], 1)
    });
}

#[test]
fn nudft_ops() {
    let img = rand_tensor(&[2, 4, 4], 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let coords = Tensor::from_fn(&[2, 1, 3, 2], |_| rng.gen_range(-2.5..2.5));
    check("nudft image", &img, |g, v| {
        let c = g.constant(coords.clone())?;
        g.nudft(v, c)
    });
    check("nudft coords", &coords, |g, v| {
        let i = g.constant(img.clone())?;
        g.nudft(i, v)
    });
    let samples = rand_tensor(&[2, 1, 3, 2], 21);
    check("adjoint samples", &samples, |g, v| {
        let c = g.constant(coords.clone())?;
        g.nudft_adjoint(v, c, (4, 4))
    });
    check("adjoint coords", &coords, |g, v| {
        let s = g.constant(samples.clone())?;
        g.nudft_adjoint(s, v, (4, 4))
    });
}

#[test]
fn two_layer_conv_net() {
    let x = rand_tensor(&[1, 2, 4, 4], 22);
    let k1 = rand_tensor(&[3, 1, 3, 3, 3], 23);
    let k2 = rand_tensor(&[1, 3, 3, 3, 3], 24);
    let net = |g: &mut Graph, k1v: Var, k2v: Var| -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let h = g.conv3d(xv, k1v)?;
        let h = g.gelu(h)?;
        let y = g.conv3d(h, k2v)?;
        let sq = g.square(y)?;
        g.mean(sq)
    };
    let e1 = grad_check(|g, v| {
        let k2v = g.constant(k2.clone())?;
        net(g, v, k2v)
    }, &k1, H)
    .unwrap();
    let e2 = grad_check(|g, v| {
        let k1v = g.constant(k1.clone())?;
        net(g, k1v, v)
    }, &k2, H)
    .unwrap();
    assert!(e1 < TOL && e2 < TOL, "{:e} {:e}", e1, e2);
}

#[test]
fn backward_is_linear_in_the_seed() {
    let x = rand_tensor(&[3, 4], 25);
    let run = |seed: &Tensor| {
        let mut g = Graph::new();
        let v = g.param(x.clone()).unwrap();
        let y = g.gelu(v).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.backward(y, seed).unwrap().get(v).unwrap().clone()
    };
    let s1 = rand_tensor(&[3, 4], 26);
    let s2 = rand_tensor(&[3, 4], 27);
    let sum = Tensor::new(vec![3, 4], s1.data().iter().zip(s2.data()).map(|(a, b)| 2.0 * a + b).collect()).unwrap();
    let (g1, g2, gs) = (run(&s1), run(&s2), run(&sum));
    for i in 0..12 {
        assert!((gs.data()[i] - (2.0 * g1.data()[i] + g2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(&[2], 1.5)).unwrap();
    let c = g.constant(Tensor::full(&[2], 2.0)).unwrap();
    let y = g.mul(a, c).unwrap();
    let y = g.sum(y).unwrap();
    let grads = g.backward_scalar(y).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn adam_matches_reference() {
    let grads = [[0.5, -1.0, 0.0], [0.1, 0.2, -0.3], [-2.0, 0.0, 4.0]];
    let mut p = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap();
    let mut st = AdamState::new(&[3], 0.01);
    let (mut rp, mut m, mut v) = ([1.0, -1.0, 0.5], [0.0; 3], [0.0; 3]);
    for (t, gr) in grads.iter().enumerate() {
        adam_step(&mut p, &Tensor::new(vec![3], gr.to_vec()).unwrap(), &mut st).unwrap();
        let t = (t + 1) as i32;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * gr[i];
            v[i] = 0.999 * v[i] + 0.001 * gr[i] * gr[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            rp[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..3 {
            assert!((p.data()[i] - rp[i]).abs() < 1e-15, "step {} idx {}", t, i);
        }
    }
    // first step moves each nonzero-gradient coordinate by ~lr
    let mut q = Tensor::zeros(&[1]);
    let mut s = AdamState::new(&[1], 0.01);
    adam_step(&mut q, &Tensor::new(vec![1], vec![123.0]).unwrap(), &mut s).unwrap();
    assert!((q.data()[0] + 0.01).abs() < 1e-9);
}

#[test]
fn adam_rejects_bad_input() {
    let mut p = Tensor::zeros(&[2]);
    let mut st = AdamState::new(&[2], 0.01);
    assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).is_err());
    assert!(adam_step(&mut p, &Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap(), &mut st).is_err());
}
