use factorized_fl::factorized::{init_params, InitScheme, ModelParams, VInit};
use factorized_fl::nn::{backward, cross_entropy, forward, LayerSpec, Network};
use factorized_fl::rng;
use factorized_fl::Tensor;
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Straight-loop valid convolution, NHWC input and `[f, f, cin, cout]` kernel.
fn naive_conv(x: &[f64], k: &[f64], b: usize, h: usize, w: usize, cin: usize, cout: usize, f: usize, s: usize) -> Vec<f64> {
    let oh = (h - f) / s + 1;
    let ow = (w - f) / s + 1;
    let mut out = vec![0.0; b * oh * ow * cout];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..f {
                        for kx in 0..f {
                            for ci in 0..cin {
                                let xi = ((n * h + oy * s + ky) * w + ox * s + kx) * cin + ci;
                                let ki = ((ky * f + kx) * cin + ci) * cout + co;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn naive_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn naive_pool(x: &[f64], b: usize, h: usize, w: usize, c: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let mut out = vec![f64::NEG_INFINITY; b * oh * ow * c];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    for dy in 0..size {
                        for dx in 0..size {
                            let v = x[((n * h + oy * size + dy) * w + ox * size + dx) * c + ch];
                            let o = &mut out[((n * oh + oy) * ow + ox) * c + ch];
                            if v > *o {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn naive_dense(x: &[f64], k: &[f64], b: usize, nin: usize, nout: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * nout];
    for n in 0..b {
        for o in 0..nout {
            for i in 0..nin {
                out[n * nout + o] += x[n * nin + i] * k[i * nout + o];
            }
        }
    }
    out
}

fn two_conv_net() -> Network {
    Network::new(
        (8, 8, 2),
        vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, filter: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 3, out_channels: 4, filter: 2, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 36, out_dim: 5 },
        ],
    )
    .unwrap()
}

#[test]
fn two_conv_net_matches_straight_loops() {
    let net = two_conv_net();
    let params = init_params(&net, InitScheme::default(), &mut rng::seeded(7));
    let x = random_tensor(&[4, 8, 8, 2], 7);
    let (logits, _) = forward(&net, &params, &x).unwrap();

    let w = params.weights().unwrap();
    let mut a = naive_conv(x.data(), w[0].data(), 4, 8, 8, 2, 3, 3, 1);
    naive_relu(&mut a);
    let mut a = naive_conv(&a, w[1].data(), 4, 6, 6, 3, 4, 2, 2);
    naive_relu(&mut a);
    let want = naive_dense(&a, w[2].data(), 4, 36, 5);

    assert_eq!(logits.shape(), [4, 5]);
    for (g, e) in logits.data().iter().zip(&want) {
        assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
    }
}

#[test]
fn conv_matches_six_loop_oracle() {
    for (h, w, cin, cout, f, s) in [(5, 5, 1, 1, 1, 1), (7, 6, 3, 2, 3, 1), (9, 9, 2, 4, 3, 2), (6, 8, 4, 3, 5, 1)] {
        let oh = (h - f) / s + 1;
        let ow = (w - f) / s + 1;
        let net = Network::new(
            (h, w, cin),
            vec![
                LayerSpec::Conv2d { in_channels: cin, out_channels: cout, filter: f, stride: s },
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: oh * ow * cout, out_dim: oh * ow * cout },
            ],
        )
        .unwrap();
        let params = init_params(&net, InitScheme::default(), &mut rng::seeded(3));
        let x = random_tensor(&[2, h, w, cin], 11);
        let wts = params.weights().unwrap();
        let mut id = Tensor::zeros(&[oh * ow * cout, oh * ow * cout]);
        for i in 0..oh * ow * cout {
            id.data_mut()[i * oh * ow * cout + i] = 1.0;
        }
        let (y, _) = factorized_fl::nn::forward_with_weights(&net, vec![wts[0].clone(), id], &x).unwrap();
        let want = naive_conv(x.data(), wts[0].data(), 2, h, w, cin, cout, f, s);
        for (g, e) in y.data().iter().zip(&want) {
            assert!((g - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn maxpool_matches_loop_oracle() {
    let net = Network::new(
        (6, 6, 2),
        vec![LayerSpec::MaxPool2d { size: 2 }, LayerSpec::Flatten, LayerSpec::Dense { in_dim: 18, out_dim: 18 }],
    )
    .unwrap();
    let x = random_tensor(&[3, 6, 6, 2], 5);
    let mut id = Tensor::zeros(&[18, 18]);
    for i in 0..18 {
        id.data_mut()[i * 18 + i] = 1.0;
    }
    let (y, _) = factorized_fl::nn::forward_with_weights(&net, vec![id], &x).unwrap();
    assert_eq!(y.data(), naive_pool(x.data(), 3, 6, 6, 2, 2).as_slice());
}

fn loss(net: &Network, p: &ModelParams, x: &Tensor, y: &[usize]) -> f64 {
    let (logits, _) = forward(net, p, x).unwrap();
    cross_entropy(&logits, y).unwrap().0
}

/// Max relative error of analytic against central-difference gradients over
/// every stored parameter.
fn fd_check(net: &Network, scheme: InitScheme, seed: u64) -> f64 {
    let mut params = init_params(net, scheme, &mut rng::seeded(seed));
    if scheme.factorized {
        let mut r = rng::seeded(seed + 1);
        for b in &mut params.blocks {
            let p = b.as_factorized_mut().unwrap();
            for m in p.mu.data_mut() {
                *m = r.random_range(-0.1..0.1);
            }
        }
    }
    let shape = match net.input_shape() {
        factorized_fl::nn::ActShape::Spatial { h, w, c } => vec![3, h, w, c],
        factorized_fl::nn::ActShape::Flat(n) => vec![3, n],
    };
    let x = random_tensor(&shape, seed + 2);
    let classes = net.classes();
    let y: Vec<usize> = (0..3).map(|i| (i * 7 + seed as usize) % classes).collect();

    let (logits, cache) = forward(net, &params, &x).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &y).unwrap();
    let grads = params.route(&backward(net, &cache, &dlogits).unwrap()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slots().into_iter().map(<[f64]>::to_vec).collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let n_slots = analytic.len();
    for s in 0..n_slots {
        for i in 0..analytic[s].len() {
            let orig = params.slots()[s].2[i];
            params.slots_mut()[s].2[i] = orig + h;
            let up = loss(net, &params, &x, &y);
            params.slots_mut()[s].2[i] = orig - h;
            let down = loss(net, &params, &x, &y);
            params.slots_mut()[s].2[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[s][i];
            let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn small_nets() -> Vec<Network> {
    vec![
        two_conv_net(),
        Network::new(
            (7, 7, 2),
            vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 4, filter: 2, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 36, out_dim: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 6, out_dim: 4 },
            ],
        )
        .unwrap(),
    ]
}

#[test]
fn plain_gradients_match_finite_differences() {
    for (i, net) in small_nets().iter().enumerate() {
        let err = fd_check(net, InitScheme::default(), 20 + i as u64);
        assert!(err < 1e-4, "net {i}: {err}");
    }
}

#[test]
fn factorized_gradients_match_finite_differences() {
    for v_init in [VInit::ClassifierOnes, VInit::Uniform] {
        for (i, net) in small_nets().iter().enumerate() {
            let scheme = InitScheme { factorized: true, v_init, balanced: true };
            let err = fd_check(net, scheme, 40 + i as u64);
            assert!(err < 1e-4, "net {i} {v_init:?}: {err}");
        }
    }
}
