use factorized_fl::factorized::{pi, pi_inv, prox_l1, FactorizedParam, ReshapeSig};
use factorized_fl::Tensor;
use proptest::prelude::*;

fn sig_strategy() -> impl Strategy<Value = ReshapeSig> {
    prop_oneof![
        (1usize..5, 1usize..5, 1usize..6).prop_map(|(f, cin, cout)| ReshapeSig::Conv { f, cin, cout }),
        (1usize..9, 1usize..9).prop_map(|(nin, nout)| ReshapeSig::Dense { nin, nout }),
    ]
}

fn minors_max(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..rows {
        for b in a + 1..rows {
            for c in 0..cols {
                for d in c + 1..cols {
                    let m = w[a * cols + c] * w[b * cols + d] - w[a * cols + d] * w[b * cols + c];
                    worst = worst.max(m.abs());
                }
            }
        }
    }
    worst
}

proptest! {
    #[test]
    fn pi_round_trips_exactly(sig in sig_strategy(), seed in any::<u64>()) {
        let n = sig.u_len() * sig.v_len();
        let m = Tensor::from_fn(&[sig.u_len(), sig.v_len()], |i| (i as f64 + 0.25) * ((seed % 97) as f64 + 1.0));
        let w = pi(m.clone(), sig).unwrap();
        prop_assert_eq!(w.shape().to_vec(), sig.kernel_shape());
        prop_assert_eq!(w.len(), n);
        let back = pi_inv(w.clone(), sig).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(pi(back, sig).unwrap(), w);
    }

    #[test]
    fn zero_mu_reconstruction_is_rank_one(
        sig in sig_strategy(),
        u in prop::collection::vec(-2.0f64..2.0, 25),
        v in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let (nu, nv) = (sig.u_len(), sig.v_len());
        prop_assume!(nu <= u.len() && nv <= v.len());
        let p = FactorizedParam::from_factors(u[..nu].to_vec(), v[..nv].to_vec(), sig).unwrap();
        let m = pi_inv(p.reconstruct().unwrap(), sig).unwrap();
        prop_assert!(minors_max(m.data(), nu, nv) < 1e-8);
    }

    #[test]
    fn prox_is_the_closed_form_soft_threshold(
        mu in prop::collection::vec(-1.0f64..1.0, 1..40),
        lr in 0.0f64..0.5,
        lambda in 0.0f64..0.5,
    ) {
        let t = Tensor::vector(mu.clone());
        let out = prox_l1(&t, lr, lambda);
        let thr = lr * lambda;
        for (o, m) in out.data().iter().zip(&mu) {
            let want = if thr > 0.0 { m.signum() * (m.abs() - thr).max(0.0) } else { *m };
            prop_assert_eq!(*o, want);
        }
    }

    #[test]
    fn routed_gradients_follow_the_outer_product(
        sig in sig_strategy(),
        seed in 0u64..1000,
    ) {
        let (nu, nv) = (sig.u_len(), sig.v_len());
        let f = |i: usize, k: u64| (((i as u64 + 1) * 2654435761 + seed * k) % 1000) as f64 / 500.0 - 1.0;
        let p = FactorizedParam::from_factors((0..nu).map(|i| f(i, 3)).collect(), (0..nv).map(|i| f(i, 5)).collect(), sig).unwrap();
        let dw = pi(Tensor::from_fn(&[nu, nv], |i| f(i, 7)), sig).unwrap();
        let g = p.route_gradients(&dw).unwrap();
        let m = pi_inv(dw, sig).unwrap();
        for r in 0..nu {
            let want: f64 = (0..nv).map(|j| m.data()[r * nv + j] * p.v[j]).sum();
            prop_assert!((g.du[r] - want).abs() <= 1e-12);
        }
        for j in 0..nv {
            let want: f64 = (0..nu).map(|r| m.data()[r * nv + j] * p.u[r]).sum();
            prop_assert!((g.dv[j] - want).abs() <= 1e-12);
        }
        prop_assert_eq!(g.dmu, m);
    }
}

#[test]
fn conv_pi_is_the_flat_reshape() {
    let sig = ReshapeSig::Conv { f: 2, cin: 2, cout: 3 };
    let m = Tensor::from_fn(&[4, 6], |i| i as f64);
    let w = pi(m, sig).unwrap();
    assert_eq!(w.shape(), [2, 2, 2, 3]);
    assert_eq!(w.data(), (0..24).map(|i| i as f64).collect::<Vec<_>>().as_slice());
}
