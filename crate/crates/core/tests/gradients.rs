//! Tape gradients against finite differences and hand-derived chains.

use fwformer::gradcheck::finite_diff_check;
use fwformer::heads::{self, MixerKind, MixerSpec};
use fwformer::nn::{Graph, ParamStore};
use fwformer::spiking::{surrogate_grad, LifParams};
use fwformer::tape::BnMode;
use fwformer::transforms::{Mixer, WaveletBasis, WaveletKind};
use fwformer::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

#[test]
fn conv_batch_norm_matmul_chain() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let m = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
    let probe = Tensor::uniform(&[24, 2], -1.0, 1.0, &mut r);
    let err = finite_diff_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(v, wv, 1, 1)?;
            let (y, _) = t.batch_norm(y, None, None, 1, BnMode::Train { eps: 1e-5 })?;
            let y = t.reshape(y, &[24, 4])?;
            let mv = t.constant(m.clone());
            let y = t.matmul(y, mv)?;
            let pv = t.constant(probe.clone());
            let y = t.mul(y, pv)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn mixer_backward_is_adjoint() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mixers = [
        Mixer::Fourier1d,
        Mixer::Fourier2d,
        Mixer::Wavelet1d(WaveletBasis::new(WaveletKind::Db1)),
        Mixer::Wavelet2d(WaveletBasis::new(WaveletKind::Rbio11)),
    ];
    for mixer in &mixers {
        for (n, d) in [(8, 4), (6, 5)] {
            let x = Tensor::uniform(&[2, n, d], -1.0, 1.0, &mut r);
            let g = Tensor::uniform(&[2, n, d], -1.0, 1.0, &mut r);
            let mx = mixer.apply(x.data(), 2, n, d).unwrap();
            let mtg = mixer.apply_adjoint(g.data(), 2, n, d).unwrap();
            let lhs: f64 = mx.iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&mtg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{mixer:?} {n}x{d}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn bptt_two_step_chain_with_reset_blocking() {
    let p = LifParams::default();
    for (x1, x2) in [(1.4, 1.2), (2.4, 1.8), (0.3, 2.9)] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![x1, x2]).unwrap().with_grad());
        let s = tape.lif(x, p).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();

        let h1 = x1 / p.tau;
        let s1 = f64::from(u8::from(h1 >= p.v_th));
        let v1 = h1 * (1.0 - s1);
        let h2 = v1 + (x2 - v1) / p.tau;
        let sg1 = surrogate_grad(h1 - p.v_th, p.surrogate_width);
        let sg2 = surrogate_grad(h2 - p.v_th, p.surrogate_width);
        let dx1 = sg1 / p.tau + sg2 * (1.0 - 1.0 / p.tau) * (1.0 - s1) / p.tau;
        let dx2 = sg2 / p.tau;
        assert!((g[0] - dx1).abs() < 1e-12, "dx1 {} vs {dx1}", g[0]);
        assert!((g[1] - dx2).abs() < 1e-12, "dx2 {} vs {dx2}", g[1]);
    }
}

#[test]
fn surrogate_spike_gradient_is_closed_form() {
    let v = Tensor::new(vec![5], vec![-1.0, -0.25, 0.0, 0.3, 2.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone().with_grad());
    let s = tape.spike(x, 2.0);
    assert_eq!(tape.value(s).data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    for (g, &u) in tape.grad(x).unwrap().iter().zip(v.data()) {
        assert!((g - surrogate_grad(u, 2.0)).abs() < 1e-12);
    }
}

#[test]
fn combined_head_coefficients_receive_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let spec = MixerSpec::new(MixerKind::WtCombined);
    let mut store = ParamStore::new();
    heads::init_head(&mut store, "mix", &spec, 8, &mut r);
    let x = Tensor::bernoulli(&[2, 3, 8, 8], 0.4, &mut r);
    let mut g = Graph::new(&store, true, LifParams::default());
    let xv = g.tape.constant(x);
    let y = heads::head_potential(&mut g, xv, "mix", &spec).unwrap();
    let probe = g.tape.constant(Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r));
    let y = g.tape.mul(y, probe).unwrap();
    let loss = g.tape.sum(y);
    g.tape.backward(loss).unwrap();
    let names: Vec<String> = g.param_vars().map(|(n, _)| n.clone()).collect();
    for coef in ["mix.coef_a", "mix.coef_b", "mix.coef_c"] {
        assert!(names.iter().any(|n| n == coef), "{coef} not on tape");
    }
    for (name, &v) in g.param_vars() {
        let grad = g.tape.grad(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.iter().all(|x| x.is_finite()));
    }
}
