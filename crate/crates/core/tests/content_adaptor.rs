mod common;

use common::{assert_close, eval, grad_check, micro, perturb_all, random};
use melstyle::autograd::{Graph, ParamStore, RngStream, Tensor};
use melstyle::config::MixStyleConfig;
use melstyle::content_adaptor::{
    duration_loss, expand_indices, length_regulate, log_duration_targets, mix_style_layer_norm, mix_with,
    ConditionalScaleBias, DurationPredictor, MixDraw, PitchPredictor,
};
use melstyle::nn::Fwd;
use proptest::prelude::*;

fn csb(dim: usize, bias: bool) -> (ParamStore, ConditionalScaleBias) {
    let mut ps = ParamStore::new();
    let c = ConditionalScaleBias::new(&mut ps, &mut RngStream::new(21), "csb", dim, bias).unwrap();
    (ps, c)
}

fn scale_bias(ps: &ParamStore, c: &ConditionalScaleBias, w: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, ps, RngStream::new(0));
    let wv = f.g.constant(w.clone());
    let (a, b) = c.scale_bias(&mut f, wv).unwrap();
    (f.value(a).clone(), f.value(b).clone())
}

fn layer_norm_rows(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            row.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
        })
        .collect()
}

#[test]
fn scale_bias_of_zero_style_without_bias_is_zero() {
    let (ps, c) = csb(5, false);
    let (g, b) = scale_bias(&ps, &c, &Tensor::zeros(&[1, 5]));
    assert!(g.data().iter().chain(b.data()).all(|&v| v == 0.0));
}

#[test]
fn scale_bias_is_linear_without_bias() {
    let (ps, c) = csb(6, false);
    let w = random(&[1, 6], 1);
    let (g1, b1) = scale_bias(&ps, &c, &w);
    let (g2, b2) = scale_bias(&ps, &c, &w.map(|v| 2.0 * v));
    assert_close(&g2, &g1.map(|v| 2.0 * v), 1e-12);
    assert_close(&b2, &b1.map(|v| 2.0 * v), 1e-12);
}

#[test]
fn scale_bias_matches_a_matvec_oracle() {
    let (ps, c) = csb(4, true);
    let w = random(&[1, 4], 2);
    let (g, b) = scale_bias(&ps, &c, &w);
    for (lin, out) in [(&c.gamma, &g), (&c.beta, &b)] {
        let wm = ps.get(lin.w);
        let bias = ps.get(lin.b.unwrap());
        for j in 0..4 {
            let want: f64 = (0..4).map(|i| w.data()[i] * wm.at(i, j)).sum::<f64>() + bias.data()[j];
            assert!((out.data()[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn msln_is_the_identity_outside_training() {
    let (ps, c) = csb(4, true);
    for training_graph in [false, true] {
        let mut g = Graph::new(training_graph);
        let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
        let xs = [f.g.constant(random(&[3, 4], 1)), f.g.constant(random(&[2, 4], 2))];
        let ws = [f.g.constant(random(&[1, 4], 3)), f.g.constant(random(&[1, 4], 4))];
        let cfg = MixStyleConfig { p: 1.0, training: !training_graph, ..MixStyleConfig::MAIN };
        let out = mix_style_layer_norm(&mut f, &c, &xs, &ws, &cfg, &mut RngStream::new(5)).unwrap();
        assert_eq!(out, xs);
    }
}

/// Outputs of `mix_with` for a two-item batch as plain tensors.
fn mixed(ps: &ParamStore, c: &ConditionalScaleBias, xs: &[Tensor; 2], ws: &[Tensor; 2], draw: &MixDraw) -> Vec<Tensor> {
    let mut g = Graph::new(true);
    let mut f = Fwd::new(&mut g, ps, RngStream::new(0));
    let xv: Vec<_> = xs.iter().map(|x| f.g.constant(x.clone())).collect();
    let wv: Vec<_> = ws.iter().map(|w| f.g.constant(w.clone())).collect();
    let out = mix_with(&mut f, c, &xv, &wv, draw).unwrap();
    out.iter().map(|&v| f.value(v).clone()).collect()
}

fn cln(ps: &ParamStore, c: &ConditionalScaleBias, x: &Tensor, w: &Tensor) -> Tensor {
    eval(ps, |f| {
        let xv = f.g.constant(x.clone());
        let wv = f.g.constant(w.clone());
        c.cln(f, xv, wv)
    })
}

#[test]
fn identity_permutation_and_unit_lambda_reduce_to_cln() {
    let (mut ps, c) = csb(5, true);
    perturb_all(&mut ps, 1, 0.3);
    let xs = [random(&[4, 5], 1), random(&[3, 5], 2)];
    let ws = [random(&[1, 5], 3), random(&[1, 5], 4)];
    let expect: Vec<Tensor> = (0..2).map(|i| cln(&ps, &c, &xs[i], &ws[i])).collect();
    let identity = MixDraw { lambdas: vec![0.37, 0.81], perm: vec![0, 1] };
    let unit = MixDraw { lambdas: vec![1.0, 1.0], perm: vec![1, 0] };
    for draw in [identity, unit] {
        let out = mixed(&ps, &c, &xs, &ws, &draw);
        for i in 0..2 {
            assert_close(&out[i], &expect[i], 1e-6);
        }
    }
}

#[test]
fn swapped_pair_matches_a_hand_oracle() {
    let (mut ps, c) = csb(3, false);
    ps.set(c.gamma.w, Tensor::from_rows(&[vec![1.0, 0.5, 0.0], vec![0.0, 2.0, -1.0], vec![0.5, 0.0, 1.0]]).unwrap())
        .unwrap();
    ps.set(c.beta.w, Tensor::from_rows(&[vec![0.1, 0.0, 0.0], vec![0.0, -0.2, 0.3], vec![0.0, 0.0, 0.4]]).unwrap())
        .unwrap();
    let xs = [
        Tensor::from_rows(&[vec![1.0, 2.0, 4.0], vec![-1.0, 0.0, 3.0]]).unwrap(),
        Tensor::from_rows(&[vec![0.5, -0.5, 2.0]]).unwrap(),
    ];
    let ws = [Tensor::from_rows(&[vec![1.0, 0.0, 2.0]]).unwrap(), Tensor::from_rows(&[vec![-1.0, 1.0, 0.5]]).unwrap()];
    let draw = MixDraw { lambdas: vec![0.3, 0.3], perm: vec![1, 0] };
    let out = mixed(&ps, &c, &xs, &ws, &draw);

    let matvec = |w: &Tensor, m: &Tensor| -> Vec<f64> {
        (0..3).map(|j| (0..3).map(|i| w.data()[i] * m.at(i, j)).sum()).collect()
    };
    let gw: Vec<Vec<f64>> = ws.iter().map(|w| matvec(w, ps.get(c.gamma.w))).collect();
    let bw: Vec<Vec<f64>> = ws.iter().map(|w| matvec(w, ps.get(c.beta.w))).collect();
    for i in 0..2 {
        let j = 1 - i;
        let n = layer_norm_rows(&xs[i]);
        for (r, nr) in n.iter().enumerate() {
            for k in 0..3 {
                let gamma = 0.3 * gw[i][k] + 0.7 * gw[j][k];
                let beta = 0.3 * bw[i][k] + 0.7 * bw[j][k];
                let want = gamma * nr[k] + beta;
                assert!((out[i].at(r, k) - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn two_permutations_differ_by_a_per_vector_affine_map() {
    let (mut ps, c) = csb(4, true);
    perturb_all(&mut ps, 2, 0.3);
    let xs = [random(&[5, 4], 5), random(&[4, 4], 6)];
    let ws = [random(&[1, 4], 7), random(&[1, 4], 8)];
    let a = mixed(&ps, &c, &xs, &ws, &MixDraw { lambdas: vec![0.6, 0.2], perm: vec![0, 1] });
    let b = mixed(&ps, &c, &xs, &ws, &MixDraw { lambdas: vec![0.6, 0.2], perm: vec![1, 0] });
    for i in 0..2 {
        // b = s * a + t per channel: the slope through rows 0 and 1 must
        // predict every other row.
        for k in 0..4 {
            let s = (b[i].at(1, k) - b[i].at(0, k)) / (a[i].at(1, k) - a[i].at(0, k));
            let t = b[i].at(0, k) - s * a[i].at(0, k);
            for r in 2..a[i].rows() {
                assert!((b[i].at(r, k) - (s * a[i].at(r, k) + t)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn msln_gradients_match_finite_differences() {
    let (mut ps, c) = csb(4, true);
    let xs = [random(&[3, 4], 1), random(&[2, 4], 2)];
    let ws = [random(&[1, 4], 3), random(&[1, 4], 4)];
    let targets = [random(&[3, 4], 5), random(&[2, 4], 6)];
    let draw = MixDraw { lambdas: vec![0.3, 0.9], perm: vec![1, 0] };
    let report = grad_check(&mut ps, None, |f| {
        let xv: Vec<_> = xs.iter().map(|x| f.g.constant(x.clone())).collect();
        let wv: Vec<_> = ws.iter().map(|w| f.g.constant(w.clone())).collect();
        let out = mix_with(f, &c, &xv, &wv, &draw)?;
        let mut terms = Vec::new();
        for (o, t) in out.iter().zip(&targets) {
            let t = f.g.constant(t.clone());
            let d = f.g.sub(*o, t)?;
            let d = f.g.square(d)?;
            terms.push(f.g.mean(d)?);
        }
        Ok(f.g.add_all(&terms)?)
    });
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

fn duration_predictor() -> (ParamStore, DurationPredictor) {
    let mut ps = ParamStore::new();
    let d = DurationPredictor::new(&mut ps, &mut RngStream::new(31), &micro()).unwrap();
    (ps, d)
}

#[test]
fn duration_loss_is_zero_at_the_log_targets() {
    let (ps, _) = duration_predictor();
    let durations = [3, 1, 7, 0];
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let pred = f.g.constant(Tensor::vector(log_duration_targets(&durations)));
    let l = duration_loss(&mut f, pred, &durations).unwrap();
    assert_eq!(f.g.scalar(l), 0.0);
    assert_eq!(log_duration_targets(&[1, 0]), [0.0, 0.0]);
}

#[test]
fn duration_predictor_gradients_match_finite_differences() {
    let (mut ps, d) = duration_predictor();
    let h = random(&[2, micro().hidden], 1);
    let w = random(&[1, micro().hidden], 2);
    let report = grad_check(&mut ps, None, |f| {
        let hv = f.g.constant(h.clone());
        let wv = f.g.constant(w.clone());
        let p = d.predict(f, hv, wv)?;
        duration_loss(f, p, &[3, 5])
    });
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn constant_input_gives_constant_interior_predictions() {
    let (ps, d) = duration_predictor();
    let hidden = micro().hidden;
    let row = random(&[1, hidden], 3);
    let mut rows = Vec::new();
    for _ in 0..9 {
        rows.extend_from_slice(row.data());
    }
    let h = Tensor::new(vec![9, hidden], rows).unwrap();
    let p = eval(&ps, |f| {
        let hv = f.g.constant(h.clone());
        let wv = f.g.constant(random(&[1, hidden], 4));
        d.predict(f, hv, wv)
    });
    // Two kernel-3 convolutions: rows 2..7 never see the zero padding.
    for i in 3..7 {
        assert!((p.data()[i] - p.data()[2]).abs() < 1e-12);
    }
}

fn regulate(h: &Tensor, durations: &[usize]) -> melstyle::Result<Tensor> {
    let mut g = Graph::new(false);
    let ps = ParamStore::new();
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let hv = f.g.constant(h.clone());
    let y = length_regulate(&mut f, hv, durations)?;
    Ok(f.value(y).clone())
}

#[test]
fn unit_durations_leave_rows_unchanged() {
    let h = random(&[4, 3], 1);
    assert_eq!(regulate(&h, &[1, 1, 1, 1]).unwrap(), h);
}

#[test]
fn durations_two_and_three_repeat_rows() {
    let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let y = regulate(&h, &[2, 3]).unwrap();
    let want =
        Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, 4.0], vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(y, want);
}

#[test]
fn length_regulation_rejects_bad_durations() {
    let h = random(&[2, 3], 1);
    assert!(regulate(&h, &[1]).is_err());
    assert!(regulate(&h, &[0, 0]).is_err());
}

proptest! {
    #[test]
    fn length_regulation_matches_a_naive_oracle(durations in proptest::collection::vec(0usize..5, 1..8), seed in 0u64..1000) {
        prop_assume!(durations.iter().sum::<usize>() > 0);
        let h = random(&[durations.len(), 3], seed);
        let y = regulate(&h, &durations).unwrap();
        let mut want = Vec::new();
        for (i, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                want.extend_from_slice(h.row(i));
            }
        }
        prop_assert_eq!(y.data(), &want[..]);
        prop_assert_eq!(y.rows(), durations.iter().sum::<usize>());
        // Frame t comes from the phoneme whose cumulative span brackets it.
        let idx = expand_indices(&durations).unwrap();
        let mut cum = vec![0];
        for &d in &durations {
            cum.push(cum.last().unwrap() + d);
        }
        for (t, &i) in idx.iter().enumerate() {
            prop_assert!(cum[i] <= t && t < cum[i + 1]);
        }
    }
}

#[test]
fn pitch_predictor_emits_per_frame_coefficients() {
    let mut ps = ParamStore::new();
    let p = PitchPredictor::new(&mut ps, &mut RngStream::new(41), "sap", &micro()).unwrap();
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let x = f.g.constant(random(&[7, micro().hidden], 1));
    let out = p.predict(&mut f, x).unwrap();
    assert_eq!(f.g.dims(out.coeffs), &[7, 10]);
    assert_eq!(f.g.dims(out.stats), &[2]);
}

#[test]
fn zero_head_pitch_predictor_outputs_zeros() {
    let mut ps = ParamStore::new();
    let p = PitchPredictor::new_zero_head(&mut ps, &mut RngStream::new(42), "sap", &micro()).unwrap();
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let x = f.g.constant(random(&[5, micro().hidden], 1));
    let out = p.predict(&mut f, x).unwrap();
    assert!(f.value(out.coeffs).data().iter().chain(f.value(out.stats).data()).all(|&v| v == 0.0));
}

#[test]
fn pitch_predictor_gradients_match_finite_differences() {
    let mut ps = ParamStore::new();
    let p = PitchPredictor::new(&mut ps, &mut RngStream::new(43), "sap", &micro()).unwrap();
    let x = random(&[4, micro().hidden], 1);
    let target = random(&[4, 10], 2);
    let report = grad_check(&mut ps, None, |f| {
        let xv = f.g.constant(x.clone());
        let out = p.predict(f, xv)?;
        let t = f.g.constant(target.clone());
        let d = f.g.sub(out.coeffs, t)?;
        let d = f.g.square(d)?;
        let a = f.g.mean(d)?;
        let s = f.g.square(out.stats)?;
        let s = f.g.sum(s)?;
        Ok(f.g.add(a, s)?)
    });
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
