mod common;

use common::{grad_check, perturb_all, random};
use melstyle::autograd::{Adam, AdamConfig, Graph, ParamStore, RngStream, Tensor};
use melstyle::config::{FlowSharing, ModelConfig};
use melstyle::flow_postnet::{squeeze, unsqueeze, FlowDims, FlowInit, PostNet};
use melstyle::nn::Fwd;

fn dims(in_channels: usize, squeeze: usize, steps: usize, groups: usize) -> FlowDims {
    FlowDims {
        in_channels,
        cond_channels: 3,
        wn_channels: 4,
        wn_layers: 2,
        kernel: 3,
        steps,
        groups,
        sharing: FlowSharing::Cyclic,
        squeeze,
    }
}

fn flow(d: FlowDims, init: FlowInit, seed: u64) -> (ParamStore, PostNet) {
    let mut ps = ParamStore::new();
    let p = PostNet::new(&mut ps, &mut RngStream::new(seed), "pn", d, init).unwrap();
    (ps, p)
}

/// Forward pass on already-squeezed input; returns `(z, logdet)`.
fn forward(ps: &ParamStore, p: &PostNet, x: &Tensor, cond: &Tensor) -> (Tensor, f64) {
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, ps, RngStream::new(0));
    let c = f.g.constant(cond.clone());
    let c = p.prepare_condition(&mut f, c).unwrap();
    let xv = f.g.constant(x.clone());
    let st = p.forward(&mut f, xv, c).unwrap();
    (f.value(st.z).clone(), f.g.scalar(st.logdet))
}

fn inverse(ps: &ParamStore, p: &PostNet, z: &Tensor, cond: &Tensor) -> Tensor {
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, ps, RngStream::new(0));
    let c = f.g.constant(cond.clone());
    let c = p.prepare_condition(&mut f, c).unwrap();
    let zv = f.g.constant(z.clone());
    let x = p.inverse(&mut f, zv, c).unwrap();
    f.value(x).clone()
}

/// log|det| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().partial_cmp(&m[b][c].abs()).unwrap()).unwrap();
        m.swap(c, p);
        acc += m[c][c].abs().ln();
        for r in c + 1..n {
            let k = m[r][c] / m[c][c];
            for j in c..n {
                m[r][j] -= k * m[c][j];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of the flow over the flattened input.
fn fd_jacobian(ps: &ParamStore, p: &PostNet, x: &Tensor, cond: &Tensor) -> Vec<Vec<f64>> {
    let n = x.len();
    let h = 1e-6;
    let mut jac = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let (zp, _) = forward(ps, p, &xp, cond);
        let (zm, _) = forward(ps, p, &xm, cond);
        for (o, row) in jac.iter_mut().enumerate() {
            row[i] = (zp.data()[o] - zm.data()[o]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn squeeze_by_one_is_the_identity() {
    let x = random(&[5, 3], 1);
    let (s, pad) = squeeze(&x, 1).unwrap();
    assert_eq!((s, pad), (x, 0));
}

#[test]
fn squeeze_folds_frame_pairs() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
    let (s, pad) = squeeze(&x, 2).unwrap();
    assert_eq!(pad, 0);
    assert_eq!(s, Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap());
}

#[test]
fn squeeze_round_trips_with_padding() {
    for t in 1..8 {
        let x = random(&[t, 4], t as u64);
        let (s, pad) = squeeze(&x, 3).unwrap();
        assert_eq!(s.rows(), t.div_ceil(3));
        assert_eq!(unsqueeze(&s, 3, pad).unwrap(), x);
    }
    assert!(squeeze(&random(&[2, 2], 1), 0).is_err());
}

#[test]
fn fresh_identity_flow_is_the_identity() {
    let (ps, p) = flow(dims(4, 2, 4, 2), FlowInit::Identity, 1);
    let x = random(&[3, 8], 2);
    let (z, ld) = forward(&ps, &p, &x, &random(&[6, 3], 3));
    assert_eq!(z, x);
    assert_eq!(ld, 0.0);
}

#[test]
fn actnorm_data_init_standardizes_channels() {
    let (mut ps, p) = flow(dims(2, 1, 1, 1), FlowInit::Identity, 4);
    let batch: Vec<(Tensor, Tensor)> = (0..3)
        .map(|i| (random(&[7, 2], 10 + i).map(|v| 3.0 * v + 1.5), random(&[7, 3], 20 + i)))
        .collect();
    p.data_init(&mut ps, &batch).unwrap();
    let mut all = Vec::new();
    for (x, c) in &batch {
        let (z, _) = forward(&ps, &p, x, c);
        all.push(z);
    }
    for ch in 0..2 {
        let vals: Vec<f64> = all.iter().flat_map(|z| (0..z.rows()).map(move |r| z.at(r, ch))).collect();
        let (m, s) = melstyle::autograd::mean_std(&vals);
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((s - 1.0).abs() < 1e-6, "std {s}");
    }
    assert!(p.data_init(&mut ps, &[]).is_err());
}

#[test]
fn actnorm_log_determinant_matches_the_jacobian() {
    let (mut ps, p) = flow(dims(6, 1, 1, 1), FlowInit::Identity, 5);
    ps.set(p.params[0].an_scale, Tensor::vector(vec![0.5, 2.0, 3.0, 1.0, 1.0, 1.0])).unwrap();
    ps.set(p.params[0].an_bias, Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.0, 0.0])).unwrap();
    let x = random(&[1, 6], 6);
    let cond = random(&[1, 3], 7);
    let (z, ld) = forward(&ps, &p, &x, &cond);
    assert!((z.at(0, 1) - 2.0 * (x.at(0, 1) - 0.2)).abs() < 1e-12);
    let want = 0.5f64.ln() + 2f64.ln() + 3f64.ln();
    assert!((ld - want).abs() < 1e-12);
    assert!((log_abs_det(fd_jacobian(&ps, &p, &x, &cond)) - want).abs() < 1e-6);
}

#[test]
fn one_by_one_mixing_log_determinants() {
    let (mut ps, p) = flow(dims(2, 1, 1, 1), FlowInit::Identity, 6);
    let x = random(&[3, 2], 8);
    let cond = random(&[3, 3], 9);
    let (z, ld) = forward(&ps, &p, &x, &cond);
    assert_eq!((z, ld), (x.clone(), 0.0));

    let (c, s) = (0.6f64, 0.8f64);
    ps.set(p.params[0].mix, Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap()).unwrap();
    let (_, ld) = forward(&ps, &p, &x, &cond);
    assert!(ld.abs() < 1e-12);

    let w = [[1.5, 0.5], [-0.25, 2.0]];
    ps.set(p.params[0].mix, Tensor::from_rows(&[w[0].to_vec(), w[1].to_vec()]).unwrap()).unwrap();
    let (z, ld) = forward(&ps, &p, &x, &cond);
    let det: f64 = w[0][0] * w[1][1] - w[0][1] * w[1][0];
    assert!((ld - 3.0 * det.abs().ln()).abs() < 1e-12);
    for r in 0..3 {
        let want0 = x.at(r, 0) * w[0][0] + x.at(r, 1) * w[1][0];
        assert!((z.at(r, 0) - want0).abs() < 1e-12);
    }
}

#[test]
fn coupling_inverts_and_its_log_determinant_matches_the_jacobian() {
    let (mut ps, p) = flow(dims(4, 1, 1, 1), FlowInit::Identity, 7);
    perturb_all(&mut ps, 3, 0.3);
    let cond = random(&[1, 3], 10);
    let x = random(&[1, 4], 11);
    let (z, ld) = forward(&ps, &p, &x, &cond);
    assert!(inverse(&ps, &p, &z, &cond).max_abs_diff(&x) < 1e-5);
    let fd = log_abs_det(fd_jacobian(&ps, &p, &x, &cond));
    assert!((fd - ld).abs() / ld.abs().max(1.0) < 1e-6, "fd {fd} analytic {ld}");
}

#[test]
fn whole_flow_round_trips() {
    let (mut ps, p) = flow(dims(5, 2, 6, 3), FlowInit::Random, 8);
    perturb_all(&mut ps, 4, 0.1);
    let cond = random(&[9, 3], 12);
    let x = random(&[5, 10], 13);
    let (z, _) = forward(&ps, &p, &x, &cond);
    assert!(inverse(&ps, &p, &z, &cond).max_abs_diff(&x) < 1e-5);
}

#[test]
fn identity_flow_nll_is_the_standard_normal_nll() {
    let (ps, p) = flow(dims(2, 2, 2, 1), FlowInit::Identity, 9);
    let mel = random(&[5, 2], 14);
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let c = f.g.constant(random(&[5, 3], 15));
    let (_, nll) = p.nll(&mut f, &mel, c).unwrap();
    // Squeezing pads one zero frame; it counts as two more dimensions.
    let n = 12.0;
    let sq: f64 = mel.data().iter().map(|v| v * v).sum();
    let want = (0.5 * sq + 0.5 * n * (2.0 * std::f64::consts::PI).ln()) / n;
    assert!((f.g.scalar(nll) - want).abs() < 1e-12);
}

#[test]
fn nll_gradients_match_finite_differences() {
    let (mut ps, p) = flow(dims(2, 2, 2, 1), FlowInit::Random, 10);
    perturb_all(&mut ps, 5, 0.2);
    let mel = random(&[4, 2], 16);
    let cond = random(&[4, 3], 17);
    let report = grad_check(&mut ps, None, |f| {
        let c = f.g.constant(cond.clone());
        Ok(p.nll(f, &mel, c)?.1)
    });
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn nll_decreases_while_fitting_a_fixed_mel() {
    let cfg = ModelConfig { flow_channels: 8, flow_wn_layers: 2, ..common::micro() };
    let mut ps = ParamStore::new();
    let d = FlowDims::from_model(&cfg);
    let p = PostNet::new(&mut ps, &mut RngStream::new(11), "pn", d.clone(), FlowInit::Random).unwrap();
    let mel = random(&[8, 80], 18).map(|v| 0.5 * v - 0.3);
    let cond = random(&[8, d.cond_channels], 19);
    p.data_init(&mut ps, &[(mel.clone(), cond.clone())]).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new(true);
        let grads = {
            let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
            let c = f.g.constant(cond.clone());
            let (_, nll) = p.nll(&mut f, &mel, c).unwrap();
            losses.push(f.g.scalar(nll));
            g.backward(nll).unwrap().into_params()
        };
        adam.step(&mut ps, &grads, 1e-3).unwrap();
    }
    assert!(losses[199] < losses[0] - 0.1, "{} -> {}", losses[0], losses[199]);
}

fn sample(ps: &ParamStore, p: &PostNet, cond: &Tensor, frames: usize, tau: f64, seed: u64) -> Tensor {
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, ps, RngStream::new(seed));
    let c = f.g.constant(cond.clone());
    p.sample(&mut f, c, frames, tau).unwrap()
}

#[test]
fn zero_temperature_sampling_is_deterministic() {
    let (ps, p) = flow(dims(3, 2, 2, 1), FlowInit::Identity, 12);
    let cond = random(&[5, 3], 20);
    let a = sample(&ps, &p, &cond, 5, 0.0, 1);
    assert_eq!(a, Tensor::zeros(&[5, 3]));
    let (mut ps, p) = flow(dims(3, 2, 4, 2), FlowInit::Random, 13);
    perturb_all(&mut ps, 6, 0.2);
    assert_eq!(sample(&ps, &p, &cond, 5, 0.0, 1), sample(&ps, &p, &cond, 5, 0.0, 2));
}

#[test]
fn sampling_is_seeded_and_invertible() {
    let (mut ps, p) = flow(dims(3, 2, 4, 2), FlowInit::Random, 14);
    perturb_all(&mut ps, 7, 0.2);
    let cond = random(&[6, 3], 21);
    let a = sample(&ps, &p, &cond, 6, 0.8, 3);
    assert_eq!(a, sample(&ps, &p, &cond, 6, 0.8, 3));
    assert_ne!(a, sample(&ps, &p, &cond, 6, 0.8, 4));

    let z = random(&[3, 6], 22);
    let x = inverse(&ps, &p, &z, &cond);
    let (back, _) = forward(&ps, &p, &x, &cond);
    assert!(back.max_abs_diff(&z) < 1e-5);

    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let c = f.g.constant(cond.clone());
    assert!(p.sample(&mut f, c, 6, -1.0).is_err());
}

#[test]
fn twelve_steps_use_four_cyclically_shared_sets() {
    let cfg = ModelConfig::full();
    let d = FlowDims::from_model(&cfg);
    assert_eq!(d.unique_steps(), 4);
    for k in 0..4 {
        assert_eq!(d.param_index(k), d.param_index(k + 4));
        assert_eq!(d.param_index(k), d.param_index(k + 8));
    }
    let distinct: std::collections::BTreeSet<_> = (0..12).map(|k| d.param_index(k)).collect();
    assert_eq!(distinct.len(), 4);
    let (_, p) = flow(FlowDims { wn_channels: 4, ..d }, FlowInit::Random, 15);
    assert_eq!(p.params.len(), 4);

    let blocked = FlowDims { sharing: FlowSharing::Blocked, ..FlowDims::from_model(&cfg) };
    assert_eq!((blocked.unique_steps(), blocked.param_index(3), blocked.param_index(4)), (3, 0, 1));
}

#[test]
fn invalid_flow_shapes_are_rejected() {
    let mut ps = ParamStore::new();
    let mut rng = RngStream::new(0);
    assert!(PostNet::new(&mut ps, &mut rng, "a", dims(2, 1, 5, 2), FlowInit::Random).is_err());
    assert!(PostNet::new(&mut ps, &mut rng, "b", dims(3, 1, 2, 1), FlowInit::Random).is_err());
    let (ps, p) = flow(dims(2, 1, 1, 1), FlowInit::Identity, 16);
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
    let c = f.g.constant(random(&[2, 4], 1));
    assert!(p.prepare_condition(&mut f, c).is_err());
}
