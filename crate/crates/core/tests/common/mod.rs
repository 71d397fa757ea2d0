#![allow(dead_code)]

use melstyle::autograd::{Graph, ParamStore, RngStream, Tensor};
use melstyle::config::ModelConfig;
use melstyle::nn::Fwd;

/// A model small enough for exhaustive finite-difference checks, with all
/// dropout disabled.
pub fn micro() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        embed_dim: 8,
        hidden: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        fft_kernel: 3,
        fft_filter: 12,
        fft_dropout: 0.0,
        predictor_kernel: 3,
        predictor_filter: 6,
        predictor_dropout: 0.0,
        n_scales: 10,
        pitch_bins: 16,
        global_layers: 1,
        external_dim: 12,
        local_conv_layers: 1,
        local_wn_layers: 1,
        codebook_size: 8,
        align_layers: 1,
        align_dropout: 0.0,
        align_wn_layers: 1,
        flow_steps: 4,
        flow_groups: 2,
        flow_wn_layers: 1,
        flow_kernel: 3,
        flow_channels: 6,
        ..ModelConfig::full()
    }
}

pub fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Runs `body` on an inference-mode graph and returns the tensor it yields.
pub fn eval<F>(store: &ParamStore, body: F) -> Tensor
where
    F: FnOnce(&mut Fwd) -> melstyle::Result<melstyle::autograd::Var>,
{
    let mut g = Graph::new(false);
    let mut f = Fwd::new(&mut g, store, RngStream::new(0));
    let v = body(&mut f).unwrap();
    f.value(v).clone()
}

/// Randomizes every parameter, so zero-initialized heads do not hide
/// gradient paths.
pub fn perturb_all(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = RngStream::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.dims(), b.dims());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

/// Parameter gradient check of a scalar model function built on a training
/// graph. At most `per_param` coordinates of each parameter are probed.
pub fn grad_check<F>(store: &mut ParamStore, per_param: Option<usize>, body: F) -> melstyle::autograd::ParamCheckReport
where
    F: Fn(&mut Fwd) -> melstyle::Result<melstyle::autograd::Var>,
{
    grad_check_selected(store, 1e-5, per_param, |_| true, body)
}

/// [`grad_check`] with step `h`, restricted to parameters whose name
/// passes `select`.
pub fn grad_check_selected<F, S>(
    store: &mut ParamStore,
    h: f64,
    per_param: Option<usize>,
    select: S,
    body: F,
) -> melstyle::autograd::ParamCheckReport
where
    F: Fn(&mut Fwd) -> melstyle::Result<melstyle::autograd::Var>,
    S: Fn(&str) -> bool,
{
    melstyle::autograd::check_selected_param_gradients(
        store,
        |g, s| {
            let mut f = Fwd::new(g, s, RngStream::new(11));
            Ok(body(&mut f).expect("model function failed"))
        },
        h,
        per_param,
        &mut RngStream::new(9),
        select,
    )
    .unwrap()
}
